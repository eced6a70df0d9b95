//! The full teacher-student self-training procedure.
//!
//! Per outer round: fine-tune the teacher on the labeled set, pseudo-label
//! the unlabeled pool, train a student on weighted pseudo-label batches
//! (weights from meta-gradient scoring against acquisition-sampled
//! validation batches), then promote the student to teacher.
//!
//! Every random draw comes from a named per-round stream, so a run is a pure
//! function of its config and split. The labeled set is never used for
//! student gradient steps; inside the inner loop it only feeds the
//! acquisition function and validation batches.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    record_losses, refresh_weights, sample_validation_batches, AcqRow, AcquisitionState,
};
use crate::data::{corrupt_labels, Dataset, FewShotSplit};
use crate::model::{
    batch_gradient, forward, init_params, sgd_step, token_losses, BatchItem, DropoutMask,
    ModelShape, TaggerParams, Target,
};
use crate::reweight::{
    finalize_weights, meta_token_scores_scoped, MetaScope, ReweightMode, ScoreInput,
};
use crate::rngutil::{sample_indices, stream_rng};
use crate::seqlab::{phrase_f1, PhraseScore, TaggedSentence};
use crate::{Error, Result};

/// Hard argmax labels or full soft distributions from the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabelType {
    Hard,
    Soft,
}

impl std::str::FromStr for PseudoLabelType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(PseudoLabelType::Hard),
            "soft" => Ok(PseudoLabelType::Soft),
            _ => Err(Error::Config(format!(
                "unknown pseudo label type {s:?} (expected hard|soft)"
            ))),
        }
    }
}

impl std::fmt::Display for PseudoLabelType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PseudoLabelType::Hard => "hard",
            PseudoLabelType::Soft => "soft",
        })
    }
}

/// Whether validation batches are drawn by loss-decay weights or uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionMode {
    Adaptive,
    Random,
}

impl std::str::FromStr for AcquisitionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(AcquisitionMode::Adaptive),
            "random" => Ok(AcquisitionMode::Random),
            _ => Err(Error::Config(format!(
                "unknown acquisition mode {s:?} (expected adaptive|random)"
            ))),
        }
    }
}

impl std::fmt::Display for AcquisitionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AcquisitionMode::Adaptive => "adaptive",
            AcquisitionMode::Random => "random",
        })
    }
}

/// Every knob of the training procedure. Defaults are the desk-scale
/// configuration used throughout the test suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Labeled sentences credited per slot type when splitting.
    pub k: usize,
    /// Ring size of the per-example loss history.
    pub r_window: usize,
    /// Validation mini-batches per student step.
    pub s_val_batches: usize,
    /// Student steps per outer round.
    pub inner_steps: usize,
    pub outer_rounds: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Student steps between acquisition weight refreshes.
    pub refresh_period: usize,
    pub pseudo_label_type: PseudoLabelType,
    pub reweight_mode: ReweightMode,
    pub acquisition_mode: AcquisitionMode,
    pub meta_scope: MetaScope,
    pub teacher_finetune: bool,
    pub reinit_student: bool,
    pub teacher_finetune_steps: usize,
    pub seed: u64,
    pub d_emb: usize,
    pub window: usize,
    pub d_hidden: usize,
    /// Flip rate applied to pseudo-labels each round (noise experiments).
    pub pseudo_corrupt_rate: f64,
    /// Fraction of the unlabeled pool made available.
    pub unlabeled_fraction: f64,
    pub early_stop: bool,
    /// Record a parameter checksum after every SGD step.
    pub trace_checkpoints: bool,
    /// Embed acquisition and final-round weight diagnostics in the record.
    pub dump_diagnostics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 10,
            r_window: 5,
            s_val_batches: 5,
            inner_steps: 300,
            outer_rounds: 3,
            lr: 0.1,
            weight_decay: 5e-6,
            dropout: 0.3,
            batch_labeled: 8,
            batch_unlabeled: 32,
            refresh_period: 50,
            pseudo_label_type: PseudoLabelType::Hard,
            reweight_mode: ReweightMode::Meta,
            acquisition_mode: AcquisitionMode::Adaptive,
            meta_scope: MetaScope::Full,
            teacher_finetune: true,
            reinit_student: true,
            teacher_finetune_steps: 200,
            seed: 0,
            d_emb: 32,
            window: 1,
            d_hidden: 64,
            pseudo_corrupt_rate: 0.0,
            unlabeled_fraction: 1.0,
            early_stop: false,
            trace_checkpoints: false,
            dump_diagnostics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.k == 0
            || self.r_window == 0
            || self.refresh_period == 0
            || self.outer_rounds == 0
            || self.batch_labeled == 0
            || self.batch_unlabeled == 0
            || self.d_emb == 0
            || self.d_hidden == 0
        {
            return bad("counts and sizes must be at least 1");
        }
        if self.reweight_mode == ReweightMode::Meta && self.s_val_batches == 0 {
            return bad("meta re-weighting needs at least one validation batch");
        }
        if !(0.0..=1.0).contains(&self.pseudo_corrupt_rate) {
            return bad("pseudo_corrupt_rate must be in [0, 1]");
        }
        if self.pseudo_corrupt_rate > 0.0 && self.pseudo_label_type == PseudoLabelType::Soft {
            return bad("label corruption is defined for hard pseudo-labels only");
        }
        if !(self.unlabeled_fraction > 0.0 && self.unlabeled_fraction <= 1.0) {
            return bad("unlabeled_fraction must be in (0, 1]");
        }
        Ok(())
    }

    pub fn model_shape(&self, vocab_size: usize, n_tags: usize) -> ModelShape {
        ModelShape {
            vocab_size,
            d_emb: self.d_emb,
            window: self.window,
            d_hidden: self.d_hidden,
            n_tags,
        }
    }
}

/// Pseudo-labeled pool: the tagged data plus encodings, per-token teacher
/// confidence, and (in noise experiments) the corruption mask.
#[derive(Debug, Clone)]
pub struct PseudoSet {
    pub data: Dataset,
    pub token_ids: Vec<Vec<usize>>,
    pub confidence: Vec<Vec<f64>>,
    pub corrupt: Option<Vec<Vec<bool>>>,
}

impl PseudoSet {
    fn target_of(&self, i: usize) -> Target<'_> {
        match &self.data.sentences[i].soft_tags {
            Some(rows) => Target::Soft(rows),
            None => Target::Hard(&self.data.sentences[i].tags),
        }
    }
}

/// One acquisition refresh, as recorded in diagnostics mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcqDump {
    pub round: usize,
    pub step: usize,
    pub rows: Vec<AcqRow>,
}

/// One token of a weighted pseudo batch, as recorded in diagnostics mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagRow {
    pub round: usize,
    pub step: usize,
    pub sentence: usize,
    pub token_index: usize,
    pub token_id: usize,
    pub pseudo_tag: usize,
    pub confidence: f64,
    pub raw_score: f64,
    pub final_weight: f64,
    pub corrupt: Option<bool>,
}

/// Per-round metrics. `handoff_checksum` must equal `student_checksum`:
/// the promoted teacher is the round's final student, bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Test F1 of the teacher after this round's fine-tuning.
    pub teacher_f1: f64,
    /// Test F1 of the student at the end of the round.
    pub student_f1: f64,
    pub teacher_checksum: String,
    pub student_checksum: String,
    pub handoff_checksum: String,
    pub skipped_steps: usize,
    pub mean_step_loss: f64,
    pub mean_weight_clean: Option<f64>,
    pub mean_weight_corrupt: Option<f64>,
}

/// Everything a run produces. Serializes deterministically; wall-clock time
/// is kept out of the serialized form so equal runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub init_checksum: String,
    /// Test F1 of the untrained initial model.
    pub init_f1: f64,
    pub rounds: Vec<RoundMetrics>,
    /// Weighted pseudo-batch loss before each student step, per round.
    pub step_losses: Vec<Vec<f64>>,
    pub final_f1: f64,
    /// Parameter checksum after every SGD step (teacher fine-tuning and
    /// student steps, in order), when trace_checkpoints is on.
    pub step_checksums: Vec<String>,
    pub acq_dumps: Vec<AcqDump>,
    pub weight_rows: Vec<WeightDiagRow>,
    pub warnings: Vec<String>,
    /// Student steps that consumed labeled-data gradients. The inner loop
    /// has no such path; this stays 0 and the test suite asserts it.
    pub student_labeled_grad_steps: usize,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Phrase F1 of a model over a dataset (predictions fan out over sentences;
/// results are order-stable).
pub fn evaluate_f1(params: &TaggerParams, data: &Dataset) -> Result<PhraseScore> {
    let pred: Vec<Vec<usize>> = data
        .sentences
        .par_iter()
        .map(|s| {
            let ids = data.vocab.encode(&s.tokens);
            crate::model::predict_tags(params, &ids)
        })
        .collect::<Result<_>>()?;
    let gold: Vec<Vec<usize>> = data.sentences.iter().map(|s| s.tags.clone()).collect();
    phrase_f1(&pred, &gold, &data.scheme)
}

/// Supervised SGD on the labeled set: each step draws a uniform mini-batch
/// and fresh dropout masks from the round's teacher stream. Zero steps
/// return the teacher unchanged.
pub fn fine_tune_teacher(
    teacher: &TaggerParams,
    labeled: &Dataset,
    cfg: &TrainConfig,
    round: u64,
    trace: &mut Vec<String>,
) -> Result<TaggerParams> {
    if labeled.is_empty() {
        return Err(Error::Config("labeled set is empty".into()));
    }
    let ids = labeled.encode();
    let mut rng = stream_rng(cfg.seed, "teacher-finetune", round);
    let mut params = teacher.clone();
    for _ in 0..cfg.teacher_finetune_steps {
        let batch = sample_indices(&mut rng, labeled.len(), cfg.batch_labeled);
        let masks: Option<Vec<DropoutMask>> = if cfg.dropout > 0.0 {
            Some(
                batch
                    .iter()
                    .map(|&i| {
                        DropoutMask::sample(
                            &mut rng,
                            ids[i].len(),
                            params.shape.d_hidden,
                            cfg.dropout,
                        )
                    })
                    .collect(),
            )
        } else {
            None
        };
        let items: Vec<BatchItem> = batch
            .iter()
            .enumerate()
            .map(|(j, &i)| BatchItem {
                tokens: &ids[i],
                target: Target::Hard(&labeled.sentences[i].tags),
                weights: None,
                mask: masks.as_ref().map(|m| &m[j]),
            })
            .collect();
        let grad = batch_gradient(&params, &items)?;
        params = sgd_step(&params, &grad, cfg.lr, cfg.weight_decay)?;
        if cfg.trace_checkpoints {
            trace.push(params.checksum());
        }
    }
    Ok(params)
}

/// Labels the pool with the teacher: hard mode stores per-token argmax tags
/// (ties to the lowest tag id), soft mode additionally stores the full
/// probability rows. Teacher confidence is the max probability per token.
pub fn pseudo_label(
    teacher: &TaggerParams,
    unlabeled: &Dataset,
    label_type: PseudoLabelType,
) -> Result<PseudoSet> {
    let token_ids: Vec<Vec<usize>> = unlabeled.encode();
    let labeled_rows: Vec<(Vec<usize>, Vec<f64>, Vec<Vec<f64>>)> = token_ids
        .par_iter()
        .map(|ids| {
            let probs = forward(teacher, ids, None)?;
            let mut tags = Vec::with_capacity(probs.len());
            let mut conf = Vec::with_capacity(probs.len());
            for row in &probs {
                let mut best = 0;
                for (t, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = t;
                    }
                }
                tags.push(best);
                conf.push(row[best]);
            }
            Ok((tags, conf, probs))
        })
        .collect::<Result<_>>()?;
    let mut sentences = Vec::with_capacity(unlabeled.len());
    let mut confidence = Vec::with_capacity(unlabeled.len());
    for (src, (tags, conf, probs)) in unlabeled.sentences.iter().zip(labeled_rows) {
        let mut s = TaggedSentence::new(src.tokens.clone(), tags);
        if label_type == PseudoLabelType::Soft {
            s.soft_tags = Some(probs);
        }
        sentences.push(s);
        confidence.push(conf);
    }
    let data = Dataset::new(unlabeled.scheme.clone(), sentences)?
        .with_vocab(unlabeled.vocab.clone());
    Ok(PseudoSet {
        data,
        token_ids,
        confidence,
        corrupt: None,
    })
}

/// Output of one inner loop besides the trained student.
#[derive(Debug, Clone, Default)]
pub struct InnerStats {
    pub step_losses: Vec<f64>,
    pub skipped_steps: usize,
    pub weight_sum_clean: f64,
    pub n_clean: usize,
    pub weight_sum_corrupt: f64,
    pub n_corrupt: usize,
    pub step_checksums: Vec<String>,
    pub acq_dumps: Vec<AcqDump>,
    pub weight_rows: Vec<WeightDiagRow>,
    pub labeled_grad_steps: usize,
    pub warnings: Vec<String>,
}

fn weighted_batch_loss(
    student: &TaggerParams,
    pseudo: &PseudoSet,
    batch: &[usize],
    weights: &[Vec<f64>],
) -> Result<f64> {
    let mut total = 0.0;
    for (j, &i) in batch.iter().enumerate() {
        let ids = &pseudo.token_ids[i];
        if ids.is_empty() {
            continue;
        }
        let losses = token_losses(student, ids, pseudo.target_of(i), None)?;
        let inv_n = 1.0 / losses.len() as f64;
        total += losses
            .iter()
            .zip(&weights[j])
            .map(|(l, w)| w * l * inv_n)
            .sum::<f64>();
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Trains the student on weighted pseudo-label batches for
/// `cfg.inner_steps` steps. In meta mode each step scores the batch against
/// S validation batches drawn by the acquisition weights; steps whose
/// weights all collapse to zero are skipped but still advance the step
/// counter. The labeled set never contributes a gradient here.
pub fn student_inner_loop(
    mut student: TaggerParams,
    pseudo: &PseudoSet,
    labeled: &Dataset,
    cfg: &TrainConfig,
    round: u64,
    collect_weights: bool,
) -> Result<(TaggerParams, InnerStats)> {
    if pseudo.data.is_empty() {
        return Err(Error::Config("pseudo-labeled pool is empty".into()));
    }
    let n_pseudo = pseudo.data.len();
    let mut pseudo_rng = stream_rng(cfg.seed, "student-pseudo", round);
    let mut dropout_rng = stream_rng(cfg.seed, "student-dropout", round);
    let mut val_rng = stream_rng(cfg.seed, "student-val", round);
    let needs_meta = cfg.reweight_mode == ReweightMode::Meta;
    let mut acq = if needs_meta {
        Some(AcquisitionState::new(
            labeled.len(),
            cfg.r_window,
            cfg.refresh_period,
        )?)
    } else {
        None
    };
    let labeled_ids = labeled.encode();
    let mut stats = InnerStats::default();

    for t in 1..=cfg.inner_steps {
        let mut val_batches: Vec<Vec<usize>> = Vec::new();
        if let Some(state) = acq.as_mut() {
            match cfg.acquisition_mode {
                AcquisitionMode::Adaptive => {
                    if (t - 1) % cfg.refresh_period == 0 {
                        record_losses(state, &student, labeled)?;
                        refresh_weights(state)?;
                        if cfg.dump_diagnostics {
                            stats.acq_dumps.push(AcqDump {
                                round: round as usize,
                                step: t,
                                rows: state.last_diagnostics.clone(),
                            });
                        }
                    }
                }
                AcquisitionMode::Random => {
                    if t == 1 {
                        state.set_uniform();
                    }
                }
            }
            val_batches = sample_validation_batches(
                state,
                labeled,
                cfg.s_val_batches,
                cfg.batch_labeled,
                &mut val_rng,
            )?;
        }

        let batch = sample_indices(&mut pseudo_rng, n_pseudo, cfg.batch_unlabeled);
        let raw_scores: Vec<Vec<f64>> = if needs_meta {
            let pseudo_inputs: Vec<ScoreInput> = batch
                .iter()
                .map(|&i| (pseudo.token_ids[i].as_slice(), pseudo.target_of(i)))
                .collect();
            let val_inputs: Vec<Vec<ScoreInput>> = val_batches
                .iter()
                .map(|b| {
                    b.iter()
                        .map(|&i| {
                            (
                                labeled_ids[i].as_slice(),
                                Target::Hard(labeled.sentences[i].tags.as_slice()),
                            )
                        })
                        .collect()
                })
                .collect();
            meta_token_scores_scoped(&student, &pseudo_inputs, &val_inputs, cfg.meta_scope)?
        } else {
            Vec::new()
        };
        let conf: Vec<Vec<f64>> = batch.iter().map(|&i| pseudo.confidence[i].clone()).collect();
        let fin = finalize_weights(&raw_scores, cfg.reweight_mode, &conf)?;

        stats
            .step_losses
            .push(weighted_batch_loss(&student, pseudo, &batch, &fin.weights)?);
        for (j, &i) in batch.iter().enumerate() {
            let corrupt_row = pseudo.corrupt.as_ref().map(|rows| &rows[i]);
            for (n, &w) in fin.weights[j].iter().enumerate() {
                match corrupt_row.map(|r| r[n]) {
                    Some(true) => {
                        stats.weight_sum_corrupt += w;
                        stats.n_corrupt += 1;
                    }
                    _ => {
                        stats.weight_sum_clean += w;
                        stats.n_clean += 1;
                    }
                }
                if collect_weights {
                    stats.weight_rows.push(WeightDiagRow {
                        round: round as usize,
                        step: t,
                        sentence: i,
                        token_index: n,
                        token_id: pseudo.token_ids[i][n],
                        pseudo_tag: pseudo.data.sentences[i].tags[n],
                        confidence: conf[j][n],
                        raw_score: raw_scores
                            .get(j)
                            .and_then(|r| r.get(n))
                            .copied()
                            .unwrap_or(0.0),
                        final_weight: w,
                        corrupt: corrupt_row.map(|r| r[n]),
                    });
                }
            }
        }
        if fin.skipped {
            stats.skipped_steps += 1;
            if cfg.trace_checkpoints {
                stats.step_checksums.push(student.checksum());
            }
            continue;
        }

        let masks: Option<Vec<DropoutMask>> = if cfg.dropout > 0.0 {
            Some(
                batch
                    .iter()
                    .map(|&i| {
                        DropoutMask::sample(
                            &mut dropout_rng,
                            pseudo.token_ids[i].len(),
                            student.shape.d_hidden,
                            cfg.dropout,
                        )
                    })
                    .collect(),
            )
        } else {
            None
        };
        let items: Vec<BatchItem> = batch
            .iter()
            .enumerate()
            .map(|(j, &i)| BatchItem {
                tokens: &pseudo.token_ids[i],
                target: pseudo.target_of(i),
                weights: Some(&fin.weights[j]),
                mask: masks.as_ref().map(|m| &m[j]),
            })
            .collect();
        let grad = batch_gradient(&student, &items)?;
        student = sgd_step(&student, &grad, cfg.lr, cfg.weight_decay)?;
        if cfg.trace_checkpoints {
            stats.step_checksums.push(student.checksum());
        }
    }
    if let Some(state) = acq {
        stats.warnings.extend(state.warnings);
    }
    Ok((student, stats))
}

/// Runs the whole procedure and returns its record.
pub fn run_metast(cfg: &TrainConfig, split: &FewShotSplit) -> Result<RunRecord> {
    let started = Instant::now();
    cfg.validate()?;
    let labeled = &split.labeled;
    if labeled.is_empty() {
        return Err(Error::Config("split has no labeled sentences".into()));
    }
    if split.unlabeled.scheme != labeled.scheme
        || (!split.test.is_empty() && split.test.scheme != labeled.scheme)
    {
        return Err(Error::Schema("split datasets disagree on the scheme".into()));
    }

    let pool = if cfg.unlabeled_fraction < 1.0 {
        let n = split.unlabeled.len();
        let keep = ((n as f64) * cfg.unlabeled_fraction).round() as usize;
        let keep = keep.clamp(1, n.max(1));
        let mut idx = sample_indices(
            &mut stream_rng(cfg.seed, "unlabeled-subset", 0),
            n,
            keep,
        );
        idx.sort_unstable();
        let sentences = idx
            .iter()
            .map(|&i| split.unlabeled.sentences[i].clone())
            .collect();
        Dataset::new(labeled.scheme.clone(), sentences)?.with_vocab(labeled.vocab.clone())
    } else {
        split.unlabeled.clone()
    };
    if pool.is_empty() {
        return Err(Error::Config("unlabeled pool is empty".into()));
    }

    let shape = cfg.model_shape(labeled.vocab.size(), labeled.scheme.n_tags());
    let theta0 = init_params(shape, &mut stream_rng(cfg.seed, "init", 0));
    let has_test = !split.test.is_empty();
    let eval = |params: &TaggerParams| -> Result<f64> {
        if has_test {
            Ok(evaluate_f1(params, &split.test)?.f1)
        } else {
            Ok(0.0)
        }
    };

    let mut record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        init_checksum: theta0.checksum(),
        init_f1: eval(&theta0)?,
        rounds: Vec::new(),
        step_losses: Vec::new(),
        final_f1: 0.0,
        step_checksums: Vec::new(),
        acq_dumps: Vec::new(),
        weight_rows: Vec::new(),
        warnings: split.warnings.clone(),
        student_labeled_grad_steps: 0,
        wall_clock_secs: 0.0,
    };

    let mut teacher = theta0.clone();
    let mut best_dev = f64::NEG_INFINITY;
    let mut stalled = 0usize;
    for round in 1..=cfg.outer_rounds {
        if cfg.teacher_finetune {
            teacher = fine_tune_teacher(
                &teacher,
                labeled,
                cfg,
                round as u64,
                &mut record.step_checksums,
            )?;
        }
        let teacher_f1 = eval(&teacher)?;
        let teacher_checksum = teacher.checksum();

        let mut pseudo = pseudo_label(&teacher, &pool, cfg.pseudo_label_type)?;
        if cfg.pseudo_corrupt_rate > 0.0 {
            let cseed = cfg.seed ^ (round as u64).wrapping_mul(0x9E3779B97F4A7C15);
            let (cdata, mask) = corrupt_labels(&pseudo.data, cfg.pseudo_corrupt_rate, cseed)?;
            pseudo.data = cdata;
            pseudo.corrupt = Some(mask);
        }

        let student0 = if cfg.reinit_student {
            theta0.clone()
        } else {
            teacher.clone()
        };
        let collect_weights = cfg.dump_diagnostics && round == cfg.outer_rounds;
        let (student, stats) =
            student_inner_loop(student0, &pseudo, labeled, cfg, round as u64, collect_weights)?;

        teacher = student.clone();
        let student_checksum = student.checksum();
        let handoff_checksum = teacher.checksum();
        let student_f1 = eval(&teacher)?;

        let mean_loss = if stats.step_losses.is_empty() {
            0.0
        } else {
            stats.step_losses.iter().sum::<f64>() / stats.step_losses.len() as f64
        };
        record.rounds.push(RoundMetrics {
            round,
            teacher_f1,
            student_f1,
            teacher_checksum,
            student_checksum,
            handoff_checksum,
            skipped_steps: stats.skipped_steps,
            mean_step_loss: mean_loss,
            mean_weight_clean: (stats.n_clean > 0)
                .then(|| stats.weight_sum_clean / stats.n_clean as f64),
            mean_weight_corrupt: (stats.n_corrupt > 0)
                .then(|| stats.weight_sum_corrupt / stats.n_corrupt as f64),
        });
        record.step_losses.push(stats.step_losses);
        record.step_checksums.extend(stats.step_checksums);
        record.acq_dumps.extend(stats.acq_dumps);
        record.weight_rows.extend(stats.weight_rows);
        record.warnings.extend(stats.warnings);
        record.student_labeled_grad_steps += stats.labeled_grad_steps;

        if cfg.early_stop {
            // test-free proxy: fit on the labeled set
            let dev = evaluate_f1(&teacher, labeled)?.f1;
            if dev > best_dev {
                best_dev = dev;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= 2 {
                    record
                        .warnings
                        .push(format!("stopped early after round {round}"));
                    break;
                }
            }
        }
    }
    record.final_f1 = record
        .rounds
        .last()
        .map(|r| r.student_f1)
        .unwrap_or(record.init_f1);
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, kshot_sample, SynthSpec};
    use crate::model::mean_token_loss;

    fn synth(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&SynthSpec {
            n_slot_types: 2,
            vocab_size: 30,
            n_sentences: n,
            length_range: (3, 7),
            span_rate: 0.35,
            slot_word_disjointness: 1.0,
            seed,
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            k: 4,
            inner_steps: 8,
            outer_rounds: 2,
            teacher_finetune_steps: 10,
            batch_labeled: 4,
            batch_unlabeled: 6,
            refresh_period: 4,
            s_val_batches: 2,
            d_emb: 4,
            d_hidden: 6,
            lr: 0.2,
            dropout: 0.3,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn tiny_split(cfg: &TrainConfig) -> FewShotSplit {
        let train = synth(40, 21);
        let test = synth(30, 22);
        kshot_sample(&train, cfg.k, cfg.seed)
            .unwrap()
            .with_test(test)
            .unwrap()
    }

    #[test]
    fn zero_finetune_steps_leave_teacher_unchanged() {
        let cfg = TrainConfig {
            teacher_finetune_steps: 0,
            ..tiny_cfg()
        };
        let split = tiny_split(&cfg);
        let shape = cfg.model_shape(split.labeled.vocab.size(), split.labeled.scheme.n_tags());
        let teacher = init_params(shape, &mut stream_rng(1, "init", 0));
        let mut trace = Vec::new();
        let out = fine_tune_teacher(&teacher, &split.labeled, &cfg, 1, &mut trace).unwrap();
        assert_eq!(out, teacher);
        assert!(trace.is_empty());
    }

    #[test]
    fn finetune_is_deterministic_and_descends_mostly() {
        let cfg = TrainConfig {
            teacher_finetune_steps: 60,
            ..tiny_cfg()
        };
        let split = tiny_split(&cfg);
        let labeled = &split.labeled;
        let shape = cfg.model_shape(labeled.vocab.size(), labeled.scheme.n_tags());
        let set_loss = |p: &TaggerParams| -> f64 {
            let ids = labeled.encode();
            let total: f64 = ids
                .iter()
                .zip(&labeled.sentences)
                .map(|(t, s)| mean_token_loss(p, t, Target::Hard(&s.tags)).unwrap())
                .sum();
            total / labeled.len() as f64
        };
        let mut improved = 0;
        for trial in 0..10u64 {
            let teacher = init_params(shape, &mut stream_rng(trial, "init", 0));
            let mut tr = Vec::new();
            let a = fine_tune_teacher(&teacher, labeled, &cfg, 1, &mut tr).unwrap();
            let b = fine_tune_teacher(&teacher, labeled, &cfg, 1, &mut tr).unwrap();
            assert_eq!(a, b);
            if set_loss(&a) <= set_loss(&teacher) {
                improved += 1;
            }
        }
        assert!(improved >= 8, "loss decreased in only {improved}/10 trials");
    }

    #[test]
    fn zero_teacher_pseudo_labels_everything_tag_zero() {
        let data = synth(10, 3);
        let shape = ModelShape {
            vocab_size: data.vocab.size(),
            d_emb: 3,
            window: 1,
            d_hidden: 4,
            n_tags: data.scheme.n_tags(),
        };
        let teacher = TaggerParams::zeros(shape);
        let ps = pseudo_label(&teacher, &data, PseudoLabelType::Hard).unwrap();
        assert!(ps
            .data
            .sentences
            .iter()
            .all(|s| s.tags.iter().all(|&t| t == 0)));
        let n = data.scheme.n_tags() as f64;
        assert!(ps
            .confidence
            .iter()
            .flatten()
            .all(|&c| (c - 1.0 / n).abs() < 1e-15));
    }

    #[test]
    fn soft_pseudo_labels_are_stochastic_and_argmax_consistent() {
        let data = synth(10, 4);
        let shape = ModelShape {
            vocab_size: data.vocab.size(),
            d_emb: 3,
            window: 1,
            d_hidden: 4,
            n_tags: data.scheme.n_tags(),
        };
        let teacher = init_params(shape, &mut stream_rng(5, "init", 0));
        let ps = pseudo_label(&teacher, &data, PseudoLabelType::Soft).unwrap();
        for s in &ps.data.sentences {
            let rows = s.soft_tags.as_ref().unwrap();
            for (n, row) in rows.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let mut best = 0;
                for (t, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = t;
                    }
                }
                assert_eq!(s.tags[n], best);
            }
        }
    }

    #[test]
    fn zero_inner_steps_leave_student_unchanged() {
        let cfg = TrainConfig {
            inner_steps: 0,
            ..tiny_cfg()
        };
        let split = tiny_split(&cfg);
        let shape = cfg.model_shape(split.labeled.vocab.size(), split.labeled.scheme.n_tags());
        let student = init_params(shape, &mut stream_rng(2, "init", 0));
        let teacher = init_params(shape, &mut stream_rng(3, "init", 0));
        let pseudo = pseudo_label(&teacher, &split.unlabeled, PseudoLabelType::Hard).unwrap();
        let (out, stats) =
            student_inner_loop(student.clone(), &pseudo, &split.labeled, &cfg, 1, false).unwrap();
        assert_eq!(out, student);
        assert!(stats.step_losses.is_empty());
    }

    /// Independent miniature classic-ST student loop used to pin down the
    /// reduction semantics of reweight=none at unit scale.
    fn classic_student_steps(
        mut student: TaggerParams,
        pseudo: &PseudoSet,
        cfg: &TrainConfig,
        round: u64,
    ) -> TaggerParams {
        let mut batch_rng = stream_rng(cfg.seed, "student-pseudo", round);
        let mut mask_rng = stream_rng(cfg.seed, "student-dropout", round);
        for _ in 0..cfg.inner_steps {
            let batch = sample_indices(&mut batch_rng, pseudo.data.len(), cfg.batch_unlabeled);
            let masks: Vec<DropoutMask> = batch
                .iter()
                .map(|&i| {
                    DropoutMask::sample(
                        &mut mask_rng,
                        pseudo.token_ids[i].len(),
                        student.shape.d_hidden,
                        cfg.dropout,
                    )
                })
                .collect();
            let items: Vec<BatchItem> = batch
                .iter()
                .enumerate()
                .map(|(j, &i)| BatchItem {
                    tokens: &pseudo.token_ids[i],
                    target: Target::Hard(&pseudo.data.sentences[i].tags),
                    weights: None,
                    mask: Some(&masks[j]),
                })
                .collect();
            let grad = batch_gradient(&student, &items).unwrap();
            student = sgd_step(&student, &grad, cfg.lr, cfg.weight_decay).unwrap();
        }
        student
    }

    #[test]
    fn none_mode_inner_loop_is_bitwise_classic() {
        let cfg = TrainConfig {
            reweight_mode: ReweightMode::None,
            acquisition_mode: AcquisitionMode::Random,
            inner_steps: 12,
            ..tiny_cfg()
        };
        let split = tiny_split(&cfg);
        let shape = cfg.model_shape(split.labeled.vocab.size(), split.labeled.scheme.n_tags());
        let teacher = init_params(shape, &mut stream_rng(9, "init", 0));
        let pseudo = pseudo_label(&teacher, &split.unlabeled, PseudoLabelType::Hard).unwrap();
        let student0 = init_params(shape, &mut stream_rng(10, "init", 0));
        let (mine, _) =
            student_inner_loop(student0.clone(), &pseudo, &split.labeled, &cfg, 2, false)
                .unwrap();
        let classic = classic_student_steps(student0, &pseudo, &cfg, 2);
        assert_eq!(mine, classic);
    }

    #[test]
    fn run_is_deterministic_and_hands_off_teacher() {
        let cfg = tiny_cfg();
        let split = tiny_split(&cfg);
        let a = run_metast(&cfg, &split).unwrap();
        let b = run_metast(&cfg, &split).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.rounds.len(), cfg.outer_rounds);
        for r in &a.rounds {
            assert_eq!(r.handoff_checksum, r.student_checksum);
        }
        assert_eq!(a.student_labeled_grad_steps, 0);
        assert_eq!(a.final_f1, a.rounds.last().unwrap().student_f1);
    }

    #[test]
    fn finetuned_teacher_beats_untrained_init() {
        // the first optimization phase predicts only O; this lr/step budget
        // is past it
        let cfg = TrainConfig {
            k: 8,
            teacher_finetune_steps: 150,
            lr: 0.5,
            d_emb: 8,
            d_hidden: 16,
            ..tiny_cfg()
        };
        let train = synth(80, 31);
        let test = synth(60, 32);
        let split = kshot_sample(&train, cfg.k, 1)
            .unwrap()
            .with_test(test)
            .unwrap();
        let shape = cfg.model_shape(split.labeled.vocab.size(), split.labeled.scheme.n_tags());
        let init = init_params(shape, &mut stream_rng(cfg.seed, "init", 0));
        let mut tr = Vec::new();
        let tuned = fine_tune_teacher(&init, &split.labeled, &cfg, 1, &mut tr).unwrap();
        let before = evaluate_f1(&init, &split.test).unwrap().f1;
        let after = evaluate_f1(&tuned, &split.test).unwrap().f1;
        assert!(
            after > before,
            "fine-tuning did not help: {before} -> {after}"
        );
        assert!(after > 0.3, "tuned teacher F1 only {after}");
    }

    #[test]
    fn early_stop_never_exceeds_round_budget() {
        let cfg = TrainConfig {
            early_stop: true,
            outer_rounds: 4,
            ..tiny_cfg()
        };
        let split = tiny_split(&cfg);
        let rec = run_metast(&cfg, &split).unwrap();
        assert!(rec.rounds.len() <= 4 && !rec.rounds.is_empty());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.pseudo_label_type = PseudoLabelType::Soft;
        cfg.pseudo_corrupt_rate = 0.2;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.unlabeled_fraction = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn corrupt_rate_records_weight_split() {
        let cfg = TrainConfig {
            pseudo_corrupt_rate: 0.3,
            inner_steps: 6,
            outer_rounds: 1,
            ..tiny_cfg()
        };
        let split = tiny_split(&cfg);
        let rec = run_metast(&cfg, &split).unwrap();
        let r = &rec.rounds[0];
        assert!(r.mean_weight_clean.is_some());
        assert!(r.mean_weight_corrupt.is_some());
    }

    #[test]
    fn unlabeled_fraction_shrinks_pool_deterministically() {
        let cfg = TrainConfig {
            unlabeled_fraction: 0.25,
            inner_steps: 4,
            outer_rounds: 1,
            ..tiny_cfg()
        };
        let split = tiny_split(&cfg);
        let a = run_metast(&cfg, &split).unwrap();
        let b = run_metast(&cfg, &split).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
