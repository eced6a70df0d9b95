//! Token-level re-weighting of pseudo-labeled batches.
//!
//! A pseudo token's raw score is the inner product of its own loss gradient
//! with the summed validation-batch gradients, both taken at the current
//! student parameters. That equals (up to positive constants absorbed by
//! normalization) the one-step meta-gradient: how much up-weighting this
//! token's loss in one SGD step would lower the validation loss. Negative
//! scores are clipped to zero and the rest normalized to mean 1.

use serde::{Deserialize, Serialize};

use crate::model::{
    batch_gradient, per_token_grad_dots, BatchItem, GradBuffer, TaggerParams, Target,
};
use crate::{Error, Result};

/// How pseudo-label token weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReweightMode {
    /// Meta-gradient scores, clipped and normalized.
    Meta,
    /// Unit weights (classic self-training).
    None,
    /// Weight proportional to teacher confidence.
    Easy,
    /// Weight proportional to 1 - teacher confidence.
    Difficult,
}

impl std::str::FromStr for ReweightMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta" => Ok(ReweightMode::Meta),
            "none" => Ok(ReweightMode::None),
            "easy" => Ok(ReweightMode::Easy),
            "difficult" => Ok(ReweightMode::Difficult),
            _ => Err(Error::Config(format!(
                "unknown reweight mode {s:?} (expected meta|none|easy|difficult)"
            ))),
        }
    }
}

impl std::fmt::Display for ReweightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReweightMode::Meta => "meta",
            ReweightMode::None => "none",
            ReweightMode::Easy => "easy",
            ReweightMode::Difficult => "difficult",
        })
    }
}

/// Which parameter block the gradient inner products run over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaScope {
    /// Whole flat parameter vector (default, matches the oracle).
    Full,
    /// Classifier layer (W2, b2) only; a documented approximation for speed.
    Classifier,
}

impl std::str::FromStr for MetaScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MetaScope::Full),
            "classifier" => Ok(MetaScope::Classifier),
            _ => Err(Error::Config(format!(
                "unknown meta scope {s:?} (expected full|classifier)"
            ))),
        }
    }
}

impl std::fmt::Display for MetaScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetaScope::Full => "full",
            MetaScope::Classifier => "classifier",
        })
    }
}

/// One sentence of a pseudo or validation batch: encoded tokens plus
/// training targets.
pub type ScoreInput<'a> = (&'a [usize], Target<'a>);

/// Raw meta-gradient score for every token of the pseudo batch.
///
/// The result drops the `lr / (M * N_m)` factors of the exact meta-gradient:
/// they are positive constants per sentence that the downstream clip-and-
/// normalize absorbs, and the finite-difference oracle reapplies them. The
/// `lr` argument is kept for call-site clarity and ignored for the same
/// reason. Summation order over validation batches is fixed, so results are
/// bit-stable.
pub fn meta_token_scores(
    student: &TaggerParams,
    pseudo: &[ScoreInput],
    val_batches: &[Vec<ScoreInput>],
    lr: f64,
) -> Result<Vec<Vec<f64>>> {
    let _ = lr;
    meta_token_scores_scoped(student, pseudo, val_batches, MetaScope::Full)
}

/// [`meta_token_scores`] with an explicit parameter scope.
pub fn meta_token_scores_scoped(
    student: &TaggerParams,
    pseudo: &[ScoreInput],
    val_batches: &[Vec<ScoreInput>],
    scope: MetaScope,
) -> Result<Vec<Vec<f64>>> {
    if val_batches.is_empty() || val_batches.iter().any(|b| b.is_empty()) {
        return Err(Error::Config(
            "meta scoring needs at least one non-empty validation batch".into(),
        ));
    }
    let mut total = GradBuffer::zeros(student.shape);
    for batch in val_batches {
        let items: Vec<BatchItem> = batch
            .iter()
            .map(|(tokens, target)| BatchItem {
                tokens,
                target: *target,
                weights: None,
                mask: None,
            })
            .collect();
        let g = batch_gradient(student, &items)?;
        total.add_scaled(&g, 1.0);
    }
    let mut flat = total.flatten();
    if scope == MetaScope::Classifier {
        let s = student.shape;
        let prefix = s.vocab_size * s.d_emb + s.window_input() * s.d_hidden + s.d_hidden;
        for v in &mut flat.0[..prefix] {
            *v = 0.0;
        }
    }
    let mut scores = Vec::with_capacity(pseudo.len());
    for (tokens, target) in pseudo {
        let dots = per_token_grad_dots(student, tokens, *target, &flat)?;
        if dots.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite meta score".into()));
        }
        scores.push(dots);
    }
    Ok(scores)
}

/// Final per-token weights plus whether the whole batch degenerated to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalizedWeights {
    pub weights: Vec<Vec<f64>>,
    /// True when every weight is 0; the training step should be skipped.
    pub skipped: bool,
}

fn normalize_to_mean_one(mut weights: Vec<Vec<f64>>) -> FinalizedWeights {
    let count: usize = weights.iter().map(|w| w.len()).sum();
    let total: f64 = weights.iter().flatten().sum();
    if count == 0 || total <= 0.0 {
        for row in &mut weights {
            row.fill(0.0);
        }
        return FinalizedWeights {
            weights,
            skipped: true,
        };
    }
    let factor = count as f64 / total;
    for row in &mut weights {
        for w in row.iter_mut() {
            *w *= factor;
        }
    }
    FinalizedWeights {
        weights,
        skipped: false,
    }
}

/// Turns raw scores into the weights of Eq-style clip-and-normalize, or the
/// ablation variants. `confidence` carries the teacher's max probability per
/// token and defines the batch shape; `raw` must match it in meta mode and
/// may be empty otherwise.
pub fn finalize_weights(
    raw: &[Vec<f64>],
    mode: ReweightMode,
    confidence: &[Vec<f64>],
) -> Result<FinalizedWeights> {
    for row in confidence {
        for &c in row {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Schema(format!("confidence {c} outside [0, 1]")));
            }
        }
    }
    match mode {
        ReweightMode::Meta => {
            if raw.len() != confidence.len()
                || raw.iter().zip(confidence).any(|(r, c)| r.len() != c.len())
            {
                return Err(Error::LengthMismatch {
                    context: "raw scores do not match batch shape".into(),
                });
            }
            let clipped: Vec<Vec<f64>> = raw
                .iter()
                .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
                .collect();
            Ok(normalize_to_mean_one(clipped))
        }
        ReweightMode::None => Ok(FinalizedWeights {
            weights: confidence.iter().map(|row| vec![1.0; row.len()]).collect(),
            skipped: false,
        }),
        ReweightMode::Easy => Ok(normalize_to_mean_one(
            confidence.iter().map(|row| row.clone()).collect(),
        )),
        ReweightMode::Difficult => Ok(normalize_to_mean_one(
            confidence
                .iter()
                .map(|row| row.iter().map(|&c| 1.0 - c).collect())
                .collect(),
        )),
    }
}

/// Per-token diagnostics behind weight-vs-confidence dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDiag {
    pub confidence: f64,
    pub raw_score: f64,
    pub final_weight: f64,
    pub corrupt: Option<bool>,
}

/// A pseudo batch with its finalized weights and diagnostics.
#[derive(Debug, Clone)]
pub struct WeightedBatch {
    /// Indices into the pseudo-labeled pool.
    pub sentence_ids: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub skipped: bool,
    pub diagnostics: Vec<Vec<TokenDiag>>,
}

impl WeightedBatch {
    pub fn assemble(
        sentence_ids: Vec<usize>,
        raw: &[Vec<f64>],
        finalized: FinalizedWeights,
        confidence: &[Vec<f64>],
        corrupt: Option<&[Vec<bool>]>,
    ) -> Self {
        let diagnostics = confidence
            .iter()
            .enumerate()
            .map(|(m, conf_row)| {
                conf_row
                    .iter()
                    .enumerate()
                    .map(|(n, &c)| TokenDiag {
                        confidence: c,
                        raw_score: raw.get(m).and_then(|r| r.get(n)).copied().unwrap_or(0.0),
                        final_weight: finalized.weights[m][n],
                        corrupt: corrupt.map(|rows| rows[m][n]),
                    })
                    .collect()
            })
            .collect();
        WeightedBatch {
            sentence_ids,
            weights: finalized.weights,
            skipped: finalized.skipped,
            diagnostics,
        }
    }
}
