//! Experiment runner behind the CLI: data sources, config files, multi-seed
//! runs, sweeps, and the oracle battery.
//!
//! All output files are pure functions of the config and seeds (wall-clock
//! time never reaches disk), so repeated invocations are byte-identical.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checks::{
    acquisition_arithmetic_check, f1_oracle_check, gradcheck_backward, gradcheck_per_token,
    meta_fd_check, CheckReport,
};
use crate::data::{generate_synthetic, kshot_sample, parse_conll, FewShotSplit, SynthSpec};
use crate::reweight::ReweightMode;
use crate::selftrain::{run_metast, RunRecord, TrainConfig};
use crate::{Error, Result};

/// Where experiment data comes from: `conll:<dir>` (expects `train.txt` and
/// `test.txt` inside) or `synth:<preset>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Conll(PathBuf),
    Synth(SynthPreset),
}

impl std::str::FromStr for DataSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("conll", path)) if !path.is_empty() => Ok(DataSource::Conll(path.into())),
            Some(("synth", preset)) => Ok(DataSource::Synth(preset.parse()?)),
            _ => Err(Error::Config(format!(
                "data source must be conll:<dir> or synth:<preset>, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Conll(p) => write!(f, "conll:{}", p.display()),
            DataSource::Synth(p) => write!(f, "synth:{p}"),
        }
    }
}

/// Built-in synthetic corpora. The generator seeds are fixed per preset, so
/// a preset always names the same corpus; run seeds only move the split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthPreset {
    Tiny,
    Small,
    Medium,
}

impl std::str::FromStr for SynthPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(SynthPreset::Tiny),
            "small" => Ok(SynthPreset::Small),
            "medium" => Ok(SynthPreset::Medium),
            _ => Err(Error::Config(format!(
                "unknown synth preset {s:?} (expected tiny|small|medium)"
            ))),
        }
    }
}

impl fmt::Display for SynthPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthPreset::Tiny => "tiny",
            SynthPreset::Small => "small",
            SynthPreset::Medium => "medium",
        })
    }
}

impl SynthPreset {
    /// (train, test) generator specs.
    pub fn specs(&self) -> (SynthSpec, SynthSpec) {
        let (n_slot_types, vocab_size, n_train, n_test, span_rate, disjoint, length_range) =
            match self {
                SynthPreset::Tiny => (2, 60, 120, 100, 0.30, 1.0, (3, 8)),
                SynthPreset::Small => (2, 200, 560, 200, 0.28, 0.9, (4, 10)),
                SynthPreset::Medium => (4, 400, 1200, 300, 0.25, 0.9, (4, 12)),
            };
        let train = SynthSpec {
            n_slot_types,
            vocab_size,
            n_sentences: n_train,
            length_range,
            span_rate,
            slot_word_disjointness: disjoint,
            seed: 101,
        };
        let test = SynthSpec {
            n_sentences: n_test,
            seed: 202,
            ..train
        };
        (train, test)
    }
}

/// Loads the source and cuts the K-shot split for `cfg.k` and `cfg.seed`.
pub fn load_split(source: &DataSource, cfg: &TrainConfig) -> Result<FewShotSplit> {
    let (train, test) = match source {
        DataSource::Conll(dir) => {
            let read = |name: &str| -> Result<String> {
                let path = dir.join(name);
                fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
            };
            let train = parse_conll(&read("train.txt")?, None)?;
            let test = parse_conll(&read("test.txt")?, Some(&train.scheme))?;
            (train, test)
        }
        DataSource::Synth(preset) => {
            let (tr, te) = preset.specs();
            (generate_synthetic(&tr)?, generate_synthetic(&te)?)
        }
    };
    kshot_sample(&train, cfg.k, cfg.seed)?.with_test(test)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true|false, got {v:?}"))),
    }
}

/// Sets one config field from its key. Keys are the field names.
pub fn apply_config_kv(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        v.parse()
            .map_err(|e| Error::Config(format!("{key}: {e}, got {v:?}")))
    }
    match key {
        "k" => cfg.k = num(key, value)?,
        "r_window" => cfg.r_window = num(key, value)?,
        "s_val_batches" => cfg.s_val_batches = num(key, value)?,
        "inner_steps" => cfg.inner_steps = num(key, value)?,
        "outer_rounds" => cfg.outer_rounds = num(key, value)?,
        "lr" => cfg.lr = num(key, value)?,
        "weight_decay" => cfg.weight_decay = num(key, value)?,
        "dropout" => cfg.dropout = num(key, value)?,
        "batch_labeled" => cfg.batch_labeled = num(key, value)?,
        "batch_unlabeled" => cfg.batch_unlabeled = num(key, value)?,
        "refresh_period" => cfg.refresh_period = num(key, value)?,
        "pseudo_label_type" => cfg.pseudo_label_type = value.parse()?,
        "reweight_mode" => cfg.reweight_mode = value.parse()?,
        "acquisition_mode" => cfg.acquisition_mode = value.parse()?,
        "meta_scope" => cfg.meta_scope = value.parse()?,
        "teacher_finetune" => cfg.teacher_finetune = parse_bool(key, value)?,
        "reinit_student" => cfg.reinit_student = parse_bool(key, value)?,
        "teacher_finetune_steps" => cfg.teacher_finetune_steps = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        "d_emb" => cfg.d_emb = num(key, value)?,
        "window" => cfg.window = num(key, value)?,
        "d_hidden" => cfg.d_hidden = num(key, value)?,
        "pseudo_corrupt_rate" => cfg.pseudo_corrupt_rate = num(key, value)?,
        "unlabeled_fraction" => cfg.unlabeled_fraction = num(key, value)?,
        "early_stop" => cfg.early_stop = parse_bool(key, value)?,
        "trace_checkpoints" => cfg.trace_checkpoints = parse_bool(key, value)?,
        "dump_diagnostics" => cfg.dump_diagnostics = parse_bool(key, value)?,
        _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// Parses a `key = value` config file on top of the defaults. `#` starts a
/// comment, blank lines are skipped, later keys win. The result is
/// validated.
pub fn parse_config_text(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected key=value, got {line:?}"),
            });
        };
        apply_config_kv(&mut cfg, k.trim(), v.trim()).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Root for experiment output: `METAST_OUT_ROOT` or `./metast-out`.
pub fn out_root() -> PathBuf {
    std::env::var_os("METAST_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("./metast-out"))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let mid = s.len() / 2;
    if s.len() % 2 == 1 {
        s[mid]
    } else {
        0.5 * (s[mid - 1] + s[mid])
    }
}

fn run_one_seed(source: &DataSource, base: &TrainConfig, seed: u64) -> Result<RunRecord> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    let split = load_split(source, &cfg)?;
    run_metast(&cfg, &split)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub records: Vec<RunRecord>,
    pub mean_final_f1: f64,
    pub std_final_f1: f64,
}

/// Runs every seed (in parallel), writes `seed<N>.json`, `aggregate.csv`
/// and `stats.txt` under `out`, and returns the records in seed order.
pub fn cmd_run(
    source: &DataSource,
    base: &TrainConfig,
    seeds: &[u64],
    out: &Path,
) -> Result<RunSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    fs::create_dir_all(out)?;
    let records: Vec<RunRecord> = seeds
        .par_iter()
        .map(|&seed| run_one_seed(source, base, seed))
        .collect::<Result<_>>()?;

    for rec in &records {
        let mut text = serde_json::to_string_pretty(rec)?;
        text.push('\n');
        fs::write(out.join(format!("seed{}.json", rec.seed)), text)?;
    }

    let mut w = csv::Writer::from_path(out.join("aggregate.csv"))?;
    w.write_record([
        "seed",
        "init_f1",
        "final_f1",
        "rounds",
        "skipped_steps",
        "mean_weight_clean",
        "mean_weight_corrupt",
    ])?;
    for rec in &records {
        let last = rec.rounds.last();
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            rec.seed.to_string(),
            rec.init_f1.to_string(),
            rec.final_f1.to_string(),
            rec.rounds.len().to_string(),
            rec.rounds.iter().map(|r| r.skipped_steps).sum::<usize>().to_string(),
            opt(last.and_then(|r| r.mean_weight_clean)),
            opt(last.and_then(|r| r.mean_weight_corrupt)),
        ])?;
    }
    w.flush()?;

    let f1s: Vec<f64> = records.iter().map(|r| r.final_f1).collect();
    let (mean, std) = mean_std(&f1s);
    let mut stats = format!(
        "final f1 over {} seeds: mean {:.4} +- {:.4} (median {:.4})\n",
        seeds.len(),
        mean,
        std,
        median(&f1s)
    );
    for rec in &records {
        stats.push_str(&format!(
            "seed {}: init {:.4} final {:.4} in {} rounds\n",
            rec.seed,
            rec.init_f1,
            rec.final_f1,
            rec.rounds.len()
        ));
    }
    fs::write(out.join("stats.txt"), stats)?;

    Ok(RunSummary {
        records,
        mean_final_f1: mean,
        std_final_f1: std,
    })
}

/// One swept axis. Values are fixed per axis so sweeps are comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Mode,
    K,
    ValBatches,
    UnlabeledFraction,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mode" => Ok(SweepAxis::Mode),
            "k" => Ok(SweepAxis::K),
            "s" => Ok(SweepAxis::ValBatches),
            "unlabeled_fraction" => Ok(SweepAxis::UnlabeledFraction),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?} (expected mode|k|s|unlabeled_fraction)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Mode => "mode",
            SweepAxis::K => "k",
            SweepAxis::ValBatches => "s",
            SweepAxis::UnlabeledFraction => "unlabeled_fraction",
        })
    }
}

fn sweep_variants(axis: SweepAxis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match axis {
        SweepAxis::Mode => [
            ReweightMode::Meta,
            ReweightMode::None,
            ReweightMode::Easy,
            ReweightMode::Difficult,
        ]
        .into_iter()
        .map(|m| {
            let mut c = base.clone();
            c.reweight_mode = m;
            (m.to_string(), c)
        })
        .collect(),
        SweepAxis::K => [5usize, 10, 20]
            .into_iter()
            .map(|k| {
                let mut c = base.clone();
                c.k = k;
                (k.to_string(), c)
            })
            .collect(),
        SweepAxis::ValBatches => [1usize, 3, 5]
            .into_iter()
            .map(|s| {
                let mut c = base.clone();
                c.s_val_batches = s;
                (s.to_string(), c)
            })
            .collect(),
        SweepAxis::UnlabeledFraction => [0.05f64, 0.25, 0.75]
            .into_iter()
            .map(|f| {
                let mut c = base.clone();
                c.unlabeled_fraction = f;
                (f.to_string(), c)
            })
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub axis: String,
    pub value: String,
    pub final_f1s: Vec<f64>,
    pub median_f1: f64,
    pub mean_f1: f64,
}

/// Runs every (axis value, seed) pair in parallel and writes `sweep.csv`
/// (per run) plus `sweep_summary.csv` (per value) under `out`.
pub fn cmd_sweep(
    source: &DataSource,
    base: &TrainConfig,
    axis: SweepAxis,
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<SweepPoint>> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    fs::create_dir_all(out)?;
    let variants = sweep_variants(axis, base);
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|vi| seeds.iter().map(move |&s| (vi, s)))
        .collect();
    let f1s: Vec<(usize, u64, f64)> = jobs
        .par_iter()
        .map(|&(vi, seed)| {
            let rec = run_one_seed(source, &variants[vi].1, seed)?;
            Ok((vi, seed, rec.final_f1))
        })
        .collect::<Result<_>>()?;

    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["axis", "value", "seed", "final_f1"])?;
    for &(vi, seed, f1) in &f1s {
        w.write_record([
            axis.to_string(),
            variants[vi].0.clone(),
            seed.to_string(),
            f1.to_string(),
        ])?;
    }
    w.flush()?;

    let mut points = Vec::with_capacity(variants.len());
    let mut w = csv::Writer::from_path(out.join("sweep_summary.csv"))?;
    w.write_record(["axis", "value", "median_f1", "mean_f1", "std_f1"])?;
    for (vi, (value, _)) in variants.iter().enumerate() {
        let vals: Vec<f64> = f1s
            .iter()
            .filter(|&&(i, _, _)| i == vi)
            .map(|&(_, _, f1)| f1)
            .collect();
        let (mean, std) = mean_std(&vals);
        let med = median(&vals);
        w.write_record([
            axis.to_string(),
            value.clone(),
            med.to_string(),
            mean.to_string(),
            std.to_string(),
        ])?;
        points.push(SweepPoint {
            axis: axis.to_string(),
            value: value.clone(),
            final_f1s: vals,
            median_f1: med,
            mean_f1: mean,
        });
    }
    w.flush()?;
    Ok(points)
}

/// The three gradient oracles: full backward, per-token gradients, and the
/// meta-score finite-difference check.
pub fn cmd_gradcheck(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        gradcheck_backward(instances, seed)?,
        gradcheck_per_token(instances, seed.wrapping_add(1))?,
        meta_fd_check(instances, seed.wrapping_add(2))?,
    ])
}

/// The combinatorial and arithmetic oracles: span-level F1 and the
/// acquisition weight worked examples.
pub fn cmd_oracle(pairs: usize, seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        f1_oracle_check(pairs, seed)?,
        acquisition_arithmetic_check()?,
    ])
}
