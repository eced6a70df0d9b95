//! Command-line front end: multi-seed runs, sweeps and the oracle battery.
//!
//! Config precedence: built-in defaults, then `--config` file keys, then
//! explicit flags.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metast::harness::{
    self, cmd_gradcheck, cmd_oracle, cmd_run, cmd_sweep, DataSource, SweepAxis,
};
use metast::reweight::{MetaScope, ReweightMode};
use metast::selftrain::{AcquisitionMode, PseudoLabelType, TrainConfig};
use metast::Result;

#[derive(Parser)]
#[command(name = "metast", version, about = "Few-shot sequence tagging via adaptive self-training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train over one or more seeds and write records plus aggregates.
    Run(RunArgs),
    /// Train a grid over one config axis and summarize per value.
    Sweep(SweepArgs),
    /// Finite-difference checks of all gradient paths.
    Gradcheck(GradcheckArgs),
    /// Brute-force oracles for span F1 and acquisition arithmetic.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Data source: conll:<dir> or synth:<tiny|small|medium>.
    #[arg(long, default_value = "synth:tiny")]
    data: String,

    /// key=value config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    r_window: Option<usize>,
    #[arg(long)]
    s_val_batches: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    outer_rounds: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_labeled: Option<usize>,
    #[arg(long)]
    batch_unlabeled: Option<usize>,
    #[arg(long)]
    refresh_period: Option<usize>,
    #[arg(long)]
    pseudo_label_type: Option<PseudoLabelType>,
    #[arg(long)]
    reweight_mode: Option<ReweightMode>,
    #[arg(long)]
    acquisition_mode: Option<AcquisitionMode>,
    #[arg(long)]
    meta_scope: Option<MetaScope>,
    #[arg(long)]
    teacher_finetune: Option<bool>,
    #[arg(long)]
    reinit_student: Option<bool>,
    #[arg(long)]
    teacher_finetune_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_emb: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    pseudo_corrupt_rate: Option<f64>,
    #[arg(long)]
    unlabeled_fraction: Option<f64>,
    #[arg(long)]
    early_stop: Option<bool>,
    #[arg(long)]
    trace_checkpoints: Option<bool>,
    #[arg(long)]
    dump_diagnostics: Option<bool>,
}

impl ConfigArgs {
    fn build(&self) -> Result<(DataSource, TrainConfig)> {
        let source: DataSource = self.data.parse()?;
        let mut cfg = match &self.config {
            Some(path) => harness::parse_config_text(&fs::read_to_string(path)?)?,
            None => TrainConfig::default(),
        };
        macro_rules! over {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        over!(
            k,
            r_window,
            s_val_batches,
            inner_steps,
            outer_rounds,
            lr,
            weight_decay,
            dropout,
            batch_labeled,
            batch_unlabeled,
            refresh_period,
            pseudo_label_type,
            reweight_mode,
            acquisition_mode,
            meta_scope,
            teacher_finetune,
            reinit_student,
            teacher_finetune_steps,
            seed,
            d_emb,
            window,
            d_hidden,
            pseudo_corrupt_rate,
            unlabeled_fraction,
            early_stop,
            trace_checkpoints,
            dump_diagnostics,
        );
        cfg.validate()?;
        Ok((source, cfg))
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<u64>()
                .map_err(|e| metast::Error::Config(format!("bad seed {x:?}: {e}")))
        })
        .collect()
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Comma-separated run seeds.
    #[arg(long, default_value = "0")]
    seeds: String,

    /// Output directory (default: <out root>/run).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Axis to sweep: mode|k|s|unlabeled_fraction.
    #[arg(long)]
    axis: String,

    /// Comma-separated run seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,

    /// Output directory (default: <out root>/sweep-<axis>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OracleArgs {
    /// Random sequence pairs for the F1 oracle.
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn do_run(args: &RunArgs) -> Result<bool> {
    let (source, cfg) = args.config.build()?;
    let seeds = parse_seeds(&args.seeds)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| harness::out_root().join("run"));
    let summary = cmd_run(&source, &cfg, &seeds, &out)?;
    for rec in &summary.records {
        println!(
            "seed {}: init f1 {:.4} final f1 {:.4} ({} rounds, {:.1}s)",
            rec.seed,
            rec.init_f1,
            rec.final_f1,
            rec.rounds.len(),
            rec.wall_clock_secs
        );
    }
    println!(
        "final f1 mean {:.4} +- {:.4} over {} seeds -> {}",
        summary.mean_final_f1,
        summary.std_final_f1,
        seeds.len(),
        out.display()
    );
    Ok(true)
}

fn do_sweep(args: &SweepArgs) -> Result<bool> {
    let (source, cfg) = args.config.build()?;
    let axis: SweepAxis = args.axis.parse()?;
    let seeds = parse_seeds(&args.seeds)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| harness::out_root().join(format!("sweep-{axis}")));
    let points = cmd_sweep(&source, &cfg, axis, &seeds, &out)?;
    for p in &points {
        println!(
            "{} = {}: median f1 {:.4}, mean f1 {:.4} over {} seeds",
            p.axis,
            p.value,
            p.median_f1,
            p.mean_f1,
            p.final_f1s.len()
        );
    }
    println!("-> {}", out.display());
    Ok(true)
}

fn do_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let reports = cmd_gradcheck(args.instances, args.seed)?;
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        ok &= r.passed;
    }
    Ok(ok)
}

fn do_oracle(args: &OracleArgs) -> Result<bool> {
    let reports = cmd_oracle(args.pairs, args.seed)?;
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        ok &= r.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Run(a) => do_run(a),
        Cmd::Sweep(a) => do_sweep(a),
        Cmd::Gradcheck(a) => do_gradcheck(a),
        Cmd::Oracle(a) => do_oracle(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
