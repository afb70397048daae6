use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fvlab::eval::Condition;
use fvlab::pipeline::{self, Run, RunConfig};
use fvlab::{Error, Result};

#[derive(Parser)]
#[command(name = "fvlab", version, about = "Function-vector workbench on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run seeds seed, seed+1, ..., seed+K-1.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Inclusive layer range for layer-sweep, e.g. 0..3.
    #[arg(long)]
    layers: Option<String>,
    /// Comma-separated evaluation conditions.
    #[arg(long)]
    conditions: Option<String>,
    /// Top-k for zero-shot and analogy scoring and the decode probe.
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    Pretrain(RunFlags),
    Extract(RunFlags),
    Finetune(RunFlags),
    CfvTrain(RunFlags),
    Eval(RunFlags),
    Rsa(RunFlags),
    Decode(RunFlags),
    LayerSweep(RunFlags),
    /// Pretraining (when needed) followed by every per-seed command.
    All(RunFlags),
    /// Consolidate evaluation reports of one or more run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_layers(s: &str) -> Result<[usize; 2]> {
    let bad = || Error::Config(format!("--layers expects a..b, got {s:?}"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    Ok([
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ])
}

fn effective_config(f: &RunFlags) -> Result<RunConfig> {
    let mut cfg = match &f.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    if let Some(o) = &f.out {
        cfg.out_dir = o.clone();
    }
    if let Some(l) = &f.layers {
        cfg.sweep.layers = Some(parse_layers(l)?);
    }
    if let Some(c) = &f.conditions {
        cfg.eval.conditions = c
            .split(',')
            .map(|s| Condition::parse(s.trim()))
            .collect::<Result<_>>()?;
    }
    if let Some(k) = f.topk {
        cfg.eval.zero_shot_topk = k;
        cfg.eval.analogy_topk = k;
        cfg.decode.k = k;
    }
    if f.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    Ok(cfg)
}

type SeedCommand = fn(&mut Run, u64) -> Result<()>;

fn run(cli: Cli) -> Result<()> {
    let (flags, per_seed): (RunFlags, SeedCommand) = match cli.command {
        Command::Report { dirs, out } => {
            let r = pipeline::report(&dirs, &out)?;
            for s in &r.summary {
                println!(
                    "{:14} {:18} n={} mean={:.4} std={:.4}",
                    s.condition.name(),
                    s.task.name(),
                    s.n_seeds,
                    s.mean,
                    s.std
                );
            }
            return Ok(());
        }
        Command::Pretrain(f) => {
            let mut run = Run::open(effective_config(&f)?)?;
            pipeline::cmd_pretrain(&mut run)?;
            return Ok(());
        }
        Command::All(f) => {
            let cfg = effective_config(&f)?;
            let seeds: Vec<u64> = (0..f.seeds).map(|i| cfg.seed + i).collect();
            let mut run = Run::open(cfg)?;
            return pipeline::cmd_all(&mut run, &seeds);
        }
        Command::Extract(f) => (f, pipeline::cmd_extract),
        Command::Finetune(f) => (f, pipeline::cmd_finetune),
        Command::CfvTrain(f) => (f, pipeline::cmd_cfv_train),
        Command::Eval(f) => (f, |r, s| {
            let out = pipeline::cmd_eval(r, s)?;
            for a in &out.absent {
                log::warn!("{} / {} absent: {}", a.condition.name(), a.task.name(), a.reason);
            }
            Ok(())
        }),
        Command::Rsa(f) => (f, |r, s| {
            for x in pipeline::cmd_rsa(r, s)? {
                println!(
                    "{:12} r={:.4} within={:.4} between={:.4}",
                    x.condition.name(),
                    x.r,
                    x.within,
                    x.between
                );
            }
            Ok(())
        }),
        Command::Decode(f) => (f, |r, s| pipeline::cmd_decode(r, s).map(|_| ())),
        Command::LayerSweep(f) => (f, |r, s| pipeline::cmd_layer_sweep(r, s).map(|_| ())),
    };
    let cfg = effective_config(&flags)?;
    let seeds: Vec<u64> = (0..flags.seeds).map(|i| cfg.seed + i).collect();
    let mut run = Run::open(cfg)?;
    for s in seeds {
        per_seed(&mut run, s)?;
    }
    run.save_manifest()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
