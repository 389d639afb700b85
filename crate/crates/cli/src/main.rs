//! `ghp`: train latent-variable world models, evaluate adaptation, run the
//! cart-pole inference demo and summarize metrics.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ghp_core::envs::{toy_cartpole_tasks, Family, Split};
use ghp_core::harness::metrics::{write_distances, write_traces};
use ghp_core::harness::run::{CHECKPOINT_FILE, METRICS_FILE, SUMMARY_FILE};
use ghp_core::harness::{
    read_metrics, run_adaptation_eval, run_toy_demo, run_training, summarize, write_metrics, write_summary, Checkpoint,
    ExperimentConfig, Mode, ToyConfig,
};

#[derive(Parser)]
#[command(name = "ghp", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    family: Option<FamilyArg>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Multi-task training; writes a checkpoint and metrics to --out.
    Train,
    /// Posterior-only adaptation from the checkpoint in --out.
    Eval {
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Checkpoint to load instead of `<out>/checkpoint.ghp`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Latent inference on two cart-pole tasks with known physics.
    ToyDemo,
    /// Mean and 95% bootstrap interval over seeds per (mode, phase,
    /// episode). Reads `metrics.csv` from each run directory (default:
    /// --out) and writes `summary.csv` to --out.
    Summarize { runs: Vec<PathBuf> },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    JointLv,
    StructuredLv,
    Generalist,
    Specialist,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::JointLv => Mode::JointLv,
            ModeArg::StructuredLv => Mode::StructuredLv,
            ModeArg::Generalist => Mode::Generalist,
            ModeArg::Specialist => Mode::Specialist,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Cartpole,
    Pointrobot,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Cartpole => Family::Cartpole,
            FamilyArg::Pointrobot => Family::PointRobot,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Weak,
    Strong,
}

fn read_config(path: &Option<PathBuf>) -> Result<Option<String>> {
    path.as_ref()
        .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())))
        .transpose()
}

fn experiment_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match read_config(&c.config)? {
        Some(text) => ExperimentConfig::from_text(&text)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.mode {
        cfg.mode = m.into();
    }
    if let Some(f) = c.family {
        cfg.family = f.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(c: &Common) -> Result<()> {
    let cfg = experiment_config(c)?;
    log::info!("training {} on {} with seed {} into {}", cfg.mode, cfg.family, cfg.seed, c.out.display());
    let out = run_training(&cfg, Some(&c.out))?;
    println!("trained {} rounds; checkpoint {}", out.checkpoint.round, c.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// Keys that define the trained model; an eval-time config may not change them.
const FROZEN_KEYS: [&str; 9] =
    ["family", "mode", "seed", "holdout_deg", "latent_dim", "ensemble_size", "dynamics_hidden", "reward_hidden", "episode_len"];

fn eval(c: &Common, split: SplitArg, checkpoint: &Option<PathBuf>) -> Result<()> {
    let path = checkpoint.clone().unwrap_or_else(|| c.out.join(CHECKPOINT_FILE));
    let mut ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let trained = ck.config.clone();
    let mut cfg = match read_config(&c.config)? {
        Some(text) => trained.clone().apply_text(&text)?,
        None => trained.clone(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.mode {
        cfg.mode = m.into();
    }
    if let Some(f) = c.family {
        cfg.family = f.into();
    }
    let (was, now) = (trained.entries(), cfg.entries());
    for (a, b) in was.iter().zip(&now) {
        if FROZEN_KEYS.contains(&a.0) && a.1 != b.1 {
            bail!("`{}` is {} in the checkpoint; evaluation cannot change it to {}", a.0, a.1, b.1);
        }
    }
    ck.config = cfg;
    let split = match split {
        SplitArg::Weak => Split::Weak,
        SplitArg::Strong => Split::Strong,
    };
    let out = run_adaptation_eval(&ck, split, Some(&c.out))?;
    let mean = out.rows.iter().map(|r| r.ret).sum::<f64>() / out.rows.len() as f64;
    println!("{split}: {} episodes, mean return {mean:.3}; networks unchanged ({})", out.rows.len(), c.out.join(METRICS_FILE).display());
    Ok(())
}

fn toy_demo(c: &Common) -> Result<()> {
    let mut cfg = ToyConfig::new(c.seed.unwrap_or(0));
    if let Some(text) = read_config(&c.config)? {
        cfg = cfg.apply_text(&text)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&c.out)?;
    for f in ["metrics.csv", "traces.csv", "distance.csv"] {
        if c.out.join(f).exists() {
            bail!("{} already exists; pick a fresh --out", c.out.join(f).display());
        }
    }
    let out = run_toy_demo(&toy_cartpole_tasks(), &cfg)?;
    write_metrics(&out.rows, &c.out.join("metrics.csv"))?;
    write_traces(&out.traces, &c.out.join("traces.csv"))?;
    write_distances(&out.distances, &c.out.join("distance.csv"))?;
    for t in toy_cartpole_tasks() {
        let d: Vec<String> =
            (1..=cfg.episodes).map(|e| format!("{:.3}", out.mean_distance(t.id, e).unwrap_or(f64::NAN))).collect();
        println!("task {}: mean distance to goal per episode [{}]", t.id, d.join(", "));
    }
    Ok(())
}

fn summarize_runs(c: &Common, runs: &[PathBuf]) -> Result<()> {
    let dirs: Vec<&Path> = if runs.is_empty() { vec![c.out.as_path()] } else { runs.iter().map(PathBuf::as_path).collect() };
    let mut rows = Vec::new();
    for d in dirs {
        let p = d.join(METRICS_FILE);
        rows.extend(read_metrics(&p).with_context(|| format!("reading {}", p.display()))?);
    }
    let resamples = experiment_config(c)?.bootstrap_resamples;
    let summary = summarize(&rows, resamples)?;
    std::fs::create_dir_all(&c.out)?;
    write_summary(&summary, &c.out.join(SUMMARY_FILE))?;
    for s in &summary {
        println!(
            "{:<14} {:<7} ep {:>2}  n={}  mean {:>9.3}  95% CI [{:.3}, {:.3}]",
            s.mode, s.phase, s.episode, s.n_seeds, s.mean, s.ci_low, s.ci_high
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Train => train(&cli.common),
        Cmd::Eval { split, checkpoint } => eval(&cli.common, *split, checkpoint),
        Cmd::ToyDemo => toy_demo(&cli.common),
        Cmd::Summarize { runs } => summarize_runs(&cli.common, runs),
    }
}
