//! Multi-task training and test-time adaptation runs.
//!
//! Training: episode 0 of every training task uses a uniform random
//! policy. Each round then fits the models on all data gathered so far
//! and collects one MPC episode per training task. A final fit after the
//! last round makes the checkpoint reflect every transition.
//!
//! Evaluation: for each task of the chosen split the posterior starts at
//! the prior and is refitted every `svi_every` steps on everything
//! observed in that task so far. Networks stay frozen.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::buffer::{records_to_data, ReplayBuffer, TransitionRecord};
use super::checkpoint::{Checkpoint, ModelSet};
use super::config::ExperimentConfig;
use super::metrics::{snapshot, trace_rows, write_metrics, write_timings, write_traces, MetricsRow, TimingRow, TraceRow};
use crate::envs::{early_termination, make_task_split, EnvInstance, Family, Split, TaskDescriptor, TaskSplit};
use crate::error::{Error, Result};
use crate::latent::{LayoutMode, TaskPosterior};
use crate::objective::{testtime_inference_step, train_phase, WorldModel};
use crate::planner::{plan_action, CemConfig, LearnedRollout};

pub const CHECKPOINT_FILE: &str = "checkpoint.ghp";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.ghp";
pub const MANIFEST_FILE: &str = "tasks.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.txt";

// Independent random streams so that, for one seed, every mode sees the
// same task split and the same random-policy data.
const STREAM_DATA: u64 = 1;
const STREAM_MODEL: u64 = 2;
const STREAM_PLAN: u64 = 3;
const STREAM_EVAL: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub split: TaskSplit,
    pub rows: Vec<MetricsRow>,
    pub timings: Vec<TimingRow>,
    /// Transitions seen per training task.
    pub steps_per_task: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub rows: Vec<MetricsRow>,
    pub timings: Vec<TimingRow>,
    pub traces: Vec<TraceRow>,
    pub model_checksum: String,
}

fn random_action(ad: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..ad).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Runs one episode. `policy` sees the current observation and the
/// episode's transitions so far.
fn run_episode<P>(env: &mut EnvInstance, episode: usize, mut policy: P) -> Result<(Vec<TransitionRecord>, f64)>
where
    P: FnMut(&[f64], &[TransitionRecord]) -> Result<Vec<f64>>,
{
    let mut obs = env.reset();
    let mut records = Vec::with_capacity(env.episode_len());
    let mut ret = 0.0;
    loop {
        let action = policy(&obs, &records)?;
        let st = env.step(&action)?;
        ret += st.reward;
        records.push(TransitionRecord {
            task: env.task().id,
            episode,
            step: records.len(),
            s: obs,
            a: action,
            r: st.reward,
            s_next: st.obs.clone(),
            done: st.done,
        });
        obs = st.obs;
        if st.done || st.truncated {
            return Ok((records, ret));
        }
    }
}

fn mpc_action(
    obs: &[f64],
    model: &WorldModel<f64>,
    post: Option<&TaskPosterior<f64>>,
    family: Family,
    cem: &CemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut rollout = LearnedRollout::new(model, post, |s: &[f64]| early_termination(family, s))?;
    Ok(plan_action(obs, &mut rollout, cem, rng)?.0)
}

fn new_models(cfg: &ExperimentConfig, train: &[TaskDescriptor], rng: &mut ChaCha8Rng) -> Result<ModelSet> {
    let shape = cfg.model_shape();
    if cfg.mode.per_task_models() {
        let mut ms = BTreeMap::new();
        for t in train {
            ms.insert(t.id, WorldModel::new(cfg.layout()?, &shape, rng)?);
        }
        Ok(ModelSet::PerTask(ms))
    } else {
        Ok(ModelSet::Shared(WorldModel::new(cfg.layout()?, &shape, rng)?))
    }
}

fn fit_models(
    models: &mut ModelSet,
    posteriors: &mut BTreeMap<usize, TaskPosterior<f64>>,
    buffer: &ReplayBuffer,
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let tc = cfg.train_config();
    let data = buffer.all_data()?;
    match models {
        ModelSet::Shared(m) => {
            let r = train_phase(m, posteriors, &data, &tc, rng)?;
            info!("fit shared model: {} steps, final loss {:.4}", r.optimizer_steps, r.final_loss);
        }
        ModelSet::PerTask(ms) => {
            for (t, m) in ms.iter_mut() {
                let own: BTreeMap<_, _> = data.get(t).map(|d| (*t, d.clone())).into_iter().collect();
                let mut none = BTreeMap::new();
                train_phase(m, &mut none, &own, &tc, rng)?;
            }
        }
    }
    Ok(())
}

/// Output directory handling: `None` keeps everything in memory.
struct Sink<'a>(Option<&'a Path>);

impl Sink<'_> {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.0.map(|d| d.join(name))
    }
}

pub fn run_training(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let sink = Sink(out);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        if dir.join(METRICS_FILE).exists() {
            return Err(Error::Invalid(format!("{} already holds a run; pick a fresh --out", dir.display())));
        }
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    }
    let split = make_task_split(cfg.family, cfg.seed, cfg.holdout_deg)?;
    if let Some(p) = sink.path(MANIFEST_FILE) {
        std::fs::write(p, split.to_manifest())?;
    }
    let (sd, ad) = (cfg.family.obs_dim(), cfg.family.action_dim());
    let mut buffer = ReplayBuffer::new(sd, ad);
    buffer.forbid(split.weak.iter().chain(&split.strong).map(|t| t.id));

    let mut data_rng = stream(cfg.seed, STREAM_DATA);
    let mut model_rng = stream(cfg.seed, STREAM_MODEL);
    let mut plan_rng = stream(cfg.seed, STREAM_PLAN);

    let mut models = new_models(cfg, &split.train, &mut model_rng)?;
    let layout = cfg.layout()?;
    let mut posteriors: BTreeMap<usize, TaskPosterior<f64>> = if layout.mode() == LayoutMode::None {
        BTreeMap::new()
    } else {
        split.train.iter().map(|t| (t.id, TaskPosterior::new(t.id, &layout))).collect()
    };

    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mode = cfg.mode.to_string();
    let mut record = |rows: &mut Vec<MetricsRow>, task: usize, episode: usize, ret: f64, steps: usize, post: Option<&TaskPosterior<f64>>, secs: f64| {
        rows.push(MetricsRow {
            seed: cfg.seed,
            mode: mode.clone(),
            phase: "train".into(),
            task,
            episode,
            ret,
            steps,
            posterior: post.map(snapshot).unwrap_or_default(),
        });
        timings.push(TimingRow { seed: cfg.seed, mode: mode.clone(), phase: "train".into(), task, episode, seconds: secs });
    };

    for t in &split.train {
        let clock = Instant::now();
        let mut env = EnvInstance::new(t.clone()).with_episode_len(cfg.episode_len());
        let (recs, ret) = run_episode(&mut env, 0, |_, _| Ok(random_action(ad, &mut data_rng)))?;
        let n = recs.len();
        buffer.append_episode(recs)?;
        record(&mut rows, t.id, 0, ret, n, posteriors.get(&t.id), clock.elapsed().as_secs_f64());
    }

    let save = |models: &ModelSet, posteriors: &BTreeMap<usize, TaskPosterior<f64>>, round: usize, name: &str| -> Result<Checkpoint> {
        let ck = Checkpoint { config: cfg.clone(), round, models: models.clone(), posteriors: posteriors.clone() };
        if let Some(p) = sink.path(name) {
            ck.save(&p)?;
        }
        Ok(ck)
    };
    let fit = |models: &mut ModelSet,
               posteriors: &mut BTreeMap<usize, TaskPosterior<f64>>,
               buffer: &ReplayBuffer,
               round: usize,
               rng: &mut ChaCha8Rng|
     -> Result<()> {
        if !cfg.learn {
            return Ok(());
        }
        match fit_models(models, posteriors, buffer, cfg, rng) {
            Err(e @ Error::NonFinite { .. }) => {
                save(models, posteriors, round, DIAGNOSTIC_FILE)?;
                Err(e)
            }
            other => other,
        }
    };

    let cem = cfg.cem_train();
    for round in 1..=cfg.train_rounds {
        fit(&mut models, &mut posteriors, &buffer, round - 1, &mut model_rng)?;
        for t in &split.train {
            let clock = Instant::now();
            let model = models.for_task(t.id).ok_or_else(|| Error::unknown("model for task", t.id.to_string()))?;
            let post = posteriors.get(&t.id);
            let mut env = EnvInstance::new(t.clone()).with_episode_len(cfg.episode_len());
            let (recs, ret) =
                run_episode(&mut env, round, |obs, _| mpc_action(obs, model, post, cfg.family, &cem, &mut plan_rng))?;
            let n = recs.len();
            buffer.append_episode(recs)?;
            record(&mut rows, t.id, round, ret, n, post, clock.elapsed().as_secs_f64());
        }
        info!("round {round}/{}: mean return {:.3}", cfg.train_rounds, mean_return(&rows, round));
        save(&models, &posteriors, round, CHECKPOINT_FILE)?;
    }
    fit(&mut models, &mut posteriors, &buffer, cfg.train_rounds, &mut model_rng)?;
    let checkpoint = save(&models, &posteriors, cfg.train_rounds, CHECKPOINT_FILE)?;

    if let Some(p) = sink.path(METRICS_FILE) {
        write_metrics(&rows, &p)?;
    }
    if let Some(p) = sink.path(TIMINGS_FILE) {
        write_timings(&timings, &p)?;
    }
    let steps_per_task = split.train.iter().map(|t| (t.id, buffer.len(t.id))).collect();
    Ok(TrainOutput { checkpoint, split, rows, timings, steps_per_task })
}

fn mean_return(rows: &[MetricsRow], episode: usize) -> f64 {
    let r: Vec<f64> = rows.iter().filter(|r| r.episode == episode).map(|r| r.ret).collect();
    r.iter().sum::<f64>() / r.len().max(1) as f64
}

/// Posterior-only adaptation on the weak or strong split.
pub fn run_adaptation_eval(ckpt: &Checkpoint, split: Split, out: Option<&Path>) -> Result<EvalOutput> {
    let cfg = &ckpt.config;
    if split == Split::Train {
        return Err(Error::Invalid("adaptation runs on the weak or strong split".into()));
    }
    let tasks = make_task_split(cfg.family, cfg.seed, cfg.holdout_deg)?;
    let set = tasks.tasks(split);
    if set.is_empty() {
        return Err(Error::Exhausted(format!("{split} split is empty")));
    }
    let before = ckpt.models.checksum();
    let layout = cfg.layout()?;
    let cem = cfg.cem_test();
    let inf = cfg.inference_config();
    let (sd, ad) = (cfg.family.obs_dim(), cfg.family.action_dim());
    let mut rng = stream(cfg.seed, STREAM_EVAL + split as u64);
    let mode = cfg.mode.to_string();
    let phase = split.to_string();
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut traces = Vec::new();
    for t in set {
        let model = ckpt.models.for_task(t.id).ok_or_else(|| {
            Error::Invalid(format!("{} mode has no model for unseen task {}", cfg.mode, t.id))
        })?;
        let mut post = (layout.mode() != LayoutMode::None).then(|| TaskPosterior::new(t.id, &layout));
        let mut seen: Vec<TransitionRecord> = Vec::new();
        for episode in 1..=cfg.eval_episodes {
            let clock = Instant::now();
            let mut env = EnvInstance::new(t.clone()).with_episode_len(cfg.episode_len());
            let mut ep_traces = Vec::new();
            let (recs, ret) = run_episode(&mut env, episode, |obs, recs| {
                if let Some(p) = post.as_mut() {
                    if !recs.is_empty() && recs.len() % cfg.svi_every == 0 {
                        let all: Vec<TransitionRecord> = seen.iter().chain(recs).cloned().collect();
                        let data = records_to_data(sd, ad, &all)?;
                        testtime_inference_step(model, p, &data, &inf, &mut rng)?;
                        ep_traces.extend(trace_rows(t.id, episode, recs.len(), &snapshot(p)));
                    }
                }
                mpc_action(obs, model, post.as_ref(), cfg.family, &cem, &mut rng)
            })?;
            traces.extend(ep_traces);
            let steps = recs.len();
            seen.extend(recs);
            rows.push(MetricsRow {
                seed: cfg.seed,
                mode: mode.clone(),
                phase: phase.clone(),
                task: t.id,
                episode,
                ret,
                steps,
                posterior: post.as_ref().map(snapshot).unwrap_or_default(),
            });
            timings.push(TimingRow {
                seed: cfg.seed,
                mode: mode.clone(),
                phase: phase.clone(),
                task: t.id,
                episode,
                seconds: clock.elapsed().as_secs_f64(),
            });
        }
        info!("{phase} task {}: returns {:?}", t.id, rows.iter().filter(|r| r.task == t.id).map(|r| r.ret).collect::<Vec<_>>());
    }
    let after = ckpt.models.checksum();
    if before != after {
        return Err(Error::Invalid("network parameters changed during adaptation".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_metrics(&rows, &dir.join(METRICS_FILE))?;
        write_timings(&timings, &dir.join(TIMINGS_FILE))?;
        if !traces.is_empty() {
            write_traces(&traces, &dir.join(format!("traces_{phase}.csv")))?;
        }
    }
    Ok(EvalOutput { rows, timings, traces, model_checksum: after })
}
