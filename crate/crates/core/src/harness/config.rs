//! Experiment configuration as flat `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are errors. Lists are comma
//! separated.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::envs::{pointrobot, Family};
use crate::error::{Error, Result};
use crate::latent::{FactorKind, FactorSpec, LatentLayout};
use crate::objective::{InferenceConfig, ModelShape, TrainConfig};
use crate::planner::CemConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    JointLv,
    StructuredLv,
    Generalist,
    Specialist,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::JointLv, Mode::StructuredLv, Mode::Generalist, Mode::Specialist];

    pub fn name(self) -> &'static str {
        match self {
            Mode::JointLv => "joint_lv",
            Mode::StructuredLv => "structured_lv",
            Mode::Generalist => "generalist",
            Mode::Specialist => "specialist",
        }
    }

    pub fn has_latents(self) -> bool {
        matches!(self, Mode::JointLv | Mode::StructuredLv)
    }

    /// One model per training task instead of one shared model.
    pub fn per_task_models(self) -> bool {
        self == Mode::Specialist
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::unknown("mode", s))
    }
}

/// Everything a run depends on. Defaults follow the full-size setup;
/// [`ExperimentConfig::desk`] shrinks it for a single CPU.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub family: Family,
    pub mode: Mode,
    pub seed: u64,
    pub holdout_deg: u32,
    /// Latent dimension per factor of variation.
    pub latent_dim: usize,
    pub ensemble_size: usize,
    pub dynamics_hidden: Vec<usize>,
    pub reward_hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Training-time Adam rate of the task posteriors.
    pub posterior_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub elbo_samples: usize,
    /// MPC episodes per training task after the random-policy episode.
    pub train_rounds: usize,
    /// 0 keeps the family's episode length.
    pub episode_len: usize,
    /// When false, models are never fitted (control condition).
    pub learn: bool,
    pub population: usize,
    pub elite_fraction: f64,
    pub cem_iterations: usize,
    pub horizon: usize,
    pub particles: usize,
    pub smoothing: f64,
    pub variance_floor: f64,
    pub eval_episodes: usize,
    pub svi_every: usize,
    pub svi_iterations: usize,
    /// Test-time rate as a multiple of `learning_rate`.
    pub svi_lr_scale: f64,
    pub svi_samples: usize,
    pub bootstrap_resamples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            family: Family::PointRobot,
            mode: Mode::JointLv,
            seed: 0,
            holdout_deg: pointrobot::HOLDOUT_DEG,
            latent_dim: 4,
            ensemble_size: 5,
            dynamics_hidden: vec![256, 256, 256],
            reward_hidden: vec![32],
            learning_rate: 1e-3,
            posterior_learning_rate: 1e-3,
            batch_size: 64,
            epochs: 20,
            elbo_samples: 2,
            train_rounds: 10,
            episode_len: 0,
            learn: true,
            population: 512,
            elite_fraction: 0.1,
            cem_iterations: 5,
            horizon: 25,
            particles: 20,
            smoothing: 0.1,
            variance_floor: 1e-6,
            eval_episodes: 5,
            svi_every: 10,
            svi_iterations: 100,
            svi_lr_scale: 5.0,
            svi_samples: 2,
            bootstrap_resamples: 10_000,
        }
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| x.trim().parse().map_err(|_| Error::Invalid(format!("`{x}` is not a layer width")))).collect()
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// `(line number, key, value)` of every setting in `text`, rejecting
/// malformed lines and repeated keys.
pub(crate) fn key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("config line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let k = k.trim();
        if !seen.insert(k.to_string()) {
            return Err(Error::Invalid(format!("config line {}: `{k}` set twice", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Invalid(format!("bad value `{v}` for `{key}`")))
}

impl ExperimentConfig {
    /// Small networks and planner budgets that fit a single CPU core.
    pub fn desk(family: Family, mode: Mode, seed: u64) -> Self {
        Self {
            family,
            mode,
            seed,
            latent_dim: 2,
            posterior_learning_rate: 0.02,
            dynamics_hidden: vec![32, 32],
            reward_hidden: vec![32],
            epochs: 20,
            train_rounds: 6,
            population: 64,
            cem_iterations: 3,
            horizon: 8,
            particles: 5,
            eval_episodes: 2,
            ..Self::default()
        }
    }

    /// Ordered `(key, value)` pairs; parsing them back gives `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("family", self.family.to_string()),
            ("mode", self.mode.to_string()),
            ("seed", self.seed.to_string()),
            ("holdout_deg", self.holdout_deg.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("ensemble_size", self.ensemble_size.to_string()),
            ("dynamics_hidden", fmt_list(&self.dynamics_hidden)),
            ("reward_hidden", fmt_list(&self.reward_hidden)),
            ("learning_rate", self.learning_rate.to_string()),
            ("posterior_learning_rate", self.posterior_learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("elbo_samples", self.elbo_samples.to_string()),
            ("train_rounds", self.train_rounds.to_string()),
            ("episode_len", self.episode_len.to_string()),
            ("learn", self.learn.to_string()),
            ("population", self.population.to_string()),
            ("elite_fraction", self.elite_fraction.to_string()),
            ("cem_iterations", self.cem_iterations.to_string()),
            ("horizon", self.horizon.to_string()),
            ("particles", self.particles.to_string()),
            ("smoothing", self.smoothing.to_string()),
            ("variance_floor", self.variance_floor.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("svi_every", self.svi_every.to_string()),
            ("svi_iterations", self.svi_iterations.to_string()),
            ("svi_lr_scale", self.svi_lr_scale.to_string()),
            ("svi_samples", self.svi_samples.to_string()),
            ("bootstrap_resamples", self.bootstrap_resamples.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "family" => self.family = v.parse()?,
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "holdout_deg" => self.holdout_deg = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "ensemble_size" => self.ensemble_size = parse(key, v)?,
            "dynamics_hidden" => self.dynamics_hidden = parse_list(v)?,
            "reward_hidden" => self.reward_hidden = parse_list(v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "posterior_learning_rate" => self.posterior_learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "elbo_samples" => self.elbo_samples = parse(key, v)?,
            "train_rounds" => self.train_rounds = parse(key, v)?,
            "episode_len" => self.episode_len = parse(key, v)?,
            "learn" => self.learn = parse(key, v)?,
            "population" => self.population = parse(key, v)?,
            "elite_fraction" => self.elite_fraction = parse(key, v)?,
            "cem_iterations" => self.cem_iterations = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "particles" => self.particles = parse(key, v)?,
            "smoothing" => self.smoothing = parse(key, v)?,
            "variance_floor" => self.variance_floor = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "svi_every" => self.svi_every = parse(key, v)?,
            "svi_iterations" => self.svi_iterations = parse(key, v)?,
            "svi_lr_scale" => self.svi_lr_scale = parse(key, v)?,
            "svi_samples" => self.svi_samples = parse(key, v)?,
            "bootstrap_resamples" => self.bootstrap_resamples = parse(key, v)?,
            _ => return Err(Error::unknown("config key", key)),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(mut self, text: &str) -> Result<Self> {
        for (no, k, v) in key_values(text)? {
            self.set(&k, &v).map_err(|e| Error::Invalid(format!("config line {no}: {e}")))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::default().apply_text(text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of [`ExperimentConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 || self.batch_size == 0 || self.elbo_samples == 0 {
            return Err(Error::Invalid("ensemble size, batch size and ELBO samples must be positive".into()));
        }
        if self.mode.has_latents() && self.latent_dim == 0 {
            return Err(Error::Invalid("latent modes need latent_dim > 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.posterior_learning_rate > 0.0 && self.svi_lr_scale > 0.0) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        if self.svi_every == 0 {
            return Err(Error::Invalid("svi_every must be positive".into()));
        }
        self.cem_train().validate(self.ensemble_size)
    }

    pub fn episode_len(&self) -> usize {
        if self.episode_len == 0 {
            self.family.episode_len()
        } else {
            self.episode_len
        }
    }

    /// Factors of variation of the family: `(name, kind)`.
    pub fn factors(&self) -> Vec<(&'static str, FactorKind)> {
        match self.family {
            Family::PointRobot => vec![("z_dyn", FactorKind::Dynamics), ("z_rew", FactorKind::Reward)],
            Family::Cartpole => {
                vec![("z_a", FactorKind::Agent), ("z_l", FactorKind::Dynamics), ("z_x", FactorKind::Reward)]
            }
        }
    }

    /// Joint mode uses one latent as wide as all structured factors together.
    pub fn layout(&self) -> Result<LatentLayout> {
        let factors = self.factors();
        match self.mode {
            Mode::JointLv => LatentLayout::joint(self.latent_dim * factors.len()),
            Mode::StructuredLv => LatentLayout::structured(
                factors.into_iter().map(|(n, k)| FactorSpec::new(n, self.latent_dim, k)).collect(),
            ),
            Mode::Generalist | Mode::Specialist => Ok(LatentLayout::none()),
        }
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            state_dim: self.family.obs_dim(),
            action_dim: self.family.action_dim(),
            dynamics_hidden: self.dynamics_hidden.clone(),
            reward_hidden: self.reward_hidden.clone(),
            ensemble_size: self.ensemble_size,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            posterior_learning_rate: self.posterior_learning_rate,
            n_samples: self.elbo_samples,
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            iterations: self.svi_iterations,
            learning_rate: self.svi_lr_scale * self.learning_rate,
            n_samples: self.svi_samples,
        }
    }

    /// Planner settings with the training-time penalty.
    pub fn cem_train(&self) -> CemConfig {
        let mut c = CemConfig::unit(self.family.action_dim());
        c.population = self.population;
        c.elite_fraction = self.elite_fraction;
        c.iterations = self.cem_iterations;
        c.horizon = self.horizon;
        c.particles = self.particles;
        c.smoothing = self.smoothing;
        c.variance_floor = self.variance_floor;
        c
    }

    pub fn cem_test(&self) -> CemConfig {
        self.cem_train().for_test()
    }
}
