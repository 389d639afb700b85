//! Latent inference on cartpole with the true physics as the model.
//!
//! Nothing is learned: the simulator's own equations, with the hidden
//! parameters replaced by `softplus(z)`, give the likelihood, and only the
//! posterior over `z_a`, `z_l`, `z_x` is fitted. Control is random search
//! through the same equations with latents drawn from the posterior.
//!
//! Schedule per task: episode 0 records the prior, episode 1 runs a random
//! policy, later episodes plan. From `switch_episode` on, the goal
//! position changes.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::buffer::{records_to_data, TransitionRecord};
use super::config::{key_values, parse};
use super::metrics::{snapshot, trace_rows, DistanceRow, FactorSnapshot, MetricsRow, TraceRow};
use crate::envs::{cartpole, cartpole_step, CartpoleParams, CartpoleState, EnvInstance, HiddenParams, TaskDescriptor};
use crate::error::{Error, Result};
use crate::gradcore::{Array, Graph, Node};
use crate::latent::{standard_normal, FactorKind, FactorSpec, LatentLayout, TaskPosterior};
use crate::objective::{fit_posterior, TaskData};
use crate::planner::{plan_action, CemConfig, RolloutModel};

pub const TOY_FACTORS: [&str; 3] = ["z_a", "z_l", "z_x"];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    /// Episodes after the prior-only episode 0.
    pub episodes: usize,
    pub switch_episode: usize,
    /// New goal position per task id.
    pub switched_goal: BTreeMap<usize, f64>,
    pub episode_len: usize,
    /// Observation and reward noise of the likelihood.
    pub obs_std: f64,
    pub reward_std: f64,
    /// Iterations and rate of the fit after each random episode and at
    /// each in-episode update.
    pub svi_iterations: usize,
    pub svi_lr: f64,
    pub svi_every: usize,
    pub population: usize,
    pub horizon: usize,
    pub particles: usize,
}

impl ToyConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            episodes: 5,
            switch_episode: 4,
            switched_goal: [(0, 2.0), (1, 0.5)].into_iter().collect(),
            episode_len: cartpole::EPISODE_LEN,
            obs_std: 0.05,
            reward_std: 0.1,
            svi_iterations: 300,
            svi_lr: 0.05,
            svi_every: 50,
            population: 512,
            horizon: 20,
            particles: 4,
        }
    }

    /// Applies `key = value` lines; `switched_goal` is written
    /// `task:goal,task:goal`.
    pub fn apply_text(mut self, text: &str) -> Result<Self> {
        for (no, k, v) in key_values(text)? {
            let k = k.as_str();
            let r: Result<()> = (|| {
                match k {
                    "seed" => self.seed = parse(k, &v)?,
                    "episodes" => self.episodes = parse(k, &v)?,
                    "switch_episode" => self.switch_episode = parse(k, &v)?,
                    "episode_len" => self.episode_len = parse(k, &v)?,
                    "obs_std" => self.obs_std = parse(k, &v)?,
                    "reward_std" => self.reward_std = parse(k, &v)?,
                    "svi_iterations" => self.svi_iterations = parse(k, &v)?,
                    "svi_lr" => self.svi_lr = parse(k, &v)?,
                    "svi_every" => self.svi_every = parse(k, &v)?,
                    "population" => self.population = parse(k, &v)?,
                    "horizon" => self.horizon = parse(k, &v)?,
                    "particles" => self.particles = parse(k, &v)?,
                    "switched_goal" => {
                        self.switched_goal = v
                            .split(',')
                            .map(|pair| {
                                let (t, g) = pair.split_once(':').ok_or_else(|| Error::Invalid(format!("bad pair `{pair}`")))?;
                                Ok((parse(k, t.trim())?, parse(k, g.trim())?))
                            })
                            .collect::<Result<_>>()?
                    }
                    _ => return Err(Error::unknown("toy config key", k)),
                }
                Ok(())
            })();
            r.map_err(|e| Error::Invalid(format!("config line {no}: {e}")))?;
        }
        Ok(self)
    }

    fn cem(&self) -> CemConfig {
        let mut c = CemConfig::unit(cartpole::ACTION_DIM).random_search();
        c.population = self.population;
        c.horizon = self.horizon;
        c.particles = self.particles;
        c
    }
}

pub fn toy_layout() -> LatentLayout {
    LatentLayout::structured(vec![
        FactorSpec::new("z_a", 1, FactorKind::Agent),
        FactorSpec::new("z_l", 1, FactorKind::Dynamics),
        FactorSpec::new("z_x", 1, FactorKind::Reward),
    ])
    .expect("three distinct factors")
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn state_from_obs(o: &[f64]) -> CartpoleState {
    CartpoleState { x: o[0], x_dot: o[1], theta: o[3].atan2(o[2]), theta_dot: o[4] }
}

/// The simulator as a rollout model; the latent row holds `(η_a, η_l, η_x)`.
struct KnownCartpole<'a> {
    posterior: &'a TaskPosterior<f64>,
}

impl RolloutModel<f64> for KnownCartpole<'_> {
    fn state_dim(&self) -> usize {
        cartpole::OBS_DIM
    }

    fn action_dim(&self) -> usize {
        cartpole::ACTION_DIM
    }

    fn members(&self) -> usize {
        1
    }

    fn latent_width(&self) -> usize {
        3
    }

    fn sample_latent(&mut self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        TOY_FACTORS.iter().map(|f| Ok(softplus(self.posterior.sample(f, rng)?[0]))).collect()
    }

    fn step(
        &self,
        _member: usize,
        states: &Array<f64>,
        actions: &Array<f64>,
        latents: &Array<f64>,
        _rng: &mut dyn RngCore,
    ) -> Result<(Array<f64>, Vec<f64>)> {
        let n = states.rows();
        let mut next = Vec::with_capacity(n * cartpole::OBS_DIM);
        let mut rewards = Vec::with_capacity(n);
        for i in 0..n {
            let z = latents.row(i);
            let p = CartpoleParams { eta_a: z[0], eta_l: z[1], eta_x: z[2] };
            let (s, r, _) = cartpole_step(&state_from_obs(states.row(i)), actions.row(i)[0], &p);
            next.extend(s.observe());
            rewards.push(r);
        }
        Ok((Array::matrix(n, cartpole::OBS_DIM, next)?, rewards))
    }
}

/// Negative log likelihood of `data` under the simulator with the given
/// `[1]` latent nodes.
fn physics_nll(g: &mut Graph<f64>, data: &TaskData<f64>, z: [Node; 3], obs_std: f64, reward_std: f64) -> Result<Node> {
    use cartpole::*;
    let n = data.len();
    let col = |f: &dyn Fn(&[f64]) -> f64, a: &Array<f64>| Array::matrix(n, 1, (0..n).map(|i| f(a.row(i))).collect());
    let mut eta = Vec::with_capacity(3);
    for zi in z {
        let sp = g.softplus(zi)?;
        eta.push(g.tile_rows(sp, n)?);
    }
    let (eta_a, eta_l, eta_x) = (eta[0], eta[1], eta[2]);
    let mut x = g.constant(col(&|r| r[0], &data.s)?);
    let mut xd = g.constant(col(&|r| r[1], &data.s)?);
    let mut th = g.constant(col(&|r| r[3].atan2(r[2]), &data.s)?);
    let mut thd = g.constant(col(&|r| r[4], &data.s)?);
    let f_unit = g.constant(col(&|r| MAX_FORCE * r[0].clamp(-1.0, 1.0), &data.a)?);
    let force = g.mul(eta_a, f_unit)?;
    let h = DT / SUBSTEPS as f64;
    for _ in 0..SUBSTEPS {
        let c = g.cos(th)?;
        let s = g.sin(th)?;
        // x_acc = (F + m_p s (l θ̇² − g c)) / (m_c + m_p s²)
        let thd2 = g.square(thd)?;
        let l_thd2 = g.mul(eta_l, thd2)?;
        let gc = g.scale(c, GRAVITY)?;
        let inner = g.sub(l_thd2, gc)?;
        let s_inner = g.mul(s, inner)?;
        let mp_s_inner = g.scale(s_inner, POLE_MASS)?;
        let num = g.add(force, mp_s_inner)?;
        let s2 = g.square(s)?;
        let mp_s2 = g.scale(s2, POLE_MASS)?;
        let den = g.shift(mp_s2, CART_MASS)?;
        let xa = g.div(num, den)?;
        // θ_acc = (g s − c x_acc) / l
        let gs = g.scale(s, GRAVITY)?;
        let cxa = g.mul(c, xa)?;
        let tnum = g.sub(gs, cxa)?;
        let ta = g.div(tnum, eta_l)?;
        let dxd = g.scale(xa, h)?;
        xd = g.add(xd, dxd)?;
        let dthd = g.scale(ta, h)?;
        thd = g.add(thd, dthd)?;
        let dx = g.scale(xd, h)?;
        x = g.add(x, dx)?;
        let dth = g.scale(thd, h)?;
        th = g.add(th, dth)?;
    }
    let c = g.cos(th)?;
    let s = g.sin(th)?;
    let pred = g.concat(&[x, xd, c, s, thd])?;
    let lv_s = g.constant(Array::full(&[n, OBS_DIM], (obs_std * obs_std).ln()));
    let nll_s = g.gaussian_nll(&data.s_next, pred, lv_s)?;
    let l_s = g.mul(eta_l, s)?;
    let tip = g.add(x, l_s)?;
    let gap = g.sub(eta_x, tip)?;
    let gap2 = g.square(gap)?;
    let r_pred = g.neg(gap2)?;
    let lv_r = g.constant(Array::full(&[n, 1], (reward_std * reward_std).ln()));
    let nll_r = g.gaussian_nll(&data.r, r_pred, lv_r)?;
    g.add(nll_s, nll_r)
}

/// Negative ELBO with one antithetic pair of latent draws.
fn toy_loss<R: Rng + ?Sized>(
    g: &mut Graph<f64>,
    post: &TaskPosterior<f64>,
    data: &TaskData<f64>,
    cfg: &ToyConfig,
    rng: &mut R,
) -> Result<Node> {
    let eps: Vec<f64> = standard_normal(3, rng);
    let mut terms = Vec::with_capacity(2);
    for sign in [1.0, -1.0] {
        let mut z = Vec::with_capacity(3);
        for (k, f) in TOY_FACTORS.iter().enumerate() {
            z.push(post.sample_with(g, f, &[sign * eps[k]])?);
        }
        terms.push(physics_nll(g, data, [z[0], z[1], z[2]], cfg.obs_std, cfg.reward_std)?);
    }
    let pair = g.add(terms[0], terms[1])?;
    let nll = g.scale(pair, 0.5)?;
    let (kl, _) = post.kl_to_prior(g)?;
    g.add(nll, kl)
}

fn fit(post: &mut TaskPosterior<f64>, records: &[TransitionRecord], cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let data = records_to_data(cartpole::OBS_DIM, cartpole::ACTION_DIM, records)?;
    fit_posterior(post, cfg.svi_iterations, cfg.svi_lr, rng, |g, p, r| toy_loss(g, p, &data, cfg, r))?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct ToyOutput {
    pub rows: Vec<MetricsRow>,
    pub traces: Vec<TraceRow>,
    pub distances: Vec<DistanceRow>,
    /// Posterior at the end of each `(task, episode)`.
    pub end_of_episode: BTreeMap<(usize, usize), Vec<FactorSnapshot>>,
}

impl ToyOutput {
    /// Mean distance to the goal over an episode.
    pub fn mean_distance(&self, task: usize, episode: usize) -> Option<f64> {
        let d: Vec<f64> =
            self.distances.iter().filter(|r| r.task == task && r.episode == episode).map(|r| r.distance).collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Posterior mean of a one-dimensional factor at the end of an episode.
    pub fn mean_at(&self, task: usize, episode: usize, factor: &str) -> Option<f64> {
        self.end_of_episode.get(&(task, episode))?.iter().find(|f| f.factor == factor).map(|f| f.mean[0])
    }
}

fn goal_and_length(task: &TaskDescriptor) -> Result<CartpoleParams> {
    match task.params {
        HiddenParams::Cartpole(p) => Ok(p),
        _ => Err(Error::Invalid("the inference demo runs on cartpole tasks".into())),
    }
}

pub fn run_toy_demo(tasks: &[TaskDescriptor], cfg: &ToyConfig) -> Result<ToyOutput> {
    if cfg.svi_every == 0 || cfg.episodes == 0 {
        return Err(Error::Invalid("toy demo needs svi_every > 0 and at least one episode".into()));
    }
    let layout = toy_layout();
    let mut out = ToyOutput::default();
    for task in tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(task.id as u64);
        let mut env = EnvInstance::new(task.clone()).with_episode_len(cfg.episode_len);
        let mut post = TaskPosterior::<f64>::new(task.id, &layout);
        let prior = snapshot(&post);
        out.traces.extend(trace_rows(task.id, 0, 0, &prior));
        out.end_of_episode.insert((task.id, 0), prior.clone());
        out.rows.push(MetricsRow {
            seed: cfg.seed,
            mode: "toy".into(),
            phase: "toy".into(),
            task: task.id,
            episode: 0,
            ret: 0.0,
            steps: 0,
            posterior: prior,
        });
        for episode in 1..=cfg.episodes {
            if episode == cfg.switch_episode {
                let mut p = goal_and_length(env.task())?;
                p.eta_x = *cfg
                    .switched_goal
                    .get(&task.id)
                    .ok_or_else(|| Error::unknown("switched goal for task", task.id.to_string()))?;
                env.set_params(HiddenParams::Cartpole(p))?;
            }
            let truth = goal_and_length(env.task())?;
            let mut obs = env.reset();
            let mut records: Vec<TransitionRecord> = Vec::with_capacity(cfg.episode_len);
            let mut ret = 0.0;
            let mut step = 0;
            loop {
                let action = if episode == 1 {
                    vec![rng.random_range(-1.0..=1.0)]
                } else {
                    plan_action(&obs, &mut KnownCartpole { posterior: &post }, &cfg.cem(), &mut rng)?.0
                };
                let st = env.step(&action)?;
                let tip = env.cartpole_state().expect("cartpole env").tip_x(truth.eta_l);
                out.distances.push(DistanceRow { task: task.id, episode, step, distance: (truth.eta_x - tip).abs() });
                records.push(TransitionRecord {
                    task: task.id,
                    episode,
                    step,
                    s: obs,
                    a: action,
                    r: st.reward,
                    s_next: st.obs.clone(),
                    done: st.done,
                });
                ret += st.reward;
                obs = st.obs;
                step += 1;
                let last = st.done || st.truncated;
                if last || (episode > 1 && step % cfg.svi_every == 0) {
                    fit(&mut post, &records, cfg, &mut rng)?;
                }
                out.traces.extend(trace_rows(task.id, episode, step, &snapshot(&post)));
                if last {
                    break;
                }
            }
            let snap = snapshot(&post);
            out.end_of_episode.insert((task.id, episode), snap.clone());
            out.rows.push(MetricsRow {
                seed: cfg.seed,
                mode: "toy".into(),
                phase: "toy".into(),
                task: task.id,
                episode,
                ret,
                steps: step,
                posterior: snap,
            });
        }
    }
    Ok(out)
}

/// `softplus` of a posterior mean, the positive parameter it encodes.
pub fn implied_parameter(z_mean: f64) -> f64 {
    softplus(z_mean)
}
