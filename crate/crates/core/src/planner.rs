//! Cross-entropy-method model-predictive control with particle rollouts.
//!
//! Each call to [`plan_action`] draws `P` particles. Particle `p` is bound
//! to ensemble member `p mod M` and to one latent sample for the whole
//! rollout (TS-∞). Every candidate action sequence is evaluated on the same
//! particle set, so candidates are compared under common randomness.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gradcore::Array;
use crate::latent::TaskPosterior;
use crate::models::{dyn_sample, reward_forward};
use crate::objective::WorldModel;
use crate::scalar::Scalar;

pub const TRAIN_DONE_PENALTY: f64 = 0.0;
pub const TEST_DONE_PENALTY: f64 = -100.0;

/// Which action [`plan_action`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSelect {
    /// First step of the final proposal mean.
    ProposalMean,
    /// First step of the best candidate ever scored.
    BestCandidate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub horizon: usize,
    pub particles: usize,
    pub done_penalty: f64,
    /// Weight on the previous proposal when blending in the elite statistics.
    pub smoothing: f64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub variance_floor: f64,
    pub select: ActionSelect,
}

impl CemConfig {
    /// Defaults with training-time penalty for the given action bounds.
    pub fn new(action_low: Vec<f64>, action_high: Vec<f64>) -> Self {
        Self {
            population: 512,
            elite_fraction: 0.1,
            iterations: 5,
            horizon: 25,
            particles: 20,
            done_penalty: TRAIN_DONE_PENALTY,
            smoothing: 0.1,
            action_low,
            action_high,
            variance_floor: 1e-6,
            select: ActionSelect::ProposalMean,
        }
    }

    /// Symmetric bounds `[-1, 1]` in every action dimension.
    pub fn unit(action_dim: usize) -> Self {
        Self::new(vec![-1.0; action_dim], vec![1.0; action_dim])
    }

    pub fn for_test(mut self) -> Self {
        self.done_penalty = TEST_DONE_PENALTY;
        self
    }

    /// Pure random shooting: one round of sampling, proposal left as is,
    /// best candidate executed.
    pub fn random_search(mut self) -> Self {
        self.iterations = 1;
        self.smoothing = 1.0;
        self.select = ActionSelect::BestCandidate;
        self
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn n_elites(&self) -> usize {
        ((self.population as f64 * self.elite_fraction).round() as usize).max(2)
    }

    pub fn validate(&self, members: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.action_low.len() != self.action_high.len() || self.action_low.is_empty() {
            return bad("action bounds must be nonempty and of equal length".into());
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return bad("each action lower bound must be below its upper bound".into());
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return bad(format!("elite fraction {} outside (0, 1]", self.elite_fraction));
        }
        if self.n_elites() > self.population {
            return bad(format!("{} elites from a population of {}", self.n_elites(), self.population));
        }
        if self.iterations == 0 || self.horizon == 0 || self.particles == 0 {
            return bad("iterations, horizon and particles must be positive".into());
        }
        if members == 0 || self.particles % members != 0 {
            return bad(format!("{} particles do not divide over {members} ensemble members", self.particles));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return bad(format!("smoothing {} outside [0, 1]", self.smoothing));
        }
        if !(self.variance_floor > 0.0) {
            return bad("variance floor must be positive".into());
        }
        Ok(())
    }
}

/// `h` independent diagonal Gaussians over actions, stored time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionProposal<S> {
    pub horizon: usize,
    pub action_dim: usize,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> ActionProposal<S> {
    /// Mean 0 clamped into the bounds, variance `(range/2)²`.
    pub fn initial(cfg: &CemConfig) -> Self {
        let ad = cfg.action_dim();
        let mut mean = Vec::with_capacity(cfg.horizon * ad);
        let mut var = Vec::with_capacity(cfg.horizon * ad);
        for _ in 0..cfg.horizon {
            for d in 0..ad {
                let (lo, hi) = (cfg.action_low[d], cfg.action_high[d]);
                mean.push(S::lit(0.0f64.clamp(lo, hi)));
                var.push(S::lit(((hi - lo) / 2.0).powi(2)));
            }
        }
        Self { horizon: cfg.horizon, action_dim: ad, mean, var }
    }

    /// Differential entropy of the whole proposal, in nats.
    pub fn entropy(&self) -> S {
        let c = S::lit((2.0 * std::f64::consts::PI * std::f64::consts::E).ln());
        self.var.iter().fold(S::zero(), |acc, &v| acc + S::lit(0.5) * (c + v.ln()))
    }

    /// Clamped candidate draws, `[population, horizon·action_dim]`.
    pub fn sample<R: Rng + ?Sized>(&self, cfg: &CemConfig, rng: &mut R) -> Array<S> {
        let n = self.mean.len();
        let mut data = Vec::with_capacity(cfg.population * n);
        for _ in 0..cfg.population {
            for i in 0..n {
                let d = i % self.action_dim;
                let eps: f64 = rng.sample(StandardNormal);
                let a = self.mean[i] + self.var[i].sqrt() * S::lit(eps);
                data.push(clamp(a, cfg.action_low[d], cfg.action_high[d]));
            }
        }
        Array::matrix(cfg.population, n, data).expect("candidate buffer sized to its shape")
    }
}

fn clamp<S: Scalar>(x: S, lo: f64, hi: f64) -> S {
    x.max(S::lit(lo)).min(S::lit(hi))
}

/// Refits the proposal to the elites of `candidates` under `scores`.
///
/// Elites are the top `n_elites` scores, with ties going to the lower
/// candidate index. When every score is `-∞` the proposal is returned
/// unchanged and a warning is logged.
pub fn cem_iterate<S: Scalar>(
    proposal: &ActionProposal<S>,
    candidates: &Array<S>,
    scores: &[S],
    cfg: &CemConfig,
) -> Result<ActionProposal<S>> {
    let n = proposal.mean.len();
    if scores.len() != candidates.rows() || candidates.cols() != n {
        return Err(Error::shape(
            "cem_iterate",
            format!("{} scores for candidates {:?} against a proposal of length {n}", scores.len(), candidates.shape()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { context: "candidate scores".into() });
    }
    if scores.iter().all(|&s| s == S::neg_infinity()) {
        log::warn!("all {} candidate scores are -inf; proposal left unchanged", scores.len());
        return Ok(proposal.clone());
    }
    let elites = elite_indices(scores, cfg.n_elites().min(scores.len()));
    let k = S::from_usize_lossy(elites.len());
    let alpha = S::lit(cfg.smoothing);
    let floor = S::lit(cfg.variance_floor);
    let mut next = proposal.clone();
    for i in 0..n {
        let mu = elites.iter().fold(S::zero(), |acc, &e| acc + candidates.get2(e, i)) / k;
        let var = elites.iter().fold(S::zero(), |acc, &e| {
            let d = candidates.get2(e, i) - mu;
            acc + d * d
        }) / k;
        let d = i % proposal.action_dim;
        let m = alpha * proposal.mean[i] + (S::one() - alpha) * mu;
        next.mean[i] = clamp(m, cfg.action_low[d], cfg.action_high[d]);
        next.var[i] = (alpha * proposal.var[i] + (S::one() - alpha) * var).max(floor);
    }
    Ok(next)
}

/// Indices of the `k` best scores, best first; ties go to the lower index.
pub fn elite_indices<S: Scalar>(scores: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

/// A stochastic model the planner can roll particles through.
pub trait RolloutModel<S: Scalar> {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn members(&self) -> usize;
    /// Width of the per-particle latent row; 0 for latent-free models.
    fn latent_width(&self) -> usize;
    /// One latent draw for a particle, `latent_width()` values.
    fn sample_latent(&mut self, rng: &mut dyn rand::RngCore) -> Result<Vec<S>>;
    /// Steps rows of `states` under `actions` through `member`, returning
    /// next states and one sampled reward per row.
    fn step(
        &self,
        member: usize,
        states: &Array<S>,
        actions: &Array<S>,
        latents: &Array<S>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Array<S>, Vec<S>)>;
    /// Early-termination predicate on a single state.
    fn terminal(&self, _state: &[S]) -> bool {
        false
    }
}

/// A particle's fixed assignment for one planning call.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleContext<S> {
    pub member: usize,
    pub latent: Vec<S>,
}

/// Draws `P` contexts with members assigned round-robin.
pub fn draw_particles<S: Scalar, M: RolloutModel<S> + ?Sized>(
    model: &mut M,
    particles: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<ParticleContext<S>>> {
    let members = model.members();
    (0..particles).map(|p| Ok(ParticleContext { member: p % members, latent: model.sample_latent(rng)? })).collect()
}

/// Expected return of each candidate row over all particles.
///
/// A candidate any of whose particles terminates, or produces a non-finite
/// state or reward, scores exactly `cfg.done_penalty`.
pub fn rollout_particles<S: Scalar, M: RolloutModel<S> + ?Sized>(
    state: &[S],
    candidates: &Array<S>,
    particles: &[ParticleContext<S>],
    model: &M,
    cfg: &CemConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<S>> {
    let (sd, ad, lw) = (model.state_dim(), model.action_dim(), model.latent_width());
    if state.len() != sd || candidates.cols() != cfg.horizon * ad {
        return Err(Error::shape(
            "rollout_particles",
            format!("state of length {} (want {sd}), candidates {:?} for horizon {}", state.len(), candidates.shape(), cfg.horizon),
        ));
    }
    if particles.iter().any(|p| p.latent.len() != lw || p.member >= model.members()) {
        return Err(Error::Invalid("particle context does not match the model".into()));
    }
    let pop = candidates.rows();
    let np = particles.len();
    let rows = pop * np;
    let mut states: Vec<S> = state.iter().copied().cycle().take(rows * sd).collect();
    let mut returns = vec![S::zero(); rows];
    let mut failed = vec![false; pop];
    let groups: Vec<Vec<usize>> = (0..model.members())
        .map(|m| (0..rows).filter(|r| particles[r % np].member == m).collect())
        .collect();
    for t in 0..cfg.horizon {
        for (member, group) in groups.iter().enumerate() {
            let live: Vec<usize> = group.iter().copied().filter(|&r| !failed[r / np]).collect();
            if live.is_empty() {
                continue;
            }
            let mut s = Vec::with_capacity(live.len() * sd);
            let mut a = Vec::with_capacity(live.len() * ad);
            let mut z = Vec::with_capacity(live.len() * lw);
            for &r in &live {
                s.extend_from_slice(&states[r * sd..(r + 1) * sd]);
                a.extend_from_slice(&candidates.row(r / np)[t * ad..(t + 1) * ad]);
                z.extend_from_slice(&particles[r % np].latent);
            }
            let n = live.len();
            let (next, rew) = model.step(
                member,
                &Array::matrix(n, sd, s)?,
                &Array::matrix(n, ad, a)?,
                &Array::matrix(n, lw, z)?,
                rng,
            )?;
            if next.shape() != [n, sd] || rew.len() != n {
                return Err(Error::shape("rollout_step", format!("model returned {:?} and {} rewards for {n} rows", next.shape(), rew.len())));
            }
            for (i, &r) in live.iter().enumerate() {
                let ns = next.row(i);
                if !rew[i].is_finite() || ns.iter().any(|v| !v.is_finite()) || model.terminal(ns) {
                    failed[r / np] = true;
                    continue;
                }
                states[r * sd..(r + 1) * sd].copy_from_slice(ns);
                returns[r] = returns[r] + rew[i];
            }
        }
    }
    let penalty = S::lit(cfg.done_penalty);
    let inv = S::one() / S::from_usize_lossy(np);
    Ok((0..pop)
        .map(|c| if failed[c] { penalty } else { returns[c * np..(c + 1) * np].iter().fold(S::zero(), |a, &b| a + b) * inv })
        .collect())
}

/// Diagnostics of one planning call.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutcome<S> {
    /// Mean and max of the elite returns in the last iteration.
    pub elite_mean: S,
    pub elite_max: S,
    /// Best return seen in any iteration.
    pub best_return: S,
    /// Best-so-far return after each iteration.
    pub best_so_far: Vec<S>,
    pub proposal_entropy: S,
    pub proposal: ActionProposal<S>,
}

/// Plans from `state` and returns the action to execute now.
pub fn plan_action<S: Scalar, M: RolloutModel<S> + ?Sized>(
    state: &[S],
    model: &mut M,
    cfg: &CemConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<(Vec<S>, PlanOutcome<S>)> {
    cfg.validate(model.members())?;
    if cfg.action_dim() != model.action_dim() {
        return Err(Error::shape("plan_action", format!("bounds for {} actions, model takes {}", cfg.action_dim(), model.action_dim())));
    }
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "planner start state".into() });
    }
    let ad = cfg.action_dim();
    let particles = draw_particles(model, cfg.particles, rng)?;
    let mut proposal = ActionProposal::<S>::initial(cfg);
    let mut best = (S::neg_infinity(), None::<Vec<S>>);
    let mut best_so_far = Vec::with_capacity(cfg.iterations);
    let (mut elite_mean, mut elite_max) = (S::neg_infinity(), S::neg_infinity());
    for _ in 0..cfg.iterations {
        let candidates = proposal.sample(cfg, rng);
        let scores = rollout_particles(state, &candidates, &particles, &*model, cfg, rng)?;
        let elites = elite_indices(&scores, cfg.n_elites());
        let top = elites[0];
        if best.1.is_none() || scores[top] > best.0 {
            best = (scores[top], Some(candidates.row(top)[..ad].to_vec()));
        }
        best_so_far.push(best.0);
        elite_max = scores[top];
        elite_mean = elites.iter().fold(S::zero(), |a, &e| a + scores[e]) / S::from_usize_lossy(elites.len());
        proposal = cem_iterate(&proposal, &candidates, &scores, cfg)?;
    }
    let action = match cfg.select {
        ActionSelect::ProposalMean => proposal.mean[..ad].to_vec(),
        ActionSelect::BestCandidate => best.1.expect("at least one iteration ran"),
    };
    let outcome = PlanOutcome {
        elite_mean,
        elite_max,
        best_return: best.0,
        best_so_far,
        proposal_entropy: proposal.entropy(),
        proposal,
    };
    Ok((action, outcome))
}

/// Rolls particles through a learned [`WorldModel`] with latents drawn from
/// a task posterior.
pub struct LearnedRollout<'a, S: Scalar, F> {
    model: &'a WorldModel<S>,
    posterior: Option<&'a TaskPosterior<S>>,
    terminal: F,
}

impl<'a, S: Scalar, F: Fn(&[S]) -> bool> LearnedRollout<'a, S, F> {
    pub fn new(model: &'a WorldModel<S>, posterior: Option<&'a TaskPosterior<S>>, terminal: F) -> Result<Self> {
        if model.layout().total_dim() > 0 {
            match posterior {
                None => return Err(Error::Invalid("a latent model needs a task posterior to plan".into())),
                Some(p) if p.layout() != model.layout() => {
                    return Err(Error::Invalid("posterior layout differs from the model layout".into()))
                }
                _ => {}
            }
        }
        Ok(Self { model, posterior, terminal })
    }
}

impl<S: Scalar, F: Fn(&[S]) -> bool> RolloutModel<S> for LearnedRollout<'_, S, F> {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.model.action_dim()
    }

    fn members(&self) -> usize {
        self.model.ensemble_size()
    }

    fn latent_width(&self) -> usize {
        self.model.dynamics().spec().latent_dim + self.model.reward().spec().latent_dim
    }

    fn sample_latent(&mut self, rng: &mut dyn rand::RngCore) -> Result<Vec<S>> {
        let Some(post) = self.posterior.filter(|_| self.model.layout().total_dim() > 0) else {
            return Ok(Vec::new());
        };
        let draws: Vec<(String, Vec<S>)> = self
            .model
            .layout()
            .factors()
            .iter()
            .map(|f| Ok((f.name.clone(), post.sample(&f.name, rng)?)))
            .collect::<Result<_>>()?;
        let pick = |names: &[String]| -> Vec<S> {
            names.iter().flat_map(|n| draws.iter().find(|(m, _)| m == n).map(|(_, v)| v.clone()).unwrap_or_default()).collect()
        };
        let mut row = pick(&self.model.dynamics().spec().latent_factors);
        row.extend(pick(&self.model.reward().spec().latent_factors));
        Ok(row)
    }

    fn step(
        &self,
        member: usize,
        states: &Array<S>,
        actions: &Array<S>,
        latents: &Array<S>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Array<S>, Vec<S>)> {
        let n = states.rows();
        let dd = self.model.dynamics().spec().latent_dim;
        let rd = self.model.reward().spec().latent_dim;
        let split = |lo: usize, w: usize| -> Result<Option<Array<S>>> {
            if w == 0 {
                return Ok(None);
            }
            let data = (0..n).flat_map(|r| latents.row(r)[lo..lo + w].to_vec()).collect();
            Ok(Some(Array::matrix(n, w, data)?))
        };
        let zd = split(0, dd)?;
        let zr = split(dd, rd)?;
        let next = dyn_sample(self.model.dynamics().member(member), states, actions, zd.as_ref(), rng)?;
        let (m, lv) = reward_forward(self.model.reward().member(member), states, actions, &next, zr.as_ref())?;
        let half = S::lit(0.5);
        let rewards = m
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &l)| m + (half * l).exp() * S::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Ok((next, rewards))
    }

    fn terminal(&self, state: &[S]) -> bool {
        (self.terminal)(state)
    }
}
