//! Variational objectives and the optimization loops built on them.
//!
//! The loss for one task minibatch is
//! `−(1/M) Σ_m [log p_θ(Δs | s, a, z_m) + log p_ω(r | s, a, s', z_m)] + c·KL(q_φ ‖ p)`
//! with `z_m` drawn from the task posterior by reparameterization and `c`
//! the minibatch share of the task's data.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcore::{Array, GradTable, Graph, Node};
use crate::latent::{standard_normal, LatentLayout, LayoutMode, TaskPosterior};
use crate::models::{EnsembleState, GaussianHeadNet, NetSpec, ProbabilisticEnsemble, Role};
use crate::scalar::Scalar;

/// Dynamics and reward ensembles together with the latent wiring they
/// were built for.
#[derive(Clone, Debug)]
pub struct WorldModel<S: Scalar> {
    layout: LatentLayout,
    dynamics: ProbabilisticEnsemble<S>,
    reward: ProbabilisticEnsemble<S>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub(crate) struct WorldModelState {
    pub layout: LatentLayout,
    pub dynamics: EnsembleState,
    pub reward: EnsembleState,
}

/// Architecture of a [`WorldModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub state_dim: usize,
    pub action_dim: usize,
    pub dynamics_hidden: Vec<usize>,
    pub reward_hidden: Vec<usize>,
    pub ensemble_size: usize,
}

impl<S: Scalar> WorldModel<S> {
    pub fn new<R: Rng + ?Sized>(layout: LatentLayout, shape: &ModelShape, rng: &mut R) -> Result<Self> {
        let dspec = NetSpec::dynamics(shape.state_dim, shape.action_dim, shape.dynamics_hidden.clone())
            .with_latents(layout.dynamics_factors(), layout.dynamics_dim());
        let rspec = NetSpec::reward(shape.state_dim, shape.action_dim, shape.reward_hidden.clone())
            .with_latents(layout.reward_factors(), layout.reward_dim());
        let dynamics = ProbabilisticEnsemble::new(Role::Dynamics, dspec, shape.ensemble_size, rng)?;
        let reward = ProbabilisticEnsemble::new(Role::Reward, rspec, shape.ensemble_size, rng)?;
        Self::from_parts(layout, dynamics, reward)
    }

    pub fn from_parts(
        layout: LatentLayout,
        dynamics: ProbabilisticEnsemble<S>,
        reward: ProbabilisticEnsemble<S>,
    ) -> Result<Self> {
        if dynamics.len() != reward.len() {
            return Err(Error::Invalid(format!(
                "dynamics ensemble has {} members, reward ensemble {}",
                dynamics.len(),
                reward.len()
            )));
        }
        if dynamics.spec().latent_factors != layout.dynamics_factors()
            || reward.spec().latent_factors != layout.reward_factors()
        {
            return Err(Error::Invalid("model latent inputs do not match the layout".into()));
        }
        Ok(Self { layout, dynamics, reward })
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn dynamics(&self) -> &ProbabilisticEnsemble<S> {
        &self.dynamics
    }

    pub fn reward(&self) -> &ProbabilisticEnsemble<S> {
        &self.reward
    }

    pub fn dynamics_mut(&mut self) -> &mut ProbabilisticEnsemble<S> {
        &mut self.dynamics
    }

    pub fn reward_mut(&mut self) -> &mut ProbabilisticEnsemble<S> {
        &mut self.reward
    }

    pub fn ensemble_size(&self) -> usize {
        self.dynamics.len()
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.spec().state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.dynamics.spec().action_dim
    }

    /// Digest of every network parameter (not posteriors).
    pub fn checksum(&self) -> String {
        format!("{}|{}", self.dynamics.checksum(), self.reward.checksum())
    }

    pub(crate) fn to_state(&self) -> WorldModelState {
        WorldModelState { layout: self.layout.clone(), dynamics: self.dynamics.to_state(), reward: self.reward.to_state() }
    }

    pub(crate) fn from_state(state: &WorldModelState) -> Result<Self> {
        Self::from_parts(
            state.layout.clone(),
            ProbabilisticEnsemble::from_state(&state.dynamics)?,
            ProbabilisticEnsemble::from_state(&state.reward)?,
        )
        .map_err(|e| Error::Format(e.to_string()))
    }

    /// Refits both ensembles' input normalizers to `data`.
    pub fn fit_normalizers<'a, I>(&mut self, data: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a TaskData<S>>,
    {
        let mut dyn_rows = Vec::new();
        let mut rew_rows = Vec::new();
        for d in data {
            dyn_rows.push(Array::hstack(&[&d.s, &d.a])?);
            rew_rows.push(Array::hstack(&[&d.s, &d.a, &d.s_next])?);
        }
        self.dynamics.fit_normalizer(&vstack(&dyn_rows)?)?;
        self.reward.fit_normalizer(&vstack(&rew_rows)?)
    }
}

fn vstack<S: Scalar>(parts: &[Array<S>]) -> Result<Array<S>> {
    let cols = parts.first().map(|p| p.cols()).ok_or_else(|| Error::Empty("no data to stack".into()))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(Error::shape("vstack", format!("{} vs {cols} columns", p.cols())));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Array::matrix(rows, cols, data)
}

/// All transitions of one task as column blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData<S> {
    pub s: Array<S>,
    pub a: Array<S>,
    pub s_next: Array<S>,
    /// `[N, 1]`.
    pub r: Array<S>,
}

impl<S: Scalar> TaskData<S> {
    pub fn new(s: Array<S>, a: Array<S>, s_next: Array<S>, r: Array<S>) -> Result<Self> {
        let n = s.rows();
        if [&s, &a, &s_next, &r].iter().any(|x| x.rank() != 2 || x.rows() != n)
            || s.cols() != s_next.cols()
            || r.cols() != 1
        {
            return Err(Error::shape(
                "task_data",
                format!("s {:?}, a {:?}, s' {:?}, r {:?}", s.shape(), a.shape(), s_next.shape(), r.shape()),
            ));
        }
        Ok(Self { s, a, s_next, r })
    }

    /// Builds from per-transition slices.
    pub fn from_transitions<'a, I>(state_dim: usize, action_dim: usize, it: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [S], &'a [S], &'a [S], S)>,
    {
        let (mut s, mut a, mut sn, mut r) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (si, ai, sni, ri) in it {
            s.extend_from_slice(si);
            a.extend_from_slice(ai);
            sn.extend_from_slice(sni);
            r.push(ri);
        }
        let n = r.len();
        Self::new(
            Array::matrix(n, state_dim, s)?,
            Array::matrix(n, action_dim, a)?,
            Array::matrix(n, state_dim, sn)?,
            Array::matrix(n, 1, r)?,
        )
    }

    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, task: usize, idx: &[usize]) -> Minibatch<S> {
        let pick = |x: &Array<S>| {
            let c = x.cols();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(x.row(i));
            }
            Array::matrix(idx.len(), c, out).expect("sized")
        };
        Minibatch { task, s: pick(&self.s), a: pick(&self.a), s_next: pick(&self.s_next), r: pick(&self.r) }
    }

    pub fn full_batch(&self, task: usize) -> Minibatch<S> {
        Minibatch { task, s: self.s.clone(), a: self.a.clone(), s_next: self.s_next.clone(), r: self.r.clone() }
    }
}

/// Transitions of a single task.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch<S> {
    pub task: usize,
    pub s: Array<S>,
    pub a: Array<S>,
    pub s_next: Array<S>,
    pub r: Array<S>,
}

impl<S: Scalar> Minibatch<S> {
    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dynamics regression target `s' − s`.
    pub fn delta(&self) -> Array<S> {
        self.s_next.zip_map(&self.s, |b, a| b - a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions<S> {
    /// Latent samples per evaluation.
    pub n_samples: usize,
    /// Multiplier of the KL term.
    pub kl_scale: S,
}

/// Graph handles of the loss and its parts.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Node,
    pub dynamics_nll: Node,
    pub reward_nll: Node,
    pub kl: Node,
    pub scaled_kl: Node,
    pub per_factor_kl: Vec<(String, Node)>,
}

/// Evaluated loss parts.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport<S> {
    pub total: S,
    pub dynamics_nll: S,
    pub reward_nll: S,
    /// Unscaled KL to the prior.
    pub kl: S,
    pub scaled_kl: S,
    pub per_factor_kl: Vec<(String, S)>,
}

impl LossTerms {
    pub fn report<S: Scalar>(&self, g: &Graph<S>) -> LossReport<S> {
        LossReport {
            total: g.scalar(self.total),
            dynamics_nll: g.scalar(self.dynamics_nll),
            reward_nll: g.scalar(self.reward_nll),
            kl: g.scalar(self.kl),
            scaled_kl: g.scalar(self.scaled_kl),
            per_factor_kl: self.per_factor_kl.iter().map(|(n, k)| (n.clone(), g.scalar(*k))).collect(),
        }
    }
}

fn latent_input<S: Scalar>(g: &mut Graph<S>, samples: &[(String, Node)], names: &[String], rows: usize) -> Result<Option<Node>> {
    if names.is_empty() {
        return Ok(None);
    }
    let mut cols = Vec::with_capacity(names.len());
    for name in names {
        let z = samples.iter().find(|(n, _)| n == name).map(|(_, z)| *z).ok_or_else(|| Error::unknown("latent factor", name))?;
        cols.push(g.tile_rows(z, rows)?);
    }
    if cols.len() == 1 {
        Ok(Some(cols[0]))
    } else {
        g.concat(&cols).map(Some)
    }
}

fn average<S: Scalar>(g: &mut Graph<S>, nodes: &[Node]) -> Result<Node> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    g.scale(acc, S::one() / S::from_usize_lossy(nodes.len()))
}

/// Records the loss of one member pair on `batch`. Latent noise is drawn
/// from `rng` per factor in layout order; consecutive samples share noise
/// with opposite signs, so each draw is from `q` while the pair cancels
/// odd-order noise in the gradient.
pub fn elbo_loss<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    dynamics: &GaussianHeadNet<S>,
    reward: &GaussianHeadNet<S>,
    layout: &LatentLayout,
    posterior: Option<&TaskPosterior<S>>,
    batch: &Minibatch<S>,
    opts: LossOptions<S>,
    rng: &mut R,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::Empty(format!("minibatch of task {}", batch.task)));
    }
    let posterior = match (layout.mode(), posterior) {
        (LayoutMode::None, _) => None,
        (_, Some(p)) if p.task() != batch.task => {
            return Err(Error::unknown("task", format!("{} (posterior belongs to task {})", batch.task, p.task())));
        }
        (_, Some(p)) if p.layout() != layout => {
            return Err(Error::Invalid("posterior layout differs from the model layout".into()));
        }
        (_, Some(p)) => Some(p),
        (_, None) => return Err(Error::unknown("task posterior", batch.task.to_string())),
    };
    let rows = batch.len();
    let dyn_obs = Array::hstack(&[&batch.s, &batch.a])?;
    let rew_obs = Array::hstack(&[&batch.s, &batch.a, &batch.s_next])?;
    let delta = batch.delta();
    let dyn_names = &dynamics.spec().latent_factors;
    let rew_names = &reward.spec().latent_factors;

    let samples = if posterior.is_some() { opts.n_samples.max(1) } else { 1 };
    let mut dyn_terms = Vec::with_capacity(samples);
    let mut rew_terms = Vec::with_capacity(samples);
    let mut prev_eps: Vec<Vec<S>> = Vec::new();
    for m in 0..samples {
        let mut zs = Vec::new();
        if let Some(p) = posterior {
            // Samples come in antithetic pairs (ε, −ε).
            if m % 2 == 0 {
                prev_eps = layout.factors().iter().map(|f| standard_normal(f.dim, rng)).collect();
            } else {
                for e in &mut prev_eps {
                    e.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (f, eps) in layout.factors().iter().zip(&prev_eps) {
                zs.push((f.name.clone(), p.sample_with(g, &f.name, eps)?));
            }
        }
        let zd = latent_input(g, &zs, dyn_names, rows)?;
        let (m, lv) = dynamics.forward_graph(g, &dyn_obs, zd)?;
        dyn_terms.push(g.gaussian_nll(&delta, m, lv)?);
        let zr = latent_input(g, &zs, rew_names, rows)?;
        let (m, lv) = reward.forward_graph(g, &rew_obs, zr)?;
        rew_terms.push(g.gaussian_nll(&batch.r, m, lv)?);
    }
    let dynamics_nll = average(g, &dyn_terms)?;
    let reward_nll = average(g, &rew_terms)?;
    let (kl, per_factor_kl) = match posterior {
        Some(p) => p.kl_to_prior(g)?,
        None => (g.constant(Array::scalar(S::zero())), Vec::new()),
    };
    let scaled_kl = g.scale(kl, opts.kl_scale)?;
    let nll = g.add(dynamics_nll, reward_nll)?;
    let total = g.add(nll, scaled_kl)?;
    Ok(LossTerms { total, dynamics_nll, reward_nll, kl, scaled_kl, per_factor_kl })
}

/// Single shared latent feeding both models.
#[allow(clippy::too_many_arguments)]
pub fn loss_joint<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    dynamics: &GaussianHeadNet<S>,
    reward: &GaussianHeadNet<S>,
    layout: &LatentLayout,
    posterior: &TaskPosterior<S>,
    batch: &Minibatch<S>,
    opts: LossOptions<S>,
    rng: &mut R,
) -> Result<LossTerms> {
    if layout.mode() != LayoutMode::Joint {
        return Err(Error::Invalid(format!("joint loss needs a joint layout, got {:?}", layout.mode())));
    }
    elbo_loss(g, dynamics, reward, layout, Some(posterior), batch, opts, rng)
}

/// One latent per factor, one KL term per factor.
#[allow(clippy::too_many_arguments)]
pub fn loss_structured<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    dynamics: &GaussianHeadNet<S>,
    reward: &GaussianHeadNet<S>,
    layout: &LatentLayout,
    posterior: &TaskPosterior<S>,
    batch: &Minibatch<S>,
    opts: LossOptions<S>,
    rng: &mut R,
) -> Result<LossTerms> {
    if layout.mode() != LayoutMode::Structured {
        return Err(Error::Invalid(format!("structured loss needs a structured layout, got {:?}", layout.mode())));
    }
    elbo_loss(g, dynamics, reward, layout, Some(posterior), batch, opts, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam rate of the network parameters.
    pub learning_rate: f64,
    /// Adam rate of the task posteriors.
    pub posterior_learning_rate: f64,
    pub n_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 64, learning_rate: 1e-3, posterior_learning_rate: 1e-3, n_samples: 2 }
    }
}

/// KL multipliers `B_b / N` of the minibatches that cover `n` rows in
/// chunks of `batch`; they sum to one.
pub fn minibatch_kl_scales(n: usize, batch: usize) -> Vec<f64> {
    (0..n.div_ceil(batch)).map(|b| (((b + 1) * batch).min(n) - b * batch) as f64 / n as f64).collect()
}

/// Summary of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub optimizer_steps: usize,
    /// Mean per-row loss over the last epoch, averaged over members.
    pub final_loss: f64,
}

/// `E` epochs of minibatch Adam on every member. Each member trains on its
/// own bootstrap resample of each task; tasks are interleaved round-robin.
/// Posterior gradients are averaged over members before each update.
pub fn train_phase<S: Scalar, R: Rng + ?Sized>(
    model: &mut WorldModel<S>,
    posteriors: &mut BTreeMap<usize, TaskPosterior<S>>,
    data: &BTreeMap<usize, TaskData<S>>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PhaseReport> {
    if data.is_empty() {
        return Err(Error::Empty("training data".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.posterior_learning_rate > 0.0) {
        return Err(Error::Invalid("batch size and learning rates must be positive".into()));
    }
    for (task, d) in data {
        if d.is_empty() {
            return Err(Error::Empty(format!("buffer of task {task}")));
        }
        if model.layout.mode() != LayoutMode::None && !posteriors.contains_key(task) {
            return Err(Error::unknown("task posterior", task.to_string()));
        }
    }
    model.fit_normalizers(data.values())?;

    let members = model.ensemble_size();
    let boots: Vec<BTreeMap<usize, Vec<usize>>> = (0..members)
        .map(|_| data.iter().map(|(&t, d)| (t, (0..d.len()).map(|_| rng.random_range(0..d.len())).collect())).collect())
        .collect();
    let lr = S::lit(cfg.learning_rate);
    let post_lr = S::lit(cfg.posterior_learning_rate);
    let inv_members = S::one() / S::from_usize_lossy(members);
    let scales: BTreeMap<usize, Vec<f64>> =
        data.iter().map(|(&t, d)| (t, minibatch_kl_scales(d.len(), cfg.batch_size))).collect();
    let mut steps = 0;
    let mut last_epoch = (0.0, 0usize);
    for epoch in 0..cfg.epochs {
        let mut orders = boots.clone();
        for per_task in &mut orders {
            for idx in per_task.values_mut() {
                idx.shuffle(rng);
            }
        }
        let n_batches = |n: usize| n.div_ceil(cfg.batch_size);
        let max_batches = data.values().map(|d| n_batches(d.len())).max().unwrap_or(0);
        let mut epoch_loss = 0.0;
        let mut epoch_rows = 0;
        for b in 0..max_batches {
            for (&task, d) in data {
                if b >= n_batches(d.len()) {
                    continue;
                }
                let mut phi = GradTable::new();
                for k in 0..members {
                    let idx = &orders[k][&task];
                    let hi = ((b + 1) * cfg.batch_size).min(idx.len());
                    let batch = d.select(task, &idx[b * cfg.batch_size..hi]);
                    let post = posteriors.get(&task);
                    let mut g = Graph::new();
                    let terms = elbo_loss(
                        &mut g,
                        model.dynamics.member(k),
                        model.reward.member(k),
                        &model.layout,
                        post,
                        &batch,
                        LossOptions { n_samples: cfg.n_samples, kl_scale: S::lit(scales[&task][b]) },
                        rng,
                    )?;
                    let total = g.scalar(terms.total);
                    if !total.is_finite() {
                        return Err(Error::NonFinite { context: format!("training loss of task {task}, member {k}") });
                    }
                    epoch_loss += total.as_f64();
                    epoch_rows += batch.len();
                    let grads = g.backward_all(terms.total)?;
                    let gd = grads.for_store(model.dynamics.member(k).params());
                    let gr = grads.for_store(model.reward.member(k).params());
                    if let Some(p) = post {
                        phi.accumulate(&grads.for_store(p.params()));
                    }
                    model.dynamics.members_mut()[k].params_mut().adam_step(&gd, lr)?;
                    model.reward.members_mut()[k].params_mut().adam_step(&gr, lr)?;
                }
                if let (false, Some(p)) = (phi.is_empty(), posteriors.get_mut(&task)) {
                    phi.scale(inv_members);
                    p.params_mut().adam_step(&phi, post_lr)?;
                }
                steps += 1;
            }
        }
        if epoch + 1 == cfg.epochs {
            last_epoch = (epoch_loss, epoch_rows);
        }
    }
    let final_loss = if last_epoch.1 > 0 { last_epoch.0 / last_epoch.1 as f64 } else { f64::NAN };
    Ok(PhaseReport { optimizer_steps: steps, final_loss })
}

/// Test-time posterior fitting settings.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub n_samples: usize,
}

impl InferenceConfig {
    /// 100 iterations at five times `base_learning_rate`, two latent samples.
    pub fn from_base_rate(base_learning_rate: f64) -> Self {
        Self { iterations: 100, learning_rate: 5.0 * base_learning_rate, n_samples: 2 }
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self::from_base_rate(TrainConfig::default().learning_rate)
    }
}

/// Adam on the posterior only, over all of `data` with unscaled KL,
/// starting from the current posterior with fresh optimizer moments.
/// Networks are borrowed immutably and cannot change. Returns the loss
/// report of the final iteration, or `None` when there is nothing to fit.
pub fn testtime_inference_step<S: Scalar, R: Rng + ?Sized>(
    model: &WorldModel<S>,
    posterior: &mut TaskPosterior<S>,
    data: &TaskData<S>,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<Option<LossReport<S>>> {
    if data.is_empty() {
        warn!("no observations for task {}; posterior left unchanged", posterior.task());
        return Ok(None);
    }
    if model.layout.mode() == LayoutMode::None {
        return Ok(None);
    }
    let batch = data.full_batch(posterior.task());
    let opts = LossOptions { n_samples: cfg.n_samples, kl_scale: S::one() };
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Invalid("inference learning rate must be positive".into()));
    }
    let lr = S::lit(cfg.learning_rate);
    let members = model.ensemble_size();
    // Each call is its own optimization run: values carry over, moments do not.
    posterior.params_mut().clear_moments();
    let mut last = None;
    for _ in 0..cfg.iterations {
        let mut phi = GradTable::new();
        let mut reports = Vec::with_capacity(members);
        for k in 0..members {
            let mut g = Graph::new();
            let terms = elbo_loss(
                &mut g,
                model.dynamics.member(k),
                model.reward.member(k),
                &model.layout,
                Some(posterior),
                &batch,
                opts,
                rng,
            )?;
            reports.push(terms.report(&g));
            phi.accumulate(&g.backward(terms.total, posterior.params())?);
        }
        phi.scale(S::one() / S::from_usize_lossy(members));
        posterior.params_mut().adam_step(&phi, lr)?;
        last = reports.pop();
    }
    Ok(last)
}

/// Adam on the posterior alone against an arbitrary loss. `loss` records
/// one evaluation on a fresh graph and returns its root; optimizer moments
/// are cleared first, as in [`testtime_inference_step`]. Returns the final
/// loss value.
pub fn fit_posterior<S, R, F>(
    posterior: &mut TaskPosterior<S>,
    iterations: usize,
    learning_rate: f64,
    rng: &mut R,
    mut loss: F,
) -> Result<Option<S>>
where
    S: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&mut Graph<S>, &TaskPosterior<S>, &mut R) -> Result<Node>,
{
    if !(learning_rate > 0.0) {
        return Err(Error::Invalid("inference learning rate must be positive".into()));
    }
    let lr = S::lit(learning_rate);
    posterior.params_mut().clear_moments();
    let mut last = None;
    for _ in 0..iterations {
        let mut g = Graph::new();
        let root = loss(&mut g, posterior, rng)?;
        let value = g.scalar(root);
        if !value.is_finite() {
            return Err(Error::NonFinite { context: format!("posterior loss of task {}", posterior.task()) });
        }
        let grads = g.backward(root, posterior.params())?;
        posterior.params_mut().adam_step(&grads, lr)?;
        last = Some(value);
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{FactorKind, FactorSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> ModelShape {
        ModelShape { state_dim: 2, action_dim: 1, dynamics_hidden: vec![6], reward_hidden: vec![4], ensemble_size: 2 }
    }

    fn data(rng: &mut ChaCha8Rng, n: usize) -> TaskData<f64> {
        let mut u = |k: usize| Array::new(vec![n, k], (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        TaskData::new(u(2), u(1), u(2), u(1)).unwrap()
    }

    #[test]
    fn untrained_loss_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = LatentLayout::joint(3).unwrap();
        let model = WorldModel::<f64>::new(layout.clone(), &shape(), &mut rng).unwrap();
        let post = TaskPosterior::new(0, &layout);
        let d = data(&mut rng, 7);
        let batch = d.full_batch(0);
        let mut g = Graph::new();
        let opts = LossOptions { n_samples: 2, kl_scale: 1.0 };
        let t = loss_joint(&mut g, model.dynamics().member(0), model.reward().member(0), &layout, &post, &batch, opts, &mut rng)
            .unwrap();
        let r = t.report(&g);
        // Zero output layer: mean 0 and raw log-variance 0 mapped through the bound.
        let lv0: f64 = crate::models::bound_log_var(0.0, -10.0, 0.5);
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let expect = |y: &Array<f64>| {
            y.data().iter().map(|v| 0.5 * (v * v * (-lv0).exp() + lv0) + half_ln_2pi).sum::<f64>()
        };
        assert!((r.dynamics_nll - expect(&batch.delta())).abs() < 1e-9);
        assert!((r.reward_nll - expect(&batch.r)).abs() < 1e-9);
        assert_eq!(r.kl, 0.0);
        assert!((r.total - (r.dynamics_nll + r.reward_nll + r.scaled_kl)).abs() < 1e-9);
    }

    #[test]
    fn layout_mode_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = LatentLayout::structured(vec![
            FactorSpec::new("d", 2, FactorKind::Dynamics),
            FactorSpec::new("r", 2, FactorKind::Reward),
        ])
        .unwrap();
        let model = WorldModel::<f64>::new(layout.clone(), &shape(), &mut rng).unwrap();
        let post = TaskPosterior::new(0, &layout);
        let batch = data(&mut rng, 3).full_batch(0);
        let opts = LossOptions { n_samples: 2, kl_scale: 1.0 };
        let mut g = Graph::new();
        let (dm, rm) = (model.dynamics().member(0), model.reward().member(0));
        assert!(loss_joint(&mut g, dm, rm, &layout, &post, &batch, opts, &mut rng).is_err());
        assert!(loss_structured(&mut g, dm, rm, &layout, &post, &batch, opts, &mut rng).is_ok());
        let other = data(&mut rng, 3).full_batch(5);
        assert!(loss_structured(&mut g, dm, rm, &layout, &post, &other, opts, &mut rng).is_err());
    }

    #[test]
    fn empty_buffer_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = LatentLayout::none();
        let mut model = WorldModel::<f64>::new(layout, &shape(), &mut rng).unwrap();
        let mut data_map = BTreeMap::new();
        data_map.insert(0, data(&mut rng, 4));
        data_map.insert(7, TaskData::from_transitions(2, 1, std::iter::empty()).unwrap());
        let err = train_phase(&mut model, &mut BTreeMap::new(), &data_map, &TrainConfig::default(), &mut rng).unwrap_err();
        assert!(err.to_string().contains("task 7"), "{err}");
    }

    #[test]
    fn inference_without_data_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = LatentLayout::joint(2).unwrap();
        let model = WorldModel::<f64>::new(layout.clone(), &shape(), &mut rng).unwrap();
        let mut post = TaskPosterior::new(0, &layout);
        let before = post.checksum();
        let empty = TaskData::from_transitions(2, 1, std::iter::empty()).unwrap();
        let out = testtime_inference_step(&model, &mut post, &empty, &InferenceConfig::default(), &mut rng).unwrap();
        assert!(out.is_none());
        assert_eq!(before, post.checksum());
    }
}
