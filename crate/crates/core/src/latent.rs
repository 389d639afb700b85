//! Latent task variables: factor layouts, per-task diagonal-Gaussian
//! posteriors with a standard-normal prior, and reparameterized sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Array, Graph, Node, ParamStore};
use crate::scalar::Scalar;

/// Which model a factor feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorKind {
    /// Environment dynamics (dynamics model).
    Dynamics,
    /// Agent morphology (dynamics model).
    Agent,
    /// Task objective (reward model).
    Reward,
    /// Consumed by both models; the single factor of a joint layout.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub dim: usize,
    pub kind: FactorKind,
}

impl FactorSpec {
    pub fn new(name: impl Into<String>, dim: usize, kind: FactorKind) -> Self {
        Self { name: name.into(), dim, kind }
    }

    pub fn feeds_dynamics(&self) -> bool {
        matches!(self.kind, FactorKind::Dynamics | FactorKind::Agent | FactorKind::Shared)
    }

    pub fn feeds_reward(&self) -> bool {
        matches!(self.kind, FactorKind::Reward | FactorKind::Shared)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutMode {
    /// One latent shared by dynamics and reward.
    Joint,
    /// Separate latents per factor of variation.
    Structured,
    /// No latent variables (latent-free baselines).
    None,
}

/// Ordered latent factors and how they are wired into the models.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    mode: LayoutMode,
    factors: Vec<FactorSpec>,
}

impl LatentLayout {
    /// One `dim`-dimensional factor feeding both models.
    pub fn joint(dim: usize) -> Result<Self> {
        Self::new(LayoutMode::Joint, vec![FactorSpec::new("z", dim, FactorKind::Shared)])
    }

    pub fn structured(factors: Vec<FactorSpec>) -> Result<Self> {
        Self::new(LayoutMode::Structured, factors)
    }

    pub fn none() -> Self {
        Self { mode: LayoutMode::None, factors: Vec::new() }
    }

    /// Validates the wiring rules of `mode`. A structured layout needs at
    /// least two factors partitioned by kind, except for the degenerate
    /// single shared factor, which reproduces the joint model.
    pub fn new(mode: LayoutMode, factors: Vec<FactorSpec>) -> Result<Self> {
        if let Some(f) = factors.iter().find(|f| f.dim == 0) {
            return Err(Error::Invalid(format!("latent factor `{}` has zero dimension", f.name)));
        }
        for (i, f) in factors.iter().enumerate() {
            if factors[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::Invalid(format!("duplicate latent factor `{}`", f.name)));
            }
        }
        match mode {
            LayoutMode::Joint => {
                if factors.len() != 1 || factors[0].kind != FactorKind::Shared {
                    return Err(Error::Invalid("joint layout needs exactly one shared factor".into()));
                }
            }
            LayoutMode::Structured => {
                let degenerate = factors.len() == 1 && factors[0].kind == FactorKind::Shared;
                if !degenerate {
                    if factors.len() < 2 {
                        return Err(Error::Invalid("structured layout needs at least two factors".into()));
                    }
                    if factors.iter().any(|f| f.kind == FactorKind::Shared) {
                        return Err(Error::Invalid("structured factors must be dynamics, agent or reward".into()));
                    }
                }
            }
            LayoutMode::None => {
                if !factors.is_empty() {
                    return Err(Error::Invalid("latent-free layout cannot have factors".into()));
                }
            }
        }
        Ok(Self { mode, factors })
    }

    pub fn mode(&self) -> LayoutMode {
        self.mode
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn factor(&self, name: &str) -> Result<&FactorSpec> {
        self.factors.iter().find(|f| f.name == name).ok_or_else(|| Error::unknown("latent factor", name))
    }

    pub fn dynamics_factors(&self) -> Vec<String> {
        self.factors.iter().filter(|f| f.feeds_dynamics()).map(|f| f.name.clone()).collect()
    }

    pub fn reward_factors(&self) -> Vec<String> {
        self.factors.iter().filter(|f| f.feeds_reward()).map(|f| f.name.clone()).collect()
    }

    pub fn dynamics_dim(&self) -> usize {
        self.factors.iter().filter(|f| f.feeds_dynamics()).map(|f| f.dim).sum()
    }

    pub fn reward_dim(&self) -> usize {
        self.factors.iter().filter(|f| f.feeds_reward()).map(|f| f.dim).sum()
    }

    pub fn total_dim(&self) -> usize {
        self.factors.iter().map(|f| f.dim).sum()
    }
}

fn mean_key(factor: &str) -> String {
    format!("{factor}/mean")
}

fn log_std_key(factor: &str) -> String {
    format!("{factor}/log_std")
}

/// Variational posterior `q_φ(z) = Π_i N(µ_i, diag(e^{2·log_std_i}))` of one
/// task. The prior is `N(0, I)` for every factor.
#[derive(Clone, Debug)]
pub struct TaskPosterior<S: Scalar> {
    task: usize,
    layout: LatentLayout,
    params: ParamStore<S>,
}

impl<S: Scalar> TaskPosterior<S> {
    /// A posterior equal to the prior.
    pub fn new(task: usize, layout: &LatentLayout) -> Self {
        let mut params = ParamStore::new();
        for f in layout.factors() {
            params.insert(mean_key(&f.name), Array::zeros(&[f.dim]));
            params.insert(log_std_key(&f.name), Array::zeros(&[f.dim]));
        }
        Self { task, layout: layout.clone(), params }
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn mean(&self, factor: &str) -> Result<&[S]> {
        self.layout.factor(factor)?;
        Ok(self.params.get(&mean_key(factor))?.data())
    }

    pub fn log_std(&self, factor: &str) -> Result<&[S]> {
        self.layout.factor(factor)?;
        Ok(self.params.get(&log_std_key(factor))?.data())
    }

    pub fn std(&self, factor: &str) -> Result<Vec<S>> {
        Ok(self.log_std(factor)?.iter().map(|v| v.exp()).collect())
    }

    /// Overwrites one factor's variational parameters.
    pub fn set(&mut self, factor: &str, mean: &[S], log_std: &[S]) -> Result<()> {
        let d = self.layout.factor(factor)?.dim;
        if mean.len() != d || log_std.len() != d {
            return Err(Error::shape("posterior_set", format!("factor `{factor}` has dim {d}")));
        }
        self.params.set(&mean_key(factor), Array::vector(mean.to_vec()))?;
        self.params.set(&log_std_key(factor), Array::vector(log_std.to_vec()))
    }

    /// Back to `µ = 0, log_std = 0` with cleared optimizer moments.
    pub fn reset_to_prior(&mut self) {
        let factors: Vec<FactorSpec> = self.layout.factors().to_vec();
        for f in factors {
            self.params.set(&mean_key(&f.name), Array::zeros(&[f.dim])).expect("layout key");
            self.params.set(&log_std_key(&f.name), Array::zeros(&[f.dim])).expect("layout key");
        }
        self.params.clear_moments();
    }

    /// `z = µ + exp(log_std)·ε` with caller-supplied `ε`, recorded so that
    /// gradients reach `µ` and `log_std`. Returns a `[dim]` node.
    pub fn sample_with(&self, g: &mut Graph<S>, factor: &str, eps: &[S]) -> Result<Node> {
        let d = self.layout.factor(factor)?.dim;
        if eps.len() != d {
            return Err(Error::shape("sample_reparam", format!("noise of length {} for factor `{factor}` of dim {d}", eps.len())));
        }
        let mu = g.param(&self.params, &mean_key(factor))?;
        let ls = g.param(&self.params, &log_std_key(factor))?;
        let sd = g.exp(ls)?;
        let e = g.constant(Array::vector(eps.to_vec()));
        let noise = g.mul(sd, e)?;
        g.add(mu, noise)
    }

    /// Reparameterized sample with `ε ∼ N(0, I)` drawn from `rng`.
    pub fn sample_reparam<R: Rng + ?Sized>(&self, g: &mut Graph<S>, factor: &str, rng: &mut R) -> Result<Node> {
        let d = self.layout.factor(factor)?.dim;
        let eps = standard_normal(d, rng);
        self.sample_with(g, factor, &eps)
    }

    /// Graph-free draw of one factor.
    pub fn sample<R: Rng + ?Sized>(&self, factor: &str, rng: &mut R) -> Result<Vec<S>> {
        let mu = self.mean(factor)?;
        let ls = self.log_std(factor)?;
        Ok(mu.iter().zip(ls).map(|(&m, &l)| m + l.exp() * S::lit(rng.sample::<f64, _>(StandardNormal))).collect())
    }

    /// Closed-form `KL(q ‖ N(0, I))` of one factor.
    pub fn kl_factor(&self, g: &mut Graph<S>, factor: &str) -> Result<Node> {
        let d = self.layout.factor(factor)?.dim;
        let mu = g.param(&self.params, &mean_key(factor))?;
        let ls = g.param(&self.params, &log_std_key(factor))?;
        let lv = g.scale(ls, S::lit(2.0))?;
        let zeros = Array::zeros(&[d]);
        g.diag_gaussian_kl(mu, lv, &zeros, &zeros)
    }

    /// Sum of per-factor KLs, plus each term individually.
    pub fn kl_to_prior(&self, g: &mut Graph<S>) -> Result<(Node, Vec<(String, Node)>)> {
        let mut parts = Vec::with_capacity(self.layout.factors().len());
        for f in self.layout.factors() {
            parts.push((f.name.clone(), self.kl_factor(g, &f.name)?));
        }
        let total = match parts.len() {
            0 => g.constant(Array::scalar(S::zero())),
            _ => {
                let mut acc = parts[0].1;
                for (_, n) in &parts[1..] {
                    acc = g.add(acc, *n)?;
                }
                acc
            }
        };
        Ok((total, parts))
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub(crate) fn to_state(&self) -> PosteriorState {
        let params = self.params.iter().map(|(k, v)| (k.to_string(), v.data().iter().map(|x| x.as_f64()).collect())).collect();
        PosteriorState { task: self.task, layout: self.layout.clone(), params }
    }

    pub(crate) fn from_state(state: &PosteriorState) -> Result<Self> {
        let mut post = Self::new(state.task, &state.layout);
        let expected: Vec<&str> = post.params.names().collect();
        let found: Vec<&str> = state.params.keys().map(String::as_str).collect();
        if expected != found {
            return Err(Error::Format(format!("posterior parameters {found:?} do not match layout {expected:?}")));
        }
        for (name, data) in &state.params {
            let arr = Array::vector(data.iter().map(|&v| S::lit(v)).collect());
            post.params.set(name, arr).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(post)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct PosteriorState {
    pub task: usize,
    pub layout: LatentLayout,
    pub params: std::collections::BTreeMap<String, Vec<f64>>,
}

pub(crate) fn standard_normal<S: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<S> {
    (0..n).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Elementwise softplus `η = ln(1 + e^z)`, mapping latents to positive values.
pub fn positive_transform<S: Scalar>(g: &mut Graph<S>, z: Node) -> Result<Node> {
    g.softplus(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_factor() -> LatentLayout {
        LatentLayout::structured(vec![
            FactorSpec::new("leg", 4, FactorKind::Dynamics),
            FactorSpec::new("dir", 4, FactorKind::Reward),
        ])
        .unwrap()
    }

    #[test]
    fn layout_validation() {
        assert!(LatentLayout::joint(8).is_ok());
        assert!(LatentLayout::joint(0).is_err());
        assert!(LatentLayout::structured(vec![FactorSpec::new("a", 2, FactorKind::Dynamics)]).is_err());
        assert!(LatentLayout::structured(vec![FactorSpec::new("z", 2, FactorKind::Shared)]).is_ok());
        let l = two_factor();
        assert_eq!((l.dynamics_dim(), l.reward_dim(), l.total_dim()), (4, 4, 8));
        assert_eq!(l.reward_factors(), vec!["dir".to_string()]);
        let j = LatentLayout::joint(8).unwrap();
        assert_eq!((j.dynamics_dim(), j.reward_dim()), (8, 8));
    }

    #[test]
    fn unknown_factor_rejected() {
        let p = TaskPosterior::<f64>::new(0, &two_factor());
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(p.sample_reparam(&mut g, "nope", &mut rng).is_err());
    }

    #[test]
    fn kl_values() {
        let mut p = TaskPosterior::<f64>::new(0, &LatentLayout::joint(1).unwrap());
        let mut g = Graph::new();
        let (kl, _) = p.kl_to_prior(&mut g).unwrap();
        assert_eq!(g.scalar(kl), 0.0);
        p.set("z", &[1.0], &[0.0]).unwrap();
        let mut g = Graph::new();
        let (kl, _) = p.kl_to_prior(&mut g).unwrap();
        assert!((g.scalar(kl) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_is_additive_over_factors() {
        let mut p = TaskPosterior::<f64>::new(0, &two_factor());
        p.set("leg", &[0.1, -0.4, 1.0, 0.0], &[0.2, -0.1, 0.0, -1.0]).unwrap();
        p.set("dir", &[2.0, 0.0, -0.5, 0.3], &[-0.3, 0.5, 0.1, 0.0]).unwrap();
        let mut g = Graph::new();
        let (total, parts) = p.kl_to_prior(&mut g).unwrap();
        let sum: f64 = parts.iter().map(|(_, n)| g.scalar(*n)).sum();
        assert!((g.scalar(total) - sum).abs() < 1e-12);
    }

    #[test]
    fn reset_is_idempotent_and_clears_moments() {
        let mut p = TaskPosterior::<f64>::new(0, &two_factor());
        p.set("leg", &[1.0; 4], &[0.5; 4]).unwrap();
        let mut g = Graph::new();
        let (kl, _) = p.kl_to_prior(&mut g).unwrap();
        let grads = g.backward(kl, p.params()).unwrap();
        p.params_mut().adam_step(&grads, 0.1).unwrap();
        p.reset_to_prior();
        let once = p.checksum();
        p.reset_to_prior();
        assert_eq!(once, p.checksum());
        let (m, v) = p.params().moments("leg/mean").unwrap();
        assert!(m.data().iter().chain(v.data()).all(|&x| x == 0.0));
        let mut g = Graph::new();
        let (kl, _) = p.kl_to_prior(&mut g).unwrap();
        assert_eq!(g.scalar(kl), 0.0);
    }

    #[test]
    fn deterministic_limit() {
        let mut p = TaskPosterior::<f64>::new(0, &LatentLayout::joint(2).unwrap());
        p.set("z", &[0.3, -0.7], &[-800.0, -800.0]).unwrap();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = p.sample_reparam(&mut g, "z", &mut rng).unwrap();
        assert_eq!(g.value(z).data(), &[0.3, -0.7]);
    }

    #[test]
    fn positive_transform_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Array::vector(vec![0.0, 50.0, crate::scalar::softplus_inv(0.5)]));
        let eta = positive_transform(&mut g, z).unwrap();
        let v = g.value(eta).data();
        assert!((v[0] - 2f64.ln()).abs() < 1e-12);
        assert!((v[1] - 50.0).abs() < 1e-12);
        assert!((v[2] - 0.5).abs() < 1e-12);
        assert!(v.iter().all(|&x| x > 0.0));
    }
}
