use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::net::{GaussianHeadNet, NetSpec, NetState};
use super::normalizer::Normalizer;
use crate::error::{Error, Result};
use crate::gradcore::Array;
use crate::scalar::Scalar;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Dynamics,
    Reward,
}

/// `M` independently initialized Gaussian-head nets whose predictive
/// distribution is the uniform mixture over members.
#[derive(Clone, Debug)]
pub struct ProbabilisticEnsemble<S: Scalar> {
    role: Role,
    members: Vec<GaussianHeadNet<S>>,
}

impl<S: Scalar> ProbabilisticEnsemble<S> {
    pub fn new<R: Rng + ?Sized>(role: Role, spec: NetSpec, size: usize, rng: &mut R) -> Result<Self> {
        if size == 0 {
            return Err(Error::Invalid("ensemble needs at least one member".into()));
        }
        let members = (0..size).map(|_| GaussianHeadNet::new(spec.clone(), rng)).collect();
        Ok(Self { role, members })
    }

    /// Assembles an ensemble from existing members, which must share a spec.
    pub fn from_members(role: Role, members: Vec<GaussianHeadNet<S>>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Invalid("ensemble needs at least one member".into()))?;
        if members.iter().any(|m| m.spec() != first.spec()) {
            return Err(Error::Invalid("ensemble members must share one architecture".into()));
        }
        Ok(Self { role, members })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn spec(&self) -> &NetSpec {
        self.members[0].spec()
    }

    pub fn members(&self) -> &[GaussianHeadNet<S>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [GaussianHeadNet<S>] {
        &mut self.members
    }

    pub fn member(&self, i: usize) -> &GaussianHeadNet<S> {
        &self.members[i]
    }

    /// Fits one normalizer to `obs` and installs it in every member.
    pub fn fit_normalizer(&mut self, obs: &Array<S>) -> Result<()> {
        let mut n = Normalizer::new(self.spec().obs_dim());
        n.fit(obs)?;
        for m in &mut self.members {
            m.set_normalizer(n.clone())?;
        }
        Ok(())
    }

    /// Per-row `log[(1/M) Σ_m N(target | µ_m, σ²_m)]`, via log-sum-exp.
    pub fn mixture_log_prob(&self, obs: &Array<S>, latent: Option<&Array<S>>, target: &Array<S>) -> Result<Vec<S>> {
        let per_member: Vec<Vec<S>> = self
            .members
            .iter()
            .map(|m| {
                let (mean, lv) = m.predict(obs, latent)?;
                gaussian_log_density_rows(target, &mean, &lv)
            })
            .collect::<Result<_>>()?;
        let ln_m = S::from_usize_lossy(self.members.len()).ln();
        Ok((0..obs.rows())
            .map(|r| {
                let hi = per_member.iter().map(|v| v[r]).fold(S::neg_infinity(), S::max);
                let s = per_member.iter().fold(S::zero(), |acc, v| acc + (v[r] - hi).exp());
                hi + s.ln() - ln_m
            })
            .collect())
    }

    pub(crate) fn to_state(&self) -> EnsembleState {
        EnsembleState { role: self.role, members: self.members.iter().map(|m| m.to_state()).collect() }
    }

    pub(crate) fn from_state(state: &EnsembleState) -> Result<Self> {
        let members = state.members.iter().map(GaussianHeadNet::from_state).collect::<Result<_>>()?;
        Self::from_members(state.role, members)
    }

    /// SHA-256 over all member parameters.
    pub fn checksum(&self) -> String {
        self.members.iter().map(|m| m.params().checksum()).collect::<Vec<_>>().join(":")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct EnsembleState {
    pub role: Role,
    pub members: Vec<NetState>,
}

/// Log density of each row of `target` under a diagonal Gaussian.
pub fn gaussian_log_density_rows<S: Scalar>(target: &Array<S>, mean: &Array<S>, log_var: &Array<S>) -> Result<Vec<S>> {
    if target.shape() != mean.shape() || mean.shape() != log_var.shape() {
        return Err(Error::shape(
            "log_density",
            format!("target {:?}, mean {:?}, log_var {:?}", target.shape(), mean.shape(), log_var.shape()),
        ));
    }
    let half = S::lit(0.5);
    let c = S::lit(HALF_LN_2PI);
    Ok((0..target.rows())
        .map(|r| {
            let (y, m, l) = (target.row(r), mean.row(r), log_var.row(r));
            (0..y.len()).fold(S::zero(), |acc, i| {
                let d = y[i] - m[i];
                acc - half * (d * d * (-l[i]).exp() + l[i]) - c
            })
        })
        .collect())
}

/// Mean and log-variance of the state delta for `(s, a, z)`.
pub fn dyn_forward<S: Scalar>(
    member: &GaussianHeadNet<S>,
    s: &Array<S>,
    a: &Array<S>,
    z: Option<&Array<S>>,
) -> Result<(Array<S>, Array<S>)> {
    member.predict(&Array::hstack(&[s, a])?, z)
}

/// Mean and log-variance of the reward for `(s, a, s', z)`.
pub fn reward_forward<S: Scalar>(
    member: &GaussianHeadNet<S>,
    s: &Array<S>,
    a: &Array<S>,
    s_next: &Array<S>,
    z: Option<&Array<S>>,
) -> Result<(Array<S>, Array<S>)> {
    member.predict(&Array::hstack(&[s, a, s_next])?, z)
}

/// Draws `s + Δ̂ + σ·ε` per row, with `ε ∼ N(0, I)` from `rng`.
pub fn dyn_sample<S: Scalar, R: Rng + ?Sized>(
    member: &GaussianHeadNet<S>,
    s: &Array<S>,
    a: &Array<S>,
    z: Option<&Array<S>>,
    rng: &mut R,
) -> Result<Array<S>> {
    let (mean, lv) = dyn_forward(member, s, a, z)?;
    let half = S::lit(0.5);
    let mut out = s.clone();
    for ((o, &m), &l) in out.data_mut().iter_mut().zip(mean.data()).zip(lv.data()) {
        let eps: f64 = rng.sample(StandardNormal);
        *o = *o + m + (half * l).exp() * S::lit(eps);
    }
    Ok(out)
}
