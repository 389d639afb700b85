use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::normalizer::{Normalizer, NormalizerState};
use crate::error::{Error, Result};
use crate::gradcore::{Array, Graph, Node, ParamStore};
use crate::scalar::{sigmoid, softplus, softplus_inv, Scalar};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Swish,
    Tanh,
}

/// Observed quantity fed to a network, in input order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputPart {
    State,
    Action,
    NextState,
}

/// Architecture and input composition of a [`GaussianHeadNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub inputs: Vec<InputPart>,
    /// Latent factors appended (unnormalized) after the observed inputs.
    pub latent_factors: Vec<String>,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub log_var_min: f64,
    pub log_var_max: f64,
}

impl NetSpec {
    /// Predicts the state delta from `(s, a, z)`.
    pub fn dynamics(state_dim: usize, action_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            state_dim,
            action_dim,
            inputs: vec![InputPart::State, InputPart::Action],
            latent_factors: Vec::new(),
            latent_dim: 0,
            hidden,
            output_dim: state_dim,
            activation: Activation::Swish,
            log_var_min: LOG_VAR_MIN,
            log_var_max: LOG_VAR_MAX,
        }
    }

    /// Predicts the scalar reward from `(s, a, s', z)`.
    pub fn reward(state_dim: usize, action_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            inputs: vec![InputPart::State, InputPart::Action, InputPart::NextState],
            output_dim: 1,
            ..Self::dynamics(state_dim, action_dim, hidden)
        }
    }

    pub fn with_latents(mut self, factors: Vec<String>, dim: usize) -> Self {
        self.latent_factors = factors;
        self.latent_dim = dim;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn obs_dim(&self) -> usize {
        self.inputs
            .iter()
            .map(|p| match p {
                InputPart::State | InputPart::NextState => self.state_dim,
                InputPart::Action => self.action_dim,
            })
            .sum()
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim() + self.latent_dim
    }
}

/// Soft two-sided bound of a raw log-variance into `(lo, hi)`:
/// `t = hi − softplus(hi − raw)`, then `lo + k·softplus(t − lo)` with
/// `k = (hi − lo) / softplus(hi − lo)` so the image is exactly `(lo, hi)`.
#[inline]
pub fn bound_log_var<S: Scalar>(raw: S, lo: S, hi: S) -> S {
    let k = (hi - lo) / softplus(hi - lo);
    let t = hi - softplus(hi - raw);
    lo + k * softplus(t - lo)
}

/// Raw pre-activation that [`bound_log_var`] maps to `lv`.
pub fn unbound_log_var<S: Scalar>(lv: S, lo: S, hi: S) -> S {
    let k = (hi - lo) / softplus(hi - lo);
    let t = lo + softplus_inv((lv - lo) / k);
    hi - softplus_inv(hi - t)
}

/// Multilayer network with a diagonal-Gaussian head (mean and bounded
/// log-variance). Owns its parameters and its input normalizer.
#[derive(Clone, Debug)]
pub struct GaussianHeadNet<S: Scalar> {
    spec: NetSpec,
    params: ParamStore<S>,
    normalizer: Normalizer<S>,
}

fn layer_names(i: usize, n_hidden: usize) -> (String, String) {
    if i == n_hidden {
        ("out/w".into(), "out/b".into())
    } else {
        (format!("h{i}/w"), format!("h{i}/b"))
    }
}

impl<S: Scalar> GaussianHeadNet<S> {
    /// Fan-in scaled uniform hidden weights; zero output layer, so an
    /// untrained net predicts zero mean.
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let mut fan_in = spec.input_dim();
        for (i, &width) in spec.hidden.iter().enumerate() {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let w: Vec<S> = (0..fan_in * width).map(|_| S::lit(rng.random_range(-bound..bound))).collect();
            let (wn, bn) = layer_names(i, spec.hidden.len());
            params.insert(wn, Array::matrix(fan_in, width, w).expect("sized"));
            params.insert(bn, Array::zeros(&[width]));
            fan_in = width;
        }
        let (wn, bn) = layer_names(spec.hidden.len(), spec.hidden.len());
        params.insert(wn, Array::zeros(&[fan_in, 2 * spec.output_dim]));
        params.insert(bn, Array::zeros(&[2 * spec.output_dim]));
        let normalizer = Normalizer::new(spec.obs_dim());
        Self { spec, params, normalizer }
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn normalizer(&self) -> &Normalizer<S> {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, normalizer: Normalizer<S>) -> Result<()> {
        if normalizer.dim() != self.spec.obs_dim() {
            return Err(Error::shape("set_normalizer", format!("{} vs {}", normalizer.dim(), self.spec.obs_dim())));
        }
        self.normalizer = normalizer;
        Ok(())
    }

    fn bounds(&self) -> (S, S) {
        (S::lit(self.spec.log_var_min), S::lit(self.spec.log_var_max))
    }

    fn check_inputs(&self, op: &'static str, obs: &Array<S>, latent_cols: usize, latent_rows: usize) -> Result<()> {
        if obs.rank() != 2 || obs.cols() != self.spec.obs_dim() {
            return Err(Error::shape(op, format!("observed input {:?}, expected [_, {}]", obs.shape(), self.spec.obs_dim())));
        }
        if latent_cols != self.spec.latent_dim || (latent_cols > 0 && latent_rows != obs.rows()) {
            return Err(Error::shape(
                op,
                format!("latent [{latent_rows}, {latent_cols}], expected [{}, {}]", obs.rows(), self.spec.latent_dim),
            ));
        }
        Ok(())
    }

    /// Records the forward pass. `obs` holds raw observed inputs `[B, obs_dim]`;
    /// `latent` is a `[B, latent_dim]` node or `None` when the net has no
    /// latent inputs. Returns `(mean, log_var)` nodes of shape `[B, out]`.
    pub fn forward_graph(&self, g: &mut Graph<S>, obs: &Array<S>, latent: Option<Node>) -> Result<(Node, Node)> {
        let (lc, lr) = match latent {
            Some(z) => (g.value(z).cols(), g.value(z).rows()),
            None => (0, 0),
        };
        self.check_inputs("net_forward", obs, lc, lr)?;
        let x = g.constant(self.normalizer.normalize(obs));
        let mut h = match latent {
            Some(z) => g.concat(&[x, z])?,
            None => x,
        };
        let n_hidden = self.spec.hidden.len();
        for i in 0..=n_hidden {
            let (wn, bn) = layer_names(i, n_hidden);
            let w = g.param(&self.params, &wn)?;
            let b = g.param(&self.params, &bn)?;
            h = g.affine(h, w, b)?;
            if i < n_hidden {
                h = match self.spec.activation {
                    Activation::Swish => g.swish(h)?,
                    Activation::Tanh => g.tanh(h)?,
                };
            }
        }
        let out = self.spec.output_dim;
        let mean = g.slice(h, 0, out)?;
        let raw = g.slice(h, out, 2 * out)?;
        let log_var = self.bound_graph(g, raw)?;
        Ok((mean, log_var))
    }

    fn bound_graph(&self, g: &mut Graph<S>, raw: Node) -> Result<Node> {
        let (lo, hi) = self.bounds();
        let k = (hi - lo) / softplus(hi - lo);
        let neg = g.scale(raw, -S::one())?;
        let gap = g.shift(neg, hi)?;
        let sp = g.softplus(gap)?;
        let neg = g.scale(sp, -S::one())?;
        let t = g.shift(neg, hi)?;
        let t = g.shift(t, -lo)?;
        let sp = g.softplus(t)?;
        let sp = g.scale(sp, k)?;
        g.shift(sp, lo)
    }

    /// Graph-free forward pass on raw inputs. `latent` must be
    /// `[rows, latent_dim]` when the net has latent inputs.
    pub fn predict(&self, obs: &Array<S>, latent: Option<&Array<S>>) -> Result<(Array<S>, Array<S>)> {
        let (lc, lr) = latent.map(|z| (z.cols(), z.rows())).unwrap_or((0, 0));
        self.check_inputs("net_predict", obs, lc, lr)?;
        let rows = obs.rows();
        let norm = self.normalizer.normalize(obs);
        let mut x = Array2::<S>::zeros((rows, self.spec.input_dim()));
        let od = self.spec.obs_dim();
        for r in 0..rows {
            let mut xr = x.row_mut(r);
            for (c, &v) in norm.row(r).iter().enumerate() {
                xr[c] = v;
            }
            if let Some(z) = latent {
                for (c, &v) in z.row(r).iter().enumerate() {
                    xr[od + c] = v;
                }
            }
        }
        let n_hidden = self.spec.hidden.len();
        for i in 0..=n_hidden {
            let (wn, bn) = layer_names(i, n_hidden);
            let w = self.params.get(&wn)?;
            let b = self.params.get(&bn)?;
            let mut y = x.dot(&w.view2());
            for mut row in y.rows_mut() {
                for (v, &bias) in row.iter_mut().zip(b.data()) {
                    *v = *v + bias;
                }
            }
            if i < n_hidden {
                match self.spec.activation {
                    Activation::Swish => y.mapv_inplace(|v| v * sigmoid(v)),
                    Activation::Tanh => y.mapv_inplace(|v| v.tanh()),
                }
            }
            x = y;
        }
        let out = self.spec.output_dim;
        let (lo, hi) = self.bounds();
        let mut mean = Vec::with_capacity(rows * out);
        let mut log_var = Vec::with_capacity(rows * out);
        for r in x.rows() {
            for c in 0..out {
                mean.push(r[c]);
                log_var.push(bound_log_var(r[out + c], lo, hi));
            }
        }
        Ok((Array::matrix(rows, out, mean)?, Array::matrix(rows, out, log_var)?))
    }

    pub(crate) fn to_state(&self) -> NetState {
        let params = self
            .params
            .iter()
            .map(|(k, v)| (k.to_string(), (v.shape().to_vec(), v.data().iter().map(|x| x.as_f64()).collect())))
            .collect();
        NetState { spec: self.spec.clone(), params, normalizer: self.normalizer.to_state() }
    }

    pub(crate) fn from_state(state: &NetState) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Self::new(state.spec.clone(), &mut rng);
        let expected: Vec<String> = net.params.names().map(str::to_string).collect();
        let found: Vec<String> = state.params.keys().cloned().collect();
        if expected != found {
            return Err(Error::Format(format!("parameter names {found:?} do not match architecture {expected:?}")));
        }
        for (name, (shape, data)) in &state.params {
            let arr = Array::new(shape.clone(), data.iter().map(|&v| S::lit(v)).collect())
                .map_err(|e| Error::Format(e.to_string()))?;
            net.params.set(name, arr).map_err(|e| Error::Format(e.to_string()))?;
        }
        net.set_normalizer(Normalizer::from_state(&state.normalizer)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct NetState {
    pub spec: NetSpec,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub normalizer: NormalizerState,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bound_is_interior_and_invertible() {
        let (lo, hi) = (LOG_VAR_MIN, LOG_VAR_MAX);
        for i in -300..=300 {
            let raw = i as f64 * 0.1;
            let lv = bound_log_var(raw, lo, hi);
            assert!(lv > lo && lv < hi, "raw {raw} -> {lv}");
        }
        for &lv in &[-9.0, -4.605, -1.0, 0.0, 0.4] {
            let raw = unbound_log_var(lv, lo, hi);
            assert!((bound_log_var(raw, lo, hi) - lv).abs() < 1e-10);
        }
    }

    #[test]
    fn graph_and_predict_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = NetSpec::dynamics(3, 2, vec![8, 8]).with_latents(vec!["z".into()], 2);
        let mut net = GaussianHeadNet::<f64>::new(spec, &mut rng);
        // Non-zero output layer so the comparison is not vacuous.
        let w = Array::new(vec![8, 6], (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        net.params_mut().set("out/w", w).unwrap();
        let obs = Array::new(vec![4, 5], (0..20).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let z = Array::new(vec![4, 2], (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let (m1, l1) = net.predict(&obs, Some(&z)).unwrap();
        let mut g = Graph::new();
        let zn = g.constant(z);
        let (m2, l2) = net.forward_graph(&mut g, &obs, Some(zn)).unwrap();
        for (a, b) in m1.data().iter().zip(g.value(m2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in l1.data().iter().zip(g.value(l2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = GaussianHeadNet::<f64>::new(NetSpec::dynamics(2, 1, vec![4]), &mut rng);
        let bad = Array::zeros(&[3, 4]);
        assert!(net.predict(&bad, None).is_err());
        let z = Array::zeros(&[3, 1]);
        assert!(net.predict(&Array::zeros(&[3, 3]), Some(&z)).is_err());
    }

    #[test]
    fn linear_net_without_hidden_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = GaussianHeadNet::<f64>::new(NetSpec::dynamics(1, 1, vec![]), &mut rng);
        let (m, _) = net.predict(&Array::zeros(&[2, 2]), None).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0]);
    }
}
