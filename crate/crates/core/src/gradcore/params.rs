use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a [`ParamStore`], used by graphs to route gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StoreId(u64);

impl StoreId {
    fn fresh() -> Self {
        StoreId(NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Debug)]
struct Slot<S> {
    value: Array<S>,
    m: Array<S>,
    v: Array<S>,
    /// Number of Adam updates this parameter has received (bias correction).
    updates: u64,
}

/// Named trainable arrays with Adam moment accumulators.
#[derive(Debug)]
pub struct ParamStore<S> {
    id: StoreId,
    slots: BTreeMap<String, Slot<S>>,
    step: u64,
}

impl<S: Scalar> Clone for ParamStore<S> {
    /// Clones carry a fresh identity so the copy trains independently.
    fn clone(&self) -> Self {
        Self { id: StoreId::fresh(), slots: self.slots.clone(), step: self.step }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradTable<S> {
    grads: BTreeMap<String, Array<S>>,
}

impl<S: Scalar> GradTable<S> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Array<S>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Array<S>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array<S>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, creating entries as needed.
    pub fn accumulate(&mut self, other: &GradTable<S>) {
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: S) {
        for g in self.grads.values_mut() {
            g.scale_in_place(k);
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> S {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .fold(S::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { id: StoreId::fresh(), slots: BTreeMap::new(), step: 0 }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    /// Registers (or replaces) a parameter and zeroes its moments.
    pub fn insert(&mut self, name: impl Into<String>, value: Array<S>) {
        let m = Array::zeros(value.shape());
        let v = Array::zeros(value.shape());
        self.slots.insert(name.into(), Slot { value, m, v, updates: 0 });
    }

    pub fn get(&self, name: &str) -> Result<&Array<S>> {
        self.slots.get(name).map(|s| &s.value).ok_or_else(|| Error::unknown("parameter", name))
    }

    /// Overwrites a parameter's value in place, keeping its moments.
    pub fn set(&mut self, name: &str, value: Array<S>) -> Result<()> {
        let slot = self.slots.get_mut(name).ok_or_else(|| Error::unknown("parameter", name))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("`{name}`: {:?} vs {:?}", slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<S>)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Result<(&Array<S>, &Array<S>)> {
        let s = self.slots.get(name).ok_or_else(|| Error::unknown("parameter", name))?;
        Ok((&s.m, &s.v))
    }

    /// Zeroes the moment accumulators of every parameter.
    pub fn clear_moments(&mut self) {
        for s in self.slots.values_mut() {
            s.m = Array::zeros(s.value.shape());
            s.v = Array::zeros(s.value.shape());
            s.updates = 0;
        }
    }

    /// Zero gradient for every parameter, shaped like the parameters.
    pub fn zero_grads(&self) -> GradTable<S> {
        let mut t = GradTable::new();
        for (k, s) in &self.slots {
            t.insert(k.clone(), Array::zeros(s.value.shape()));
        }
        t
    }

    /// One Adam update (β₁=0.9, β₂=0.999, ε=1e-8) on the parameters covered
    /// by `grads`. Parameters absent from `grads` are left untouched,
    /// moments included. Nothing is modified if any gradient is rejected.
    pub fn adam_step(&mut self, grads: &GradTable<S>, learning_rate: S) -> Result<()> {
        if !(learning_rate > S::zero()) {
            return Err(Error::Invalid(format!("learning rate must be > 0, got {learning_rate}")));
        }
        for (name, g) in grads.iter() {
            let slot = self.slots.get(name).ok_or_else(|| Error::unknown("parameter", name.as_str()))?;
            if slot.value.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{name}`: parameter {:?}, gradient {:?}", slot.value.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { context: format!("gradient of parameter `{name}`") });
            }
        }
        let (b1, b2, eps) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2), S::lit(ADAM_EPS));
        for (name, g) in grads.iter() {
            let Slot { value, m, v, updates } = self.slots.get_mut(name).expect("checked above");
            *updates += 1;
            let t = *updates as i32;
            let c1 = S::one() - b1.powi(t);
            let c2 = S::one() - b2.powi(t);
            let params = value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                params[i] = params[i] - learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and value bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, s) in &self.slots {
            h.update(k.as_bytes());
            for d in s.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in s.value.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
