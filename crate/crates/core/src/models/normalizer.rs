use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Array;
use crate::scalar::Scalar;

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension running mean and standard deviation (Welford).
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer<S> {
    mean: Vec<S>,
    m2: Vec<S>,
    count: u64,
}

impl<S: Scalar> Normalizer<S> {
    /// Identity normalizer of width `dim` (mean 0, std 1 until data arrives).
    pub fn new(dim: usize) -> Self {
        Self { mean: vec![S::zero(); dim], m2: vec![S::zero(); dim], count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[S] {
        &self.mean
    }

    pub fn std(&self) -> Vec<S> {
        (0..self.dim()).map(|i| self.std_at(i)).collect()
    }

    #[inline]
    fn std_at(&self, i: usize) -> S {
        if self.count == 0 {
            return S::one();
        }
        (self.m2[i] / S::lit(self.count as f64)).sqrt().max(S::lit(STD_FLOOR))
    }

    /// Folds every row of `rows` into the running statistics.
    pub fn absorb(&mut self, rows: &Array<S>) -> Result<()> {
        if rows.cols() != self.dim() {
            return Err(Error::shape("normalizer", format!("width {} vs {}", rows.cols(), self.dim())));
        }
        for r in 0..rows.rows() {
            self.count += 1;
            let n = S::lit(self.count as f64);
            for (i, &x) in rows.row(r).iter().enumerate() {
                let d = x - self.mean[i];
                self.mean[i] = self.mean[i] + d / n;
                self.m2[i] = self.m2[i] + d * (x - self.mean[i]);
            }
        }
        Ok(())
    }

    /// Replaces the statistics with those of `rows`.
    pub fn fit(&mut self, rows: &Array<S>) -> Result<()> {
        if rows.rows() == 0 || rows.is_empty() {
            return Err(Error::Empty("normalizer dataset".into()));
        }
        *self = Self::new(self.dim());
        self.absorb(rows)
    }

    pub fn normalize(&self, rows: &Array<S>) -> Array<S> {
        let mut out = rows.clone();
        let d = self.dim();
        let inv: Vec<S> = (0..d).map(|i| S::one() / self.std_at(i)).collect();
        for chunk in out.data_mut().chunks_mut(d) {
            for (i, x) in chunk.iter_mut().enumerate() {
                *x = (*x - self.mean[i]) * inv[i];
            }
        }
        out
    }

    pub fn denormalize(&self, rows: &Array<S>) -> Array<S> {
        let mut out = rows.clone();
        let d = self.dim();
        for chunk in out.data_mut().chunks_mut(d) {
            for (i, x) in chunk.iter_mut().enumerate() {
                *x = *x * self.std_at(i) + self.mean[i];
            }
        }
        out
    }

    pub(crate) fn to_state(&self) -> NormalizerState {
        NormalizerState {
            mean: self.mean.iter().map(|v| v.as_f64()).collect(),
            m2: self.m2.iter().map(|v| v.as_f64()).collect(),
            count: self.count,
        }
    }

    pub(crate) fn from_state(s: &NormalizerState) -> Result<Self> {
        if s.mean.len() != s.m2.len() {
            return Err(Error::Format("normalizer mean/m2 length mismatch".into()));
        }
        Ok(Self {
            mean: s.mean.iter().map(|&v| S::lit(v)).collect(),
            m2: s.m2.iter().map(|&v| S::lit(v)).collect(),
            count: s.count,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct NormalizerState {
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub count: u64,
}
