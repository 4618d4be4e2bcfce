//! First-order adaptive-moment update over a flat parameter slice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { rate: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::Config(format!("step rate must be > 0, got {}", self.rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment decays must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("stabilizer must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    params: AdamParams,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(params: AdamParams, len: usize) -> Self {
        Self { params, m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update of `x` against gradient `g`.
    pub fn step(&mut self, x: &mut [T], g: &[T]) {
        assert_eq!(x.len(), self.m.len());
        assert_eq!(g.len(), self.m.len());
        self.t += 1;
        let b1 = self.params.beta1;
        let b2 = self.params.beta2;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (b1, b2) = (lit::<T>(b1), lit::<T>(b2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step = lit::<T>(self.params.rate / c1);
        let c2 = lit::<T>(c2);
        let eps = lit::<T>(self.params.eps);
        for ((xi, &gi), (mi, vi)) in x.iter_mut().zip(g).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            *xi -= step * *mi / ((*vi / c2).sqrt() + eps);
        }
    }
}
