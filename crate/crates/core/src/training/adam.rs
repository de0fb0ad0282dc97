use std::collections::BTreeMap;

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::model::{Bound, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Tensor<S>>,
    pub v: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &Parameters<S>) -> Self {
        let zeros = |p: &Parameters<S>| p.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(params), v: zeros(params) }
    }

    /// Collects gradients for every bound parameter (zero when untouched).
    pub fn gather(params: &Parameters<S>, bound: &Bound, grads: &mut Gradients<S>) -> Result<BTreeMap<String, Tensor<S>>> {
        params
            .iter()
            .map(|(name, t)| {
                let g = grads.take(bound.get(name)?).unwrap_or_else(|| Tensor::zeros(t.shape()));
                Ok((name.clone(), g))
            })
            .collect()
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip(grads: &mut BTreeMap<String, Tensor<S>>, max_norm: f64) -> f64 {
        let norm = grads.values().flat_map(|g| g.data()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if norm > max_norm {
            let s = S::lit(max_norm / norm);
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    pub fn step(&mut self, params: &mut Parameters<S>, grads: &BTreeMap<String, Tensor<S>>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let one = S::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = S::lit(lr / bc1);
        let bc2_sqrt = S::lit(bc2.sqrt());
        let eps = S::lit(self.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::shape(format!("no gradient for {name}")))?;
            let m = self.m.get_mut(name).ok_or_else(|| Error::shape(format!("no moment for {name}")))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::shape(format!("no moment for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("gradient {:?} for parameter {name} {:?}", g.shape(), p.shape())));
            }
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *pi -= step * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
