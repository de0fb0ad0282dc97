//! Loss, optimizer, training loop and gradient verification.

mod adam;
mod gradcheck;
mod trainer;

pub use adam::Adam;
pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};
pub use trainer::{batch_tensors, fit, predict_windows, train, EpochRecord, EvalSummary, TrainOptions, TrainOutcome, TrainState, Trainer};

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    None,
    /// `lr · gamma^floor(epoch / step_size)`.
    Step { step_size: usize, gamma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the velocity term; the keypoint term gets `1 - alpha`.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size_train: usize,
    pub batch_size_eval: usize,
    pub lr: f64,
    pub scheduler: Scheduler,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Batches assembled ahead on a helper thread; 0 assembles inline.
    /// Batch order is the same either way.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.2,
            epochs: 100,
            batch_size_train: 128,
            batch_size_eval: 32,
            lr: 1e-4,
            scheduler: Scheduler::None,
            seed: 0,
            grad_clip: None,
            prefetch: 0,
        }
    }
}

impl TrainConfig {
    /// 3-D MMFi-style protocol: 50 epochs with step decay.
    pub fn mmfi() -> Self {
        TrainConfig { epochs: 50, scheduler: Scheduler::Step { step_size: 10, gamma: 0.85 }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size_train == 0 || self.batch_size_eval == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        if let Scheduler::Step { step_size, gamma } = self.scheduler {
            if step_size == 0 || !(gamma > 0.0) {
                return Err(Error::config("step scheduler needs step_size >= 1 and gamma > 0"));
            }
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.scheduler {
        Scheduler::None => cfg.lr,
        Scheduler::Step { step_size, gamma } => cfg.lr * gamma.powi((epoch / step_size.max(1)) as i32),
    }
}

/// Builds `alpha · mse(V_pred, V_gt) + (1 - alpha) · mse(K_pred, K_gt)` with
/// `V_gt = K_gt[T-1] - K_gt[0]`.
pub fn loss_node<S: Scalar>(g: &mut Graph<S>, k_pred: Var, v_pred: Var, k_gt: Var, alpha: f64) -> Result<Var> {
    let ks = g.shape(k_gt).to_vec();
    if ks.len() != 4 || g.shape(k_pred) != ks.as_slice() {
        return Err(Error::shape(format!("keypoints {:?} vs ground truth {:?}", g.shape(k_pred), ks)));
    }
    if g.shape(v_pred) != [ks[0], ks[2], ks[3]] {
        return Err(Error::shape(format!("velocity {:?} does not match [B, J, C] of {:?}", g.shape(v_pred), ks)));
    }
    let last = g.select(k_gt, 1, ks[1] - 1)?;
    let first = g.select(k_gt, 1, 0)?;
    let v_gt = g.sub(last, first)?;
    let lv = g.mse(v_pred, v_gt)?;
    let lk = g.mse(k_pred, k_gt)?;
    let lv = g.scale(lv, S::lit(alpha));
    let lk = g.scale(lk, S::lit(1.0 - alpha));
    g.add(lv, lk)
}

/// Loss on plain tensors: `k_pred`, `k_gt` are `[B, T, J, C]`, `v_pred` is
/// `[B, J, C]`.
pub fn loss<S: Scalar>(k_pred: &Tensor<S>, v_pred: &Tensor<S>, k_gt: &Tensor<S>, alpha: f64) -> Result<S> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    for (name, t) in [("predicted keypoints", k_pred), ("predicted velocity", v_pred), ("ground truth", k_gt)] {
        if !t.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let s = k_gt.shape();
    if s.len() != 4 || k_pred.shape() != s {
        return Err(Error::shape(format!("keypoints {:?} vs ground truth {:?}", k_pred.shape(), s)));
    }
    if v_pred.shape() != [s[0], s[2], s[3]] {
        return Err(Error::shape(format!("velocity {:?} does not match [B, J, C] of {:?}", v_pred.shape(), s)));
    }
    weighted_mse_loss(k_pred.data(), v_pred.data(), k_gt.data(), [s[0], s[1], s[2], s[3]], S::lit(alpha))
}

/// The same loss over any exact or approximate number type, on row-major
/// slices of shape `[B, T, J, C]` (keypoints) and `[B, J, C]` (velocity).
pub fn weighted_mse_loss<T>(k_pred: &[T], v_pred: &[T], k_gt: &[T], shape: [usize; 4], alpha: T) -> Result<T>
where
    T: Num + FromPrimitive + Clone,
{
    let [b, t, j, c] = shape;
    let frame = j * c;
    if t == 0 || frame == 0 || b == 0 {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    if k_pred.len() != b * t * frame || k_gt.len() != b * t * frame || v_pred.len() != b * frame {
        return Err(Error::shape(format!("slice lengths do not match shape {shape:?}")));
    }
    let count = |n: usize| T::from_usize(n).ok_or_else(|| Error::config("element count not representable"));
    let mut lk = T::zero();
    for (p, g) in k_pred.iter().zip(k_gt) {
        let d = p.clone() - g.clone();
        lk = lk + d.clone() * d;
    }
    let mut lv = T::zero();
    for bi in 0..b {
        let first = &k_gt[bi * t * frame..][..frame];
        let last = &k_gt[(bi * t + t - 1) * frame..][..frame];
        for i in 0..frame {
            let d = v_pred[bi * frame + i].clone() - (last[i].clone() - first[i].clone());
            lv = lv + d.clone() * d;
        }
    }
    let lk = lk / count(b * t * frame)?;
    let lv = lv / count(b * frame)?;
    Ok(alpha.clone() * lv + (T::one() - alpha) * lk)
}
