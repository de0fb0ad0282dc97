use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss_node;
use crate::autograd::Graph;
use crate::error::Result;
use crate::model::{Bound, Ctx, ModelConfig, Parameters};
use crate::tensor::Tensor;

/// Tensors larger than this are checked on a random subset of coordinates.
const FULL_CHECK_LIMIT: usize = 10_000;
const SAMPLED_COORDS: usize = 512;
/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates skipped because `θ ± ε` fall on different sides of a
    /// max-pool switch, where central differences are meaningless.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Loss for `params`. When `encoded` is given the encoder is skipped and
/// its cached output used instead; only valid if no encoder weight moved.
fn loss_value(
    cfg: &ModelConfig,
    params: &Parameters<f64>,
    input: &Tensor<f64>,
    encoded: Option<&Tensor<f64>>,
    gt: &Tensor<f64>,
    alpha: f64,
) -> Result<(f64, Vec<usize>)> {
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, params, false);
    let y = g.constant(gt.clone());
    let mut ctx = Ctx::new(&mut g, cfg, &bound);
    let out = match encoded {
        Some(e) => {
            let e = ctx.g.constant(e.clone());
            ctx.forward_encoded(e)?
        }
        None => {
            let x = ctx.g.constant(input.clone());
            ctx.forward(x)?
        }
    };
    let l = loss_node(&mut g, out.keypoints, out.velocity, y, alpha)?;
    Ok((g.value(l).item(), g.pool_pattern()))
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the backpropagated gradient of the training loss with central
/// differences `(L(θ + ε) - L(θ - ε)) / 2ε` for every parameter tensor.
///
/// `input` is `[B, T, ch, rows, steps]` and `gt` is `[B, T, J, C]`.
pub fn grad_check(
    cfg: &ModelConfig,
    params: &Parameters<f64>,
    input: &Tensor<f64>,
    gt: &Tensor<f64>,
    alpha: f64,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    params.check(cfg)?;
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, params, true);
    let x = g.constant(input.clone());
    let y = g.constant(gt.clone());
    let out = Ctx::new(&mut g, cfg, &bound).forward(x)?;
    let l = loss_node(&mut g, out.keypoints, out.velocity, y, alpha)?;
    let grads = g.backward(l)?;
    let encoded = g.value(out.encoded).clone();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    let mut tensors = Vec::with_capacity(names.len());
    for name in names {
        let shape = params.get(&name).expect("name from params").shape().to_vec();
        let n: usize = shape.iter().product();
        let analytic = grads.get(bound.get(&name)?).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let coords: Vec<usize> = if n > FULL_CHECK_LIMIT {
            sample(&mut rng, n, SAMPLED_COORDS).into_vec()
        } else {
            (0..n).collect()
        };
        let cached = (!name.starts_with("encoder.")).then_some(&encoded);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut kinks = 0;
        for &i in &coords {
            let orig = work.get(&name).expect("present").data()[i];
            work.get_mut(&name).expect("present").data_mut()[i] = orig + epsilon;
            let (up, up_pattern) = loss_value(cfg, &work, input, cached, gt, alpha)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig - epsilon;
            let (down, down_pattern) = loss_value(cfg, &work, input, cached, gt, alpha)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig;
            if up_pattern != down_pattern {
                kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.data()[i];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        tensors.push(TensorCheck { name, checked: coords.len() - kinks, kinks, max_rel_error: max_rel, max_abs_error: max_abs });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { epsilon, max_rel_error, tensors })
}
