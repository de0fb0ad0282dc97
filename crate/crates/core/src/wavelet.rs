//! Discrete wavelet transform denoising of CSI amplitude streams.
//!
//! The transform is an orthogonal two-channel filter bank applied with
//! periodic wrap-around to a signal that is first extended by symmetric
//! reflection up to a multiple of `2^levels`. The pyramid therefore holds
//! exactly as many coefficients as the padded signal has samples, and the
//! inverse reproduces the padded signal to rounding error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Daubechies 8-tap reconstruction low-pass filter ("db4"), from the
/// spectral factorization evaluated in extended precision.
const DB4_LO: [f64; 8] = [
    0.230_377_813_308_896_500_86,
    0.714_846_570_552_915_647_09,
    0.630_880_767_929_858_907_88,
    -0.027_983_769_416_859_854_211,
    -0.187_034_811_719_093_084_08,
    0.030_841_381_835_560_763_627,
    0.032_883_011_666_885_199_735,
    -0.010_597_401_785_069_032_105,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    Haar,
    /// Daubechies with 2 vanishing moments (4 taps).
    Db2,
    /// Daubechies with 4 vanishing moments (8 taps).
    Db4,
}

impl WaveletFamily {
    /// Reconstruction low-pass taps.
    pub fn low_pass(self) -> Vec<f64> {
        match self {
            WaveletFamily::Haar => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
            WaveletFamily::Db2 => {
                let s3 = 3f64.sqrt();
                let k = 4.0 * 2f64.sqrt();
                vec![(1.0 + s3) / k, (3.0 + s3) / k, (3.0 - s3) / k, (1.0 - s3) / k]
            }
            WaveletFamily::Db4 => DB4_LO.to_vec(),
        }
    }

    /// Reconstruction high-pass taps, the quadrature mirror of [`Self::low_pass`].
    pub fn high_pass(self) -> Vec<f64> {
        let lo = self.low_pass();
        let n = lo.len();
        (0..n).map(|k| if k % 2 == 0 { lo[n - 1 - k] } else { -lo[n - 1 - k] }).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRule {
    /// `sigma * sqrt(2 ln n)` with `sigma = median(|finest detail|) / 0.6745`.
    Universal,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveletConfig {
    pub family: WaveletFamily,
    pub levels: usize,
    pub threshold_mode: ThresholdMode,
    pub threshold_rule: ThresholdRule,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        WaveletConfig {
            family: WaveletFamily::Db4,
            levels: 3,
            threshold_mode: ThresholdMode::Soft,
            threshold_rule: ThresholdRule::Universal,
        }
    }
}

impl WaveletConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("wavelet levels must be >= 1"));
        }
        if let ThresholdRule::Fixed(v) = self.threshold_rule {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("fixed threshold must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Shortest signal the transform accepts.
    pub fn min_len(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientPyramid<S> {
    pub approximation: Vec<S>,
    /// One band per level, coarse to fine.
    pub details: Vec<Vec<S>>,
    /// Length of the signal before symmetric padding.
    pub original_len: usize,
}

impl<S: Scalar> CoefficientPyramid<S> {
    pub fn coefficient_count(&self) -> usize {
        self.approximation.len() + self.details.iter().map(Vec::len).sum::<usize>()
    }

    pub fn energy(&self) -> S {
        self.approximation
            .iter()
            .chain(self.details.iter().flatten())
            .fold(S::zero(), |acc, &c| acc + c * c)
    }
}

/// Half-sample symmetric reflection of index `i` into `[0, n)`.
fn reflect(mut i: usize, n: usize) -> usize {
    let period = 2 * n;
    i %= period;
    if i < n {
        i
    } else {
        period - 1 - i
    }
}

fn analysis_step<S: Scalar>(x: &[S], lo: &[S], hi: &[S]) -> (Vec<S>, Vec<S>) {
    let n = x.len();
    let half = n / 2;
    let mut a = vec![S::zero(); half];
    let mut d = vec![S::zero(); half];
    for o in 0..half {
        for (j, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            let v = x[(2 * o + j) % n];
            a[o] += l * v;
            d[o] += h * v;
        }
    }
    (a, d)
}

fn synthesis_step<S: Scalar>(a: &[S], d: &[S], lo: &[S], hi: &[S]) -> Vec<S> {
    let n = 2 * a.len();
    let mut x = vec![S::zero(); n];
    for o in 0..a.len() {
        for (j, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            x[(2 * o + j) % n] += a[o] * l + d[o] * h;
        }
    }
    x
}

fn filters<S: Scalar>(family: WaveletFamily) -> (Vec<S>, Vec<S>) {
    let lo = family.low_pass().into_iter().map(S::lit).collect();
    let hi = family.high_pass().into_iter().map(S::lit).collect();
    (lo, hi)
}

/// Multi-level forward transform.
pub fn dwt_forward<S: Scalar>(signal: &[S], cfg: &WaveletConfig) -> Result<CoefficientPyramid<S>> {
    cfg.validate()?;
    let n = signal.len();
    let block = cfg.min_len();
    if n < block {
        return Err(Error::SignalTooShort { got: n, levels: cfg.levels, min: block });
    }
    let padded_len = n.div_ceil(block) * block;
    let mut approx: Vec<S> = (0..padded_len).map(|i| signal[reflect(i, n)]).collect();
    let (lo, hi) = filters::<S>(cfg.family);
    let mut details = Vec::with_capacity(cfg.levels);
    for _ in 0..cfg.levels {
        let (a, d) = analysis_step(&approx, &lo, &hi);
        details.push(d);
        approx = a;
    }
    details.reverse();
    Ok(CoefficientPyramid { approximation: approx, details, original_len: n })
}

/// Inverse of [`dwt_forward`]; returns the signal at its original length.
pub fn dwt_inverse<S: Scalar>(pyramid: &CoefficientPyramid<S>, cfg: &WaveletConfig) -> Result<Vec<S>> {
    cfg.validate()?;
    if pyramid.details.len() != cfg.levels {
        return Err(Error::config(format!(
            "pyramid has {} detail levels, configuration expects {}",
            pyramid.details.len(),
            cfg.levels
        )));
    }
    let (lo, hi) = filters::<S>(cfg.family);
    let mut approx = pyramid.approximation.clone();
    for d in &pyramid.details {
        if d.len() != approx.len() {
            return Err(Error::shape(format!(
                "detail band of length {} does not match approximation of length {}",
                d.len(),
                approx.len()
            )));
        }
        approx = synthesis_step(&approx, d, &lo, &hi);
    }
    if pyramid.original_len > approx.len() {
        return Err(Error::shape(format!(
            "original length {} exceeds reconstructed length {}",
            pyramid.original_len,
            approx.len()
        )));
    }
    approx.truncate(pyramid.original_len);
    Ok(approx)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Threshold that `denoise` would apply to this pyramid.
pub fn threshold_for<S: Scalar>(pyramid: &CoefficientPyramid<S>, cfg: &WaveletConfig) -> S {
    match cfg.threshold_rule {
        ThresholdRule::Fixed(v) => S::lit(v),
        ThresholdRule::Universal => {
            let finest = pyramid.details.last().map(|d| d.iter().map(|c| c.abs().as_f64()).collect()).unwrap_or_default();
            let sigma = median(finest) / 0.6745;
            let n = pyramid.original_len.max(2) as f64;
            S::lit(sigma * (2.0 * n.ln()).sqrt())
        }
    }
}

pub fn apply_threshold<S: Scalar>(c: S, lambda: S, mode: ThresholdMode) -> S {
    match mode {
        ThresholdMode::Soft => {
            let m = c.abs() - lambda;
            if m > S::zero() {
                c.signum() * m
            } else {
                S::zero()
            }
        }
        ThresholdMode::Hard => {
            if c.abs() > lambda {
                c
            } else {
                S::zero()
            }
        }
    }
}

/// Wavelet shrinkage: threshold every detail band, keep the approximation.
pub fn denoise<S: Scalar>(signal: &[S], cfg: &WaveletConfig) -> Result<Vec<S>> {
    if let Some(i) = signal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("signal sample {i}")));
    }
    let mut pyramid = dwt_forward(signal, cfg)?;
    let lambda = threshold_for(&pyramid, cfg);
    for band in &mut pyramid.details {
        for c in band.iter_mut() {
            *c = apply_threshold(*c, lambda, cfg.threshold_mode);
        }
    }
    dwt_inverse(&pyramid, cfg)
}
