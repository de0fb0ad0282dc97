//! Seeded synthetic CSI/skeleton data.
//!
//! Each clip follows a smooth latent trajectory per joint coordinate
//! (template pose + clip offset + two low-frequency sinusoids). Every CSI
//! frame is a fixed random linear image of the pose at that frame and of its
//! frame-to-frame difference, plus optional white noise, so both position
//! and velocity are linearly recoverable from the CSI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{slide_windows, Clip, CsiWindow, SkeletonSequence, Units};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_clips: usize,
    pub clip_len: usize,
    pub window: usize,
    pub stride: usize,
    pub joints: usize,
    pub dims: usize,
    /// `[channels, rows, steps]` of one CSI frame.
    pub frame_shape: [usize; 3],
    pub noise_sigma: f64,
    /// Gain on the frame difference before it is mixed into the CSI.
    pub velocity_gain: f64,
    pub motion_amplitude: f64,
    pub offset_range: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_clips: 40,
            clip_len: 9,
            window: 3,
            stride: 2,
            joints: 17,
            dims: 2,
            frame_shape: [3, 90, 5],
            noise_sigma: 0.0,
            velocity_gain: 4.0,
            motion_amplitude: 0.15,
            offset_range: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clips == 0 {
            return Err(Error::config("num_clips must be >= 1"));
        }
        if self.clip_len == 0 || self.window == 0 || self.stride == 0 || self.joints == 0 {
            return Err(Error::config("clip_len, window, stride and joints must be >= 1"));
        }
        if !(2..=3).contains(&self.dims) {
            return Err(Error::config(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.frame_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("frame_shape entries must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be >= 0"));
        }
        Ok(())
    }
}

struct Motion {
    amp: [f64; 2],
    freq: [f64; 2],
    phase: [f64; 2],
}

/// Generates `num_clips` aligned clips of `clip_len` frames.
pub fn synth_clips<S: Scalar>(cfg: &SynthConfig) -> Result<Vec<Clip<S>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (j, c) = (cfg.joints, cfg.dims);
    let latent = j * c;
    let pixels: usize = cfg.frame_shape.iter().product();
    let template: Vec<f64> = (0..latent).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mix_scale = 1.0 / ((2 * latent) as f64).sqrt();
    let mixing: Vec<f64> = (0..pixels * 2 * latent)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * mix_scale
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let tau = std::f64::consts::TAU;

    let mut clips = Vec::with_capacity(cfg.num_clips);
    for clip_id in 0..cfg.num_clips {
        let offset: Vec<f64> = (0..c).map(|_| rng.random_range(-cfg.offset_range..=cfg.offset_range)).collect();
        let motions: Vec<Motion> = (0..latent)
            .map(|_| Motion {
                amp: [rng.random_range(0.0..=cfg.motion_amplitude), rng.random_range(0.0..=cfg.motion_amplitude)],
                freq: [rng.random_range(0.02..0.1), rng.random_range(0.02..0.1)],
                phase: [rng.random_range(0.0..tau), rng.random_range(0.0..tau)],
            })
            .collect();
        let pose = |t: f64| -> Vec<f64> {
            (0..latent)
                .map(|i| {
                    let m = &motions[i];
                    template[i]
                        + offset[i % c]
                        + m.amp[0] * (tau * m.freq[0] * t + m.phase[0]).sin()
                        + m.amp[1] * (tau * m.freq[1] * t + m.phase[1]).sin()
                })
                .collect()
        };
        let mut coords = Vec::with_capacity(cfg.clip_len * latent);
        let mut frames = Vec::with_capacity(cfg.clip_len * pixels);
        let mut features = vec![0.0; 2 * latent];
        for t in 0..cfg.clip_len {
            let now = pose(t as f64);
            let before = pose(t as f64 - 1.0);
            for i in 0..latent {
                features[i] = now[i];
                features[latent + i] = cfg.velocity_gain * (now[i] - before[i]);
            }
            for p in 0..pixels {
                let row = &mixing[p * 2 * latent..(p + 1) * 2 * latent];
                let mut v: f64 = row.iter().zip(&features).map(|(a, b)| a * b).sum();
                if cfg.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                frames.push(S::lit(v));
            }
            coords.extend(now.into_iter().map(S::lit));
        }
        let [ch, rows, steps] = cfg.frame_shape;
        clips.push(Clip {
            frames: Tensor::from_vec(&[cfg.clip_len, ch, rows, steps], frames)?,
            skeleton: SkeletonSequence::new(Tensor::from_vec(&[cfg.clip_len, j, c], coords)?, None, Units::Normalized)?,
            action_label: Some(format!("synthetic-{}", clip_id % 3)),
            subject_id: Some(format!("S{:02}", clip_id % 5)),
            clip_id,
        });
    }
    Ok(clips)
}

/// Windows of every synthetic clip, in clip order.
pub fn synth_generate<S: Scalar>(cfg: &SynthConfig) -> Result<Vec<CsiWindow<S>>> {
    let mut out = Vec::new();
    for clip in synth_clips(cfg)? {
        out.extend(slide_windows(&clip, cfg.window, cfg.stride)?);
    }
    Ok(out)
}
