use log::warn;

use super::{Clip, CsiFrame, CsiWindow, RawCsiRecording, SkeletonSequence, SAMPLES_PER_FRAME};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::{denoise, WaveletConfig};

/// Denoises every `(tx, rx, subcarrier)` amplitude stream over the whole
/// recording. Shrinkage can push small amplitudes below zero; those are
/// clamped back to zero.
pub fn denoise_recording<S: Scalar>(rec: &RawCsiRecording<S>, cfg: &WaveletConfig) -> Result<RawCsiRecording<S>> {
    let n = rec.num_samples();
    let (tx, rx, sc) = rec.geometry();
    let streams = tx * rx * sc;
    let src = rec.amplitudes().data();
    let mut out = vec![S::zero(); src.len()];
    let mut stream = vec![S::zero(); n];
    for s in 0..streams {
        for (t, v) in stream.iter_mut().enumerate() {
            *v = src[t * streams + s];
        }
        let clean = denoise(&stream, cfg)?;
        for (t, v) in clean.into_iter().enumerate() {
            out[t * streams + s] = v.max(S::zero());
        }
    }
    RawCsiRecording::new(Tensor::from_vec(rec.amplitudes().shape(), out)?, rec.sample_rate_hz)
}

/// Groups consecutive samples into frames of `[tx × (rx·sc) × 5]`, with the
/// 90-row axis ordered rx-major (`row = rx * sc + subcarrier`). Trailing
/// samples that do not fill a frame are dropped.
pub fn assemble_frames<S: Scalar>(rec: &RawCsiRecording<S>) -> Vec<CsiFrame<S>> {
    let (tx, rx, sc) = rec.geometry();
    let k = SAMPLES_PER_FRAME;
    let count = rec.num_samples() / k;
    let amps = rec.amplitudes();
    (0..count)
        .map(|f| {
            let image = Tensor::from_fn(&[tx, rx * sc, k], |i| {
                let step = i % k;
                let row = (i / k) % (rx * sc);
                let t = i / (k * rx * sc);
                amps.at(&[f * k + step, t, row / sc, row % sc])
            });
            CsiFrame { image, frame_index: f }
        })
        .collect()
}

/// Inverse of the frame reshape: `[tx × (rx·sc) × steps]` back to
/// `[tx × rx × sc × steps]`.
pub fn unreshape_frame<S: Scalar>(frame: &CsiFrame<S>, rx: usize) -> Result<Tensor<S>> {
    let s = frame.image.shape();
    if s.len() != 3 || s[1] % rx != 0 {
        return Err(Error::shape(format!("frame {:?} cannot be split into {rx} receive antennas", s)));
    }
    frame.image.clone().reshape(&[s[0], rx, s[1] / rx, s[2]])
}

/// Stacks frames into `[F × channels × rows × steps]`.
pub fn frames_to_tensor<S: Scalar>(frames: &[CsiFrame<S>]) -> Result<Tensor<S>> {
    Tensor::stack(&frames.iter().map(|f| &f.image).collect::<Vec<_>>())
}

/// Pairs each CSI frame with the skeleton of the same index, truncating to
/// the shorter of the two sequences.
pub fn align_with_video<S: Scalar>(
    frames: &[CsiFrame<S>],
    skeletons: &SkeletonSequence<S>,
    video_fps: f64,
) -> Result<Clip<S>> {
    if frames.is_empty() || skeletons.is_empty() {
        return Err(Error::Empty(format!(
            "cannot align {} CSI frames with {} skeletons",
            frames.len(),
            skeletons.len()
        )));
    }
    let expected_fps = super::CSI_SAMPLE_RATE_HZ / SAMPLES_PER_FRAME as f64;
    if (video_fps - expected_fps).abs() > 1e-9 {
        warn!("video at {video_fps} fps does not match the {expected_fps} Hz CSI frame rate; pairing by index");
    }
    let n = frames.len().min(skeletons.len());
    Ok(Clip {
        frames: frames_to_tensor(&frames[..n])?,
        skeleton: skeletons.slice(0, n),
        action_label: None,
        subject_id: None,
        clip_id: 0,
    })
}

/// Disjoint consecutive sub-clips of `clip_len` frames; the remainder is dropped.
pub fn split_into_clips<S: Scalar>(clip: &Clip<S>, clip_len: usize, first_id: usize) -> Vec<Clip<S>> {
    if clip_len == 0 {
        return Vec::new();
    }
    (0..clip.len() / clip_len)
        .map(|i| {
            let (a, b) = (i * clip_len, (i + 1) * clip_len);
            Clip {
                frames: clip.frames.slice_axis0(a, b),
                skeleton: clip.skeleton.slice(a, b),
                action_label: clip.action_label.clone(),
                subject_id: clip.subject_id.clone(),
                clip_id: first_id + i,
            }
        })
        .collect()
}

/// Number of windows of length `window` with step `stride` over `len` frames.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || len < window {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Cuts a clip into windows of `window` frames every `stride` frames.
pub fn slide_windows<S: Scalar>(clip: &Clip<S>, window: usize, stride: usize) -> Result<Vec<CsiWindow<S>>> {
    if window == 0 || stride == 0 {
        return Err(Error::config(format!("window ({window}) and stride ({stride}) must be >= 1")));
    }
    if clip.len() < window {
        warn!("clip {} has {} frames, shorter than the window of {window}; no windows produced", clip.clip_id, clip.len());
        return Ok(Vec::new());
    }
    Ok((0..window_count(clip.len(), window, stride))
        .map(|i| {
            let start = i * stride;
            let skeleton = clip.skeleton.slice(start, start + window);
            CsiWindow {
                frames: clip.frames.slice_axis0(start, start + window),
                velocity_gt: skeleton.velocity(),
                skeleton,
                action_label: clip.action_label.clone(),
                subject_id: clip.subject_id.clone(),
                clip_id: clip.clip_id,
                start,
            }
        })
        .collect())
}
