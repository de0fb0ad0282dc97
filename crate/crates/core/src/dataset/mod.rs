//! CSI frames, skeleton ground truth, windowing, synthesis, splitting, and
//! on-disk dataset loading.

mod coco;
mod frames;
mod loader;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use coco::{select_coco17, BODY25_TO_COCO17, COCO17_NAMES};
pub use frames::{
    align_with_video, assemble_frames, denoise_recording, frames_to_tensor, slide_windows, split_into_clips,
    unreshape_frame, window_count,
};
pub use loader::{
    load_manifest, load_mmfi_style, preprocess_recording, read_manifest, skeleton_from_tensor, windows_from_clips,
    write_manifest,
    LoadOptions, ManifestRow, MmfiProtocol, PreprocessOptions, MANIFEST_FILE,
};
pub use split::{split, Granularity, Ratio, SplitSpec};
pub use synth::{synth_clips, synth_generate, SynthConfig};

/// CSI sampling rate of the capture setup, in Hz.
pub const CSI_SAMPLE_RATE_HZ: f64 = 150.0;
/// Video frame rate of the ground-truth camera, in Hz.
pub const VIDEO_FPS: f64 = 30.0;
/// CSI samples aggregated into one frame.
pub const SAMPLES_PER_FRAME: usize = 5;

/// Raw amplitudes `[samples × tx × rx × subcarriers]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCsiRecording<S> {
    amplitudes: Tensor<S>,
    pub sample_rate_hz: f64,
}

impl<S: Scalar> RawCsiRecording<S> {
    pub fn new(amplitudes: Tensor<S>, sample_rate_hz: f64) -> Result<Self> {
        if amplitudes.rank() != 4 {
            return Err(Error::shape(format!(
                "raw CSI must be [samples, tx, rx, subcarriers], got {:?}",
                amplitudes.shape()
            )));
        }
        if amplitudes.shape()[0] < SAMPLES_PER_FRAME {
            return Err(Error::Empty(format!(
                "recording has {} samples, at least {SAMPLES_PER_FRAME} are needed",
                amplitudes.shape()[0]
            )));
        }
        if let Some(i) = amplitudes.data().iter().position(|v| !v.is_finite() || *v < S::zero()) {
            return Err(Error::NonFinite(format!("raw amplitude {i} is not a finite non-negative value")));
        }
        Ok(RawCsiRecording { amplitudes, sample_rate_hz })
    }

    pub fn amplitudes(&self) -> &Tensor<S> {
        &self.amplitudes
    }

    pub fn num_samples(&self) -> usize {
        self.amplitudes.shape()[0]
    }

    /// `(tx, rx, subcarriers)`.
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.amplitudes.shape();
        (s[1], s[2], s[3])
    }
}

/// One frame image `[tx × (rx·subcarriers) × samples_per_frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiFrame<S> {
    pub image: Tensor<S>,
    pub frame_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Pixels,
    Millimeters,
    Normalized,
}

impl Units {
    pub fn label(self) -> &'static str {
        match self {
            Units::Pixels => "px",
            Units::Millimeters => "mm",
            Units::Normalized => "units",
        }
    }
}

/// Joint coordinates `[T × J × C]` with optional confidences `[T × J]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence<S> {
    pub coords: Tensor<S>,
    pub confidence: Option<Tensor<S>>,
    pub units: Units,
}

impl<S: Scalar> SkeletonSequence<S> {
    pub fn new(coords: Tensor<S>, confidence: Option<Tensor<S>>, units: Units) -> Result<Self> {
        if coords.rank() != 3 || !(2..=3).contains(&coords.shape()[2]) {
            return Err(Error::shape(format!("skeleton must be [T, J, 2|3], got {:?}", coords.shape())));
        }
        if !coords.is_finite() {
            return Err(Error::NonFinite("skeleton coordinates".into()));
        }
        if let Some(c) = &confidence {
            if c.shape() != &coords.shape()[..2] {
                return Err(Error::shape(format!(
                    "confidence {:?} does not match skeleton {:?}",
                    c.shape(),
                    coords.shape()
                )));
            }
        }
        Ok(SkeletonSequence { coords, confidence, units })
    }

    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joints(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn dims(&self) -> usize {
        self.coords.shape()[2]
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        SkeletonSequence {
            coords: self.coords.slice_axis0(start, end),
            confidence: self.confidence.as_ref().map(|c| c.slice_axis0(start, end)),
            units: self.units,
        }
    }

    /// Displacement of every joint from the first to the last frame.
    pub fn velocity(&self) -> Tensor<S> {
        let last = self.coords.index_axis0(self.len() - 1);
        let first = self.coords.index_axis0(0);
        last.zip_map(&first, |a, b| a - b).expect("same shape")
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        self.confidence.as_ref().map(|c| c.sum().as_f64() / c.len().max(1) as f64)
    }
}

/// A frame-aligned CSI/skeleton sequence: one recording segment or clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip<S> {
    /// `[L × channels × rows × steps]`.
    pub frames: Tensor<S>,
    pub skeleton: SkeletonSequence<S>,
    pub action_label: Option<String>,
    pub subject_id: Option<String>,
    pub clip_id: usize,
}

impl<S: Scalar> Clip<S> {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One model input: `T` frames with the aligned skeleton sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiWindow<S> {
    /// `[T × channels × rows × steps]`.
    pub frames: Tensor<S>,
    pub skeleton: SkeletonSequence<S>,
    /// `coords[T-1] - coords[0]`, `[J × C]`.
    pub velocity_gt: Tensor<S>,
    pub action_label: Option<String>,
    pub subject_id: Option<String>,
    pub clip_id: usize,
    /// Index of the first frame within its clip.
    pub start: usize,
}

impl<S: Scalar> CsiWindow<S> {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[channels, rows, steps]` of a single frame.
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[1], s[2], s[3]]
    }
}
