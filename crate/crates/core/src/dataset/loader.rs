//! Manifest-driven datasets on disk.
//!
//! A dataset directory holds a `manifest.tsv` and tensor container files.
//! Each manifest line describes one clip:
//!
//! ```text
//! csi_path<TAB>skeleton_path<TAB>action_label<TAB>subject_id[<TAB>confidence_path]
//! ```
//!
//! Paths are relative to the directory. CSI tensors are `[F, ch, rows, steps]`
//! (or `[F, rows, steps]`, read as one channel); skeletons are `[F, J, C]`,
//! or `[F, 25, 3]` OpenPose BODY_25 `(x, y, confidence)`, which is reduced
//! to the 17 COCO joints on load.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::{
    align_with_video, assemble_frames, denoise_recording, select_coco17, slide_windows, split_into_clips, Clip,
    CsiWindow, RawCsiRecording, SkeletonSequence, SplitSpec, Units, VIDEO_FPS,
};
use crate::container::read_tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::WaveletConfig;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub csi_path: PathBuf,
    pub skeleton_path: PathBuf,
    pub action_label: String,
    pub subject_id: String,
    pub confidence_path: Option<PathBuf>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(4..=5).contains(&cols.len()) {
            return Err(Error::format(
                path,
                format!("line {}: expected 4 or 5 tab-separated columns, found {}", lineno + 1, cols.len()),
            ));
        }
        rows.push(ManifestRow {
            csi_path: PathBuf::from(cols[0]),
            skeleton_path: PathBuf::from(cols[1]),
            action_label: cols[2].to_string(),
            subject_id: cols[3].to_string(),
            confidence_path: cols.get(4).filter(|s| !s.is_empty()).map(PathBuf::from),
        });
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}",
            r.csi_path.display(),
            r.skeleton_path.display(),
            r.action_label,
            r.subject_id
        ));
        if let Some(c) = &r.confidence_path {
            out.push('\t');
            out.push_str(&c.display().to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadOptions {
    pub window: usize,
    pub stride: usize,
    /// Windows whose mean keypoint confidence falls below this are dropped.
    pub min_confidence: f64,
    /// Overrides the unit label inferred from the coordinate dimension.
    pub units: Option<Units>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { window: 3, stride: 2, min_confidence: 0.1, units: None }
    }
}

fn non_empty(s: &str) -> Option<String> {
    (!s.is_empty() && s != "-").then(|| s.to_string())
}

/// Reads a skeleton track, reducing BODY_25 input to COCO-17.
pub fn skeleton_from_tensor<S: Scalar>(t: Tensor<S>, confidence: Option<Tensor<S>>, units: Units) -> Result<SkeletonSequence<S>> {
    if t.rank() == 3 && t.shape()[1] == 25 && t.shape()[2] == 3 {
        let frames = t.shape()[0];
        let mut coords = Vec::with_capacity(frames * 34);
        let mut conf = Vec::with_capacity(frames * 17);
        for f in 0..frames {
            let (xy, c) = select_coco17(&t.index_axis0(f))?;
            coords.extend_from_slice(xy.data());
            conf.extend_from_slice(c.data());
        }
        return SkeletonSequence::new(
            Tensor::from_vec(&[frames, 17, 2], coords)?,
            Some(Tensor::from_vec(&[frames, 17], conf)?),
            units,
        );
    }
    SkeletonSequence::new(t, confidence, units)
}

fn load_row<S: Scalar>(root: &Path, row: &ManifestRow, units: Option<Units>, clip_id: usize) -> Result<Clip<S>> {
    let csi_path = root.join(&row.csi_path);
    let mut csi: Tensor<S> = read_tensor(&csi_path)?;
    match csi.rank() {
        4 => {}
        3 => {
            let s = csi.shape().to_vec();
            csi = csi.reshape(&[s[0], 1, s[1], s[2]])?;
        }
        _ => return Err(Error::format(&csi_path, format!("CSI tensor must be rank 3 or 4, got {:?}", csi.shape()))),
    }
    if !csi.is_finite() {
        return Err(Error::format(&csi_path, "non-finite CSI values"));
    }
    let sk_path = root.join(&row.skeleton_path);
    let sk: Tensor<S> = read_tensor(&sk_path)?;
    if sk.rank() != 3 {
        return Err(Error::format(&sk_path, format!("skeleton tensor must be [F, J, C], got {:?}", sk.shape())));
    }
    let confidence = match &row.confidence_path {
        Some(p) => Some(read_tensor::<S>(&root.join(p))?),
        None => None,
    };
    let units = units.unwrap_or(if sk.shape()[2] == 3 && sk.shape()[1] != 25 { Units::Millimeters } else { Units::Pixels });
    let skeleton = skeleton_from_tensor(sk, confidence, units).map_err(|e| Error::format(&sk_path, e.to_string()))?;
    let n = csi.shape()[0].min(skeleton.len());
    if n == 0 {
        return Err(Error::format(&csi_path, "no frames"));
    }
    Ok(Clip {
        frames: csi.slice_axis0(0, n),
        skeleton: skeleton.slice(0, n),
        action_label: non_empty(&row.action_label),
        subject_id: non_empty(&row.subject_id),
        clip_id,
    })
}

/// Loads every clip listed in `<root>/manifest.tsv`; clip ids follow manifest order.
pub fn load_manifest<S: Scalar>(root: &Path, opts: &LoadOptions) -> Result<Vec<Clip<S>>> {
    let rows = read_manifest(&root.join(MANIFEST_FILE))?;
    let clips = rows
        .iter()
        .enumerate()
        .map(|(i, row)| load_row(root, row, opts.units, i))
        .collect::<Result<Vec<_>>>()?;
    info!("loaded {} clips from {}", clips.len(), root.display());
    Ok(clips)
}

/// Windows every clip and drops low-confidence windows.
pub fn windows_from_clips<S: Scalar>(clips: &[Clip<S>], opts: &LoadOptions) -> Result<Vec<CsiWindow<S>>> {
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for clip in clips {
        for w in slide_windows(clip, opts.window, opts.stride)? {
            match w.skeleton.mean_confidence() {
                Some(c) if c < opts.min_confidence => dropped += 1,
                _ => out.push(w),
            }
        }
    }
    if dropped > 0 {
        debug!("dropped {dropped} windows below mean confidence {}", opts.min_confidence);
    }
    Ok(out)
}

/// Evaluation protocol for 3-D MMFi-style data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmfiProtocol {
    pub window: usize,
    pub stride: usize,
    pub split: SplitSpec,
}

impl Default for MmfiProtocol {
    fn default() -> Self {
        MmfiProtocol {
            window: 10,
            stride: 3,
            split: SplitSpec { ratio: super::Ratio::new(3, 1), ..SplitSpec::default() },
        }
    }
}

/// Loads a directory of per-sample CSI tensors and 3-D joint tracks into
/// windows (`C = 3`, millimeters).
pub fn load_mmfi_style<S: Scalar>(root: &Path, protocol: &MmfiProtocol) -> Result<Vec<CsiWindow<S>>> {
    let opts = LoadOptions {
        window: protocol.window,
        stride: protocol.stride,
        min_confidence: 0.0,
        units: Some(Units::Millimeters),
    };
    let clips = load_manifest::<S>(root, &opts)?;
    let rows = read_manifest(&root.join(MANIFEST_FILE))?;
    for (clip, row) in clips.iter().zip(&rows) {
        if clip.skeleton.dims() != 3 {
            return Err(Error::format(
                root.join(&row.skeleton_path),
                format!("expected 3-D joints, found C = {}", clip.skeleton.dims()),
            ));
        }
    }
    windows_from_clips(&clips, &opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessOptions {
    /// `None` skips denoising.
    pub denoise: Option<WaveletConfig>,
    pub clip_len: usize,
    pub video_fps: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { denoise: Some(WaveletConfig::default()), clip_len: 9, video_fps: VIDEO_FPS }
    }
}

/// denoise → frame → align → cut into disjoint clips of `clip_len` frames.
pub fn preprocess_recording<S: Scalar>(
    rec: &RawCsiRecording<S>,
    skeleton: &SkeletonSequence<S>,
    opts: &PreprocessOptions,
    first_clip_id: usize,
) -> Result<Vec<Clip<S>>> {
    let rec = match &opts.denoise {
        Some(cfg) => denoise_recording(rec, cfg)?,
        None => rec.clone(),
    };
    let frames = assemble_frames(&rec);
    let paired = align_with_video(&frames, skeleton, opts.video_fps)?;
    Ok(split_into_clips(&paired, opts.clip_len, first_clip_id))
}
