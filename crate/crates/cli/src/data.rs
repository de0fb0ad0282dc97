use anyhow::{bail, Result};
use log::{info, warn};
use vstpose_core::dataset::{load_manifest, synth_clips, windows_from_clips, Clip, CsiWindow, LoadOptions};
use vstpose_core::evaluation::{build_report, collect_frames, MetricReport};
use vstpose_core::model::{ModelConfig, VstPose};
use vstpose_core::training::predict_windows;
use vstpose_core::Scalar;

use crate::config::RunConfig;

/// Clips from `paths.data`, or generated from `[synth]` when no dataset is given.
pub fn load_clips<S: Scalar>(cfg: &RunConfig) -> Result<Vec<Clip<S>>> {
    match &cfg.paths.data {
        Some(dir) => Ok(load_manifest(dir, &cfg.load)?),
        None => {
            info!("no dataset given; generating {} synthetic clips (seed {})", cfg.synth.num_clips, cfg.synth.seed);
            Ok(synth_clips(&cfg.synth)?)
        }
    }
}

/// Windows of the model's length `T`, with `[load]` supplying stride and
/// confidence filtering.
pub fn windows_for<S: Scalar>(clips: &[Clip<S>], cfg: &RunConfig, model: &ModelConfig) -> Result<Vec<CsiWindow<S>>> {
    if cfg.load.window != model.window {
        warn!("load.window = {} ignored: windows follow the model's T = {}", cfg.load.window, model.window);
    }
    let opts = LoadOptions { window: model.window, ..cfg.load.clone() };
    let windows = windows_from_clips(clips, &opts)?;
    if windows.is_empty() {
        bail!("dataset yields no windows of {} frames with stride {}", opts.window, opts.stride);
    }
    check_compatible(model, &windows[0])?;
    Ok(windows)
}

pub fn check_compatible<S: Scalar>(model: &ModelConfig, w: &CsiWindow<S>) -> Result<()> {
    let frame = w.frame_shape();
    if frame != model.frame_shape {
        bail!("CSI frames are {frame:?} but the model expects {:?} (model.frame_shape)", model.frame_shape);
    }
    let (j, c) = (w.skeleton.joints(), w.skeleton.dims());
    if (j, c) != (model.joints, model.dims) {
        bail!("skeletons have J = {j}, C = {c} but the model predicts J = {}, C = {}", model.joints, model.dims);
    }
    Ok(())
}

pub fn evaluate_model<S: Scalar>(model: &VstPose<S>, windows: &[CsiWindow<S>], cfg: &RunConfig) -> Result<MetricReport> {
    let preds = predict_windows(model, windows, cfg.train.batch_size_eval)?;
    let keypoints: Vec<_> = preds.into_iter().map(|(k, _)| k).collect();
    let frames = collect_frames(&keypoints, windows, cfg.metrics.min_confidence)?;
    Ok(build_report(&frames, &cfg.metrics, windows[0].skeleton.units.label())?)
}
