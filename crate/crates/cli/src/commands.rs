use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;
use vstpose_core::container::{read_tensor, write_tensor};
use vstpose_core::dataset::{
    preprocess_recording, read_manifest, skeleton_from_tensor, split, synth_clips, synth_generate, window_count, Clip,
    ManifestRow, RawCsiRecording, SynthConfig, Units, CSI_SAMPLE_RATE_HZ, MANIFEST_FILE,
};
use vstpose_core::model::{ModelConfig, Parameters, VstPose};
use vstpose_core::training::{batch_tensors, fit, grad_check, predict_windows, TrainOptions, Trainer};
use vstpose_core::{dataset, Scalar};

use crate::config::{RunConfig, Subset};
use crate::data::{check_compatible, evaluate_model, load_clips, windows_for};

/// Writes clips as tensor containers under `clips/` plus a manifest.
fn write_clips<S: Scalar>(dir: &Path, clips: &[Clip<S>]) -> Result<()> {
    let mut rows = Vec::with_capacity(clips.len());
    for clip in clips {
        let id = clip.clip_id;
        let csi = PathBuf::from(format!("clips/csi_{id:05}.vst"));
        let skeleton = PathBuf::from(format!("clips/skeleton_{id:05}.vst"));
        write_tensor(&dir.join(&csi), &clip.frames)?;
        write_tensor(&dir.join(&skeleton), &clip.skeleton.coords)?;
        let confidence = match &clip.skeleton.confidence {
            Some(c) => {
                let p = PathBuf::from(format!("clips/confidence_{id:05}.vst"));
                write_tensor(&dir.join(&p), c)?;
                Some(p)
            }
            None => None,
        };
        rows.push(ManifestRow {
            csi_path: csi,
            skeleton_path: skeleton,
            action_label: clip.action_label.clone().unwrap_or_else(|| "-".into()),
            subject_id: clip.subject_id.clone().unwrap_or_else(|| "-".into()),
            confidence_path: confidence,
        });
    }
    dataset::write_manifest(&dir.join(MANIFEST_FILE), &rows)?;
    Ok(())
}

pub fn synth<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let clips = synth_clips::<S>(&cfg.synth)?;
    write_clips(dir, &clips)?;
    info!("wrote {} synthetic clips to {}", clips.len(), dir.display());
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct PreprocessSummary {
    recordings: usize,
    frames: usize,
    clips: usize,
    windows: usize,
    window: usize,
    stride: usize,
    denoised: bool,
}

/// Raw manifest rows point at `[samples, tx, rx, subcarriers]` amplitude
/// tensors and per-video-frame skeleton tracks.
pub fn preprocess<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let root = cfg.paths.data.as_ref().ok_or_else(|| anyhow!("preprocess needs a raw dataset (--data)"))?;
    let rows = read_manifest(&root.join(MANIFEST_FILE))?;
    if rows.is_empty() {
        bail!("{} lists no recordings", root.join(MANIFEST_FILE).display());
    }
    let opts = cfg.preprocess_options();
    let mut clips = Vec::new();
    let mut frames = 0;
    for row in &rows {
        let csi_path = root.join(&row.csi_path);
        let raw = read_tensor::<S>(&csi_path)?;
        let rec = RawCsiRecording::new(raw, CSI_SAMPLE_RATE_HZ).with_context(|| format!("{}", csi_path.display()))?;
        let sk_path = root.join(&row.skeleton_path);
        let sk = read_tensor::<S>(&sk_path)?;
        let confidence = match &row.confidence_path {
            Some(p) => Some(read_tensor::<S>(&root.join(p))?),
            None => None,
        };
        if sk.rank() != 3 {
            bail!("{}: skeleton tensor must be [F, J, C], got {:?}", sk_path.display(), sk.shape());
        }
        let units = cfg.load.units.unwrap_or(if sk.shape()[2] == 3 && sk.shape()[1] != 25 { Units::Millimeters } else { Units::Pixels });
        let skeleton = skeleton_from_tensor(sk, confidence, units).with_context(|| format!("{}", sk_path.display()))?;
        frames += rec.num_samples() / dataset::SAMPLES_PER_FRAME;
        let mut rec_clips = preprocess_recording(&rec, &skeleton, &opts, clips.len())
            .with_context(|| format!("{}", csi_path.display()))?;
        for c in &mut rec_clips {
            c.action_label = (!row.action_label.is_empty() && row.action_label != "-").then(|| row.action_label.clone());
            c.subject_id = (!row.subject_id.is_empty() && row.subject_id != "-").then(|| row.subject_id.clone());
        }
        clips.extend(rec_clips);
    }
    write_clips(dir, &clips)?;
    let windows = clips.iter().map(|c| window_count(c.len(), cfg.model.window, cfg.load.stride)).sum();
    let summary = PreprocessSummary {
        recordings: rows.len(),
        frames,
        clips: clips.len(),
        windows,
        window: cfg.model.window,
        stride: cfg.load.stride,
        denoised: opts.denoise.is_some(),
    };
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(dir.join("summary.json"), &text)?;
    info!("{} recordings -> {frames} frames -> {} clips -> {windows} windows", rows.len(), clips.len());
    println!("{text}");
    Ok(())
}

pub fn train<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut trainer = match &cfg.paths.resume {
        Some(p) => {
            let mut t = Trainer::<S>::load_state(p)?;
            if t.model_cfg != cfg.model {
                warn!("resuming with the model configuration stored in {}", p.display());
            }
            t.cfg.epochs = cfg.train.epochs;
            info!("resumed from {} at epoch {}", p.display(), t.state.epoch);
            t
        }
        None => Trainer::<S>::new(cfg.model.clone(), cfg.train.clone())?,
    };
    let clips = load_clips::<S>(cfg)?;
    let windows = windows_for(&clips, cfg, &trainer.model_cfg)?;
    let (train, test) = split(&windows, &cfg.split)?;
    info!("{} windows: {} train, {} test", windows.len(), train.len(), test.len());
    let opts = TrainOptions { metrics: cfg.metrics.clone(), out_dir: Some(dir.to_path_buf()) };
    let outcome = fit(&mut trainer, &train, &test, &opts)?;
    trainer.model().save(&dir.join("final.ckpt"))?;
    if let Some(best) = outcome.best {
        info!("best epoch {} with MPJPE {:.4}", best.epoch, best.mpjpe);
    }
    let report = evaluate_model(&outcome.model, &test, cfg)?;
    report.write_all(&dir.join("report"))?;
    print!("{}", report.to_table());
    Ok(())
}

fn checkpoint_model<S: Scalar>(cfg: &RunConfig) -> Result<VstPose<S>> {
    let path = cfg.paths.checkpoint.as_ref().ok_or_else(|| anyhow!("a model checkpoint is required (--checkpoint)"))?;
    Ok(VstPose::<S>::load(path)?)
}

fn subset_windows<S: Scalar>(cfg: &RunConfig, model: &ModelConfig) -> Result<Vec<dataset::CsiWindow<S>>> {
    let clips = load_clips::<S>(cfg)?;
    let windows = windows_for(&clips, cfg, model)?;
    Ok(match cfg.eval.subset {
        Subset::All => windows,
        Subset::Test => split(&windows, &cfg.split)?.1,
    })
}

pub fn eval<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = checkpoint_model::<S>(cfg)?;
    let windows = subset_windows::<S>(cfg, &model.config)?;
    let report = evaluate_model(&model, &windows, cfg)?;
    report.write_all(dir)?;
    info!("evaluated {} frames from {} windows", report.frames, windows.len());
    print!("{}", report.to_table());
    Ok(())
}

pub fn predict<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = checkpoint_model::<S>(cfg)?;
    let windows = subset_windows::<S>(cfg, &model.config)?;
    let preds = predict_windows(&model, &windows, cfg.train.batch_size_eval)?;
    let path = dir.join("predictions.jsonl");
    let mut out = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    let nested = |t: &vstpose_core::Tensor<S>, inner: usize| -> Vec<Vec<f64>> {
        t.data().chunks(inner).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect()
    };
    let c = model.config.dims;
    for (w, (k, v)) in windows.iter().zip(&preds) {
        let frames: Vec<Vec<Vec<f64>>> = (0..k.shape()[0]).map(|t| nested(&k.index_axis0(t), c)).collect();
        let line = json!({
            "clip_id": w.clip_id,
            "start": w.start,
            "action": w.action_label,
            "subject": w.subject_id,
            "keypoints": frames,
            "velocity": nested(v, c),
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    info!("wrote {} window predictions to {}", preds.len(), path.display());
    println!("{}", path.display());
    Ok(())
}

/// Always in `f64` on one synthetic window.
pub fn gradcheck(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = if cfg.gradcheck.tiny { ModelConfig::tiny() } else { cfg.model.clone() };
    model.validate()?;
    let synth = SynthConfig {
        num_clips: 1,
        clip_len: model.window,
        window: model.window,
        joints: model.joints,
        dims: model.dims,
        frame_shape: model.frame_shape,
        seed: cfg.gradcheck.seed,
        ..cfg.synth.clone()
    };
    let windows = synth_generate::<f64>(&synth)?;
    check_compatible(&model, &windows[0])?;
    let (x, y) = batch_tensors(&[&windows[0]])?;
    let params = Parameters::<f64>::init(&model, cfg.gradcheck.seed)?;
    let alpha = if model.ablation.velocity_branch { cfg.train.alpha } else { 0.0 };
    let report = grad_check(&model, &params, &x, &y, alpha, cfg.gradcheck.epsilon, cfg.gradcheck.seed)?;
    fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
    println!("tensor\tchecked\tkinks\tmax_rel\tmax_abs");
    for t in &report.tensors {
        println!("{}\t{}\t{}\t{:.3e}\t{:.3e}", t.name, t.checked, t.kinks, t.max_rel_error, t.max_abs_error);
    }
    println!("max relative error {:.3e} (tolerance {:.1e})", report.max_rel_error, cfg.gradcheck.tolerance);
    if !(report.max_rel_error < cfg.gradcheck.tolerance) {
        let worst = report.worst().map(|t| t.name.as_str()).unwrap_or("?");
        bail!("gradient check failed: max relative error {:.3e} in {worst}", report.max_rel_error);
    }
    Ok(())
}
