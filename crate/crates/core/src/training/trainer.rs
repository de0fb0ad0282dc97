use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_node, lr_at, Adam, TrainConfig};
use crate::autograd::Graph;
use crate::dataset::CsiWindow;
use crate::error::{Error, Result};
use crate::evaluation::{build_report, collect_frames, MetricOptions, MetricReport};
use crate::model::{load_checkpoint, save_checkpoint, Bound, Ctx, ModelConfig, Parameters, VstPose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stacks windows into a model input `[B, T, ch, rows, steps]` and
/// ground-truth keypoints `[B, T, J, C]`.
pub fn batch_tensors<S: Scalar>(windows: &[&CsiWindow<S>]) -> Result<(Tensor<S>, Tensor<S>)> {
    if windows.is_empty() {
        return Err(Error::Empty("batch has no windows".into()));
    }
    let frames: Vec<&Tensor<S>> = windows.iter().map(|w| &w.frames).collect();
    let coords: Vec<&Tensor<S>> = windows.iter().map(|w| &w.skeleton.coords).collect();
    Ok((Tensor::stack(&frames)?, Tensor::stack(&coords)?))
}

/// Inference over `windows` in batches. Returns `(keypoints [T, J, C],
/// velocity [J, C])` per window.
pub fn predict_windows<S: Scalar>(
    model: &VstPose<S>,
    windows: &[CsiWindow<S>],
    batch_size: usize,
) -> Result<Vec<(Tensor<S>, Tensor<S>)>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&CsiWindow<S>> = chunk.iter().collect();
        let (input, _) = batch_tensors(&refs)?;
        let pred = model.forward(&input)?;
        for b in 0..chunk.len() {
            out.push((pred.keypoints.index_axis0(b), pred.velocity.index_axis0(b)));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub mpjpe: f64,
}

/// Everything needed to continue training exactly where it stopped. The
/// shuffle order of an epoch depends only on `(seed, epoch)`, so the epoch
/// counter stands in for the random state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    pub params: Parameters<S>,
    pub adam: Adam<S>,
    /// Epochs completed.
    pub epoch: usize,
    pub best: Option<BestRecord>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    adam_t: u64,
    best: Option<BestRecord>,
    train: TrainConfig,
}

pub struct Trainer<S> {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub state: TrainState<S>,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh parameters seeded from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = Parameters::init(&model_cfg, cfg.seed)?;
        Self::with_params(model_cfg, cfg, params)
    }

    pub fn with_params(model_cfg: ModelConfig, cfg: TrainConfig, params: Parameters<S>) -> Result<Self> {
        cfg.validate()?;
        params.check(&model_cfg)?;
        let adam = Adam::new(&params);
        Ok(Trainer { model_cfg, cfg, state: TrainState { params, adam, epoch: 0, best: None } })
    }

    /// Velocity weight actually used: without a velocity branch only the
    /// keypoint term is supervised.
    pub fn alpha(&self) -> f64 {
        if self.model_cfg.ablation.velocity_branch {
            self.cfg.alpha
        } else {
            0.0
        }
    }

    pub fn model(&self) -> VstPose<S> {
        VstPose { config: self.model_cfg.clone(), params: self.state.params.clone() }
    }

    /// Loss on a batch without updating anything.
    pub fn batch_loss(&self, input: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &self.state.params, false);
        let x = g.constant(input.clone());
        let y = g.constant(gt.clone());
        let out = Ctx::new(&mut g, &self.model_cfg, &bound).forward(x)?;
        let l = loss_node(&mut g, out.keypoints, out.velocity, y, self.alpha())?;
        Ok(g.value(l).item().as_f64())
    }

    /// One Adam update. Returns the loss before the update.
    pub fn train_step(&mut self, input: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &self.state.params, true);
        let x = g.constant(input.clone());
        let y = g.constant(gt.clone());
        let out = Ctx::new(&mut g, &self.model_cfg, &bound).forward(x)?;
        let l = loss_node(&mut g, out.keypoints, out.velocity, y, self.alpha())?;
        let loss = g.value(l).item().as_f64();
        let diverged = || Error::Diverged { epoch: self.state.epoch, step: self.state.adam.t as usize, loss };
        if !loss.is_finite() {
            return Err(diverged());
        }
        let mut grads = g.backward(l)?;
        let mut grads = Adam::gather(&self.state.params, &bound, &mut grads)?;
        if grads.values().any(|t| !t.is_finite()) {
            return Err(diverged());
        }
        if let Some(c) = self.cfg.grad_clip {
            Adam::clip(&mut grads, c);
        }
        let lr = lr_at(self.state.epoch, &self.cfg);
        self.state.adam.step(&mut self.state.params, &grads, lr)?;
        Ok(loss)
    }

    /// Window order for the current epoch.
    pub fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let seed = self.cfg.seed ^ (self.state.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// One pass over `train`. Returns the mean batch loss and the number of
    /// steps taken; the epoch counter advances.
    pub fn run_epoch(&mut self, train: &[CsiWindow<S>]) -> Result<(f64, usize)> {
        if train.is_empty() {
            return Err(Error::Empty("training split has no windows".into()));
        }
        let order = self.epoch_order(train.len());
        let batches: Vec<Vec<&CsiWindow<S>>> =
            order.chunks(self.cfg.batch_size_train).map(|c| c.iter().map(|&i| &train[i]).collect()).collect();
        let mut total = 0.0;
        if self.cfg.prefetch == 0 {
            for b in &batches {
                let (x, y) = batch_tensors(b)?;
                total += self.train_step(&x, &y)?;
            }
        } else {
            let (tx, rx) = mpsc::sync_channel(self.cfg.prefetch);
            std::thread::scope(|scope| -> Result<()> {
                let batches = &batches;
                scope.spawn(move || {
                    for b in batches {
                        if tx.send(batch_tensors(b)).is_err() {
                            break;
                        }
                    }
                });
                for item in rx.iter() {
                    let (x, y) = item?;
                    total += self.train_step(&x, &y)?;
                }
                Ok(())
            })?;
        }
        self.state.epoch += 1;
        Ok((total / batches.len() as f64, batches.len()))
    }

    pub fn evaluate(&self, windows: &[CsiWindow<S>], metrics: &MetricOptions) -> Result<MetricReport> {
        if windows.is_empty() {
            return Err(Error::Empty("evaluation split has no windows".into()));
        }
        let preds = predict_windows(&self.model(), windows, self.cfg.batch_size_eval)?;
        let keypoints: Vec<Tensor<S>> = preds.into_iter().map(|(k, _)| k).collect();
        let frames = collect_frames(&keypoints, windows, metrics.min_confidence)?;
        build_report(&frames, metrics, windows[0].skeleton.units.label())
    }

    /// Writes parameters, optimizer moments and counters to one file.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let meta = StateMeta {
            epoch: self.state.epoch,
            adam_t: self.state.adam.t,
            best: self.state.best,
            train: self.cfg.clone(),
        };
        let meta = serde_json::to_value(meta).expect("state metadata serializes");
        let m_names: Vec<String> = self.state.adam.m.keys().map(|k| format!("adam.m.{k}")).collect();
        let v_names: Vec<String> = self.state.adam.v.keys().map(|k| format!("adam.v.{k}")).collect();
        let tensors = self
            .state
            .params
            .iter()
            .map(|(k, t)| (k.as_str(), t))
            .chain(m_names.iter().map(String::as_str).zip(self.state.adam.m.values()))
            .chain(v_names.iter().map(String::as_str).zip(self.state.adam.v.values()));
        save_checkpoint(path, &self.model_cfg, meta, tensors)
    }

    /// Restores a trainer saved by [`Trainer::save_state`].
    pub fn load_state(path: &Path) -> Result<Self> {
        let ck = load_checkpoint::<S>(path)?;
        let meta: StateMeta = serde_json::from_value(ck.meta)
            .map_err(|e| Error::format(path, format!("not a training state: {e}")))?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in ck.tensors {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                m.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                v.insert(rest.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let params = Parameters::from_map(&ck.config, params).map_err(|e| Error::format(path, e.to_string()))?;
        let mut adam = Adam::new(&params);
        if m.keys().ne(adam.m.keys()) || v.keys().ne(adam.v.keys()) {
            return Err(Error::format(path, "optimizer moments do not match the parameters"));
        }
        adam.m = m;
        adam.v = v;
        adam.t = meta.adam_t;
        meta.train.validate()?;
        Ok(Trainer {
            model_cfg: ck.config,
            cfg: meta.train,
            state: TrainState { params, adam, epoch: meta.epoch, best: meta.best },
        })
    }
}

/// Averages of an evaluation pass, as logged per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pck50: f64,
    pub pck40: f64,
    pub pck30: f64,
    pub pck20: f64,
    pub pck10: f64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

impl From<&MetricReport> for EvalSummary {
    fn from(r: &MetricReport) -> Self {
        let p = |a| r.pck_at(a).unwrap_or(f64::NAN);
        EvalSummary {
            pck50: p(50),
            pck40: p(40),
            pck30: p(30),
            pck20: p(20),
            pck10: p(10),
            mpjpe: r.averages.mpjpe,
            pa_mpjpe: r.averages.pa_mpjpe,
        }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub steps: usize,
    #[serde(flatten)]
    pub eval: Option<EvalSummary>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub metrics: MetricOptions,
    /// Receives `metrics.jsonl`, `best.ckpt` and `state.ckpt` when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// Lowest eval MPJPE seen, or the final parameters without an eval split.
    pub model: VstPose<S>,
    pub log: Vec<EpochRecord>,
    pub best: Option<BestRecord>,
    pub last_report: Option<MetricReport>,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs epochs until `trainer.cfg.epochs` have completed, evaluating after
/// each one when `eval` is non-empty.
pub fn fit<S: Scalar>(
    trainer: &mut Trainer<S>,
    train: &[CsiWindow<S>],
    eval: &[CsiWindow<S>],
    opts: &TrainOptions,
) -> Result<TrainOutcome<S>> {
    if train.is_empty() {
        return Err(Error::Empty("training split has no windows".into()));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::new();
    let mut best_model = None;
    let mut last_report = None;
    while trainer.state.epoch < trainer.cfg.epochs {
        let epoch = trainer.state.epoch;
        let lr = lr_at(epoch, &trainer.cfg);
        let (train_loss, steps) = trainer.run_epoch(train)?;
        let summary = if eval.is_empty() {
            None
        } else {
            let report = trainer.evaluate(eval, &opts.metrics)?;
            let s = EvalSummary::from(&report);
            last_report = Some(report);
            Some(s)
        };
        let record = EpochRecord { epoch, lr, train_loss, steps, eval: summary };
        info!(
            "epoch {epoch}: lr {lr:.3e} loss {train_loss:.6}{}",
            summary.map(|s| format!(" mpjpe {:.4} pck@20 {:.2}", s.mpjpe, s.pck20)).unwrap_or_default()
        );
        if let Some(s) = summary {
            if !s.mpjpe.is_finite() {
                warn!("evaluation MPJPE is not finite at epoch {epoch}");
            } else if trainer.state.best.is_none_or(|b| s.mpjpe < b.mpjpe) {
                trainer.state.best = Some(BestRecord { epoch, mpjpe: s.mpjpe });
                let model = trainer.model();
                if let Some(dir) = &opts.out_dir {
                    model.save(&dir.join("best.ckpt"))?;
                }
                best_model = Some(model);
            }
        }
        if let Some(dir) = &opts.out_dir {
            append_line(&dir.join("metrics.jsonl"), &serde_json::to_string(&record).expect("record serializes"))?;
            trainer.save_state(&dir.join("state.ckpt"))?;
        }
        log.push(record);
    }
    Ok(TrainOutcome {
        model: best_model.unwrap_or_else(|| trainer.model()),
        log,
        best: trainer.state.best,
        last_report,
    })
}

/// Fresh training run.
pub fn train<S: Scalar>(
    train: &[CsiWindow<S>],
    eval: &[CsiWindow<S>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome<S>> {
    if train.is_empty() {
        return Err(Error::Empty("training split has no windows".into()));
    }
    let mut trainer = Trainer::new(model_cfg.clone(), cfg.clone())?;
    fit(&mut trainer, train, eval, opts)
}
