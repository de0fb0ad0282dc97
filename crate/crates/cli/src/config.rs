//! Run configuration: a TOML file with one table per concern. Every field
//! has a default, unknown keys are rejected, and values are resolved as
//! flag > file > default.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vstpose_core::dataset::{LoadOptions, PreprocessOptions, SplitSpec, SynthConfig, VIDEO_FPS};
use vstpose_core::evaluation::MetricOptions;
use vstpose_core::model::{ModelConfig, VelocitySource};
use vstpose_core::training::TrainConfig;
use vstpose_core::wavelet::WaveletConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Synth,
    Preprocess,
    Train,
    Eval,
    Predict,
    Ablate,
    Gradcheck,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Synth => "synth",
            CommandKind::Preprocess => "preprocess",
            CommandKind::Train => "train",
            CommandKind::Eval => "eval",
            CommandKind::Predict => "predict",
            CommandKind::Ablate => "ablate",
            CommandKind::Gradcheck => "gradcheck",
        }
    }
}

/// Storage and compute precision for everything except `gradcheck`, which
/// always runs in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory holding `manifest.tsv`. Without one, commands that
    /// need data generate it in memory from `[synth]`.
    pub data: Option<PathBuf>,
    /// Model checkpoint for `eval` and `predict`.
    pub checkpoint: Option<PathBuf>,
    /// Training state to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    /// Apply wavelet denoising (configured under `[wavelet]`).
    pub denoise: bool,
    /// Frames per clip.
    pub clip_len: usize,
    pub video_fps: f64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        let d = PreprocessOptions::default();
        PreprocessSection { denoise: d.denoise.is_some(), clip_len: d.clip_len, video_fps: VIDEO_FPS }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    /// The held-out side of `[split]`.
    #[default]
    Test,
    All,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub subset: Subset,
}

/// Axes of the ablation grid. Empty axes keep the base value; the grid is
/// the cartesian product of the non-empty ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateGrid {
    pub window: Vec<usize>,
    pub depth: Vec<usize>,
    pub velocity_branch: Vec<bool>,
    pub velocity_source: Vec<VelocitySource>,
    pub velocity_fusion: Vec<bool>,
    /// Run cells on worker threads.
    pub parallel: bool,
    /// Worker count in parallel mode; 0 uses the available cores.
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    /// Use the small test architecture instead of `[model]`.
    pub tiny: bool,
    pub epsilon: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection { tiny: true, epsilon: 1e-4, tolerance: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Command the configuration was resolved for. Informational; the
    /// command line decides what runs.
    pub command: Option<CommandKind>,
    pub precision: Precision,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub load: LoadOptions,
    pub split: SplitSpec,
    pub preprocess: PreprocessSection,
    pub wavelet: WaveletConfig,
    pub metrics: MetricOptions,
    pub eval: EvalSection,
    pub ablate: AblateGrid,
    pub gradcheck: GradcheckSection,
}

impl RunConfig {
    pub fn preprocess_options(&self) -> PreprocessOptions {
        PreprocessOptions {
            denoise: self.preprocess.denoise.then_some(self.wavelet),
            clip_len: self.preprocess.clip_len,
            video_fps: self.preprocess.video_fps,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Short hex digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..8].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        self.wavelet.validate()?;
        if self.preprocess.clip_len == 0 {
            bail!("preprocess.clip_len must be >= 1");
        }
        if self.load.window == 0 || self.load.stride == 0 {
            bail!("load.window and load.stride must be >= 1");
        }
        if !(self.gradcheck.epsilon > 0.0) || !(self.gradcheck.tolerance > 0.0) {
            bail!("gradcheck.epsilon and gradcheck.tolerance must be positive");
        }
        Ok(())
    }
}

/// One `key.path = value` assignment. Values are read as TOML; anything
/// that does not parse is taken as a bare string.
pub fn parse_assignment(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| anyhow!("expected KEY=VALUE, got {s:?}"))?;
    let key = key.trim();
    if key.is_empty() {
        bail!("empty key in {s:?}");
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| anyhow!("{key}: {p} is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Applies the file (if any) and then the assignments on top of the defaults.
pub fn resolve(file: Option<&Path>, assignments: &[(String, toml::Value)], command: CommandKind) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<RunConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if !assignments.is_empty() {
        let mut table = toml::Table::try_from(&cfg).context("serializing configuration")?;
        for (k, v) in assignments {
            set_path(&mut table, k, v.clone())?;
        }
        let text = toml::to_string(&table).context("serializing configuration")?;
        cfg = toml::from_str(&text).context("applying command-line overrides")?;
    }
    cfg.command = Some(command);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assign(s: &str) -> (String, toml::Value) {
        parse_assignment(s).unwrap()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[train]\nlr = 0.01\nepochs = 7\n").unwrap();
        let cfg = resolve(Some(&path), &[assign("train.lr=0.5")], CommandKind::Train).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size_train, TrainConfig::default().batch_size_train);
        assert_eq!(cfg.command, Some(CommandKind::Train));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[train]\nlearning_rate = 0.01\n").unwrap();
        let err = format!("{:#}", resolve(Some(&path), &[], CommandKind::Train).unwrap_err());
        assert!(err.contains("learning_rate"), "{err}");
        assert!(resolve(None, &[assign("model.nope=1")], CommandKind::Train).is_err());
    }

    #[test]
    fn bare_words_become_strings() {
        let cfg = resolve(None, &[assign("load.units=normalized")], CommandKind::Eval).unwrap();
        assert_eq!(cfg.load.units, Some(vstpose_core::dataset::Units::Normalized));
        let (_, v) = assign("ablate.depth=[1, 3]");
        assert_eq!(v, toml::Value::Array(vec![1.into(), 3.into()]));
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(resolve(None, &[assign("train.alpha=2.0")], CommandKind::Train).is_err());
        assert!(resolve(None, &[assign("model.heads=3")], CommandKind::Train).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 8);
    }
}
