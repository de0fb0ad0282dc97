use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(3/fan_in)`, i.e. variance `1/fan_in`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec { name, shape: shape.to_vec(), init });
}

fn attention_block(out: &mut Vec<ParamSpec>, prefix: &str, width: usize, hidden: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        spec(out, format!("{prefix}.{w}"), &[width, width], Init::FanIn(width));
    }
    spec(out, format!("{prefix}.mlp.w1"), &[width, hidden], Init::FanIn(width));
    spec(out, format!("{prefix}.mlp.b1"), &[hidden], Init::Zeros);
    spec(out, format!("{prefix}.mlp.w2"), &[hidden, width], Init::FanIn(hidden));
    spec(out, format!("{prefix}.mlp.b2"), &[width], Init::Zeros);
    spec(out, format!("{prefix}.norm.gamma"), &[width], Init::Ones);
    spec(out, format!("{prefix}.norm.beta"), &[width], Init::Zeros);
}

fn head(out: &mut Vec<ParamSpec>, prefix: &str, width: usize, hidden: usize, dims: usize) {
    spec(out, format!("{prefix}.w1"), &[width, hidden], Init::FanIn(width));
    spec(out, format!("{prefix}.b1"), &[hidden], Init::Zeros);
    spec(out, format!("{prefix}.w2"), &[hidden, dims], Init::FanIn(hidden));
    spec(out, format!("{prefix}.b2"), &[dims], Init::Zeros);
}

/// Every parameter tensor of the network, in initialization order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let [ch, _, _] = cfg.frame_shape;
    let [c1, c2] = cfg.encoder_channels;
    let k = cfg.kernel;
    let (j, d) = (cfg.joints, cfg.embed_dim);
    for (name, cin, cout) in [("conv1", ch, c1), ("conv2", c1, c2), ("conv3", c2, j)] {
        spec(&mut out, format!("encoder.{name}.weight"), &[cout, cin, k, k], Init::FanIn(cin * k * k));
        spec(&mut out, format!("encoder.{name}.bias"), &[cout], Init::Zeros);
    }
    spec(&mut out, "encoder.proj.weight".into(), &[cfg.pooled_area(), d], Init::FanIn(cfg.pooled_area()));
    spec(&mut out, "encoder.proj.bias".into(), &[d], Init::Zeros);
    spec(&mut out, "pos.temporal".into(), &[cfg.window, 1, d], Init::Zeros);
    spec(&mut out, "pos.spatial".into(), &[1, j, d], Init::Zeros);
    let flat = j * d;
    for i in 0..cfg.depth {
        for stream in ["st", "ts"] {
            attention_block(&mut out, &format!("blocks.{i}.{stream}.spatial"), d, cfg.mlp_ratio * d);
            attention_block(&mut out, &format!("blocks.{i}.{stream}.temporal"), flat, cfg.mlp_ratio * flat);
        }
        spec(&mut out, format!("blocks.{i}.fusion.weight"), &[2 * d, 2], Init::FanIn(2 * d));
        spec(&mut out, format!("blocks.{i}.fusion.bias"), &[2], Init::Zeros);
    }
    if cfg.ablation.velocity_branch {
        attention_block(&mut out, "velocity.temporal", flat, cfg.mlp_ratio * flat);
    }
    head(&mut out, "decoder.keypoint", d, cfg.mlp_ratio * d, cfg.dims);
    if cfg.ablation.velocity_branch {
        head(&mut out, "decoder.velocity", d, cfg.mlp_ratio * d, cfg.dims);
    }
    out
}

/// Named parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Parameters<S> {
    /// Seeded initialization following [`parameter_layout`]. The fan-in bound
    /// keeps activation variance roughly constant through the encoder so the
    /// layer norms do not start out in their `eps`-dominated regime.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = parameter_layout(cfg)
            .into_iter()
            .map(|p| {
                let t = match p.init {
                    Init::FanIn(fan) => Tensor::uniform(&p.shape, (3.0 / fan as f64).sqrt(), &mut rng),
                    Init::Zeros => Tensor::zeros(&p.shape),
                    Init::Ones => Tensor::full(&p.shape, S::one()),
                };
                (p.name, t)
            })
            .collect();
        Ok(Parameters { tensors })
    }

    /// Wraps existing tensors after checking them against the layout of `cfg`.
    pub fn from_map(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        let p = Parameters { tensors };
        p.check(cfg)?;
        Ok(p)
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = parameter_layout(cfg);
        if layout.len() != self.tensors.len() {
            let extra: Vec<&String> =
                self.tensors.keys().filter(|k| !layout.iter().any(|p| &p.name == *k)).take(3).collect();
            return Err(Error::shape(format!(
                "expected {} parameter tensors, found {} (unexpected: {extra:?})",
                layout.len(),
                self.tensors.len()
            )));
        }
        for p in &layout {
            let t = self.tensors.get(&p.name).ok_or_else(|| Error::shape(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::shape(format!("parameter {} has shape {:?}, expected {:?}", p.name, t.shape(), p.shape)));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {}", p.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<T> {
        Parameters { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}
