//! The pose network: per-frame CNN encoder, a stack of dual-stream
//! spatiotemporal attention blocks with a velocity branch, and two MLP heads.
//!
//! Tensors flowing through the backbone are `[B, T, J, D]`. Spatial
//! attention treats the `J` joints of each frame as tokens of width `D`;
//! temporal attention treats the `T` frames as tokens of width `J·D`.

mod checkpoint;
mod config;
mod params;

use std::collections::HashMap;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Ablation, Bypass, ModelConfig, VelocitySource};
pub use params::{parameter_layout, Init, ParamSpec, Parameters};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Parameters registered as graph leaves.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Registers every parameter; `trainable` decides whether gradients flow.
    pub fn bind<S: Scalar>(g: &mut Graph<S>, params: &Parameters<S>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::shape(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Graph nodes of one DST block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    /// Space-first branch `T1(S1(F))`.
    pub st: Var,
    /// Time-first branch `S2(T2(F))`.
    pub ts: Var,
    /// Softmax fusion weights `[B, 2]`: column 0 is `a_ST`, column 1 `a_TS`.
    pub weights: Var,
    pub fused: Var,
    pub velocity: Var,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub encoded: Var,
    pub embedded: Var,
    pub blocks: Vec<BlockVars>,
    /// Output of the last block, `F^N`.
    pub f_n: Var,
    /// Global velocity feature; absent without the velocity branch.
    pub f_v: Option<Var>,
    pub f_k: Var,
    /// `[B, T, J, C]`.
    pub keypoints: Var,
    /// `[B, J, C]`.
    pub velocity: Var,
    /// Every attention probability map, `[n, H, L, L]`.
    pub attention: Vec<Var>,
}

/// Builds the network on a graph.
pub struct Ctx<'a, S> {
    pub g: &'a mut Graph<S>,
    pub cfg: &'a ModelConfig,
    pub params: &'a Bound,
    pub attention: Vec<Var>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(g: &'a mut Graph<S>, cfg: &'a ModelConfig, params: &'a Bound) -> Self {
        Ctx { g, cfg, params, attention: Vec::new() }
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.params.get(name)
    }

    fn linear(&mut self, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let w = self.p(w)?;
        let y = self.g.matmul(x, w)?;
        match b {
            Some(b) => {
                let b = self.p(b)?;
                self.g.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// `[B, T, ch, rows, steps] -> [B, T, J, D]`, frame by frame.
    pub fn encode(&mut self, input: Var) -> Result<Var> {
        let s = self.g.shape(input).to_vec();
        let [ch, rows, steps] = self.cfg.frame_shape;
        if s.len() != 5 || s[1] != self.cfg.window || s[2..] != [ch, rows, steps] {
            return Err(Error::shape(format!(
                "encoder input {:?} does not match [B, {}, {ch}, {rows}, {steps}]",
                s, self.cfg.window
            )));
        }
        let (b, t) = (s[0], s[1]);
        let x = self.g.reshape(input, &[b * t, ch, rows, steps])?;
        let (w1, b1) = (self.p("encoder.conv1.weight")?, self.p("encoder.conv1.bias")?);
        let x = self.g.conv2d(x, w1, b1)?;
        let x = self.g.gelu(x);
        let x = self.g.max_pool2(x)?;
        let (w2, b2) = (self.p("encoder.conv2.weight")?, self.p("encoder.conv2.bias")?);
        let x = self.g.conv2d(x, w2, b2)?;
        let x = self.g.gelu(x);
        let (w3, b3) = (self.p("encoder.conv3.weight")?, self.p("encoder.conv3.bias")?);
        let x = self.g.conv2d(x, w3, b3)?;
        let area = self.cfg.pooled_area();
        let x = self.g.reshape(x, &[b, t, self.cfg.joints, area])?;
        self.linear(x, "encoder.proj.weight", Some("encoder.proj.bias"))
    }

    /// Adds the temporal `[T, 1, D]` and spatial `[1, J, D]` encodings.
    pub fn add_positional(&mut self, x: Var) -> Result<Var> {
        let pt = self.p("pos.temporal")?;
        let ps = self.p("pos.spatial")?;
        let x = self.g.add(x, pt)?;
        self.g.add(x, ps)
    }

    /// Multi-head self-attention over `x: [n, L, W]` with `W / H`-wide heads.
    pub fn attention(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let (n, len, width) = (s[0], s[1], s[2]);
        let heads = self.cfg.heads;
        let hd = width / heads;
        let project = |ctx: &mut Self, name: &str, axes: [usize; 4]| -> Result<Var> {
            let y = ctx.linear(x, &format!("{prefix}.{name}"), None)?;
            let y = ctx.g.reshape(y, &[n, len, heads, hd])?;
            ctx.g.permute(y, &axes)
        };
        let q = project(self, "wq", [0, 2, 1, 3])?;
        let k_t = project(self, "wk", [0, 2, 3, 1])?;
        let v = project(self, "wv", [0, 2, 1, 3])?;
        let scores = self.g.bmm(q, k_t)?;
        let scores = self.g.scale(scores, S::one() / S::from_usize_lossy(hd).sqrt());
        let probs = self.g.softmax(scores);
        self.attention.push(probs);
        let out = self.g.bmm(probs, v)?;
        let out = self.g.permute(out, &[0, 2, 1, 3])?;
        let out = self.g.reshape(out, &[n, len, width])?;
        self.linear(out, &format!("{prefix}.wo"), None)
    }

    /// `x + LN(MLP(MHSA(x)))` on `[n, L, W]` tokens.
    fn attention_block(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.attention(prefix, x)?;
        let h = if self.cfg.bypass.mlp {
            h
        } else {
            let h = self.linear(h, &format!("{prefix}.mlp.w1"), Some(&format!("{prefix}.mlp.b1")))?;
            let h = self.g.gelu(h);
            self.linear(h, &format!("{prefix}.mlp.w2"), Some(&format!("{prefix}.mlp.b2")))?
        };
        let h = if self.cfg.bypass.norm {
            h
        } else {
            let gamma = self.p(&format!("{prefix}.norm.gamma"))?;
            let beta = self.p(&format!("{prefix}.norm.beta"))?;
            self.g.layer_norm(h, gamma, beta, S::lit(LN_EPS))?
        };
        self.g.add(x, h)
    }

    fn dims4(&self, f: Var) -> Result<[usize; 4]> {
        let s = self.g.shape(f);
        if s.len() != 4 || s[2] != self.cfg.joints || s[3] != self.cfg.embed_dim {
            return Err(Error::shape(format!(
                "expected [B, T, {}, {}], got {:?}",
                self.cfg.joints, self.cfg.embed_dim, s
            )));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Attention among the joints of each frame; weights shared over time.
    pub fn spatial_block(&mut self, prefix: &str, f: Var) -> Result<Var> {
        let [b, t, j, d] = self.dims4(f)?;
        let x = self.g.reshape(f, &[b * t, j, d])?;
        let y = self.attention_block(prefix, x)?;
        self.g.reshape(y, &[b, t, j, d])
    }

    /// Attention among the frames, each flattened to a `J·D` token.
    pub fn temporal_block(&mut self, prefix: &str, f: Var) -> Result<Var> {
        let [b, t, j, d] = self.dims4(f)?;
        let x = self.g.reshape(f, &[b, t, j * d])?;
        let y = self.attention_block(prefix, x)?;
        self.g.reshape(y, &[b, t, j, d])
    }

    /// One dual-stream block with softmax fusion of the two branches.
    pub fn dst_block(&mut self, index: usize, f_prev: Var) -> Result<BlockVars> {
        let pre = format!("blocks.{index}");
        let s1 = self.spatial_block(&format!("{pre}.st.spatial"), f_prev)?;
        let st = self.temporal_block(&format!("{pre}.st.temporal"), s1)?;
        let t2 = self.temporal_block(&format!("{pre}.ts.temporal"), f_prev)?;
        let ts = self.spatial_block(&format!("{pre}.ts.spatial"), t2)?;

        let [b, t, j, d] = self.dims4(st)?;
        let both = self.g.concat(&[st, ts], 3)?;
        let both = self.g.reshape(both, &[b, t * j, 2 * d])?;
        let pooled = self.g.mean(both, 1)?;
        let logits = self.linear(pooled, &format!("{pre}.fusion.weight"), Some(&format!("{pre}.fusion.bias")))?;
        let weights = self.g.softmax(logits);
        let a_st = self.g.select(weights, 1, 0)?;
        let a_st = self.g.reshape(a_st, &[b, 1, 1, 1])?;
        let a_ts = self.g.select(weights, 1, 1)?;
        let a_ts = self.g.reshape(a_ts, &[b, 1, 1, 1])?;
        let x = self.g.mul(a_st, st)?;
        let y = self.g.mul(a_ts, ts)?;
        let fused = self.g.add(x, y)?;

        let velocity = match self.cfg.ablation.velocity_source {
            VelocitySource::Ts => ts,
            VelocitySource::St => st,
            VelocitySource::TsSt => {
                let sum = self.g.add(st, ts)?;
                self.g.scale(sum, S::lit(0.5))
            }
        };
        Ok(BlockVars { st, ts, weights, fused, velocity })
    }

    /// Runs the `N` blocks. Returns `(F_K, F_V, F^N, blocks)`.
    #[allow(clippy::type_complexity)]
    pub fn vista_former(&mut self, x: Var) -> Result<(Var, Option<Var>, Var, Vec<BlockVars>)> {
        let mut f = x;
        let mut blocks = Vec::with_capacity(self.cfg.depth);
        let mut velocity_sum: Option<Var> = None;
        for i in 0..self.cfg.depth {
            let blk = self.dst_block(i, f)?;
            f = blk.fused;
            velocity_sum = Some(match velocity_sum {
                None => blk.velocity,
                Some(acc) => self.g.add(acc, blk.velocity)?,
            });
            blocks.push(blk);
        }
        let f_n = f;
        if !self.cfg.ablation.velocity_branch {
            return Ok((f_n, None, f_n, blocks));
        }
        let f_v = self.temporal_block("velocity.temporal", velocity_sum.expect("depth >= 1"))?;
        let f_k = if self.cfg.ablation.velocity_fusion {
            let half = self.g.scale(f_v, S::lit(0.5));
            self.g.add(half, f_n)?
        } else {
            f_n
        };
        Ok((f_k, Some(f_v), f_n, blocks))
    }

    fn head(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")))?;
        let h = self.g.gelu(h);
        self.linear(h, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))
    }

    /// Keypoints `[B, T, J, C]` from every step of `F_K` through one shared
    /// head; velocity `[B, J, C]` from the last step of `F_V`. Without a
    /// velocity branch the velocity is read off the predicted keypoints.
    pub fn decode(&mut self, f_k: Var, f_v: Option<Var>) -> Result<(Var, Var)> {
        let keypoints = self.head("decoder.keypoint", f_k)?;
        let last = self.cfg.window - 1;
        let velocity = match f_v {
            Some(f_v) => {
                let tail = self.g.select(f_v, 1, last)?;
                self.head("decoder.velocity", tail)?
            }
            None => {
                let end = self.g.select(keypoints, 1, last)?;
                let start = self.g.select(keypoints, 1, 0)?;
                self.g.sub(end, start)?
            }
        };
        Ok((keypoints, velocity))
    }

    pub fn forward(&mut self, input: Var) -> Result<ForwardVars> {
        let encoded = self.encode(input)?;
        self.forward_encoded(encoded)
    }

    /// Everything after the encoder, starting from `[B, T, J, D]` features.
    pub fn forward_encoded(&mut self, encoded: Var) -> Result<ForwardVars> {
        let embedded = self.add_positional(encoded)?;
        let (f_k, f_v, f_n, blocks) = self.vista_former(embedded)?;
        let (keypoints, velocity) = self.decode(f_k, f_v)?;
        Ok(ForwardVars {
            encoded,
            embedded,
            blocks,
            f_n,
            f_v,
            f_k,
            keypoints,
            velocity,
            attention: std::mem::take(&mut self.attention),
        })
    }
}

/// Network outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S> {
    /// `[B, T, J, C]`.
    pub keypoints: Tensor<S>,
    /// `[B, J, C]`.
    pub velocity: Tensor<S>,
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VstPose<S> {
    pub config: ModelConfig,
    pub params: Parameters<S>,
}

impl<S: Scalar> VstPose<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, seed)?;
        Ok(VstPose { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters<S>) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(VstPose { config, params })
    }

    /// Accepts `[T, ch, rows, steps]` or a batch `[B, T, ch, rows, steps]`.
    pub fn batch_input(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        match input.rank() {
            5 => Ok(input.clone()),
            4 => {
                let mut shape = vec![1];
                shape.extend_from_slice(input.shape());
                input.clone().reshape(&shape)
            }
            _ => Err(Error::shape(format!("model input must be rank 4 or 5, got {:?}", input.shape()))),
        }
    }

    /// Inference forward pass.
    pub fn forward(&self, input: &Tensor<S>) -> Result<Prediction<S>> {
        let input = self.batch_input(input)?;
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &self.params, false);
        let x = g.constant(input);
        let out = Ctx::new(&mut g, &self.config, &bound).forward(x)?;
        Ok(Prediction { keypoints: g.value(out.keypoints).clone(), velocity: g.value(out.velocity).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval<R>(cfg: &ModelConfig, params: &Parameters<f64>, f: impl FnOnce(&mut Ctx<'_, f64>) -> R) -> R {
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, params, false);
        let mut ctx = Ctx::new(&mut g, cfg, &bound);
        f(&mut ctx)
    }

    fn set(params: &mut Parameters<f64>, name: &str, f: impl Fn(&[usize], usize) -> f64) {
        let t = params.get_mut(name).unwrap();
        let shape = t.shape().to_vec();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = f(&shape, i);
        }
    }

    fn identity(shape: &[usize], i: usize) -> f64 {
        let n = shape[1];
        if i / n == i % n {
            1.0
        } else {
            0.0
        }
    }

    #[test]
    fn spatial_block_uniform_attention_by_hand() {
        // single head, 2 joints, D = 2, Q = K = 0 so attention is uniform
        let cfg = ModelConfig {
            joints: 2,
            embed_dim: 2,
            heads: 1,
            window: 1,
            bypass: Bypass { mlp: true, norm: true },
            ..ModelConfig::tiny()
        };
        let mut params = Parameters::<f64>::init(&cfg, 1).unwrap();
        let pre = "blocks.0.st.spatial";
        set(&mut params, &format!("{pre}.wq"), |_, _| 0.0);
        set(&mut params, &format!("{pre}.wk"), |_, _| 0.0);
        set(&mut params, &format!("{pre}.wv"), identity);
        set(&mut params, &format!("{pre}.wo"), identity);
        let f = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 5.0, -4.0]).unwrap();
        let out = eval(&cfg, &params, |ctx| {
            let x = ctx.g.constant(f.clone());
            let y = ctx.spatial_block(pre, x).unwrap();
            ctx.g.value(y).clone()
        });
        // mean over joints = (3, -1)
        assert_eq!(out.data(), &[4.0, 1.0, 8.0, -5.0]);
    }

    #[test]
    fn temporal_single_token_attends_to_itself() {
        let cfg = ModelConfig { window: 1, bypass: Bypass { mlp: true, norm: true }, ..ModelConfig::tiny() };
        let mut params = Parameters::<f64>::init(&cfg, 2).unwrap();
        let pre = "blocks.0.ts.temporal";
        set(&mut params, &format!("{pre}.wv"), identity);
        set(&mut params, &format!("{pre}.wo"), identity);
        let f = Tensor::from_fn(&[1, 1, 4, 8], |i| (i as f64 * 0.37).sin());
        let (attn_out, block_out) = eval(&cfg, &params, |ctx| {
            let x = ctx.g.constant(f.clone());
            let flat = ctx.g.reshape(x, &[1, 1, 32]).unwrap();
            let a = ctx.attention(pre, flat).unwrap();
            let y = ctx.temporal_block(pre, x).unwrap();
            (ctx.g.value(a).clone(), ctx.g.value(y).clone())
        });
        for (a, x) in attn_out.data().iter().zip(f.data()) {
            assert!((a - x).abs() < 1e-12);
        }
        // the residual adds the attended token back onto the input
        for (y, x) in block_out.data().iter().zip(f.data()) {
            assert!((y - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_projection_makes_blocks_identity() {
        let cfg = ModelConfig { bypass: Bypass { mlp: true, norm: true }, ..ModelConfig::tiny() };
        let mut params = Parameters::<f64>::init(&cfg, 3).unwrap();
        for s in ["st", "ts"] {
            for b in ["spatial", "temporal"] {
                set(&mut params, &format!("blocks.0.{s}.{b}.wo"), |_, _| 0.0);
            }
        }
        let f = Tensor::from_fn(&[2, 3, 4, 8], |i| (i as f64 * 0.11).cos());
        let (fused, vel) = eval(&cfg, &params, |ctx| {
            let x = ctx.g.constant(f.clone());
            let b = ctx.dst_block(0, x).unwrap();
            (ctx.g.value(b.fused).clone(), ctx.g.value(b.velocity).clone())
        });
        assert!(fused.max_abs_diff(&f) < 1e-12);
        assert_eq!(vel, f);
    }

    #[test]
    fn forced_fusion_logits_select_st_branch() {
        let cfg = ModelConfig::tiny();
        let mut params = Parameters::<f64>::init(&cfg, 4).unwrap();
        set(&mut params, "blocks.0.fusion.weight", |_, _| 0.0);
        set(&mut params, "blocks.0.fusion.bias", |_, i| if i == 0 { 50.0 } else { -50.0 });
        let f = Tensor::from_fn(&[1, 3, 4, 8], |i| (i as f64 * 0.7).sin());
        let (fused, st) = eval(&cfg, &params, |ctx| {
            let x = ctx.g.constant(f.clone());
            let b = ctx.dst_block(0, x).unwrap();
            (ctx.g.value(b.fused).clone(), ctx.g.value(b.st).clone())
        });
        assert!(fused.max_abs_diff(&st) < 1e-6);
    }

    #[test]
    fn positional_encoding_broadcasts() {
        let cfg = ModelConfig::tiny();
        let mut params = Parameters::<f64>::init(&cfg, 5).unwrap();
        set(&mut params, "pos.temporal", |_, i| i as f64);
        set(&mut params, "pos.spatial", |_, i| 100.0 * i as f64);
        let out = eval(&cfg, &params, |ctx| {
            let x = ctx.g.constant(Tensor::zeros(&[1, 3, 4, 8]));
            let y = ctx.add_positional(x).unwrap();
            ctx.g.value(y).clone()
        });
        for t in 0..3 {
            for j in 0..4 {
                for d in 0..8 {
                    assert_eq!(out.at(&[0, t, j, d]), (t * 8 + d) as f64 + 100.0 * (j * 8 + d) as f64);
                }
            }
        }
        // zero encodings leave the input unchanged
        let zero = Parameters::<f64>::init(&cfg, 5).unwrap();
        let x = Tensor::from_fn(&[1, 3, 4, 8], |i| i as f64);
        let same = eval(&cfg, &zero, |ctx| {
            let v = ctx.g.constant(x.clone());
            let y = ctx.add_positional(v).unwrap();
            ctx.g.value(y).clone()
        });
        assert_eq!(same, x);
    }

    #[test]
    fn encoder_zero_input_zero_bias_gives_zero() {
        let cfg = ModelConfig::tiny();
        let params = Parameters::<f64>::init(&cfg, 6).unwrap();
        let out = eval(&cfg, &params, |ctx| {
            let x = ctx.g.constant(Tensor::zeros(&[2, 3, 3, 90, 5]));
            let y = ctx.encode(x).unwrap();
            ctx.g.value(y).clone()
        });
        assert_eq!(out.shape(), &[2, 3, 4, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_rejects_wrong_shape() {
        let cfg = ModelConfig::tiny();
        let params = Parameters::<f64>::init(&cfg, 6).unwrap();
        let r = eval(&cfg, &params, |ctx| {
            let x = ctx.g.constant(Tensor::zeros(&[1, 3, 3, 30, 5]));
            ctx.encode(x).map(|_| ())
        });
        assert!(r.is_err());
    }

    #[test]
    fn decoder_zero_features_zero_biases() {
        let cfg = ModelConfig::tiny();
        let params = Parameters::<f64>::init(&cfg, 7).unwrap();
        let (k, v) = eval(&cfg, &params, |ctx| {
            let f = ctx.g.constant(Tensor::zeros(&[1, 3, 4, 8]));
            let (k, v) = ctx.decode(f, Some(f)).unwrap();
            (ctx.g.value(k).clone(), ctx.g.value(v).clone())
        });
        assert_eq!(k.shape(), &[1, 3, 4, 2]);
        assert_eq!(v.shape(), &[1, 4, 2]);
        assert!(k.data().iter().chain(v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.spatial_head_dim(), 4);
        assert_eq!(cfg.temporal_head_dim(), 68);
        assert!(ModelConfig { heads: 3, ..ModelConfig::default() }.validate().is_err());
    }
}
