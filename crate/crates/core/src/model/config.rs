use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which dual-stream branch feeds the per-block velocity feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VelocitySource {
    /// Time-first branch, `S2(T2(F))`.
    Ts,
    /// Space-first branch, `T1(S1(F))`.
    St,
    /// Mean of both branches.
    #[serde(rename = "ts+st")]
    TsSt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub velocity_branch: bool,
    pub velocity_source: VelocitySource,
    /// Late fusion `F_K = 0.5 F_V + F^N`.
    pub velocity_fusion: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { velocity_branch: true, velocity_source: VelocitySource::Ts, velocity_fusion: true }
    }
}

/// Diagnostic switches that replace sub-layers by the identity. Never set
/// for training; they exist so block algebra can be checked by hand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bypass {
    pub mlp: bool,
    pub norm: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Frames per window (`T`).
    pub window: usize,
    /// Keypoints (`J`).
    pub joints: usize,
    /// Coordinate dimension (`C`), 2 or 3.
    pub dims: usize,
    /// Per-joint embedding width (`D`).
    pub embed_dim: usize,
    /// Number of DST blocks (`N`).
    pub depth: usize,
    /// Attention heads (`H`) for both spatial and temporal attention.
    pub heads: usize,
    /// MLP hidden width as a multiple of the token width.
    pub mlp_ratio: usize,
    /// `[channels, rows, steps]` of one CSI frame.
    pub frame_shape: [usize; 3],
    /// Output channels of the first two encoder convolutions.
    pub encoder_channels: [usize; 2],
    pub kernel: usize,
    pub ablation: Ablation,
    pub bypass: Bypass,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 3,
            joints: 17,
            dims: 2,
            embed_dim: 32,
            depth: 5,
            heads: 8,
            mlp_ratio: 4,
            frame_shape: [3, 90, 5],
            encoder_channels: [32, 64],
            kernel: 3,
            ablation: Ablation::default(),
            bypass: Bypass::default(),
        }
    }
}

impl ModelConfig {
    /// `T=3, J=4, D=8, N=1, H=2, C=2` with a slim encoder.
    pub fn tiny() -> Self {
        ModelConfig {
            window: 3,
            joints: 4,
            dims: 2,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            encoder_channels: [4, 4],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.window == 0 || self.joints == 0 || self.embed_dim == 0 || self.depth == 0 || self.heads == 0 {
            return fail("window, joints, embed_dim, depth and heads must all be >= 1".into());
        }
        if !(2..=3).contains(&self.dims) {
            return fail(format!("dims must be 2 or 3, got {}", self.dims));
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        if (self.joints * self.embed_dim) % self.heads != 0 {
            return fail(format!("joints * embed_dim = {} is not divisible by {} heads", self.joints * self.embed_dim, self.heads));
        }
        if self.mlp_ratio == 0 || self.encoder_channels.contains(&0) {
            return fail("mlp_ratio and encoder channels must be >= 1".into());
        }
        if self.kernel % 2 == 0 {
            return fail(format!("kernel size must be odd, got {}", self.kernel));
        }
        let [ch, rows, steps] = self.frame_shape;
        if ch == 0 || rows < 2 || steps < 2 {
            return fail(format!("frame shape {:?} too small for 2x2 pooling", self.frame_shape));
        }
        Ok(())
    }

    /// Per-head width of spatial attention, `D / H`.
    pub fn spatial_head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Per-head width of temporal attention, `J·D / H`.
    pub fn temporal_head_dim(&self) -> usize {
        self.joints * self.embed_dim / self.heads
    }

    /// Flattened size of one encoder feature map after pooling.
    pub fn pooled_area(&self) -> usize {
        (self.frame_shape[1] / 2) * (self.frame_shape[2] / 2)
    }
}
