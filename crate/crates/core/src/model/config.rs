use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::pafno::{bin_count, param_count_for, MixerConfig, MixerDomain, MixerMode, Nonlinearity};

/// Mixer settings shared by every block of one domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerSpec {
    pub mode: MixerMode,
    pub blocks: usize,
    pub nonlinearity: Nonlinearity,
}

impl MixerSpec {
    pub fn new(mode: MixerMode, blocks: usize) -> Self {
        Self {
            mode,
            blocks,
            nonlinearity: Nonlinearity::ReluSplit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Identity,
}

/// Patch extents `(time, lat, lon)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Patch {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of input time steps `T`.
    pub input_steps: usize,
    pub height: usize,
    pub width: usize,
    pub dyn_channels: usize,
    pub static_channels: usize,
    pub patch: Patch,
    pub embed_dim: usize,
    pub layers: usize,
    pub spatial: MixerSpec,
    /// `None` drops the temporal mixer (and its norm) from every block.
    pub temporal: Option<MixerSpec>,
    /// Number of 3x3 convolutions in the decoder head.
    pub head_depth: usize,
    pub use_norm: bool,
    pub mlp_activation: Activation,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    /// The desk-scale reference configuration used by the toy experiments.
    pub fn toy(height: usize, width: usize, embed_dim: usize) -> Self {
        Self {
            input_steps: 4,
            height,
            width,
            dyn_channels: 2,
            static_channels: 1,
            patch: Patch::new(2, 1, 1),
            embed_dim,
            layers: 2,
            spatial: MixerSpec::new(MixerMode::Pafno, 4),
            temporal: Some(MixerSpec::new(MixerMode::Pafno, 4)),
            head_depth: 1,
            use_norm: true,
            mlp_activation: Activation::Gelu,
            mlp_ratio: 4,
        }
    }

    /// Applies one mixer mode to both domains.
    pub fn with_mixer(mut self, mode: MixerMode) -> Self {
        self.spatial.mode = mode;
        if let Some(t) = self.temporal.as_mut() {
            t.mode = mode;
        }
        self
    }

    /// Removes every nonlinearity: identity mixer activations and channel
    /// MLP, no norms, single-conv head. The resulting model is linear in its
    /// input and commutes with patch-aligned longitude rolls.
    pub fn linearized(mut self) -> Self {
        self.spatial.nonlinearity = Nonlinearity::Identity;
        if let Some(t) = self.temporal.as_mut() {
            t.nonlinearity = Nonlinearity::Identity;
        }
        self.use_norm = false;
        self.mlp_activation = Activation::Identity;
        self.head_depth = self.head_depth.min(1);
        self
    }

    pub fn channels(&self) -> usize {
        self.dyn_channels + self.static_channels
    }

    /// Token grid `(t, h, w)`.
    pub fn token_grid(&self) -> [usize; 3] {
        [
            self.input_steps / self.patch.t,
            self.height / self.patch.h,
            self.width / self.patch.w,
        ]
    }

    pub fn patch_len(&self) -> usize {
        self.patch.volume() * self.channels()
    }

    pub fn head_len(&self) -> usize {
        self.patch.h * self.patch.w * self.dyn_channels
    }

    pub fn spatial_mixer(&self) -> MixerConfig {
        MixerConfig {
            domain: MixerDomain::Spatial,
            embed_dim: self.embed_dim,
            blocks: self.spatial.blocks,
            mode: self.spatial.mode,
            nonlinearity: self.spatial.nonlinearity,
        }
    }

    pub fn temporal_mixer(&self) -> Option<MixerConfig> {
        self.temporal.map(|t| MixerConfig {
            domain: MixerDomain::Temporal,
            embed_dim: self.embed_dim,
            blocks: t.blocks,
            mode: t.mode,
            nonlinearity: t.nonlinearity,
        })
    }

    pub fn spatial_grid(&self) -> [usize; 2] {
        let [_, h, w] = self.token_grid();
        [h, w]
    }

    pub fn temporal_grid(&self) -> [usize; 1] {
        [self.token_grid()[0]]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p.t == 0 || p.h == 0 || p.w == 0 {
            return arg_err("patch extents must be positive");
        }
        if self.input_steps == 0 || self.input_steps % p.t != 0 {
            return arg_err(format!("T={} not divisible by temporal patch {}", self.input_steps, p.t));
        }
        if self.height == 0 || self.height % p.h != 0 {
            return arg_err(format!("H={} not divisible by patch height {}", self.height, p.h));
        }
        if self.width == 0 || self.width % p.w != 0 {
            return arg_err(format!("W={} not divisible by patch width {}", self.width, p.w));
        }
        if self.dyn_channels == 0 {
            return arg_err("at least one dynamic channel is required");
        }
        if self.mlp_ratio == 0 {
            return arg_err("mlp_ratio must be positive");
        }
        self.spatial_mixer().validate()?;
        if let Some(t) = self.temporal_mixer() {
            t.validate()?;
        }
        Ok(())
    }

    /// Closed-form learnable scalar count:
    ///
    /// ```text
    /// embed   = P D + D                      (P = pt ph pw C)
    /// block   = [2D] + mixer_s + [2D + mixer_t] + [2D] + 2 r D^2 + r D + D
    /// decoder = depth (9 D^2 + D) + D Q + Q   (Q = ph pw C_dyn)
    /// ```
    ///
    /// with bracketed norm terms present only when `use_norm`, the temporal
    /// terms only with a temporal mixer, and the mixer counts from
    /// [`param_count_for`].
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let norm = if self.use_norm { 2 * d } else { 0 };
        let embed = self.patch_len() * d + d;
        let mut block = norm + param_count_for(&self.spatial_mixer(), &self.spatial_grid());
        if let Some(t) = self.temporal_mixer() {
            block += norm + param_count_for(&t, &self.temporal_grid());
        }
        let r = self.mlp_ratio;
        block += norm + 2 * r * d * d + r * d + d;
        let q = self.head_len();
        let decoder = self.head_depth * (9 * d * d + d) + d * q + q;
        embed + self.layers * block + decoder
    }

    /// Retained frequency bins `(spatial, temporal)` of one block.
    pub fn bins_per_block(&self) -> (usize, usize) {
        let t = if self.temporal.is_some() {
            bin_count(&self.temporal_grid())
        } else {
            0
        };
        (bin_count(&self.spatial_grid()), t)
    }
}
