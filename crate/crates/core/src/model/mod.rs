//! The joint denoiser: a pooled two-frame conditioning encoder, per-modality
//! token embedders, a stack of AdaLN transformer blocks with full
//! bidirectional attention, and modality heads.
//!
//! Sequence layout per example is `[action (K) | obs | track (L_p) |
//! registers]`. Every token is modulated by `c_t` plus the embedding of its
//! own modality's diffusion timestep; registers use a learned null
//! embedding instead.

mod actions;
mod checkpoint;
mod latent;
mod net;
mod params;

pub use actions::{decode_action, ActionStats};
pub use checkpoint::{
    inspect_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, CHECKPOINT_FORMAT_VERSION,
};
pub use latent::{
    decode_obs_latent, encode_obs_latent, obs_patch_indices, prepare_condition, LATENT_BOUND, LATENT_MEAN,
    LATENT_STD,
};
pub use net::{
    embed_tokens, encode_condition, forward, timestep_embedding, tokens_to_obs, tokens_to_tracks,
    obs_to_tokens, tracks_to_tokens, visibility_logit_indices, ForwardInputs, ForwardOutput,
};
pub use params::{is_action_branch, param_specs, BoundParams, Init, ParamSpec, ParamStore};

use serde::{Deserialize, Serialize};

use crate::grad::DType;
use crate::trackspace::TrackConfig;
use crate::{Error, Result};

/// Which modality branches exist in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantMode {
    #[default]
    Joint,
    LatentOnly,
    TrackOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub mode: VariantMode,
    pub visibility_enabled: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            mode: VariantMode::Joint,
            visibility_enabled: true,
        }
    }
}

impl VariantConfig {
    pub fn new(mode: VariantMode, visibility_enabled: bool) -> Self {
        Self {
            mode,
            visibility_enabled,
        }
    }

    pub fn has_obs(&self) -> bool {
        self.mode != VariantMode::TrackOnly
    }

    pub fn has_track(&self) -> bool {
        self.mode != VariantMode::LatentOnly
    }

    pub fn has_visibility(&self) -> bool {
        self.has_track() && self.visibility_enabled
    }

    pub fn label(&self) -> String {
        let base = match self.mode {
            VariantMode::Joint => "joint",
            VariantMode::LatentOnly => "latent_only",
            VariantMode::TrackOnly => "track_only",
        };
        if self.has_track() && !self.visibility_enabled {
            format!("{base}_novis")
        } else {
            base.to_string()
        }
    }
}

/// How target frames become latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentEncoder {
    /// Parameter-free space-to-depth plus a fixed per-channel affine map.
    #[default]
    SpaceToDepth,
}

/// What the obs and track heads regress before the output is expressed as
/// noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadTarget {
    /// The head output is the noise estimate itself.
    #[default]
    Epsilon,
    /// The head estimates the clean tokens `x̂0` and the noise follows as
    /// `(x_τ − √ᾱ x̂0) / √(1 − ᾱ)`. Needed when a token is wider than the
    /// hidden size, since per-token noise cannot pass through the residual
    /// stream.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub registers: usize,
    pub action_dim: usize,
    /// Action chunk length `K`.
    pub chunk: usize,
    /// Offset `H` of the last predicted future frame.
    pub future_offset: usize,
    /// Future frames predicted, ending at `t + H`.
    pub future_frames: usize,
    pub resolution: usize,
    pub latent_encoder: LatentEncoder,
    pub latent_factor: usize,
    /// Spatial latent patch per obs token.
    pub latent_patch: usize,
    /// Output channels of the strided conditioning conv blocks.
    pub cond_channels: Vec<usize>,
    pub track: TrackConfig,
    pub variant: VariantConfig,
    pub precision: DType,
    #[serde(default)]
    pub obs_track_target: HeadTarget,
    #[serde(default)]
    pub action_target: HeadTarget,
}

/// Token modality tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Action = 0,
    Obs = 1,
    Track = 2,
    Register = 3,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            depth: 2,
            hidden: 64,
            heads: 4,
            mlp_ratio: 4,
            registers: 8,
            action_dim: 3,
            chunk: 8,
            future_offset: 4,
            future_frames: 2,
            resolution: 32,
            latent_encoder: LatentEncoder::SpaceToDepth,
            latent_factor: 4,
            latent_patch: 4,
            cond_channels: vec![16, 32, 64, 64],
            track: TrackConfig::desk(),
            variant: VariantConfig::default(),
            precision: DType::F32,
            obs_track_target: HeadTarget::Sample,
            action_target: HeadTarget::Epsilon,
        }
    }

    /// Full-size shape contract. The latent substitute yields `28×28×192`
    /// at 224px, not a 4-channel autoencoder latent.
    pub fn reference() -> Self {
        Self {
            depth: 12,
            hidden: 768,
            heads: 12,
            mlp_ratio: 4,
            registers: 8,
            action_dim: 7,
            chunk: 19,
            future_offset: 16,
            future_frames: 2,
            resolution: 224,
            latent_encoder: LatentEncoder::SpaceToDepth,
            latent_factor: 8,
            latent_patch: 2,
            cond_channels: vec![64, 128, 256, 512],
            track: TrackConfig::reference(),
            variant: VariantConfig::default(),
            precision: DType::F32,
            obs_track_target: HeadTarget::Epsilon,
            action_target: HeadTarget::Epsilon,
        }
    }

    /// Smallest configuration with three tokens per segment, for gradient
    /// checks in `f64`.
    pub fn tiny() -> Self {
        Self {
            depth: 1,
            hidden: 16,
            heads: 2,
            mlp_ratio: 2,
            registers: 3,
            action_dim: 3,
            chunk: 3,
            future_offset: 3,
            future_frames: 3,
            resolution: 16,
            latent_encoder: LatentEncoder::SpaceToDepth,
            latent_factor: 4,
            latent_patch: 4,
            cond_channels: vec![4, 4],
            track: TrackConfig {
                horizon: 5,
                grid_h: 2,
                grid_w: 2,
                patch: [2, 2, 2],
            },
            variant: VariantConfig::default(),
            precision: DType::F64,
            obs_track_target: HeadTarget::Sample,
            action_target: HeadTarget::Epsilon,
        }
    }

    pub fn with_variant(mut self, variant: VariantConfig) -> Self {
        self.variant = variant;
        self
    }

    pub fn latent_grid(&self) -> usize {
        self.resolution / self.latent_factor
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.latent_factor * self.latent_factor
    }

    /// Values in one frame's latent `[g, g, ch]`.
    pub fn latent_frame_len(&self) -> usize {
        self.latent_grid() * self.latent_grid() * self.latent_channels()
    }

    /// Values in the obs diffusion state `[F, g, g, ch]`.
    pub fn obs_state_len(&self) -> usize {
        self.future_frames * self.latent_frame_len()
    }

    pub fn obs_patch_dim(&self) -> usize {
        self.latent_patch * self.latent_patch * self.latent_channels()
    }

    pub fn obs_tokens_per_frame(&self) -> usize {
        let n = self.latent_grid() / self.latent_patch;
        n * n
    }

    pub fn obs_tokens(&self) -> usize {
        if self.variant.has_obs() {
            self.future_frames * self.obs_tokens_per_frame()
        } else {
            0
        }
    }

    pub fn track_tokens(&self) -> usize {
        if self.variant.has_track() {
            self.track.num_tokens()
        } else {
            0
        }
    }

    /// Values in the track diffusion state `[2, H_pp, H_g, W_g]`.
    pub fn track_state_len(&self) -> usize {
        self.track.grid_shape().iter().product()
    }

    pub fn action_state_len(&self) -> usize {
        self.chunk * self.action_dim
    }

    pub fn seq_len(&self) -> usize {
        self.chunk + self.obs_tokens() + self.track_tokens() + self.registers
    }

    /// Modality of every token position.
    pub fn token_tags(&self) -> Vec<Modality> {
        let mut t = vec![Modality::Action; self.chunk];
        t.extend(std::iter::repeat(Modality::Obs).take(self.obs_tokens()));
        t.extend(std::iter::repeat(Modality::Track).take(self.track_tokens()));
        t.extend(std::iter::repeat(Modality::Register).take(self.registers));
        t
    }

    /// Conditioning input channels: two RGB frames plus x/y coordinates.
    pub fn cond_in_channels(&self) -> usize {
        8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model.{m}")));
        if self.depth == 0 || self.hidden == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("depth/hidden/heads/mlp_ratio must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden: {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.hidden % 2 != 0 {
            return bad("hidden: must be even for the sinusoidal timestep embedding".into());
        }
        if self.action_dim == 0 || self.chunk == 0 {
            return bad("action_dim and chunk must be positive".into());
        }
        if self.future_frames == 0 || self.future_offset < self.future_frames {
            return bad(format!(
                "future_offset: {} frames ending at offset {} would include the current frame",
                self.future_frames, self.future_offset
            ));
        }
        if self.resolution < 16 {
            return bad("resolution: must be at least 16".into());
        }
        if self.latent_factor == 0 || self.resolution % self.latent_factor != 0 {
            return bad(format!(
                "latent_factor: {} does not divide resolution {}",
                self.latent_factor, self.resolution
            ));
        }
        if self.latent_patch == 0 || self.latent_grid() % self.latent_patch != 0 {
            return bad(format!(
                "latent_patch: {} does not divide the {}x{} latent grid",
                self.latent_patch,
                self.latent_grid(),
                self.latent_grid()
            ));
        }
        if self.cond_channels.is_empty() || self.cond_channels.contains(&0) {
            return bad("cond_channels: need at least one positive width".into());
        }
        if self.resolution >> self.cond_channels.len() == 0 {
            return bad("cond_channels: too many strided blocks for the resolution".into());
        }
        self.track.validate()?;
        if self.track.grid_h > self.resolution || self.track.grid_w > self.resolution {
            return bad("track: query grid larger than the image".into());
        }
        Ok(())
    }
}
