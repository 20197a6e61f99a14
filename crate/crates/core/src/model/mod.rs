//! Miniature diffusion transformer predicting velocity over the latent
//! sequence, with per-frame timestep modulation, a channel-reference
//! variant and the replicated-block control branch.

pub mod backbone;
pub mod params;

pub use backbone::{
    embed_tokens_graph, forward_graph, modulation_vectors, predict_velocity, spatial_positions,
    temporal_positions, CondVars, ModulationVectors,
};
pub use params::{GraphCtx, ParamSet};

use serde::{Deserialize, Serialize};

use crate::data::codec::FrameRole;
use crate::error::{Error, Result};

/// Boundary-frame conditioning scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceMode {
    /// Boundary latents appended as extra temporal frames.
    #[serde(rename = "temporal")]
    Temporal,
    /// Boundary latents concatenated channel-wise onto every intermediate.
    #[serde(rename = "channel")]
    Channel,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Token dimension D.
    pub dim: usize,
    /// Transformer block count L.
    pub blocks: usize,
    pub heads: usize,
    /// Spatial patch size over the latent grid.
    pub patch: usize,
    pub max_frames: usize,
    pub lambda_s: usize,
    pub lambda_t: usize,
    pub fidelity_modulation: bool,
    pub control_branch: bool,
    pub reference_mode: ReferenceMode,
    /// Conditioning dropout probability (null end latent).
    pub p_drop: f32,
    /// Injection strength for the control-branch residual.
    pub eta: f32,
    /// Pixel resolution the model is built for.
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 96,
            blocks: 6,
            heads: 2,
            patch: 1,
            max_frames: 16,
            lambda_s: 2,
            lambda_t: 1,
            fidelity_modulation: true,
            control_branch: false,
            reference_mode: ReferenceMode::Temporal,
            p_drop: 0.1,
            eta: 1.0,
            height: 64,
            width: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.eta < 0.0 {
            return Err(Error::config("eta must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::config("p_drop must lie in [0, 1]"));
        }
        if self.height % self.lambda_s != 0 || self.width % self.lambda_s != 0 {
            return Err(Error::config(format!(
                "resolution {}x{} not divisible by lambda_s {}",
                self.height, self.width, self.lambda_s
            )));
        }
        let (lh, lw) = (self.latent_height(), self.latent_width());
        if lh % self.patch != 0 || lw % self.patch != 0 {
            return Err(Error::config(format!(
                "latent grid {lh}x{lw} not divisible by patch {}",
                self.patch
            )));
        }
        if self.control_branch && self.reference_mode == ReferenceMode::Channel {
            return Err(Error::config(
                "the control branch requires temporal reference mode",
            ));
        }
        Ok(())
    }

    /// Latent channel count (grayscale input).
    pub fn latent_channels(&self) -> usize {
        crate::data::codec::C_IMG * self.lambda_s * self.lambda_s * self.lambda_t
    }

    pub fn latent_height(&self) -> usize {
        self.height / self.lambda_s
    }

    pub fn latent_width(&self) -> usize {
        self.width / self.lambda_s
    }

    /// Tokens per latent frame.
    pub fn tokens_per_frame(&self) -> usize {
        (self.latent_height() / self.patch) * (self.latent_width() / self.patch)
    }

    /// Input channels of the token projection.
    pub fn embed_channels(&self) -> usize {
        let per_frame = self.latent_channels() * self.patch * self.patch;
        match self.reference_mode {
            ReferenceMode::Temporal => per_frame,
            ReferenceMode::Channel => 3 * per_frame,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn line_encoder_config(&self) -> crate::lines::LineEncoderConfig {
        crate::lines::LineEncoderConfig {
            lambda_s: self.lambda_s,
            channels: self.latent_channels(),
            map_height: self.height,
            map_width: self.width,
        }
    }
}

/// One timestep per latent frame, carrying the t / t* = 0 distinction.
#[derive(Clone, Debug, PartialEq)]
pub struct PerFrameTimesteps {
    /// Values in [0, 1], aligned with the latent frame roles.
    pub values: Vec<f64>,
    pub roles: Vec<FrameRole>,
}

impl PerFrameTimesteps {
    /// Builds the per-frame vector: boundaries get t* = 0 under fidelity
    /// modulation, otherwise every frame gets the sampler/training t.
    pub fn build(roles: &[FrameRole], t: f64, fidelity_modulation: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config(format!("timestep {t} outside [0, 1]")));
        }
        let values = roles
            .iter()
            .map(|r| match r {
                FrameRole::Intermediate => t,
                _ if fidelity_modulation => 0.0,
                _ => t,
            })
            .collect();
        Ok(PerFrameTimesteps {
            values,
            roles: roles.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Parameter accounting for the control branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub control_block: usize,
    pub line_encoder: usize,
    /// (control block + line encoder) / backbone.
    pub ratio: f64,
}

/// Counts parameters by role. The backbone is everything outside the
/// control pathway.
pub fn count_params(params: &ParamSet<f32>) -> ParamCounts {
    let control_block = params.count_matching(|n| n.starts_with("control."));
    let line_encoder = params.count_matching(|n| n.starts_with("lines."));
    let backbone = params.total_elements() - control_block - line_encoder;
    let ratio = if backbone == 0 {
        0.0
    } else {
        (control_block + line_encoder) as f64 / backbone as f64
    };
    ParamCounts {
        backbone,
        control_block,
        line_encoder,
        ratio,
    }
}
