//! Single-stream adaptive ViT backbone.
//!
//! Template and search patches share one token sequence. Every block after
//! the first `fixed_blocks` is wrapped by an activation module (AM): a
//! linear map over the first embedding coordinate of all tokens followed by
//! a sigmoid. The block runs only when that probability exceeds `beta`.

mod backbone;
mod block;
mod embed;

pub use backbone::{sparsity_loss, sparsity_loss_of_trace, ActivationTrace, Backbone, BackboneOutput};
pub use block::{am_probability, ActivationModule, Block};
pub use embed::{PatchEmbed, TokenState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry and gating hyperparameters of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Total transformer blocks.
    pub depth: usize,
    /// Leading blocks that always execute.
    pub fixed_blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Patch side in pixels.
    pub patch: usize,
    /// `(height, width)` of the template crop.
    pub template_size: (usize, usize),
    /// `(height, width)` of the search crop.
    pub search_size: (usize, usize),
    /// Gate threshold, in (0.5, 1).
    pub beta: f64,
    /// Sparsity target for the mean adaptive probability, in [0, 1].
    pub zeta: f64,
    /// Initial AM bias; AM weights start at zero.
    #[serde(default)]
    pub am_init_bias: f64,
}

impl BackboneConfig {
    /// Desk-scale profile used for tests and CPU experiments.
    pub fn desk() -> Self {
        Self {
            depth: 8,
            fixed_blocks: 2,
            dim: 64,
            heads: 2,
            mlp_ratio: 4.0,
            patch: 8,
            template_size: (32, 32),
            search_size: (64, 64),
            beta: 0.6,
            zeta: 0.4,
            am_init_bias: 0.0,
        }
    }

    /// DeiT-tiny sized profile with 128/256 crops, for cost accounting.
    pub fn paper() -> Self {
        Self {
            depth: 12,
            fixed_blocks: 4,
            dim: 192,
            heads: 3,
            mlp_ratio: 4.0,
            patch: 16,
            template_size: (128, 128),
            search_size: (256, 256),
            beta: 0.6,
            zeta: 0.4,
            am_init_bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.depth == 0 || self.fixed_blocks == 0 || self.fixed_blocks >= self.depth {
            return bad(format!(
                "need 1 <= fixed_blocks < depth, got fixed_blocks={} depth={}",
                self.fixed_blocks, self.depth
            ));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if !(self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        let p = self.patch;
        let sides = [
            self.template_size.0,
            self.template_size.1,
            self.search_size.0,
            self.search_size.1,
        ];
        if p == 0 || sides.iter().any(|&s| s == 0 || s % p != 0) {
            return bad(format!("image sides {sides:?} not divisible by patch {p}"));
        }
        if !(self.beta > 0.5 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0.5, 1), got {}", self.beta));
        }
        if !self.am_init_bias.is_finite() {
            return bad(format!("am_init_bias must be finite, got {}", self.am_init_bias));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return bad(format!("zeta must lie in [0, 1], got {}", self.zeta));
        }
        Ok(())
    }

    /// `(rows, cols)` of the template token grid.
    pub fn template_grid(&self) -> (usize, usize) {
        (self.template_size.0 / self.patch, self.template_size.1 / self.patch)
    }

    pub fn search_grid(&self) -> (usize, usize) {
        (self.search_size.0 / self.patch, self.search_size.1 / self.patch)
    }

    pub fn template_tokens(&self) -> usize {
        let (h, w) = self.template_grid();
        h * w
    }

    pub fn search_tokens(&self) -> usize {
        let (h, w) = self.search_grid();
        h * w
    }

    /// Total token count `K`.
    pub fn num_tokens(&self) -> usize {
        self.template_tokens() + self.search_tokens()
    }

    pub fn adaptive_blocks(&self) -> usize {
        self.depth - self.fixed_blocks
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `fixed_blocks` scaled to a new depth, at least 1 and below `depth`.
    pub fn rescaled_fixed(&self, depth: usize) -> usize {
        let scaled = (self.fixed_blocks as f64 * depth as f64 / self.depth as f64).floor() as usize;
        scaled.clamp(1, depth.saturating_sub(1).max(1))
    }
}

/// Whether a forward pass is for training or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Residual branches of active adaptive blocks are scaled by their
    /// probability so the task loss reaches the AMs.
    Train,
    /// Plain blocks; inactive blocks are skipped outright.
    Infer,
}

/// Override of the AM gate decisions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ForceGates {
    #[default]
    None,
    AllOn,
    AllOff,
    /// One entry per adaptive block.
    Mask(Vec<bool>),
}

impl ForceGates {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ForceGates::None),
            "all-on" => Ok(ForceGates::AllOn),
            "all-off" => Ok(ForceGates::AllOff),
            other => Err(Error::Invalid(format!(
                "force-gates must be one of none, all-on, all-off; got `{other}`"
            ))),
        }
    }

    /// Deactivate every other adaptive block, starting with the first.
    pub fn half(adaptive: usize) -> Self {
        ForceGates::Mask((0..adaptive).map(|j| j % 2 == 1).collect())
    }

    fn decide(&self, j: usize, p: f64, beta: f64) -> bool {
        match self {
            ForceGates::None => p > beta,
            ForceGates::AllOn => true,
            ForceGates::AllOff => false,
            ForceGates::Mask(m) => m.get(j).copied().unwrap_or(p > beta),
        }
    }
}
