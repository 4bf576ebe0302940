//! The complete tracker network: backbone, head and view-invariance critic.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::head::{Head, HeadMaps};
use crate::layout::Builder;
use crate::mi::{Critic, CRITIC_HIDDEN};
use crate::rng::SplitMix64;
use crate::tensor::{Element, Exec, ParamStore};
use crate::vit::{Backbone, BackboneConfig, BackboneOutput, ForceGates, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Width of the first head convolution; later layers halve it.
    pub head_channels: usize,
    pub critic_hidden: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            head_channels: 64,
            critic_hidden: CRITIC_HIDDEN,
        }
    }

    pub fn paper() -> Self {
        Self {
            backbone: BackboneConfig::paper(),
            head_channels: 128,
            critic_hidden: CRITIC_HIDDEN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackerModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub head: Head,
    pub vir_critic: Critic,
}

pub struct ModelOutput<V> {
    pub backbone: BackboneOutput<V>,
    pub maps: HeadMaps<V>,
}

impl TrackerModel {
    pub fn build<T: Element>(cfg: &ModelConfig, b: &mut Builder<'_, T>) -> Result<Self> {
        let backbone = Backbone::build(b, &cfg.backbone)?;
        let head = Head::build(b, cfg.backbone.dim, cfg.head_channels, cfg.backbone.search_grid())?;
        let vir_critic = Critic::build(b, "vir_critic", cfg.backbone.dim, cfg.critic_hidden)?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            head,
            vir_critic,
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let m = Self::build(cfg, &mut Builder::Fresh { store: &mut store, rng: &mut rng })?;
        Ok((m, store))
    }

    /// Layout bound to an existing store, checking names and shapes.
    pub fn bind<T: Element>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        Self::build(cfg, &mut Builder::Bind { store })
    }

    pub fn forward<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        z: &E::Val,
        x: &E::Val,
        mode: Mode,
        force: &ForceGates,
    ) -> Result<ModelOutput<E::Val>> {
        let backbone = self.backbone.forward(ctx, store, z, x, mode, force)?;
        let r = &backbone.state.search_range;
        let search = ctx.slice(&backbone.state.tokens, 1, r.start, r.end)?;
        let maps = self.head.forward(ctx, store, &search, mode)?;
        Ok(ModelOutput { backbone, maps })
    }
}
