use std::ops::Range;

use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::layout::{Builder, Init};
use crate::tensor::{Element, Exec, ParamId, ParamStore};

/// Concatenated template + search tokens, `[B, K, d]`.
#[derive(Debug, Clone)]
pub struct TokenState<V> {
    pub tokens: V,
    pub template_range: Range<usize>,
    pub search_range: Range<usize>,
}

/// Shared patch projection plus separate learned position embeddings for
/// the two crops.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
}

impl PatchEmbed {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, cfg: &BackboneConfig) -> Result<Self> {
        let (d, p) = (cfg.dim, cfg.patch);
        Ok(Self {
            weight: b.param("patch_embed.weight", &[d, 3, p, p], Init::Normal(0.02))?,
            bias: b.param("patch_embed.bias", &[d], Init::Zeros)?,
            pos_template: b.param("pos_embed.template", &[cfg.template_tokens(), d], Init::Normal(0.02))?,
            pos_search: b.param("pos_embed.search", &[cfg.search_tokens(), d], Init::Normal(0.02))?,
        })
    }

    fn embed_one<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        img: &E::Val,
        size: (usize, usize),
        pos: ParamId,
        cfg: &BackboneConfig,
    ) -> Result<E::Val> {
        let shape = ctx.shape_of(img);
        let p = cfg.patch;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != size.0 || shape[3] != size.1 {
            return Err(Error::Invalid(format!(
                "expected image [B, 3, {}, {}], got {shape:?}",
                size.0, size.1
            )));
        }
        if shape[2] % p != 0 || shape[3] % p != 0 {
            return Err(Error::Invalid(format!(
                "image sides {}x{} not divisible by patch {p}",
                shape[2], shape[3]
            )));
        }
        let b = shape[0];
        let n = (shape[2] / p) * (shape[3] / p);
        let w = ctx.param(store, self.weight);
        let bias = ctx.param(store, self.bias);
        let y = ctx.conv2d(img, &w, Some(&bias), p, 0)?;
        let y = ctx.reshape(&y, &[b, cfg.dim, n])?;
        let y = ctx.transpose(&y, 1, 2)?;
        let pe = ctx.param(store, pos);
        ctx.add(&y, &pe)
    }

    /// Embed template `z: [B,3,Hz,Wz]` and search `x: [B,3,Hx,Wx]`.
    pub fn forward<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        cfg: &BackboneConfig,
        z: &E::Val,
        x: &E::Val,
    ) -> Result<TokenState<E::Val>> {
        let tz = self.embed_one(ctx, store, z, cfg.template_size, self.pos_template, cfg)?;
        let tx = self.embed_one(ctx, store, x, cfg.search_size, self.pos_search, cfg)?;
        let tokens = ctx.concat(&[&tz, &tx], 1)?;
        let pz = cfg.template_tokens();
        Ok(TokenState {
            tokens,
            template_range: 0..pz,
            search_range: pz..pz + cfg.search_tokens(),
        })
    }
}
