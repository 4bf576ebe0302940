use super::{BackboneConfig, Mode};
use crate::error::{Error, Result};
use crate::layout::{Builder, Init, LayerNorm, Linear};
use crate::tensor::{Element, Exec, ParamStore, Tensor};

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let d = cfg.dim;
        let h = cfg.mlp_hidden();
        Ok(Self {
            norm1: LayerNorm::build(b, &format!("{name}.norm1"), d)?,
            q: Linear::build(b, &format!("{name}.attn.q"), d, d, 0.02)?,
            k: Linear::build(b, &format!("{name}.attn.k"), d, d, 0.02)?,
            v: Linear::build(b, &format!("{name}.attn.v"), d, d, 0.02)?,
            proj: Linear::build(b, &format!("{name}.attn.proj"), d, d, 0.02)?,
            norm2: LayerNorm::build(b, &format!("{name}.norm2"), d)?,
            fc1: Linear::build(b, &format!("{name}.mlp.fc1"), d, h, 0.02)?,
            fc2: Linear::build(b, &format!("{name}.mlp.fc2"), h, d, 0.02)?,
            heads: cfg.heads,
        })
    }

    fn split_heads<T: Element, E: Exec<T>>(&self, ctx: &mut E, x: &E::Val) -> Result<E::Val> {
        let s = ctx.shape_of(x);
        let (b, k, d) = (s[0], s[1], s[2]);
        let y = ctx.reshape(x, &[b, k, self.heads, d / self.heads])?;
        ctx.transpose(&y, 1, 2)
    }

    /// Multi-head self-attention over `[B, K, d]`.
    pub fn attention<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        x: &E::Val,
    ) -> Result<E::Val> {
        let s = ctx.shape_of(x);
        let (b, k, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.q.forward(ctx, store, x)?;
        let q = self.split_heads(ctx, &q)?;
        let kk = self.k.forward(ctx, store, x)?;
        let kk = self.split_heads(ctx, &kk)?;
        let kt = ctx.transpose(&kk, 2, 3)?;
        let v = self.v.forward(ctx, store, x)?;
        let v = self.split_heads(ctx, &v)?;
        let scores = ctx.matmul(&q, &kt)?;
        let scores = ctx.scale(&scores, 1.0 / (dh as f64).sqrt())?;
        let attn = ctx.softmax(&scores, -1, 1.0)?;
        let out = ctx.matmul(&attn, &v)?;
        let out = ctx.transpose(&out, 1, 2)?;
        let out = ctx.reshape(&out, &[b, k, d])?;
        self.proj.forward(ctx, store, &out)
    }

    pub fn mlp<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        x: &E::Val,
    ) -> Result<E::Val> {
        let h = self.fc1.forward(ctx, store, x)?;
        let h = ctx.gelu(&h)?;
        self.fc2.forward(ctx, store, &h)
    }

    /// `x + s*attn(ln1(x))`, then `x + s*mlp(ln2(x))`. With `scale == None`
    /// this is the ungated block.
    pub fn forward<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        x: &E::Val,
        scale: Option<&E::Val>,
    ) -> Result<E::Val> {
        let h = self.norm1.forward(ctx, store, x)?;
        let mut a = self.attention(ctx, store, &h)?;
        if let Some(s) = scale {
            a = ctx.mul(&a, s)?;
        }
        let x1 = ctx.add(x, &a)?;
        let h = self.norm2.forward(ctx, store, &x1)?;
        let mut m = self.mlp(ctx, store, &h)?;
        if let Some(s) = scale {
            m = ctx.mul(&m, s)?;
        }
        ctx.add(&x1, &m)
    }
}

/// Gate for one adaptive block: a `K -> 1` affine map and a sigmoid.
#[derive(Debug, Clone)]
pub struct ActivationModule {
    pub linear: Linear,
}

impl ActivationModule {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let k = cfg.num_tokens();
        let weight = b.param(&format!("{name}.weight"), &[k, 1], Init::Zeros)?;
        let bias = b.param(&format!("{name}.bias"), &[1], Init::Zeros)?;
        if let Builder::Fresh { store, .. } = b {
            store.set(bias, Tensor::full(vec![1], T::lit(cfg.am_init_bias)))?;
        }
        Ok(Self {
            linear: Linear {
                weight,
                bias,
                fan_in: k,
                fan_out: 1,
            },
        })
    }
}

/// Activation probability `[B, 1]` from tokens `[B, K, d]`: the AM reads
/// the first embedding coordinate of every token.
pub fn am_probability<T: Element, E: Exec<T>>(
    ctx: &mut E,
    store: &ParamStore<T>,
    am: &ActivationModule,
    tokens: &E::Val,
) -> Result<E::Val> {
    let s = ctx.shape_of(tokens);
    if s.len() != 3 || s[1] != am.linear.fan_in {
        return Err(Error::Invalid(format!(
            "activation module expects {} tokens, got shape {s:?}",
            am.linear.fan_in
        )));
    }
    let r = ctx.slice(tokens, -1, 0, 1)?;
    let r = ctx.reshape(&r, &[s[0], s[1]])?;
    let logit = am.linear.forward(ctx, store, &r)?;
    ctx.sigmoid(&logit)
}

/// Run one adaptive block given per-sample gate decisions and the AM
/// probabilities `p: [B, 1]`.
pub(super) fn gated_forward<T: Element, E: Exec<T>>(
    ctx: &mut E,
    store: &ParamStore<T>,
    block: &Block,
    tokens: &E::Val,
    p: &E::Val,
    gates: &[bool],
    mode: Mode,
) -> Result<E::Val> {
    let b = gates.len();
    let active = gates.iter().filter(|&&g| g).count();
    if active == 0 {
        return Ok(tokens.clone());
    }
    let mask = || {
        Tensor::<T>::new(
            vec![b, 1, 1],
            gates.iter().map(|&g| if g { T::one() } else { T::zero() }).collect(),
        )
    };
    match mode {
        Mode::Infer if active == b => block.forward(ctx, store, tokens, None),
        Mode::Infer => {
            let m = ctx.constant(mask()?);
            block.forward(ctx, store, tokens, Some(&m))
        }
        Mode::Train => {
            let p3 = ctx.reshape(p, &[b, 1, 1])?;
            let s = if active == b {
                p3
            } else {
                let m = ctx.constant(mask()?);
                ctx.mul(&p3, &m)?
            };
            block.forward(ctx, store, tokens, Some(&s))
        }
    }
}
