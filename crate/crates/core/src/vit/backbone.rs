use super::block::gated_forward;
use super::{am_probability, ActivationModule, BackboneConfig, Block, ForceGates, Mode, PatchEmbed, TokenState};
use crate::error::{Error, Result};
use crate::layout::{Builder, LayerNorm};
use crate::tensor::{Element, Exec, ParamStore};

/// Per-sample AM probabilities and gate decisions for one forward pass.
/// Fixed blocks carry no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub fixed_blocks: usize,
    /// `probs[sample][j]` for adaptive block `j`.
    pub probs: Vec<Vec<f64>>,
    pub gates: Vec<Vec<bool>>,
}

impl ActivationTrace {
    pub fn batch(&self) -> usize {
        self.probs.len()
    }

    /// Number of active adaptive blocks for one sample.
    pub fn gate_sum(&self, sample: usize) -> usize {
        self.gates[sample].iter().filter(|&&g| g).count()
    }

    /// Blocks executed for one sample, fixed prefix included.
    pub fn active_blocks(&self, sample: usize) -> usize {
        self.fixed_blocks + self.gate_sum(sample)
    }
}

pub struct BackboneOutput<V> {
    /// Final normalized tokens `[B, K, d]`.
    pub state: TokenState<V>,
    /// Adaptive probabilities `[B, N - n_f]`, differentiable.
    pub probs: V,
    pub trace: ActivationTrace,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    /// One per adaptive block, aligned with `blocks[fixed_blocks..]`.
    pub ams: Vec<ActivationModule>,
    pub norm: LayerNorm,
}

impl Backbone {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::build(b, cfg)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut ams = Vec::with_capacity(cfg.adaptive_blocks());
        for i in 0..cfg.depth {
            blocks.push(Block::build(b, &format!("blocks.{i}"), cfg)?);
            if i >= cfg.fixed_blocks {
                ams.push(ActivationModule::build(b, &format!("blocks.{i}.am"), cfg)?);
            }
        }
        let norm = LayerNorm::build(b, "norm", cfg.dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            blocks,
            ams,
            norm,
        })
    }

    /// Gated forward over template `z` and search `x` images.
    pub fn forward<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        z: &E::Val,
        x: &E::Val,
        mode: Mode,
        force: &ForceGates,
    ) -> Result<BackboneOutput<E::Val>> {
        let cfg = &self.cfg;
        let state = self.embed.forward(ctx, store, cfg, z, x)?;
        let mut tokens = state.tokens;
        for block in &self.blocks[..cfg.fixed_blocks] {
            tokens = block.forward(ctx, store, &tokens, None)?;
        }
        let batch = ctx.shape_of(&tokens)[0];
        let mut probs_vals = Vec::with_capacity(self.ams.len());
        let mut probs = vec![Vec::with_capacity(self.ams.len()); batch];
        let mut gates = vec![Vec::with_capacity(self.ams.len()); batch];
        for (j, (block, am)) in self.blocks[cfg.fixed_blocks..].iter().zip(&self.ams).enumerate() {
            let p = am_probability(ctx, store, am, &tokens)?;
            let pv: Vec<f64> = ctx.value(&p).to_f64_vec();
            let g: Vec<bool> = pv.iter().map(|&pi| force.decide(j, pi, cfg.beta)).collect();
            for s in 0..batch {
                probs[s].push(pv[s]);
                gates[s].push(g[s]);
            }
            tokens = gated_forward(ctx, store, block, &tokens, &p, &g, mode)?;
            probs_vals.push(p);
        }
        let tokens = self.norm.forward(ctx, store, &tokens)?;
        let refs: Vec<&E::Val> = probs_vals.iter().collect();
        let probs_val = ctx.concat(&refs, 1)?;
        Ok(BackboneOutput {
            state: TokenState {
                tokens,
                template_range: state.template_range,
                search_range: state.search_range,
            },
            probs: probs_val,
            trace: ActivationTrace {
                fixed_blocks: cfg.fixed_blocks,
                probs,
                gates,
            },
        })
    }

    /// Ungated reference: the first `depth` blocks applied densely.
    pub fn dense_forward<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        z: &E::Val,
        x: &E::Val,
        depth: usize,
    ) -> Result<E::Val> {
        let state = self.embed.forward(ctx, store, &self.cfg, z, x)?;
        let mut tokens = state.tokens;
        for block in &self.blocks[..depth.min(self.blocks.len())] {
            tokens = block.forward(ctx, store, &tokens, None)?;
        }
        self.norm.forward(ctx, store, &tokens)
    }
}

/// Block-sparsity objective: per sample `|mean_j p_j - zeta|`, averaged over
/// the batch. `probs` is `[B, N - n_f]`.
pub fn sparsity_loss<T: Element, E: Exec<T>>(ctx: &mut E, probs: &E::Val, zeta: f64) -> Result<E::Val> {
    let s = ctx.shape_of(probs);
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::Invalid(format!(
            "sparsity loss needs [batch, adaptive] probabilities, got {s:?}"
        )));
    }
    let m = ctx.mean_axis(probs, 1)?;
    let d = ctx.add_scalar(&m, -zeta)?;
    let a = ctx.abs(&d)?;
    ctx.mean(&a)
}

/// [`sparsity_loss`] evaluated on a recorded trace.
pub fn sparsity_loss_of_trace(trace: &ActivationTrace, zeta: f64) -> Result<f64> {
    if trace.probs.is_empty() || trace.probs.iter().any(|p| p.is_empty()) {
        return Err(Error::Invalid("sparsity loss of an empty trace".into()));
    }
    let per_sample: Vec<f64> = trace
        .probs
        .iter()
        .map(|p| (p.iter().sum::<f64>() / p.len() as f64 - zeta).abs())
        .collect();
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}
