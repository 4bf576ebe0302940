use crate::model::ModelConfig;
use crate::vit::{ActivationTrace, BackboneConfig};

/// Closed-form parameter and compute accounting.
///
/// Compute is counted in multiply-accumulates: one per weight use in affine
/// maps and convolutions, `2*K^2*d` for the two attention products, and one
/// per element for each normalization. Softmax, GELU and sigmoid are free.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub params_min: u64,
    pub params_max: u64,
    pub flops_min: u64,
    pub flops_max: u64,
    pub flops_per_block: u64,
    /// Itemized `(name, params, flops)`; blocks are counted once.
    pub items: Vec<(String, u64, u64)>,
}

struct Parts {
    embed: (u64, u64),
    block: (u64, u64),
    am: (u64, u64),
    norm: (u64, u64),
    head: (u64, u64),
}

fn parts(cfg: &ModelConfig) -> Parts {
    let b: &BackboneConfig = &cfg.backbone;
    let d = b.dim as u64;
    let k = b.num_tokens() as u64;
    let p2 = (b.patch * b.patch) as u64;
    let hid = b.mlp_hidden() as u64;
    let embed_p = d * 3 * p2 + d + k * d;
    let embed_f = k * d * 3 * p2 + k * d;
    let block_p = 4 * (d * d + d) + 2 * 2 * d + (d * hid + hid) + (hid * d + d);
    let attn_f = 4 * k * d * d + 2 * k * k * d;
    let mlp_f = 2 * k * d * hid;
    let block_f = attn_f + mlp_f + 2 * k * d;
    let am = (k + 1, k);
    let norm = (2 * d, k * d);
    let (gh, gw) = b.search_grid();
    let cells = (gh * gw) as u64;
    let c = cfg.head_channels as u64;
    let widths = [d, c, c / 2, c / 4, c / 8];
    let mut hp = 0;
    let mut hf = 0;
    for out in [1u64, 2, 2] {
        for i in 0..4 {
            let (ci, co) = (widths[i], widths[i + 1]);
            hp += co * ci * 9 + 2 * co;
            hf += cells * co * ci * 9 + cells * co;
        }
        hp += out * widths[4] + out;
        hf += cells * out * widths[4];
    }
    Parts {
        embed: (embed_p, embed_f),
        block: (block_p, block_f),
        am,
        norm,
        head: (hp, hf),
    }
}

/// `(min, max)` trainable parameters of the tracking path, critics
/// excluded. `min` has only the fixed blocks.
pub fn count_params(cfg: &ModelConfig, include_am: bool) -> (u64, u64) {
    let r = count_flops_with(cfg, include_am);
    (r.params_min, r.params_max)
}

pub fn count_flops(cfg: &ModelConfig) -> CostReport {
    count_flops_with(cfg, true)
}

fn count_flops_with(cfg: &ModelConfig, include_am: bool) -> CostReport {
    let p = parts(cfg);
    let b = &cfg.backbone;
    let (nf, na) = (b.fixed_blocks as u64, b.adaptive_blocks() as u64);
    let ams = if include_am { (na * p.am.0, na * p.am.1) } else { (0, 0) };
    let base_p = p.embed.0 + nf * p.block.0 + ams.0 + p.norm.0 + p.head.0;
    let base_f = p.embed.1 + nf * p.block.1 + na * p.am.1 + p.norm.1 + p.head.1;
    CostReport {
        params_min: base_p,
        params_max: base_p + na * p.block.0,
        flops_min: base_f,
        flops_max: base_f + na * p.block.1,
        flops_per_block: p.block.1,
        items: vec![
            ("patch_embed".into(), p.embed.0, p.embed.1),
            ("block".into(), p.block.0, p.block.1),
            ("activation_modules".into(), ams.0, na * p.am.1),
            ("final_norm".into(), p.norm.0, p.norm.1),
            ("head".into(), p.head.0, p.head.1),
        ],
    }
}

/// Compute actually spent on one sample of `trace`.
pub fn flops_for_trace(report: &CostReport, trace: &ActivationTrace, sample: usize) -> u64 {
    report.flops_min + trace.gate_sum(sample) as u64 * report.flops_per_block
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "params_min,params_max,flops_min,flops_max,flops_per_block";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.params_min, self.params_max, self.flops_min, self.flops_max, self.flops_per_block
        )
    }
}
