//! Prediction head, box decoding, training losses and the tracker runtime.
//!
//! The head turns the search tokens into three maps over the token grid: a
//! target score, a sub-cell center offset and a normalized box size. All
//! three pass through a sigmoid.

mod decode;
mod loss;
mod tracker;

pub use decode::{decode_box, hann_window, hanning_penalize, Decoded};
pub use loss::{
    box_at_cells, combine_losses, focal_loss, giou_loss, giou_loss_value, l1_loss, make_gt_maps,
    overall_loss, pred_loss, GtMaps, LossWeights, PredLosses,
};
pub use tracker::{crop_resize, FrameRecord, TrackState, Tracker, SEARCH_CONTEXT, TEMPLATE_CONTEXT};

use crate::error::{Error, Result};
use crate::layout::{Builder, Init};
use crate::tensor::{Element, Exec, ParamId, ParamStore, Prim, Tensor};
use crate::vit::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Conv 3x3 (no bias) + batchnorm + relu.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Batch statistics observed by one batchnorm layer in a training pass.
#[derive(Debug, Clone)]
pub struct BnStat {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

impl BnStat {
    /// Exponential moving-average update of the running buffers.
    pub fn apply<T: Element>(&self, store: &mut ParamStore<T>, momentum: f64) {
        for (id, new) in [(self.running_mean, &self.mean), (self.running_var, &self.var)] {
            let t = store.get_mut(id);
            for (r, &v) in t.data_mut().iter_mut().zip(new) {
                *r = T::lit((1.0 - momentum) * r.as_f64() + momentum * v);
            }
        }
    }
}

impl ConvBnRelu {
    fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let std = (2.0 / (9 * cin) as f64).sqrt();
        Ok(Self {
            weight: b.param(&format!("{name}.conv.weight"), &[cout, cin, 3, 3], Init::Normal(std))?,
            gamma: b.param(&format!("{name}.bn.weight"), &[cout], Init::Ones)?,
            beta: b.param(&format!("{name}.bn.bias"), &[cout], Init::Zeros)?,
            running_mean: b.buffer(&format!("{name}.bn.running_mean"), &[cout], Init::Zeros)?,
            running_var: b.buffer(&format!("{name}.bn.running_var"), &[cout], Init::Ones)?,
        })
    }

    fn forward<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        x: &E::Val,
        mode: Mode,
        stats: &mut Vec<BnStat>,
    ) -> Result<E::Val> {
        let w = ctx.param(store, self.weight);
        let y = ctx.conv2d(x, &w, None, 1, 1)?;
        let train = mode == Mode::Train;
        if train {
            stats.push(batch_stats(ctx.value(&y), self.running_mean, self.running_var));
        }
        let g = ctx.param(store, self.gamma);
        let bt = ctx.param(store, self.beta);
        let rm = ctx.param(store, self.running_mean);
        let rv = ctx.param(store, self.running_var);
        let prim = Prim::BatchNorm2d {
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            train,
        };
        let y = ctx.apply(prim, &[&y, &g, &bt, &rm, &rv])?;
        ctx.relu(&y)
    }
}

fn batch_stats<T: Element>(y: &Tensor<T>, rm: ParamId, rv: ParamId) -> BnStat {
    let s = y.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals = (0..b).flat_map(|bi| y.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter());
        let m = vals.clone().map(|v| v.as_f64()).sum::<f64>() / n;
        let ss = vals.map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        mean[ch] = m;
        var[ch] = if n > 1.0 { ss / (n - 1.0) } else { ss };
    }
    BnStat {
        running_mean: rm,
        running_var: rv,
        mean,
        var,
    }
}

/// Four conv-bn-relu layers then a 1x1 projection.
#[derive(Debug, Clone)]
pub struct Branch {
    pub layers: Vec<ConvBnRelu>,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

impl Branch {
    fn build<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        channels: usize,
        out: usize,
        bias_init: f64,
    ) -> Result<Self> {
        let widths = [dim, channels, channels / 2, channels / 4, channels / 8];
        let layers = (0..4)
            .map(|i| ConvBnRelu::build(b, &format!("{name}.{i}"), widths[i], widths[i + 1]))
            .collect::<Result<Vec<_>>>()?;
        let out_weight = b.param(&format!("{name}.out.weight"), &[out, widths[4], 1, 1], Init::Normal(0.01))?;
        let out_bias = b.param(&format!("{name}.out.bias"), &[out], Init::Zeros)?;
        if let Builder::Fresh { store, .. } = b {
            let v = Tensor::full(vec![out], T::lit(bias_init));
            store.set(out_bias, v)?;
        }
        Ok(Self {
            layers,
            out_weight,
            out_bias,
        })
    }

    fn forward<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        x: &E::Val,
        mode: Mode,
        stats: &mut Vec<BnStat>,
    ) -> Result<E::Val> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(ctx, store, &h, mode, stats)?;
        }
        let w = ctx.param(store, self.out_weight);
        let b = ctx.param(store, self.out_bias);
        let y = ctx.conv2d(&h, &w, Some(&b), 1, 0)?;
        ctx.sigmoid(&y)
    }
}

/// Score `[B,1,H,W]`, offset `[B,2,H,W]` and size `[B,2,H,W]` maps. Channel
/// 0 of offset and size is horizontal.
pub struct HeadMaps<V> {
    pub score: V,
    pub offset: V,
    pub size: V,
    pub bn_stats: Vec<BnStat>,
}

/// Maps for one sample, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMaps {
    pub rows: usize,
    pub cols: usize,
    pub score: Vec<f64>,
    /// `[ox.., oy..]`
    pub offset: Vec<f64>,
    /// `[w.., h..]`
    pub size: Vec<f64>,
}

impl<V> HeadMaps<V> {
    pub fn sample<T: Element, E: Exec<T, Val = V>>(&self, ctx: &E, b: usize) -> SampleMaps {
        let s = ctx.value(&self.score);
        let (rows, cols) = (s.shape()[2], s.shape()[3]);
        let n = rows * cols;
        let take = |v: &V, c: usize| -> Vec<f64> {
            ctx.value(v).data()[b * c * n..(b + 1) * c * n].iter().map(|x| x.as_f64()).collect()
        };
        SampleMaps {
            rows,
            cols,
            score: take(&self.score, 1),
            offset: take(&self.offset, 2),
            size: take(&self.size, 2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    pub grid: (usize, usize),
    pub dim: usize,
    pub channels: usize,
    pub score: Branch,
    pub offset: Branch,
    pub size: Branch,
}

/// Score bias giving an initial foreground probability of about 0.1.
const SCORE_PRIOR_BIAS: f64 = -2.19;

impl Head {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        dim: usize,
        channels: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        if channels < 8 || channels % 8 != 0 {
            return Err(Error::Invalid(format!(
                "head channels must be a positive multiple of 8, got {channels}"
            )));
        }
        Ok(Self {
            grid,
            dim,
            channels,
            score: Branch::build(b, "head.score", dim, channels, 1, SCORE_PRIOR_BIAS)?,
            offset: Branch::build(b, "head.offset", dim, channels, 2, 0.0)?,
            size: Branch::build(b, "head.size", dim, channels, 2, 0.0)?,
        })
    }

    /// Run the head over search tokens `[B, H*W, d]`.
    pub fn forward<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        search: &E::Val,
        mode: Mode,
    ) -> Result<HeadMaps<E::Val>> {
        let s = ctx.shape_of(search);
        let (h, w) = self.grid;
        if s.len() != 3 || s[1] != h * w || s[2] != self.dim {
            return Err(Error::Invalid(format!(
                "head expects search tokens [B, {}, {}], got {s:?}",
                h * w,
                self.dim
            )));
        }
        let f = ctx.transpose(search, 1, 2)?;
        let f = ctx.reshape(&f, &[s[0], self.dim, h, w])?;
        let mut bn_stats = Vec::new();
        let score = self.score.forward(ctx, store, &f, mode, &mut bn_stats)?;
        let offset = self.offset.forward(ctx, store, &f, mode, &mut bn_stats)?;
        let size = self.size.forward(ctx, store, &f, mode, &mut bn_stats)?;
        Ok(HeadMaps {
            score,
            offset,
            size,
            bn_stats,
        })
    }
}
