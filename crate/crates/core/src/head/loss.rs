use serde::{Deserialize, Serialize};

use super::HeadMaps;
use crate::error::{Error, Result};
use crate::geom::{giou, CenterBox};
use crate::tensor::{Element, Exec, Tensor};

const PROB_CLAMP: f64 = 1e-6;

/// Weights of the training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    /// Block-sparsity weight.
    pub gamma: f64,
    /// View-invariance weight.
    pub kappa: f64,
    /// Distillation weight.
    pub eta: f64,
    /// Softening temperature for distillation.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
            gamma: 50.0,
            kappa: 1e-4,
            eta: 1e-4,
            tau: 2.0,
        }
    }
}

/// Training targets for one sample on a `rows x cols` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GtMaps {
    pub rows: usize,
    pub cols: usize,
    /// Gaussian heatmap, exactly 1 at `(row, col)`.
    pub heat: Vec<f64>,
    pub row: usize,
    pub col: usize,
    /// Fractional center position inside the cell, `(x, y)`.
    pub offset: (f64, f64),
    pub size: (f64, f64),
    pub bbox: CenterBox,
}

pub fn make_gt_maps(b: &CenterBox, grid: (usize, usize)) -> GtMaps {
    let (rows, cols) = grid;
    let fx = b.cx * cols as f64;
    let fy = b.cy * rows as f64;
    let col = (fx.floor().max(0.0) as usize).min(cols - 1);
    let row = (fy.floor().max(0.0) as usize).min(rows - 1);
    let sigma = ((b.w * cols as f64).min(b.h * rows as f64) / 6.0).max(1.0);
    let mut heat = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let d2 = (i as f64 - row as f64).powi(2) + (j as f64 - col as f64).powi(2);
            heat.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    GtMaps {
        rows,
        cols,
        heat,
        row,
        col,
        offset: (fx - col as f64, fy - row as f64),
        size: (b.w, b.h),
        bbox: *b,
    }
}

/// Penalty-reduced focal loss over score maps `[B,1,H,W]`, normalized by
/// the number of positive cells.
pub fn focal_loss<T: Element, E: Exec<T>>(ctx: &mut E, score: &E::Val, gts: &[GtMaps]) -> Result<E::Val> {
    let s = ctx.shape_of(score);
    let n = s.iter().skip(2).product::<usize>();
    if s.len() != 4 || s[1] != 1 || s[0] != gts.len() || gts.iter().any(|g| g.heat.len() != n) {
        return Err(Error::Invalid(format!(
            "score map {s:?} does not match {} target maps",
            gts.len()
        )));
    }
    let mut pos = Vec::with_capacity(gts.len() * n);
    let mut negw = Vec::with_capacity(gts.len() * n);
    for g in gts {
        for &h in &g.heat {
            let is_pos = h == 1.0;
            pos.push(if is_pos { 1.0 } else { 0.0 });
            negw.push(if is_pos { 0.0 } else { (1.0 - h).powi(4) });
        }
    }
    let npos = pos.iter().sum::<f64>();
    if npos == 0.0 {
        return Err(Error::Invalid("focal loss needs at least one positive cell".into()));
    }
    let pos = ctx.constant(Tensor::from_f64(s.clone(), &pos)?);
    let negw = ctx.constant(Tensor::from_f64(s.clone(), &negw)?);
    let p = ctx.clamp(score, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = ctx.scale(&p, -1.0)?;
    let q = ctx.add_scalar(&q, 1.0)?;
    let logp = ctx.log(&p)?;
    let logq = ctx.log(&q)?;
    let qq = ctx.mul(&q, &q)?;
    let a = ctx.mul(&qq, &logp)?;
    let a = ctx.mul(&a, &pos)?;
    let pp = ctx.mul(&p, &p)?;
    let b = ctx.mul(&pp, &logq)?;
    let b = ctx.mul(&b, &negw)?;
    let t = ctx.add(&a, &b)?;
    let t = ctx.sum(&t)?;
    ctx.scale(&t, -1.0 / npos)
}

/// Predicted `(cx, cy, w, h)` rows `[B, 4]` read at each target's cell.
pub fn box_at_cells<T: Element, E: Exec<T>>(
    ctx: &mut E,
    maps: &HeadMaps<E::Val>,
    gts: &[GtMaps],
) -> Result<E::Val> {
    let s = ctx.shape_of(&maps.offset);
    let (b, rows, cols) = (s[0], s[2], s[3]);
    if gts.len() != b || gts.iter().any(|g| g.rows != rows || g.cols != cols) {
        return Err(Error::Invalid(format!(
            "{} targets for offset maps {s:?}",
            gts.len()
        )));
    }
    let mut onehot = vec![0.0; b * rows * cols];
    let mut cell = Vec::with_capacity(2 * b);
    for (i, g) in gts.iter().enumerate() {
        onehot[i * rows * cols + g.row * cols + g.col] = 1.0;
        cell.extend([g.col as f64, g.row as f64]);
    }
    let onehot = ctx.constant(Tensor::from_f64(vec![b, 1, rows, cols], &onehot)?);
    let cell = ctx.constant(Tensor::from_f64(vec![b, 2], &cell)?);
    let inv = ctx.constant(Tensor::from_f64(vec![1, 2], &[1.0 / cols as f64, 1.0 / rows as f64])?);
    let pick = |ctx: &mut E, m: &E::Val| -> Result<E::Val> {
        let x = ctx.mul(m, &onehot)?;
        let x = ctx.sum_axis(&x, 3)?;
        ctx.sum_axis(&x, 2)
    };
    let off = pick(ctx, &maps.offset)?;
    let size = pick(ctx, &maps.size)?;
    let c = ctx.add(&off, &cell)?;
    let c = ctx.mul(&c, &inv)?;
    ctx.concat(&[&c, &size], 1)
}

fn target_rows(gts: &[GtMaps]) -> Vec<f64> {
    gts.iter().flat_map(|g| g.bbox.as_array()).collect()
}

fn corners<T: Element, E: Exec<T>>(ctx: &mut E, b: &E::Val) -> Result<[E::Val; 6]> {
    let cx = ctx.slice(b, 1, 0, 1)?;
    let cy = ctx.slice(b, 1, 1, 2)?;
    let w = ctx.slice(b, 1, 2, 3)?;
    let h = ctx.slice(b, 1, 3, 4)?;
    let hw = ctx.scale(&w, 0.5)?;
    let hh = ctx.scale(&h, 0.5)?;
    let x1 = ctx.sub(&cx, &hw)?;
    let x2 = ctx.add(&cx, &hw)?;
    let y1 = ctx.sub(&cy, &hh)?;
    let y2 = ctx.add(&cy, &hh)?;
    let area = ctx.mul(&w, &h)?;
    Ok([x1, y1, x2, y2, area, w])
}

fn check_boxes<T: Element>(t: &Tensor<T>, what: &str) -> Result<()> {
    for r in t.data().chunks(4) {
        if !(r[2].as_f64() > 0.0 && r[3].as_f64() > 0.0) {
            return Err(Error::Invalid(format!("degenerate {what} box with size ({}, {})", r[2].as_f64(), r[3].as_f64())));
        }
    }
    Ok(())
}

/// Mean `1 - GIoU` between predicted rows `[B, 4]` and the targets.
pub fn giou_loss<T: Element, E: Exec<T>>(ctx: &mut E, pred: &E::Val, gts: &[GtMaps]) -> Result<E::Val> {
    let b = gts.len();
    check_boxes(ctx.value(pred), "predicted")?;
    let gt = Tensor::from_f64(vec![b, 4], &target_rows(gts))?;
    check_boxes(&gt, "target")?;
    let gt = ctx.constant(gt);
    let [ax1, ay1, ax2, ay2, aa, _] = corners(ctx, pred)?;
    let [bx1, by1, bx2, by2, ba, _] = corners(ctx, &gt)?;
    let ix1 = ctx.maximum(&ax1, &bx1)?;
    let ix2 = ctx.minimum(&ax2, &bx2)?;
    let iy1 = ctx.maximum(&ay1, &by1)?;
    let iy2 = ctx.minimum(&ay2, &by2)?;
    let iw = ctx.sub(&ix2, &ix1)?;
    let iw = ctx.relu(&iw)?;
    let ih = ctx.sub(&iy2, &iy1)?;
    let ih = ctx.relu(&ih)?;
    let inter = ctx.mul(&iw, &ih)?;
    let union = ctx.add(&aa, &ba)?;
    let union = ctx.sub(&union, &inter)?;
    let ex1 = ctx.minimum(&ax1, &bx1)?;
    let ex2 = ctx.maximum(&ax2, &bx2)?;
    let ey1 = ctx.minimum(&ay1, &by1)?;
    let ey2 = ctx.maximum(&ay2, &by2)?;
    let ew = ctx.sub(&ex2, &ex1)?;
    let eh = ctx.sub(&ey2, &ey1)?;
    let enclose = ctx.mul(&ew, &eh)?;
    let iou = ctx.div(&inter, &union)?;
    let gap = ctx.sub(&enclose, &union)?;
    let gap = ctx.div(&gap, &enclose)?;
    let g = ctx.sub(&iou, &gap)?;
    let l = ctx.scale(&g, -1.0)?;
    let l = ctx.add_scalar(&l, 1.0)?;
    ctx.mean(&l)
}

/// `1 - GIoU` of two boxes.
pub fn giou_loss_value(a: &CenterBox, b: &CenterBox) -> Result<f64> {
    Ok(1.0 - giou(&a.to_rect(), &b.to_rect())?)
}

/// Mean absolute difference over `(cx, cy, w, h)` and the batch.
pub fn l1_loss<T: Element, E: Exec<T>>(ctx: &mut E, pred: &E::Val, gts: &[GtMaps]) -> Result<E::Val> {
    let gt = ctx.constant(Tensor::from_f64(vec![gts.len(), 4], &target_rows(gts))?);
    let d = ctx.sub(pred, &gt)?;
    let d = ctx.abs(&d)?;
    ctx.mean(&d)
}

pub struct PredLosses<V> {
    pub cls: V,
    pub iou: V,
    pub l1: V,
    pub total: V,
}

/// `L_cls + lambda_iou * L_iou + lambda_l1 * L_1`.
pub fn pred_loss<T: Element, E: Exec<T>>(
    ctx: &mut E,
    maps: &HeadMaps<E::Val>,
    gts: &[GtMaps],
    w: &LossWeights,
) -> Result<PredLosses<E::Val>> {
    let cls = focal_loss(ctx, &maps.score, gts)?;
    let pred = box_at_cells(ctx, maps, gts)?;
    let iou = giou_loss(ctx, &pred, gts)?;
    let l1 = l1_loss(ctx, &pred, gts)?;
    let total = combine_losses(ctx, &[("cls", &cls, 1.0), ("iou", &iou, w.lambda_iou), ("l1", &l1, w.lambda_l1)])?;
    Ok(PredLosses { cls, iou, l1, total })
}

/// Weighted sum of named scalar terms, rejecting non-finite components.
pub fn combine_losses<T: Element, E: Exec<T>>(
    ctx: &mut E,
    terms: &[(&str, &E::Val, f64)],
) -> Result<E::Val> {
    let mut acc: Option<E::Val> = None;
    for &(name, v, weight) in terms {
        if !ctx.value(v).all_finite() {
            return Err(Error::NonFinite(format!("loss component `{name}`")));
        }
        let t = ctx.scale(v, weight)?;
        acc = Some(match acc {
            None => t,
            Some(a) => ctx.add(&a, &t)?,
        });
    }
    acc.ok_or_else(|| Error::Invalid("no loss terms".into()))
}

/// `pred + gamma * spar + kappa * vir` on plain numbers.
pub fn overall_loss(pred: f64, spar: f64, vir: f64, gamma: f64, kappa: f64) -> Result<f64> {
    for (name, v) in [("pred", pred), ("spar", spar), ("vir", vir)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component `{name}`")));
        }
    }
    Ok(pred + gamma * spar + kappa * vir)
}
