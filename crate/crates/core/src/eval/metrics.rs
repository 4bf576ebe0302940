use crate::error::{Error, Result};
use crate::geom::Rect;

fn check(pred: &[Rect], gt: &[Rect]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("no boxes to evaluate".into()));
    }
    Ok(())
}

/// Fraction of frames whose center error is at most `threshold` pixels.
pub fn precision_at(pred: &[Rect], gt: &[Rect], threshold: f64) -> Result<f64> {
    check(pred, gt)?;
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| p.center_error(g) <= threshold)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Precision at thresholds 0, 1, ..., 50 pixels.
pub fn precision_curve(pred: &[Rect], gt: &[Rect]) -> Result<Vec<(f64, f64)>> {
    (0..=50)
        .map(|t| Ok((t as f64, precision_at(pred, gt, t as f64)?)))
        .collect()
}

pub const SUCCESS_THRESHOLDS: usize = 21;

/// Fraction of frames with IoU strictly above each of 0, 0.05, ..., 1.
pub fn success_curve(pred: &[Rect], gt: &[Rect]) -> Result<Vec<(f64, f64)>> {
    check(pred, gt)?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    Ok((0..SUCCESS_THRESHOLDS)
        .map(|i| {
            let t = i as f64 / (SUCCESS_THRESHOLDS - 1) as f64;
            let n = ious.iter().filter(|&&v| v > t).count();
            (t, n as f64 / ious.len() as f64)
        })
        .collect())
}

pub fn success_auc(pred: &[Rect], gt: &[Rect]) -> Result<f64> {
    let c = success_curve(pred, gt)?;
    Ok(c.iter().map(|(_, s)| s).sum::<f64>() / c.len() as f64)
}

/// Summary over one or more sequences, pooled per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub precision_5: f64,
    pub precision_20: f64,
    pub success_auc: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "frames,precision_5,precision_20,success_auc";

    pub fn compute(pred: &[Rect], gt: &[Rect]) -> Result<Self> {
        Ok(Self {
            frames: pred.len(),
            precision_5: precision_at(pred, gt, 5.0)?,
            precision_20: precision_at(pred, gt, 20.0)?,
            success_auc: success_auc(pred, gt)?,
        })
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6}",
            self.frames, self.precision_5, self.precision_20, self.success_auc
        )
    }
}
