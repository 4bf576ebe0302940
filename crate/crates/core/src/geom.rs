//! Box conventions. [`Rect`] is top-left `(x, y, w, h)`, used for frame
//! pixels and files. [`CenterBox`] is `(cx, cy, w, h)`, used for normalized
//! crop coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn to_center(&self) -> CenterBox {
        let (cx, cy) = self.center();
        CenterBox {
            cx,
            cy,
            w: self.w,
            h: self.h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, o: &Rect) -> f64 {
        let iw = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let ih = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        iw.max(0.0) * ih.max(0.0)
    }

    pub fn iou(&self, o: &Rect) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Distance between box centers.
    pub fn center_error(&self, o: &Rect) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = o.center();
        (ax - bx).hypot(ay - by)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite())
    }
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_rect(&self) -> Rect {
        Rect {
            x: self.cx - self.w / 2.0,
            y: self.cy - self.h / 2.0,
            w: self.w,
            h: self.h,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn check(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
    }
}

/// Generalized IoU of two boxes with positive sizes.
pub fn giou(a: &Rect, b: &Rect) -> Result<f64> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(Error::Invalid(format!("degenerate box in giou: {a:?}, {b:?}")));
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let ex = (a.x + a.w).max(b.x + b.w) - a.x.min(b.x);
    let ey = (a.y + a.h).max(b.y + b.h) - a.y.min(b.y);
    let enclose = ex * ey;
    Ok(inter / union - (enclose - union) / enclose)
}

/// Normalized sampling grid `[ho, wo, 2]` covering `region`, with
/// coordinates relative to the source extent. Cells sample their centers.
pub fn sampling_grid(region: &CenterBox, ho: usize, wo: usize) -> Vec<f64> {
    let x0 = region.cx - region.w / 2.0;
    let y0 = region.cy - region.h / 2.0;
    let mut g = Vec::with_capacity(ho * wo * 2);
    for i in 0..ho {
        let v = y0 + (i as f64 + 0.5) / ho as f64 * region.h;
        for j in 0..wo {
            g.push(x0 + (j as f64 + 0.5) / wo as f64 * region.w);
            g.push(v);
        }
    }
    g
}
