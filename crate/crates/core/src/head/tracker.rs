use std::time::Instant;

use super::{decode_box, hann_window, hanning_penalize};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::model::TrackerModel;
use crate::tensor::{Eager, Element, Exec, ParamStore, Tensor};
use crate::vit::{ActivationTrace, ForceGates, Mode};

/// Template crop side as a multiple of `sqrt(w * h)` of the target box.
pub const TEMPLATE_CONTEXT: f64 = 2.0;
/// Search crop side as a multiple of `sqrt(w * h)` of the previous box.
pub const SEARCH_CONTEXT: f64 = 4.0;

/// Crop a square of side `side` centered at `(cx, cy)` and resize it
/// bilinearly to `out = (h, w)`. Samples outside the frame take the
/// per-channel frame mean. Returns `[3, h, w]` scaled to [0, 1].
pub fn crop_resize<T: Element>(img: &Image, cx: f64, cy: f64, side: f64, out: (usize, usize)) -> Tensor<T> {
    let (oh, ow) = out;
    let mean = img.channel_mean();
    let (w, h) = (img.width as isize, img.height as isize);
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    let sx = side / ow as f64;
    let sy = side / oh as f64;
    let mut data = vec![T::zero(); 3 * oh * ow];
    let fetch = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            mean[c]
        } else {
            img.data[((y * w + x) * 3) as usize + c] as f64
        }
    };
    for i in 0..oh {
        let py = y0 + (i as f64 + 0.5) * sy - 0.5;
        let yf = py.floor();
        let fy = py - yf;
        let yi = yf as isize;
        for j in 0..ow {
            let px = x0 + (j as f64 + 0.5) * sx - 0.5;
            let xf = px.floor();
            let fx = px - xf;
            let xi = xf as isize;
            for c in 0..3 {
                let top = fetch(xi, yi, c) * (1.0 - fx) + fetch(xi + 1, yi, c) * fx;
                let bot = fetch(xi, yi + 1, c) * (1.0 - fx) + fetch(xi + 1, yi + 1, c) * fx;
                data[(c * oh + i) * ow + j] = T::lit((top * (1.0 - fy) + bot * fy) / 255.0);
            }
        }
    }
    Tensor::from_parts(vec![3, oh, ow], data)
}

#[derive(Debug, Clone)]
pub struct TrackState<T> {
    /// `[1, 3, Hz, Wz]`
    pub template: Tensor<T>,
    pub bbox: Rect,
    pub search_scale: f64,
}

/// Per-frame output of the tracker.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub frame: usize,
    pub bbox: Rect,
    pub score: f64,
    pub active_blocks: usize,
    pub ms: f64,
    pub trace: Option<ActivationTrace>,
}

impl FrameRecord {
    pub const CSV_HEADER: &'static str = "frame,x,y,w,h,score,active_blocks,ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.3},{:.3},{:.3},{:.3},{:.6},{},{:.3}",
            self.frame, self.bbox.x, self.bbox.y, self.bbox.w, self.bbox.h, self.score, self.active_blocks, self.ms
        )
    }
}

/// One tracking session over a read-shared model.
pub struct Tracker<'m, T> {
    model: &'m TrackerModel,
    store: &'m ParamStore<T>,
    pub state: TrackState<T>,
    pub force: ForceGates,
    window: Vec<f64>,
    frame: usize,
}

fn batch1<T: Element>(t: Tensor<T>) -> Tensor<T> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    Tensor::from_parts(s, t.into_data())
}

impl<'m, T: Element> Tracker<'m, T> {
    pub fn init(model: &'m TrackerModel, store: &'m ParamStore<T>, frame: &Image, gt: Rect) -> Result<Self> {
        if gt.is_degenerate() {
            return Err(Error::Invalid(format!("degenerate initial box {gt:?}")));
        }
        let (fw, fh) = (frame.width as f64, frame.height as f64);
        let (cx, cy) = gt.center();
        if cx < 0.0 || cy < 0.0 || cx > fw || cy > fh {
            return Err(Error::Invalid(format!("initial box {gt:?} outside the frame")));
        }
        let cfg = &model.cfg.backbone;
        let side = TEMPLATE_CONTEXT * (gt.w * gt.h).sqrt();
        let template = batch1(crop_resize(frame, cx, cy, side, cfg.template_size));
        let (rows, cols) = cfg.search_grid();
        Ok(Self {
            model,
            store,
            state: TrackState {
                template,
                bbox: gt,
                search_scale: SEARCH_CONTEXT,
            },
            force: ForceGates::None,
            window: hann_window(rows, cols),
            frame: 0,
        })
    }

    pub fn with_force(mut self, force: ForceGates) -> Self {
        self.force = force;
        self
    }

    /// Locate the target in `frame` and update the state.
    pub fn step(&mut self, frame: &Image) -> Result<FrameRecord> {
        let start = Instant::now();
        self.frame += 1;
        let cfg = &self.model.cfg.backbone;
        let b = self.state.bbox;
        let (cx, cy) = b.center();
        let side = self.state.search_scale * (b.w * b.h).sqrt();
        let search = batch1(crop_resize(frame, cx, cy, side, cfg.search_size));
        let mut ctx = Eager;
        let z = ctx.constant(self.state.template.clone());
        let x = ctx.constant(search);
        let out = self.model.forward(&mut ctx, self.store, &z, &x, Mode::Infer, &self.force)?;
        let maps = out.maps.sample(&ctx, 0);
        let penalized = hanning_penalize(&maps.score, &self.window)?;
        let d = decode_box(&maps, &penalized)?;
        let (fw, fh) = (frame.width as f64, frame.height as f64);
        let ncx = (cx - side / 2.0 + d.bbox.cx * side).clamp(0.0, fw);
        let ncy = (cy - side / 2.0 + d.bbox.cy * side).clamp(0.0, fh);
        let nw = (d.bbox.w * side).clamp(2.0, fw);
        let nh = (d.bbox.h * side).clamp(2.0, fh);
        let bbox = Rect::new(ncx - nw / 2.0, ncy - nh / 2.0, nw, nh);
        self.state.bbox = bbox;
        let trace = out.backbone.trace;
        Ok(FrameRecord {
            frame: self.frame,
            bbox,
            score: d.score,
            active_blocks: trace.active_blocks(0),
            ms: start.elapsed().as_secs_f64() * 1e3,
            trace: Some(trace),
        })
    }
}
