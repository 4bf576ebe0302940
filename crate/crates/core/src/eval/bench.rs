use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::head::Tracker;
use crate::model::TrackerModel;
use crate::tensor::{Element, ParamStore};
use crate::vit::ForceGates;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Timed frames, warmup excluded.
    pub frames: usize,
    pub mean_fps: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub mean_active_blocks: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "frames,mean_fps,mean_ms,p50_ms,p99_ms,mean_active_blocks";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.3},{:.4},{:.4},{:.4},{:.3}",
            self.frames, self.mean_fps, self.mean_ms, self.p50_ms, self.p99_ms, self.mean_active_blocks
        )
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// Track `ds` from its first box and time every step after `warmup`.
pub fn bench_fps<T: Element>(
    model: &TrackerModel,
    store: &ParamStore<T>,
    ds: &SequenceDataset,
    warmup: usize,
    force: &ForceGates,
) -> Result<BenchReport> {
    if ds.len() <= warmup + 1 {
        return Err(Error::Invalid(format!(
            "benchmark needs more than {} frames, got {}",
            warmup + 1,
            ds.len()
        )));
    }
    let mut tr = Tracker::init(model, store, &ds.frames[0], ds.boxes[0])?.with_force(force.clone());
    let mut ms = Vec::with_capacity(ds.len());
    let mut active = 0usize;
    for (i, f) in ds.frames.iter().enumerate().skip(1) {
        let r = tr.step(f)?;
        if i > warmup {
            ms.push(r.ms);
            active += r.active_blocks;
        }
    }
    let n = ms.len();
    let mean_ms = ms.iter().sum::<f64>() / n as f64;
    let mut sorted = ms.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchReport {
        frames: n,
        mean_fps: 1e3 / mean_ms,
        mean_ms,
        p50_ms: percentile(&sorted, 0.5),
        p99_ms: percentile(&sorted, 0.99),
        mean_active_blocks: active as f64 / n as f64,
    })
}
