use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::head::{FrameRecord, Tracker};
use crate::model::TrackerModel;
use crate::tensor::{Element, ParamStore};
use crate::vit::ForceGates;

/// One-pass evaluation: initialize on the first ground-truth box and never
/// re-initialize. Returns one record per frame; frame 0 carries the
/// initial box.
pub fn track_sequence<T: Element>(
    model: &TrackerModel,
    store: &ParamStore<T>,
    ds: &SequenceDataset,
    force: &ForceGates,
) -> Result<Vec<FrameRecord>> {
    if ds.is_empty() {
        return Err(Error::Invalid(format!("sequence {} has no frames", ds.name)));
    }
    let mut tr = Tracker::init(model, store, &ds.frames[0], ds.boxes[0])?.with_force(force.clone());
    let mut out = Vec::with_capacity(ds.len());
    out.push(FrameRecord {
        frame: 0,
        bbox: ds.boxes[0],
        score: 1.0,
        active_blocks: 0,
        ms: 0.0,
        trace: None,
    });
    for f in &ds.frames[1..] {
        out.push(tr.step(f)?);
    }
    Ok(out)
}

/// Boxes of every record, in order.
pub fn boxes_of(records: &[FrameRecord]) -> Vec<Rect> {
    records.iter().map(|r| r.bbox).collect()
}
