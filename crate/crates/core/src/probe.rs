//! Per-thread counters used to assert which machinery a code path touches.
//!
//! The tracker runtime is expected to leave both counters untouched: it runs
//! the model eagerly and never builds training objectives.

use std::cell::Cell;

thread_local! {
    static TAPES: Cell<u64> = const { Cell::new(0) };
    static MI_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Counter values at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Snapshot {
    pub tapes_created: u64,
    pub mi_calls: u64,
}

pub fn snapshot() -> Snapshot {
    Snapshot {
        tapes_created: TAPES.with(Cell::get),
        mi_calls: MI_CALLS.with(Cell::get),
    }
}

pub(crate) fn tape_created() {
    TAPES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn mi_called() {
    MI_CALLS.with(|c| c.set(c.get() + 1));
}
