//! One-pass evaluation metrics, cost accounting and speed measurement.

mod bench;
mod cost;
mod metrics;
mod ope;

pub use bench::{bench_fps, BenchReport};
pub use cost::{count_flops, count_params, flops_for_trace, CostReport};
pub use metrics::{precision_at, precision_curve, success_auc, success_curve, EvalReport, SUCCESS_THRESHOLDS};
pub use ope::{boxes_of, track_sequence};
