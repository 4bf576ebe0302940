//! Parameter and compute accounting for the desk and paper-scale profiles.

use avtrack::eval::{count_flops, count_params};
use avtrack::model::ModelConfig;

fn main() {
    for (name, cfg) in [("desk", ModelConfig::desk()), ("paper", ModelConfig::paper())] {
        let r = count_flops(&cfg);
        let (pmin, pmax) = count_params(&cfg, true);
        println!("{name}: params {:.3}M-{:.3}M, flops {:.3}G-{:.3}G, per block {:.1}M", pmin as f64 / 1e6, pmax as f64 / 1e6, r.flops_min as f64 / 1e9, r.flops_max as f64 / 1e9, r.flops_per_block as f64 / 1e6);
        for (item, p, f) in &r.items {
            println!("  {item:<20} params {p:>10} flops {f:>12}");
        }
    }
}
