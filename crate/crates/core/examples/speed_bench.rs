//! Time batch-1 tracking with every adaptive block forced on against half
//! of them forced off.

use avtrack::data::{gen_sequence, GenConfig};
use avtrack::eval::bench_fps;
use avtrack::model::{ModelConfig, TrackerModel};
use avtrack::vit::ForceGates;

fn main() -> avtrack::Result<()> {
    let cfg = ModelConfig::desk();
    let (model, store) = TrackerModel::init::<f32>(&cfg, 0)?;
    let ds = gen_sequence(&GenConfig { length: 106, ..GenConfig::default() })?;
    let a = cfg.backbone.adaptive_blocks();
    for (name, force) in [("dense", ForceGates::AllOn), ("half", ForceGates::half(a)), ("prefix", ForceGates::AllOff)] {
        let r = bench_fps(&model, &store, &ds, 5, &force)?;
        println!("{name:>6}: {:.1} FPS, p50 {:.2} ms, {:.1} blocks", r.mean_fps, r.p50_ms, r.mean_active_blocks);
    }
    Ok(())
}
