//! Run the backbone under each gate policy and report the blocks executed
//! and the compute each trace implies.

use avtrack::data::{gen_sequence, GenConfig};
use avtrack::eval::{count_flops, flops_for_trace};
use avtrack::head::crop_resize;
use avtrack::model::{ModelConfig, TrackerModel};
use avtrack::tensor::{Eager, Exec, Tensor};
use avtrack::vit::{ForceGates, Mode};

fn batch1(t: Tensor<f32>) -> Tensor<f32> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    Tensor::new(s, t.into_data()).unwrap()
}

fn main() -> avtrack::Result<()> {
    let mut cfg = ModelConfig::desk();
    cfg.backbone.am_init_bias = 0.45;
    let (model, store) = TrackerModel::init::<f32>(&cfg, 3)?;
    let ds = gen_sequence(&GenConfig { length: 2, ..GenConfig::default() })?;
    let (cx, cy) = ds.boxes[0].center();
    let side = (ds.boxes[0].w * ds.boxes[0].h).sqrt();
    let z = batch1(crop_resize(&ds.frames[0], cx, cy, 2.0 * side, cfg.backbone.template_size));
    let x = batch1(crop_resize(&ds.frames[1], cx, cy, 4.0 * side, cfg.backbone.search_size));
    let cost = count_flops(&cfg);
    let adaptive = cfg.backbone.adaptive_blocks();
    for (name, force) in [
        ("learned", ForceGates::None),
        ("all-on", ForceGates::AllOn),
        ("half", ForceGates::half(adaptive)),
        ("all-off", ForceGates::AllOff),
    ] {
        let mut ctx = Eager;
        let (zv, xv) = (ctx.constant(z.clone()), ctx.constant(x.clone()));
        let out = model.forward(&mut ctx, &store, &zv, &xv, Mode::Infer, &force)?;
        let t = &out.backbone.trace;
        let probs: Vec<String> = t.probs[0].iter().map(|p| format!("{p:.3}")).collect();
        println!(
            "{name:>8}: {} blocks, {:.1}M MAC, p = [{}]",
            t.active_blocks(0),
            flops_for_trace(&cost, t, 0) as f64 / 1e6,
            probs.join(", ")
        );
    }
    Ok(())
}
