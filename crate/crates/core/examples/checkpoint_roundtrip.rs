//! Save a model with its configuration, inspect the tensor table, and load
//! it back at a different precision.

use avtrack::checkpoint::{load_checkpoint, read_metadata, save_checkpoint};
use avtrack::config::{Config, Profile};
use avtrack::model::TrackerModel;

fn main() -> avtrack::Result<()> {
    let cfg = Config::for_profile(Profile::Desk);
    let (_, store) = TrackerModel::init::<f32>(&cfg.model, 0)?;
    let path = std::env::temp_dir().join("avtrack-example.ckpt");
    save_checkpoint(&path, &cfg, &store)?;
    let meta = read_metadata(&path)?;
    println!("{} tensors, {} scalars", meta.tensors.len(), meta.count(|_| true));
    for t in meta.tensors.iter().take(5) {
        println!("  {} {:?} @ {}", t.name, t.shape, t.offset);
    }
    let (back_cfg, back) = load_checkpoint::<f32>(&path)?;
    assert!(back_cfg == cfg && back.same_values(&store));
    let (_, wide) = load_checkpoint::<f64>(&path)?;
    let model = TrackerModel::bind(&back_cfg.model, &wide)?;
    println!("rebound a {}-block model at f64", model.backbone.blocks.len());
    Ok(())
}
