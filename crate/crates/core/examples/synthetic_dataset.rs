//! Generate a seeded synthetic sequence, write it as PPM frames plus a
//! ground-truth file, and read it back.

use avtrack::data::{gen_sequence, read_sequence, write_sequence, GenConfig, Shape, GROUNDTRUTH_FILE};

fn main() -> avtrack::Result<()> {
    let cfg = GenConfig {
        seed: 7,
        length: 12,
        shape: Shape::Ellipse,
        occluder_prob: 0.2,
        ..GenConfig::default()
    };
    let ds = gen_sequence(&cfg)?;
    let dir = std::env::temp_dir().join("avtrack-example").join(&ds.name);
    write_sequence(&ds, &dir)?;
    let back = read_sequence(&dir)?;
    assert_eq!(back, ds);
    println!("wrote {} frames to {}", ds.len(), dir.display());
    println!("{}:", GROUNDTRUTH_FILE);
    for b in &ds.boxes[..4] {
        println!("  {},{},{},{}", b.x, b.y, b.w, b.h);
    }
    Ok(())
}
