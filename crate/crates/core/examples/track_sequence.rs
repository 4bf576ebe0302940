//! Briefly train a tracker, then run one-pass evaluation on an unseen
//! sequence and print the per-frame records.

use avtrack::config::{Config, Profile};
use avtrack::data::{gen_collection, gen_sequence, GenConfig};
use avtrack::eval::{boxes_of, track_sequence, EvalReport};
use avtrack::head::FrameRecord;
use avtrack::train::Trainer;
use avtrack::vit::ForceGates;

fn main() -> avtrack::Result<()> {
    let mut cfg = Config::for_profile(Profile::Desk);
    cfg.steps = 120;
    let seqs = gen_collection(&cfg.gen, cfg.sequences)?;
    let mut t = Trainer::<f32>::new(&cfg, &seqs)?;
    t.run(|_, _, _| {})?;
    let ds = gen_sequence(&GenConfig { seed: 500, ..cfg.gen.clone() })?;
    let recs = track_sequence(&t.model, &t.store, &ds, &ForceGates::None)?;
    println!("{}", FrameRecord::CSV_HEADER);
    for r in &recs {
        println!("{}", r.csv_line());
    }
    let rep = EvalReport::compute(&boxes_of(&recs), &ds.boxes)?;
    println!("\n{}\n{}", EvalReport::CSV_HEADER, rep.csv_line());
    Ok(())
}
