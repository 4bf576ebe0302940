//! Train a desk-profile tracker on synthetic sequences, then track them.

use std::time::Instant;

use avtrack::config::{Config, Profile};
use avtrack::data::gen_collection;
use avtrack::eval::{boxes_of, track_sequence, EvalReport};
use avtrack::train::{LossBreakdown, Trainer};
use avtrack::vit::ForceGates;

fn main() -> avtrack::Result<()> {
    let mut cfg = Config::for_profile(Profile::Desk);
    let args: Vec<String> = std::env::args().collect();
    if let Some(s) = args.get(1) {
        cfg.steps = s.parse().expect("steps");
    }
    let seqs = gen_collection(&cfg.gen, cfg.sequences)?;
    let mut trainer = Trainer::<f32>::new(&cfg, &seqs)?;
    let start = Instant::now();
    println!("{}", LossBreakdown::CSV_HEADER);
    trainer.run(|step, lr, rec| {
        if step % 10 == 0 || step == 1 {
            println!("{}", rec.csv_line(step, lr));
        }
    })?;
    println!("trained {} steps in {:.1}s", cfg.steps, start.elapsed().as_secs_f64());
    for ds in &seqs {
        let recs = track_sequence(&trainer.model, &trainer.store, ds, &ForceGates::None)?;
        let r = EvalReport::compute(&boxes_of(&recs), &ds.boxes)?;
        println!("{}: {}", ds.name, r.csv_line());
    }
    Ok(())
}
