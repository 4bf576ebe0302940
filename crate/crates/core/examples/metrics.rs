//! Precision and success curves for a jittered prediction track.

use avtrack::eval::{precision_curve, success_curve, EvalReport};
use avtrack::geom::Rect;
use avtrack::rng::SplitMix64;

fn main() -> avtrack::Result<()> {
    let mut rng = SplitMix64::new(4);
    let gt: Vec<Rect> = (0..50).map(|i| Rect::new(10.0 + i as f64, 20.0, 24.0, 16.0)).collect();
    let pred: Vec<Rect> = gt
        .iter()
        .map(|b| Rect::new(b.x + 4.0 * rng.normal(), b.y + 4.0 * rng.normal(), b.w * (1.0 + 0.1 * rng.normal()), b.h))
        .collect();
    println!("{}\n{}", EvalReport::CSV_HEADER, EvalReport::compute(&pred, &gt)?.csv_line());
    for (t, p) in precision_curve(&pred, &gt)?.into_iter().step_by(10) {
        println!("precision@{t:>2}px {p:.2}");
    }
    for (t, s) in success_curve(&pred, &gt)?.into_iter().step_by(5) {
        println!("success@{t:.2} {s:.2}");
    }
    Ok(())
}
