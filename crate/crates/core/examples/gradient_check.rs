//! Verify tape gradients against central differences for a small attention
//! style expression.

use avtrack::rng::SplitMix64;
use avtrack::tensor::{finite_diff_check, Exec, Tape, Tensor};

fn main() -> avtrack::Result<()> {
    let mut rng = SplitMix64::new(0);
    let x = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(vec![8, 8], 0.5, &mut rng);
    let err = finite_diff_check(
        |t: &mut Tape<f64>, v| {
            let wv = t.constant(w.clone());
            let q = t.matmul(&v, &wv)?;
            let kt = t.transpose(&v, 0, 1)?;
            let s = t.matmul(&q, &kt)?;
            let a = t.softmax(&s, -1, 1.0)?;
            let y = t.matmul(&a, &v)?;
            let y = t.gelu(&y)?;
            t.mean(&y)
        },
        &x,
        1e-5,
    )?;
    println!("max relative error {err:.2e}");
    Ok(())
}
