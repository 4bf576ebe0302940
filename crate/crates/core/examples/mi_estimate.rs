//! Train the Jensen-Shannon critic on correlated and independent Gaussian
//! pairs and compare the resulting lower bounds.

use avtrack::layout::Builder;
use avtrack::mi::{jsd_mi_lower_bound, shuffle_negatives, Critic};
use avtrack::rng::SplitMix64;
use avtrack::tensor::{Eager, Exec, ParamStore, Tape, Tensor};
use avtrack::train::AdamW;

fn pairs(rng: &mut SplitMix64, rho: f64, n: usize) -> (Tensor<f64>, Tensor<f64>) {
    let a: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let b: Vec<f64> = a.iter().map(|&x| rho * x + (1.0 - rho * rho).sqrt() * rng.normal()).collect();
    (
        Tensor::from_f64(vec![n, 1], &a).unwrap(),
        Tensor::from_f64(vec![n, 1], &b).unwrap(),
    )
}

fn estimate(rho: f64) -> avtrack::Result<f64> {
    let mut rng = SplitMix64::new(1);
    let mut store = ParamStore::new();
    let critic = Critic::build(&mut Builder::Fresh { store: &mut store, rng: &mut rng }, "critic", 1, 64)?;
    let mut opt = AdamW::new(0.0);
    for step in 0..500 {
        let (a, b) = pairs(&mut rng, rho, 128);
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a), t.constant(b));
        let j = jsd_mi_lower_bound(&mut t, &store, &critic, &av, &bv, &shuffle_negatives(128, step)?)?;
        let loss = t.scale(&j, -1.0)?;
        t.backward(loss)?;
        let g = t.param_grads(&store);
        drop(t);
        opt.step(&mut store, &g, 1e-2);
    }
    let (a, b) = pairs(&mut rng, rho, 4096);
    let mut ctx = Eager;
    let (av, bv) = (ctx.constant(a), ctx.constant(b));
    let j = jsd_mi_lower_bound(&mut ctx, &store, &critic, &av, &bv, &shuffle_negatives(4096, 99)?)?;
    Ok(j.data()[0])
}

fn main() -> avtrack::Result<()> {
    println!("zero-information value: {:.4}", -2.0 * std::f64::consts::LN_2);
    for rho in [0.0, 0.5, 0.9, 0.99] {
        println!("rho {rho:<4}: JSD bound {:.4}", estimate(rho)?);
    }
    Ok(())
}
