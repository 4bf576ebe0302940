//! Per-primitive gradient-check cases shared by the gradient and acceptance
//! suites. Each case builds `sum(w * prim(x, ...))` with fixed random
//! weights `w` so every output component contributes.

use avtrack::rng::SplitMix64;
use avtrack::tensor::{finite_diff_check, Exec, Prim, Tape, Tensor, Var};
use avtrack::Result;

pub struct Case {
    pub name: &'static str,
    pub x_shape: Vec<usize>,
    /// Builds the primitive output from the tape, the checked input and
    /// the auxiliary (constant) inputs.
    pub build: fn(&mut Tape<f64>, Var, &[Tensor<f64>]) -> Result<Var>,
    pub aux: fn(&mut SplitMix64) -> Vec<Tensor<f64>>,
    /// Keeps inputs away from non-differentiable points.
    pub positive: bool,
}

fn none(_: &mut SplitMix64) -> Vec<Tensor<f64>> {
    vec![]
}

fn randn(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn unary(t: &mut Tape<f64>, p: Prim, x: Var) -> Result<Var> {
    t.apply(p, &[&x])
}

pub fn cases() -> Vec<Case> {
    vec![
        Case { name: "add", x_shape: vec![3, 4], positive: false,
            aux: |r| vec![randn(&[4], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.add(&x, &b) } },
        Case { name: "add (rhs broadcast grad)", x_shape: vec![2, 1, 4], positive: false,
            aux: |r| vec![randn(&[2, 3, 4], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.add(&b, &x) } },
        Case { name: "sub", x_shape: vec![3, 4], positive: false,
            aux: |r| vec![randn(&[3, 1], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.sub(&b, &x) } },
        Case { name: "mul", x_shape: vec![2, 3, 4], positive: false,
            aux: |r| vec![randn(&[2, 1, 1], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.mul(&x, &b) } },
        Case { name: "mul (broadcast operand)", x_shape: vec![2, 1, 1], positive: false,
            aux: |r| vec![randn(&[2, 3, 4], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.mul(&b, &x) } },
        Case { name: "div numerator", x_shape: vec![3, 4], positive: false,
            aux: |r| vec![Tensor::uniform(vec![3, 4], 0.5, 2.0, r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.div(&x, &b) } },
        Case { name: "div denominator", x_shape: vec![3, 4], positive: true,
            aux: |r| vec![randn(&[3, 4], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.div(&b, &x) } },
        Case { name: "maximum", x_shape: vec![3, 4], positive: false,
            aux: |r| vec![randn(&[3, 4], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.maximum(&x, &b) } },
        Case { name: "minimum", x_shape: vec![3, 4], positive: false,
            aux: |r| vec![randn(&[3, 4], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.minimum(&x, &b) } },
        Case { name: "scalar-mul", x_shape: vec![5], positive: false, aux: none,
            build: |t, x, _| t.scale(&x, -1.7) },
        Case { name: "add-scalar", x_shape: vec![5], positive: false, aux: none,
            build: |t, x, _| t.add_scalar(&x, 0.3) },
        Case { name: "matmul lhs", x_shape: vec![2, 3, 4], positive: false,
            aux: |r| vec![randn(&[4, 5], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.matmul(&x, &b) } },
        Case { name: "matmul rhs", x_shape: vec![4, 5], positive: false,
            aux: |r| vec![randn(&[2, 3, 4], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.matmul(&b, &x) } },
        Case { name: "matmul batched", x_shape: vec![2, 4, 3], positive: false,
            aux: |r| vec![randn(&[2, 3, 4], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); let y = t.matmul(&b, &x)?; t.matmul(&y, &b) } },
        Case { name: "transpose", x_shape: vec![2, 3, 4], positive: false, aux: none,
            build: |t, x, _| t.transpose(&x, 0, 2) },
        Case { name: "reshape", x_shape: vec![2, 6], positive: false, aux: none,
            build: |t, x, _| t.reshape(&x, &[3, 4]) },
        Case { name: "slice", x_shape: vec![3, 5], positive: false, aux: none,
            build: |t, x, _| t.slice(&x, 1, 1, 4) },
        Case { name: "concat", x_shape: vec![2, 3], positive: false,
            aux: |r| vec![randn(&[2, 2], r)],
            build: |t, x, a| { let b = t.constant(a[0].clone()); t.concat(&[&b, &x, &x], 1) } },
        Case { name: "sum", x_shape: vec![3, 4], positive: false, aux: none,
            build: |t, x, _| t.sum_axis(&x, 0) },
        Case { name: "mean", x_shape: vec![3, 4], positive: false, aux: none,
            build: |t, x, _| t.mean_axis(&x, -1) },
        Case { name: "exp", x_shape: vec![6], positive: false, aux: none,
            build: |t, x, _| t.exp(&x) },
        Case { name: "log", x_shape: vec![6], positive: true, aux: none,
            build: |t, x, _| t.log(&x) },
        Case { name: "abs", x_shape: vec![6], positive: false, aux: none,
            build: |t, x, _| t.abs(&x) },
        Case { name: "sigmoid", x_shape: vec![6], positive: false, aux: none,
            build: |t, x, _| t.sigmoid(&x) },
        Case { name: "softplus", x_shape: vec![6], positive: false, aux: none,
            build: |t, x, _| t.softplus(&x) },
        Case { name: "gelu", x_shape: vec![6], positive: false, aux: none,
            build: |t, x, _| t.gelu(&x) },
        Case { name: "relu", x_shape: vec![6], positive: false, aux: none,
            build: |t, x, _| t.relu(&x) },
        Case { name: "clamp", x_shape: vec![6], positive: false, aux: none,
            build: |t, x, _| t.clamp(&x, -0.5, 0.5) },
        Case { name: "softmax", x_shape: vec![2, 3, 4], positive: false, aux: none,
            build: |t, x, _| t.softmax(&x, 1, 2.0) },
        Case { name: "layernorm", x_shape: vec![3, 6], positive: false,
            aux: |r| vec![randn(&[6], r), randn(&[6], r)],
            build: |t, x, a| { let g = t.constant(a[0].clone()); let b = t.constant(a[1].clone()); t.layernorm(&x, &g, &b, 1e-5) } },
        Case { name: "layernorm gamma", x_shape: vec![6], positive: false,
            aux: |r| vec![randn(&[3, 6], r), randn(&[6], r)],
            build: |t, g, a| { let x = t.constant(a[0].clone()); let b = t.constant(a[1].clone()); t.layernorm(&x, &g, &b, 1e-5) } },
        Case { name: "layernorm (no affine, middle axis)", x_shape: vec![2, 5, 3], positive: false, aux: none,
            build: |t, x, _| unary(t, Prim::LayerNorm { axis: 1, eps: 1e-5, affine: false }, x) },
        Case { name: "conv2d input", x_shape: vec![2, 3, 5, 5], positive: false,
            aux: |r| vec![randn(&[4, 3, 3, 3], r), randn(&[4], r)],
            build: |t, x, a| { let w = t.constant(a[0].clone()); let b = t.constant(a[1].clone()); t.conv2d(&x, &w, Some(&b), 2, 1) } },
        Case { name: "conv2d weight", x_shape: vec![4, 3, 3, 3], positive: false,
            aux: |r| vec![randn(&[2, 3, 5, 5], r)],
            build: |t, w, a| { let x = t.constant(a[0].clone()); t.conv2d(&x, &w, None, 1, 1) } },
        Case { name: "conv2d bias", x_shape: vec![4], positive: false,
            aux: |r| vec![randn(&[2, 3, 4, 4], r), randn(&[4, 3, 2, 2], r)],
            build: |t, b, a| { let x = t.constant(a[0].clone()); let w = t.constant(a[1].clone()); t.conv2d(&x, &w, Some(&b), 2, 0) } },
        Case { name: "batchnorm2d train", x_shape: vec![2, 3, 3, 3], positive: false,
            aux: |r| vec![randn(&[3], r), randn(&[3], r), Tensor::zeros(vec![3]), Tensor::ones(vec![3])],
            build: |t, x, a| { let v: Vec<Var> = a.iter().map(|p| t.constant(p.clone())).collect();
                t.apply(Prim::BatchNorm2d { eps: 1e-5, momentum: 0.1, train: true }, &[&x, &v[0], &v[1], &v[2], &v[3]]) } },
        Case { name: "batchnorm2d gamma", x_shape: vec![3], positive: false,
            aux: |r| vec![randn(&[2, 3, 3, 3], r), randn(&[3], r), Tensor::zeros(vec![3]), Tensor::ones(vec![3])],
            build: |t, g, a| { let v: Vec<Var> = a.iter().map(|p| t.constant(p.clone())).collect();
                t.apply(Prim::BatchNorm2d { eps: 1e-5, momentum: 0.1, train: true }, &[&v[0], &g, &v[1], &v[2], &v[3]]) } },
        Case { name: "batchnorm2d eval", x_shape: vec![2, 3, 3, 3], positive: false,
            aux: |r| vec![randn(&[3], r), randn(&[3], r), randn(&[3], r), Tensor::uniform(vec![3], 0.5, 2.0, r)],
            build: |t, x, a| { let v: Vec<Var> = a.iter().map(|p| t.constant(p.clone())).collect();
                t.apply(Prim::BatchNorm2d { eps: 1e-5, momentum: 0.1, train: false }, &[&x, &v[0], &v[1], &v[2], &v[3]]) } },
        Case { name: "bilinear-resample", x_shape: vec![2, 3, 4, 5], positive: false,
            aux: |r| vec![Tensor::uniform(vec![2, 3, 3, 2], 0.05, 0.95, r)],
            build: |t, x, a| { let g = t.constant(a[0].clone()); t.bilinear_resample(&x, &g) } },
    ]
}

/// Worst relative error for one case over `seeds` random draws.
pub fn check_case(case: &Case, seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = SplitMix64::new(1000 + seed);
        let mut x = Tensor::<f64>::randn(case.x_shape.clone(), 1.0, &mut rng);
        if case.positive {
            x = x.map(|v| v.abs() + 0.5);
        }
        let aux = (case.aux)(&mut rng);
        let build = case.build;
        // Probe weights are drawn once the output shape is known.
        let mut probe_tape = Tape::new();
        let xv = probe_tape.leaf(x.clone(), false);
        let yv = build(&mut probe_tape, xv, &aux)?;
        let out_shape = probe_tape.value(yv).shape().to_vec();
        let w = Tensor::<f64>::randn(out_shape, 1.0, &mut rng);
        let err = finite_diff_check(
            |t: &mut Tape<f64>, v| {
                let y = build(t, v, &aux)?;
                let wv = t.constant(w.clone());
                let p = t.mul(&y, &wv)?;
                t.sum(&p)
            },
            &x,
            1e-5,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
