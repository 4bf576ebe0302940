//! Primitive operations: forward evaluation and vector-Jacobian products.
//!
//! Every differentiable computation in the crate is a composition of the
//! primitives in [`Prim`]. The same forward kernels back both the recording
//! [`Tape`](super::Tape) and the non-recording [`Eager`](super::Eager)
//! executor.

use std::collections::BTreeMap;

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Attribute value for [`Prim::from_name`].
#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Ints(Vec<i64>),
}

pub type Attrs = BTreeMap<String, AttrValue>;

/// A primitive together with its attributes.
///
/// Axis attributes may be negative and count from the last axis.
#[derive(Debug, Clone, PartialEq)]
pub enum Prim {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
    /// Multiply by a constant.
    Scale(f64),
    AddScalar(f64),
    /// `[.., m, k] x [k, n]` or batched `[.., m, k] x [.., k, n]`.
    Matmul,
    /// Swap two axes.
    Transpose(isize, isize),
    Reshape(Vec<usize>),
    Slice {
        axis: isize,
        start: usize,
        end: usize,
    },
    Concat(isize),
    /// Sum over one axis (removed), or over everything to a scalar.
    Sum(Option<isize>),
    Mean(Option<isize>),
    Exp,
    Log,
    Abs,
    Sigmoid,
    Softplus,
    /// Tanh approximation.
    Gelu,
    Relu,
    Clamp(f64, f64),
    Softmax {
        axis: isize,
        temperature: f64,
    },
    /// Inputs: `x` or `x, gamma, beta` when affine.
    LayerNorm {
        axis: isize,
        eps: f64,
        affine: bool,
    },
    /// Inputs: `x [B,C,H,W], w [O,C,kh,kw]` and optional `bias [O]`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// Inputs: `x [B,C,H,W], gamma, beta, running_mean, running_var`.
    /// Running statistics are read in eval mode and never differentiated.
    BatchNorm2d {
        eps: f64,
        momentum: f64,
        train: bool,
    },
    /// Inputs: `x [B,C,H,W]` and `grid [B,Ho,Wo,2]` holding normalized
    /// `(u, v)` sample positions in `[0,1]`. Pixel centers sit at
    /// `(index + 0.5) / size`; samples outside are clamped to the border.
    /// The grid receives no gradient.
    BilinearResample,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn norm_axis(axis: isize, ndim: usize, op: &'static str) -> Result<usize> {
    let a = if axis < 0 { axis + ndim as isize } else { axis };
    if a < 0 || a as usize >= ndim {
        return Err(Error::Invalid(format!(
            "{op}: axis {axis} out of range for rank {ndim}"
        )));
    }
    Ok(a as usize)
}

/// `(outer, len, inner)` for iterating along `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn attr_int(attrs: &Attrs, key: &str, default: Option<i64>) -> Result<i64> {
    match attrs.get(key) {
        Some(AttrValue::Int(v)) => Ok(*v),
        Some(other) => Err(Error::Invalid(format!(
            "attribute `{key}` must be an integer, got {other:?}"
        ))),
        None => default.ok_or_else(|| Error::Invalid(format!("missing attribute `{key}`"))),
    }
}

fn attr_float(attrs: &Attrs, key: &str, default: Option<f64>) -> Result<f64> {
    match attrs.get(key) {
        Some(AttrValue::Float(v)) => Ok(*v),
        Some(AttrValue::Int(v)) => Ok(*v as f64),
        Some(other) => Err(Error::Invalid(format!(
            "attribute `{key}` must be a number, got {other:?}"
        ))),
        None => default.ok_or_else(|| Error::Invalid(format!("missing attribute `{key}`"))),
    }
}

fn attr_bool(attrs: &Attrs, key: &str, default: bool) -> Result<bool> {
    match attrs.get(key) {
        Some(AttrValue::Bool(v)) => Ok(*v),
        Some(other) => Err(Error::Invalid(format!(
            "attribute `{key}` must be a boolean, got {other:?}"
        ))),
        None => Ok(default),
    }
}

fn attr_usize(attrs: &Attrs, key: &str, default: Option<i64>) -> Result<usize> {
    let v = attr_int(attrs, key, default)?;
    usize::try_from(v).map_err(|_| Error::Invalid(format!("attribute `{key}` must be >= 0")))
}

impl Prim {
    /// Look up a primitive by name, reading its attributes from `attrs`.
    pub fn from_name(kind: &str, attrs: &Attrs) -> Result<Self> {
        let axis_opt = |attrs: &Attrs| -> Result<Option<isize>> {
            match attrs.get("axis") {
                None => Ok(None),
                Some(_) => Ok(Some(attr_int(attrs, "axis", None)? as isize)),
            }
        };
        Ok(match kind {
            "add" => Prim::Add,
            "sub" => Prim::Sub,
            "mul" => Prim::Mul,
            "div" => Prim::Div,
            "maximum" => Prim::Maximum,
            "minimum" => Prim::Minimum,
            "scalar-mul" => Prim::Scale(attr_float(attrs, "scalar", None)?),
            "add-scalar" => Prim::AddScalar(attr_float(attrs, "scalar", None)?),
            "matmul" => Prim::Matmul,
            "transpose" => Prim::Transpose(
                attr_int(attrs, "axis0", Some(-2))? as isize,
                attr_int(attrs, "axis1", Some(-1))? as isize,
            ),
            "reshape" => match attrs.get("shape") {
                Some(AttrValue::Ints(v)) => Prim::Reshape(
                    v.iter()
                        .map(|&e| {
                            usize::try_from(e)
                                .map_err(|_| Error::Invalid("negative extent in reshape".into()))
                        })
                        .collect::<Result<_>>()?,
                ),
                _ => return Err(Error::Invalid("reshape needs `shape` ints".into())),
            },
            "slice" => Prim::Slice {
                axis: attr_int(attrs, "axis", None)? as isize,
                start: attr_usize(attrs, "start", None)?,
                end: attr_usize(attrs, "end", None)?,
            },
            "concat" => Prim::Concat(attr_int(attrs, "axis", None)? as isize),
            "sum" => Prim::Sum(axis_opt(attrs)?),
            "mean" => Prim::Mean(axis_opt(attrs)?),
            "exp" => Prim::Exp,
            "log" => Prim::Log,
            "abs" => Prim::Abs,
            "sigmoid" => Prim::Sigmoid,
            "softplus" => Prim::Softplus,
            "gelu" => Prim::Gelu,
            "relu" => Prim::Relu,
            "clamp" => Prim::Clamp(
                attr_float(attrs, "min", None)?,
                attr_float(attrs, "max", None)?,
            ),
            "softmax" => Prim::Softmax {
                axis: attr_int(attrs, "axis", Some(-1))? as isize,
                temperature: attr_float(attrs, "temperature", Some(1.0))?,
            },
            "layernorm" => Prim::LayerNorm {
                axis: attr_int(attrs, "axis", Some(-1))? as isize,
                eps: attr_float(attrs, "eps", Some(1e-5))?,
                affine: attr_bool(attrs, "affine", true)?,
            },
            "conv2d" => Prim::Conv2d {
                stride: attr_usize(attrs, "stride", Some(1))?,
                padding: attr_usize(attrs, "padding", Some(0))?,
            },
            "batchnorm2d" => Prim::BatchNorm2d {
                eps: attr_float(attrs, "eps", Some(1e-5))?,
                momentum: attr_float(attrs, "momentum", Some(0.1))?,
                train: attr_bool(attrs, "train", true)?,
            },
            "bilinear-resample" => Prim::BilinearResample,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Mul => "mul",
            Prim::Div => "div",
            Prim::Maximum => "maximum",
            Prim::Minimum => "minimum",
            Prim::Scale(_) => "scalar-mul",
            Prim::AddScalar(_) => "add-scalar",
            Prim::Matmul => "matmul",
            Prim::Transpose(..) => "transpose",
            Prim::Reshape(_) => "reshape",
            Prim::Slice { .. } => "slice",
            Prim::Concat(_) => "concat",
            Prim::Sum(_) => "sum",
            Prim::Mean(_) => "mean",
            Prim::Exp => "exp",
            Prim::Log => "log",
            Prim::Abs => "abs",
            Prim::Sigmoid => "sigmoid",
            Prim::Softplus => "softplus",
            Prim::Gelu => "gelu",
            Prim::Relu => "relu",
            Prim::Clamp(..) => "clamp",
            Prim::Softmax { .. } => "softmax",
            Prim::LayerNorm { .. } => "layernorm",
            Prim::Conv2d { .. } => "conv2d",
            Prim::BatchNorm2d { .. } => "batchnorm2d",
            Prim::BilinearResample => "bilinear-resample",
        }
    }

    /// Which inputs can carry a gradient.
    pub fn differentiable_input(&self, index: usize) -> bool {
        match self {
            Prim::BatchNorm2d { .. } => index < 3,
            Prim::BilinearResample => index == 0,
            _ => true,
        }
    }

    fn check_arity(&self, n: usize) -> Result<()> {
        let ok = match self {
            Prim::Add | Prim::Sub | Prim::Mul | Prim::Div | Prim::Maximum | Prim::Minimum => n == 2,
            Prim::Matmul | Prim::BilinearResample => n == 2,
            Prim::Concat(_) => n >= 1,
            Prim::LayerNorm { affine, .. } => n == if *affine { 3 } else { 1 },
            Prim::Conv2d { .. } => n == 2 || n == 3,
            Prim::BatchNorm2d { .. } => n == 5,
            _ => n == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "{} does not take {n} inputs",
                self.name()
            )))
        }
    }

    /// Evaluate the primitive. When `save` is set, the second element holds
    /// whatever the VJP needs beyond inputs and output.
    pub fn forward<T: Element>(
        &self,
        inputs: &[&Tensor<T>],
        save: bool,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.check_arity(inputs.len())?;
        let x = inputs[0];
        let out = match self {
            Prim::Add => binary(self.name(), x, inputs[1], |a, b| a + b)?,
            Prim::Sub => binary(self.name(), x, inputs[1], |a, b| a - b)?,
            Prim::Mul => binary(self.name(), x, inputs[1], |a, b| a * b)?,
            Prim::Div => binary(self.name(), x, inputs[1], |a, b| a / b)?,
            Prim::Maximum => binary(self.name(), x, inputs[1], |a, b| if b > a { b } else { a })?,
            Prim::Minimum => binary(self.name(), x, inputs[1], |a, b| if b < a { b } else { a })?,
            Prim::Scale(c) => {
                let c = T::lit(*c);
                x.map(|v| v * c)
            }
            Prim::AddScalar(c) => {
                let c = T::lit(*c);
                x.map(|v| v + c)
            }
            Prim::Matmul => matmul(x, inputs[1])?,
            Prim::Transpose(a, b) => {
                let a = norm_axis(*a, x.ndim(), "transpose")?;
                let b = norm_axis(*b, x.ndim(), "transpose")?;
                transpose(x, a, b)
            }
            Prim::Reshape(shape) => {
                if numel(shape) != x.numel() {
                    return Err(Error::shape("reshape", &[x.shape(), shape]));
                }
                x.reshaped(shape.clone())?
            }
            Prim::Slice { axis, start, end } => {
                let axis = norm_axis(*axis, x.ndim(), "slice")?;
                if start >= end || *end > x.shape()[axis] {
                    return Err(Error::Invalid(format!(
                        "slice [{start}, {end}) out of range for axis {axis} of {:?}",
                        x.shape()
                    )));
                }
                slice(x, axis, *start, *end)
            }
            Prim::Concat(axis) => {
                let axis = norm_axis(*axis, x.ndim(), "concat")?;
                concat(inputs, axis)?
            }
            Prim::Sum(axis) => reduce_sum(x, *axis, false)?,
            Prim::Mean(axis) => reduce_sum(x, *axis, true)?,
            Prim::Exp => x.map(|v| v.exp()),
            Prim::Log => x.map(|v| v.ln()),
            Prim::Abs => x.map(|v| v.abs()),
            Prim::Sigmoid => x.map(sigmoid),
            Prim::Softplus => x.map(softplus),
            Prim::Gelu => x.map(gelu),
            Prim::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Prim::Clamp(lo, hi) => {
                let (lo, hi) = (T::lit(*lo), T::lit(*hi));
                x.map(|v| v.max(lo).min(hi))
            }
            Prim::Softmax { axis, temperature } => {
                if !(*temperature > 0.0) {
                    return Err(Error::Invalid(format!(
                        "softmax temperature must be > 0, got {temperature}"
                    )));
                }
                let axis = norm_axis(*axis, x.ndim(), "softmax")?;
                softmax(x, axis, *temperature)
            }
            Prim::LayerNorm { axis, eps, affine } => {
                let axis = norm_axis(*axis, x.ndim(), "layernorm")?;
                let params = if *affine {
                    Some((inputs[1], inputs[2]))
                } else {
                    None
                };
                let (y, xhat, rstd) = layernorm(x, axis, *eps, params)?;
                return Ok((y, if save { vec![xhat, rstd] } else { vec![] }));
            }
            Prim::Conv2d { stride, padding } => {
                let (y, cols) = conv2d(x, inputs[1], inputs.get(2).copied(), *stride, *padding, save)?;
                return Ok((y, cols.into_iter().collect()));
            }
            Prim::BatchNorm2d { eps, train, .. } => {
                let (y, xhat, invstd) = batchnorm2d(inputs, *eps, *train)?;
                return Ok((y, if save { vec![xhat, invstd] } else { vec![] }));
            }
            Prim::BilinearResample => bilinear(x, inputs[1])?,
        };
        Ok((out, vec![]))
    }

    /// Vector-Jacobian product: gradient of a scalar w.r.t. each input given
    /// its gradient `g` w.r.t. the output. Entries for inputs with
    /// `needs[i] == false` are `None`.
    pub fn vjp<T: Element>(
        &self,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        saved: &[Tensor<T>],
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; inputs.len()];
        match self {
            Prim::Add | Prim::Sub => {
                if want(0) {
                    grads[0] = Some(sum_to(g, x.shape()));
                }
                if want(1) {
                    let gb = sum_to(g, inputs[1].shape());
                    grads[1] = Some(if matches!(self, Prim::Sub) {
                        gb.map(|v| -v)
                    } else {
                        gb
                    });
                }
            }
            Prim::Mul => {
                let y = inputs[1];
                if want(0) {
                    grads[0] = Some(sum_to(&binary("mul", g, y, |a, b| a * b)?, x.shape()));
                }
                if want(1) {
                    grads[1] = Some(sum_to(&binary("mul", g, x, |a, b| a * b)?, y.shape()));
                }
            }
            Prim::Div => {
                let y = inputs[1];
                if want(0) {
                    grads[0] = Some(sum_to(&binary("div", g, y, |a, b| a / b)?, x.shape()));
                }
                if want(1) {
                    // d(a/b)/db = -out / b
                    let go = binary("mul", g, out, |a, b| a * b)?;
                    let full = binary("div", &go, y, |a, b| -(a / b))?;
                    grads[1] = Some(sum_to(&full, y.shape()));
                }
            }
            Prim::Maximum | Prim::Minimum => {
                let y = inputs[1];
                let shape = out.shape().to_vec();
                let xa = broadcast_to(x, &shape)?;
                let ya = broadcast_to(y, &shape)?;
                let is_max = matches!(self, Prim::Maximum);
                let mut gx = Vec::with_capacity(g.numel());
                let mut gy = Vec::with_capacity(g.numel());
                for ((&gv, &a), &b) in g.data().iter().zip(xa.data()).zip(ya.data()) {
                    let pick_y = if is_max { b > a } else { b < a };
                    if pick_y {
                        gx.push(T::zero());
                        gy.push(gv);
                    } else {
                        gx.push(gv);
                        gy.push(T::zero());
                    }
                }
                if want(0) {
                    grads[0] = Some(sum_to(&Tensor::from_parts(shape.clone(), gx), x.shape()));
                }
                if want(1) {
                    grads[1] = Some(sum_to(&Tensor::from_parts(shape, gy), y.shape()));
                }
            }
            Prim::Scale(c) => {
                let c = T::lit(*c);
                grads[0] = Some(g.map(|v| v * c));
            }
            Prim::AddScalar(_) => grads[0] = Some(g.clone()),
            Prim::Matmul => {
                let (ga, gb) = matmul_vjp(x, inputs[1], g, want(0), want(1));
                grads[0] = ga;
                grads[1] = gb;
            }
            Prim::Transpose(a, b) => {
                let a = norm_axis(*a, x.ndim(), "transpose")?;
                let b = norm_axis(*b, x.ndim(), "transpose")?;
                grads[0] = Some(transpose(g, a, b));
            }
            Prim::Reshape(_) => grads[0] = Some(g.reshaped(x.shape().to_vec())?),
            Prim::Slice { axis, start, .. } => {
                let axis = norm_axis(*axis, x.ndim(), "slice")?;
                let mut full = Tensor::zeros(x.shape().to_vec());
                scatter_slice(&mut full, g, axis, *start);
                grads[0] = Some(full);
            }
            Prim::Concat(axis) => {
                let axis = norm_axis(*axis, x.ndim(), "concat")?;
                let mut start = 0;
                for (i, inp) in inputs.iter().enumerate() {
                    let len = inp.shape()[axis];
                    if want(i) {
                        grads[i] = Some(slice(g, axis, start, start + len));
                    }
                    start += len;
                }
            }
            Prim::Sum(axis) | Prim::Mean(axis) => {
                let mean = matches!(self, Prim::Mean(_));
                grads[0] = Some(expand_reduced(g, x.shape(), *axis, mean)?);
            }
            Prim::Exp => grads[0] = Some(zip(g, out, |g, y| g * y)),
            Prim::Log => grads[0] = Some(zip(g, x, |g, x| g / x)),
            Prim::Abs => grads[0] = Some(zip(g, x, |g, x| g * sign(x))),
            Prim::Sigmoid => grads[0] = Some(zip(g, out, |g, y| g * y * (T::one() - y))),
            Prim::Softplus => grads[0] = Some(zip(g, x, |g, x| g * sigmoid(x))),
            Prim::Gelu => grads[0] = Some(zip(g, x, |g, x| g * gelu_grad(x))),
            Prim::Relu => {
                grads[0] = Some(zip(g, x, |g, x| if x > T::zero() { g } else { T::zero() }))
            }
            Prim::Clamp(lo, hi) => {
                let (lo, hi) = (T::lit(*lo), T::lit(*hi));
                grads[0] = Some(zip(g, x, |g, x| {
                    if x > lo && x < hi {
                        g
                    } else {
                        T::zero()
                    }
                }))
            }
            Prim::Softmax { axis, temperature } => {
                let axis = norm_axis(*axis, x.ndim(), "softmax")?;
                grads[0] = Some(softmax_vjp(out, g, axis, *temperature));
            }
            Prim::LayerNorm { axis, affine, .. } => {
                let axis = norm_axis(*axis, x.ndim(), "layernorm")?;
                let gamma = if *affine { Some(inputs[1]) } else { None };
                let (gx, gg, gb) = layernorm_vjp(g, &saved[0], &saved[1], axis, gamma);
                grads[0] = Some(gx);
                if *affine {
                    grads[1] = gg;
                    grads[2] = gb;
                }
            }
            Prim::Conv2d { stride, padding } => {
                let (gx, gw, gb) =
                    conv2d_vjp(x, inputs[1], &saved[0], g, *stride, *padding, inputs.len() == 3);
                grads[0] = Some(gx);
                grads[1] = Some(gw);
                if inputs.len() == 3 {
                    grads[2] = gb;
                }
            }
            Prim::BatchNorm2d { train, .. } => {
                let (gx, gg, gb) = batchnorm2d_vjp(g, inputs[1], &saved[0], &saved[1], *train);
                grads[0] = Some(gx);
                grads[1] = Some(gg);
                grads[2] = Some(gb);
            }
            Prim::BilinearResample => grads[0] = Some(bilinear_vjp(x, inputs[1], g)),
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if !want(i) {
                *slot = None;
            }
        }
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// Scalar helpers

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `max(z, 0) + log1p(exp(-|z|))`, stable for large `|z|`.
#[inline]
pub fn softplus<T: Element>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[inline]
fn sign<T: Element>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

// ---------------------------------------------------------------------------
// Broadcasting

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        if da == db || db == 1 {
            out.push(da);
        } else if da == 1 {
            out.push(db);
        } else {
            return Err(Error::shape(op, &[a, b]));
        }
    }
    Ok(out)
}

/// Strides of `shape` viewed inside an `ndim`-rank broadcast, 0 on
/// broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = super::strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn binary<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(zip(a, b, f));
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    if shape == a.shape() && b.numel() == 1 {
        let bv = b.data()[0];
        return Ok(Tensor::from_parts(shape, a.data().iter().map(|&x| f(x, bv)).collect()));
    }
    if shape == b.shape() && a.numel() == 1 {
        let av = a.data()[0];
        return Ok(Tensor::from_parts(shape, b.data().iter().map(|&y| f(av, y)).collect()));
    }
    if shape == a.shape() && is_suffix(b.shape(), a.shape()) {
        let n = b.numel();
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks_exact(n) {
            data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_parts(shape, data));
    }
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let mut data = Vec::with_capacity(numel(&shape));
    let mut idx = vec![0usize; shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..numel(&shape) {
        data.push(f(a.data()[oa], b.data()[ob]));
        // odometer increment
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

fn broadcast_to<T: Element>(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    binary("broadcast", &Tensor::zeros(shape.to_vec()), t, |_, y| y)
}

/// Sum `g` down to `shape` (the adjoint of broadcasting).
pub(crate) fn sum_to<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let n = numel(shape);
    let mut out = vec![T::zero(); n];
    if n == 1 {
        out[0] = g.data().iter().copied().sum();
    } else if is_suffix(shape, g.shape()) {
        for chunk in g.data().chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
    } else {
        let gs = g.shape();
        let st = broadcast_strides(shape, gs);
        let mut idx = vec![0usize; gs.len()];
        let mut off = 0usize;
        for &v in g.data() {
            out[off] = out[off] + v;
            for d in (0..gs.len()).rev() {
                idx[d] += 1;
                off += st[d];
                if idx[d] < gs[d] {
                    break;
                }
                off -= st[d] * gs[d];
                idx[d] = 0;
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Matrix products

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = c[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", &[a, b]));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::shape("matmul", &[a, b]));
    }
    let lead_a = &a[..a.len() - 2];
    if b.len() == 2 {
        return Ok(MatmulDims {
            batch: numel(lead_a),
            m,
            k,
            n,
            shared_rhs: true,
        });
    }
    if lead_a != &b[..b.len() - 2] {
        return Err(Error::shape("matmul", &[a, b]));
    }
    Ok(MatmulDims {
        batch: numel(lead_a),
        m,
        k,
        n,
        shared_rhs: false,
    })
}

fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut shape = a.shape()[..a.ndim() - 1].to_vec();
    shape.push(d.n);
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    if d.shared_rhs {
        gemm_nn(d.batch * d.m, d.k, d.n, a.data(), b.data(), &mut out);
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            gemm_nn(
                d.m,
                d.k,
                d.n,
                &a.data()[i * sa..(i + 1) * sa],
                &b.data()[i * sb..(i + 1) * sb],
                &mut out[i * sc..(i + 1) * sc],
            );
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

fn matmul_vjp<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = want_a.then(|| vec![T::zero(); a.numel()]);
    let mut gb = want_b.then(|| vec![T::zero(); b.numel()]);
    if d.shared_rhs {
        let rows = d.batch * d.m;
        if let Some(ga) = ga.as_mut() {
            gemm_nt(rows, d.n, d.k, g.data(), b.data(), ga);
        }
        if let Some(gb) = gb.as_mut() {
            gemm_tn(d.k, rows, d.n, a.data(), g.data(), gb);
        }
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            let gi = &g.data()[i * sc..(i + 1) * sc];
            if let Some(ga) = ga.as_mut() {
                gemm_nt(d.m, d.n, d.k, gi, &b.data()[i * sb..(i + 1) * sb], &mut ga[i * sa..(i + 1) * sa]);
            }
            if let Some(gb) = gb.as_mut() {
                gemm_tn(d.k, d.m, d.n, &a.data()[i * sa..(i + 1) * sa], gi, &mut gb[i * sb..(i + 1) * sb]);
            }
        }
    }
    (
        ga.map(|v| Tensor::from_parts(a.shape().to_vec(), v)),
        gb.map(|v| Tensor::from_parts(b.shape().to_vec(), v)),
    )
}

// ---------------------------------------------------------------------------
// Layout

fn transpose<T: Element>(t: &Tensor<T>, a: usize, b: usize) -> Tensor<T> {
    if a == b {
        return t.clone();
    }
    let (a, b) = (a.min(b), a.max(b));
    let s = t.shape();
    let pre = numel(&s[..a]);
    let d0 = s[a];
    let mid = numel(&s[a + 1..b]);
    let d1 = s[b];
    let post = numel(&s[b + 1..]);
    let mut shape = s.to_vec();
    shape.swap(a, b);
    let src = t.data();
    let mut out = vec![T::zero(); t.numel()];
    for p in 0..pre {
        for j in 0..d1 {
            for m in 0..mid {
                for i in 0..d0 {
                    let si = (((p * d0 + i) * mid + m) * d1 + j) * post;
                    let di = (((p * d1 + j) * mid + m) * d0 + i) * post;
                    out[di..di + post].copy_from_slice(&src[si..si + post]);
                }
            }
        }
    }
    Tensor::from_parts(shape, out)
}

fn slice<T: Element>(t: &Tensor<T>, axis: usize, start: usize, end: usize) -> Tensor<T> {
    let (outer, len, inner) = split_at_axis(t.shape(), axis);
    let w = end - start;
    let mut out = Vec::with_capacity(outer * w * inner);
    for o in 0..outer {
        let base = (o * len + start) * inner;
        out.extend_from_slice(&t.data()[base..base + w * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = w;
    Tensor::from_parts(shape, out)
}

fn scatter_slice<T: Element>(full: &mut Tensor<T>, part: &Tensor<T>, axis: usize, start: usize) {
    let (outer, len, inner) = split_at_axis(full.shape(), axis);
    let w = part.shape()[axis];
    let data = full.data_mut();
    for o in 0..outer {
        let base = (o * len + start) * inner;
        let src = &part.data()[o * w * inner..(o + 1) * w * inner];
        for (d, &s) in data[base..base + w * inner].iter_mut().zip(src) {
            *d = *d + s;
        }
    }
}

fn concat<T: Element>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs[0].shape();
    let mut total = 0;
    for t in inputs {
        let s = t.shape();
        let compatible = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
            return Err(Error::shape("concat", &shapes));
        }
        total += s[axis];
    }
    let outer = numel(&first[..axis]);
    let inner = numel(&first[axis + 1..]);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let w = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

// ---------------------------------------------------------------------------
// Reductions

fn reduce_sum<T: Element>(x: &Tensor<T>, axis: Option<isize>, mean: bool) -> Result<Tensor<T>> {
    match axis {
        None => {
            let s: T = x.data().iter().copied().sum();
            let v = if mean { s / T::lit(x.numel() as f64) } else { s };
            Ok(Tensor::scalar(v))
        }
        Some(ax) => {
            let ax = norm_axis(ax, x.ndim(), "sum")?;
            let (outer, len, inner) = split_at_axis(x.shape(), ax);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            if mean {
                let n = T::lit(len as f64);
                out.iter_mut().for_each(|v| *v = *v / n);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(ax);
            Ok(Tensor::from_parts(shape, out))
        }
    }
}

fn expand_reduced<T: Element>(
    g: &Tensor<T>,
    shape: &[usize],
    axis: Option<isize>,
    mean: bool,
) -> Result<Tensor<T>> {
    match axis {
        None => {
            let mut v = g.data()[0];
            if mean {
                v = v / T::lit(numel(shape) as f64);
            }
            Ok(Tensor::full(shape.to_vec(), v))
        }
        Some(ax) => {
            let ax = norm_axis(ax, shape.len(), "sum")?;
            let (outer, len, inner) = split_at_axis(shape, ax);
            let scale = if mean { T::one() / T::lit(len as f64) } else { T::one() };
            let mut out = Vec::with_capacity(numel(shape));
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    out.extend(src.iter().map(|&v| v * scale));
                }
            }
            Ok(Tensor::from_parts(shape.to_vec(), out))
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization

fn softmax<T: Element>(x: &Tensor<T>, axis: usize, temperature: f64) -> Tensor<T> {
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let inv_t = T::lit(1.0 / temperature);
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut mx = T::neg_infinity();
            for l in 0..len {
                mx = mx.max(src[at(l)] * inv_t);
            }
            let mut sum = T::zero();
            for l in 0..len {
                let e = (src[at(l)] * inv_t - mx).exp();
                out[at(l)] = e;
                sum = sum + e;
            }
            for l in 0..len {
                out[at(l)] = out[at(l)] / sum;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn softmax_vjp<T: Element>(y: &Tensor<T>, g: &Tensor<T>, axis: usize, temperature: f64) -> Tensor<T> {
    let (outer, len, inner) = split_at_axis(y.shape(), axis);
    let inv_t = T::lit(1.0 / temperature);
    let mut out = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut s = T::zero();
            for l in 0..len {
                s = s + g.data()[at(l)] * y.data()[at(l)];
            }
            for l in 0..len {
                out[at(l)] = y.data()[at(l)] * (g.data()[at(l)] - s) * inv_t;
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

type NormOut<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

fn layernorm<T: Element>(
    x: &Tensor<T>,
    axis: usize,
    eps: f64,
    params: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<NormOut<T>> {
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    if let Some((g, b)) = params {
        if g.shape() != [len] || b.shape() != [len] {
            return Err(Error::shape("layernorm", &[x.shape(), g.shape(), b.shape()]));
        }
    }
    let n = T::lit(len as f64);
    let eps = T::lit(eps);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = vec![T::zero(); outer * inner];
    let src = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mean = (0..len).map(|l| src[at(l)]).sum::<T>() / n;
            let var = (0..len)
                .map(|l| {
                    let d = src[at(l)] - mean;
                    d * d
                })
                .sum::<T>()
                / n;
            let r = T::one() / (var + eps).sqrt();
            rstd[o * inner + i] = r;
            for l in 0..len {
                xhat[at(l)] = (src[at(l)] - mean) * r;
            }
        }
    }
    let mut y = xhat.clone();
    if let Some((g, b)) = params {
        for o in 0..outer {
            for l in 0..len {
                let (gv, bv) = (g.data()[l], b.data()[l]);
                let base = (o * len + l) * inner;
                for v in &mut y[base..base + inner] {
                    *v = *v * gv + bv;
                }
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        Tensor::from_parts(shape, xhat),
        Tensor::from_parts(vec![outer * inner], rstd),
    ))
}

type NormGrads<T> = (Tensor<T>, Option<Tensor<T>>, Option<Tensor<T>>);

fn layernorm_vjp<T: Element>(
    g: &Tensor<T>,
    xhat: &Tensor<T>,
    rstd: &Tensor<T>,
    axis: usize,
    gamma: Option<&Tensor<T>>,
) -> NormGrads<T> {
    let (outer, len, inner) = split_at_axis(g.shape(), axis);
    let n = T::lit(len as f64);
    let mut gx = vec![T::zero(); g.numel()];
    let mut gg = vec![T::zero(); len];
    let mut gb = vec![T::zero(); len];
    let (gd, xd) = (g.data(), xhat.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for l in 0..len {
                let gv = gd[at(l)];
                gg[l] = gg[l] + gv * xd[at(l)];
                gb[l] = gb[l] + gv;
                let dxh = gamma.map_or(gv, |gm| gv * gm.data()[l]);
                s1 = s1 + dxh;
                s2 = s2 + dxh * xd[at(l)];
            }
            let r = rstd.data()[o * inner + i];
            for l in 0..len {
                let gv = gd[at(l)];
                let dxh = gamma.map_or(gv, |gm| gv * gm.data()[l]);
                gx[at(l)] = r * (dxh - s1 / n - xd[at(l)] * s2 / n);
            }
        }
    }
    let shape = g.shape().to_vec();
    (
        Tensor::from_parts(shape, gx),
        gamma.map(|_| Tensor::from_parts(vec![len], gg)),
        gamma.map(|_| Tensor::from_parts(vec![len], gb)),
    )
}

fn batchnorm2d<T: Element>(inputs: &[&Tensor<T>], eps: f64, train: bool) -> Result<NormOut<T>> {
    let x = inputs[0];
    if x.ndim() != 4 {
        return Err(Error::shape("batchnorm2d", &[x.shape()]));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    for p in &inputs[1..] {
        if p.shape() != [c] {
            return Err(Error::shape("batchnorm2d", &[x.shape(), p.shape()]));
        }
    }
    let (gamma, beta, rm, rv) = (inputs[1], inputs[2], inputs[3], inputs[4]);
    let hw = h * w;
    let m = T::lit((b * hw) as f64);
    let eps = T::lit(eps);
    let src = x.data();
    let mut invstd = vec![T::zero(); c];
    let mut means = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, var) = if train {
            let mut s = T::zero();
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                s = s + src[base..base + hw].iter().copied().sum::<T>();
            }
            let mean = s / m;
            let mut v = T::zero();
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                v = v + src[base..base + hw]
                    .iter()
                    .map(|&x| (x - mean) * (x - mean))
                    .sum::<T>();
            }
            (mean, v / m)
        } else {
            (rm.data()[ch], rv.data()[ch])
        };
        means[ch] = mean;
        invstd[ch] = T::one() / (var + eps).sqrt();
    }
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let (mu, is, gm, bt) = (means[ch], invstd[ch], gamma.data()[ch], beta.data()[ch]);
            for k in base..base + hw {
                let xh = (src[k] - mu) * is;
                xhat[k] = xh;
                y[k] = xh * gm + bt;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        Tensor::from_parts(shape, xhat),
        Tensor::from_parts(vec![c], invstd),
    ))
}

fn batchnorm2d_vjp<T: Element>(
    g: &Tensor<T>,
    gamma: &Tensor<T>,
    xhat: &Tensor<T>,
    invstd: &Tensor<T>,
    train: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let hw = h * w;
    let m = T::lit((b * hw) as f64);
    let (gd, xd) = (g.data(), xhat.data());
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            for k in base..base + hw {
                gg[ch] = gg[ch] + gd[k] * xd[k];
                gb[ch] = gb[ch] + gd[k];
            }
        }
    }
    let mut gx = vec![T::zero(); g.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let gm = gamma.data()[ch];
            let is = invstd.data()[ch];
            for k in base..base + hw {
                gx[k] = if train {
                    // dxhat summed over the batch is gamma * (gb, gg)
                    gm * is * (gd[k] - gb[ch] / m - xd[k] * gg[ch] / m)
                } else {
                    gm * is * gd[k]
                };
            }
        }
    }
    (
        Tensor::from_parts(g.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], gg),
        Tensor::from_parts(vec![c], gb),
    )
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_geom(x: &[usize], wt: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    if x.len() != 4 || wt.len() != 4 || x[1] != wt[1] || stride == 0 {
        return Err(Error::shape("conv2d", &[x, wt]));
    }
    let (h, w, kh, kw) = (x[2], x[3], wt[2], wt[3]);
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape("conv2d", &[x, wt]));
    }
    Ok(ConvGeom {
        b: x[0],
        c: x[1],
        h,
        w,
        o: wt[0],
        kh,
        kw,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (w + 2 * padding - kw) / stride + 1,
    })
}

/// Column matrix `[C*kh*kw, Ho*Wo]` for one image.
fn im2col<T: Element>(img: &[T], g: &ConvGeom, stride: usize, padding: usize, col: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            img[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &ConvGeom, stride: usize, padding: usize, img: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let k = (c * g.h + iy as usize) * g.w + ix as usize;
                        img[k] = img[k] + src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

fn conv2d<T: Element>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    save: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let g = conv_geom(x.shape(), wt.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(Error::shape("conv2d", &[x.shape(), wt.shape(), b.shape()]));
        }
    }
    let ckk = g.c * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.b * ckk * hw];
    let mut out = vec![T::zero(); g.b * g.o * hw];
    let img_len = g.c * g.h * g.w;
    for bi in 0..g.b {
        let col = &mut cols[bi * ckk * hw..(bi + 1) * ckk * hw];
        im2col(&x.data()[bi * img_len..(bi + 1) * img_len], &g, stride, padding, col);
        let dst = &mut out[bi * g.o * hw..(bi + 1) * g.o * hw];
        if let Some(b) = bias {
            for (oc, &bv) in b.data().iter().enumerate() {
                dst[oc * hw..(oc + 1) * hw].iter_mut().for_each(|v| *v = bv);
            }
        }
        gemm_nn(g.o, ckk, hw, wt.data(), col, dst);
    }
    let y = Tensor::from_parts(vec![g.b, g.o, g.ho, g.wo], out);
    let saved = save.then(|| Tensor::from_parts(vec![g.b, ckk, hw], cols));
    Ok((y, saved))
}

fn conv2d_vjp<T: Element>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    cols: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    padding: usize,
    has_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let g = conv_geom(x.shape(), wt.shape(), stride, padding).expect("validated in forward");
    let ckk = g.c * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let img_len = g.c * g.h * g.w;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); wt.numel()];
    let mut gb = vec![T::zero(); g.o];
    let mut dcol = vec![T::zero(); ckk * hw];
    for bi in 0..g.b {
        let go = &gout.data()[bi * g.o * hw..(bi + 1) * g.o * hw];
        let col = &cols.data()[bi * ckk * hw..(bi + 1) * ckk * hw];
        gemm_nt(g.o, hw, ckk, go, col, &mut gw);
        dcol.iter_mut().for_each(|v| *v = T::zero());
        gemm_tn(ckk, g.o, hw, wt.data(), go, &mut dcol);
        col2im(&dcol, &g, stride, padding, &mut gx[bi * img_len..(bi + 1) * img_len]);
        if has_bias {
            for oc in 0..g.o {
                gb[oc] = gb[oc] + go[oc * hw..(oc + 1) * hw].iter().copied().sum::<T>();
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(wt.shape().to_vec(), gw),
        has_bias.then(|| Tensor::from_parts(vec![g.o], gb)),
    )
}

// ---------------------------------------------------------------------------
// Bilinear resampling

/// Integer neighbours and weight for one normalized coordinate.
#[inline]
fn bilinear_axis(u: f64, size: usize) -> (usize, usize, f64) {
    let p = (u * size as f64 - 0.5).clamp(0.0, (size - 1) as f64);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, p - i0 as f64)
}

fn bilinear_check(x: &[usize], grid: &[usize]) -> Result<()> {
    if x.len() != 4 || grid.len() != 4 || grid[0] != x[0] || grid[3] != 2 {
        return Err(Error::shape("bilinear-resample", &[x, grid]));
    }
    Ok(())
}

fn bilinear<T: Element>(x: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    bilinear_check(x.shape(), grid.shape())?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (grid.shape()[1], grid.shape()[2]);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let gi = ((bi * ho + oy) * wo + ox) * 2;
                let (x0, x1, fx) = bilinear_axis(grid.data()[gi].as_f64(), w);
                let (y0, y1, fy) = bilinear_axis(grid.data()[gi + 1].as_f64(), h);
                let (fx, fy) = (T::lit(fx), T::lit(fy));
                let one = T::one();
                for ch in 0..c {
                    let img = &x.data()[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                    let top = img[y0 * w + x0] * (one - fx) + img[y0 * w + x1] * fx;
                    let bot = img[y1 * w + x0] * (one - fx) + img[y1 * w + x1] * fx;
                    out[((bi * c + ch) * ho + oy) * wo + ox] = top * (one - fy) + bot * fy;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

fn bilinear_vjp<T: Element>(x: &Tensor<T>, grid: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (grid.shape()[1], grid.shape()[2]);
    let mut gx = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let gi = ((bi * ho + oy) * wo + ox) * 2;
                let (x0, x1, fx) = bilinear_axis(grid.data()[gi].as_f64(), w);
                let (y0, y1, fy) = bilinear_axis(grid.data()[gi + 1].as_f64(), h);
                let (fx, fy) = (T::lit(fx), T::lit(fy));
                let one = T::one();
                for ch in 0..c {
                    let gv = g.data()[((bi * c + ch) * ho + oy) * wo + ox];
                    let base = (bi * c + ch) * h * w;
                    let mut acc = |k: usize, wgt: T| gx[base + k] = gx[base + k] + gv * wgt;
                    acc(y0 * w + x0, (one - fx) * (one - fy));
                    acc(y0 * w + x1, fx * (one - fy));
                    acc(y1 * w + x0, (one - fx) * fy);
                    acc(y1 * w + x1, fx * fy);
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), gx)
}
