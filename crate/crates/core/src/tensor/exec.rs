use std::sync::Arc;

use super::{Element, ParamId, ParamStore, Prim, Tensor};
use crate::error::Result;

/// An evaluation context for model code.
///
/// Model functions are written once against this trait and run either on a
/// recording [`Tape`](super::Tape) (training, gradient checks) or on
/// [`Eager`] (inference, which never records anything).
pub trait Exec<T: Element> {
    type Val: Clone;

    fn constant(&mut self, t: Tensor<T>) -> Self::Val;
    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::Val;
    fn value<'a>(&'a self, v: &'a Self::Val) -> &'a Tensor<T>;
    fn apply(&mut self, prim: Prim, inputs: &[&Self::Val]) -> Result<Self::Val>;

    fn shape_of(&self, v: &Self::Val) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Mul, &[a, b])
    }
    fn div(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Div, &[a, b])
    }
    fn maximum(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Maximum, &[a, b])
    }
    fn minimum(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Minimum, &[a, b])
    }
    fn scale(&mut self, a: &Self::Val, c: f64) -> Result<Self::Val> {
        self.apply(Prim::Scale(c), &[a])
    }
    fn add_scalar(&mut self, a: &Self::Val, c: f64) -> Result<Self::Val> {
        self.apply(Prim::AddScalar(c), &[a])
    }
    fn matmul(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Matmul, &[a, b])
    }
    fn transpose(&mut self, a: &Self::Val, ax0: isize, ax1: isize) -> Result<Self::Val> {
        self.apply(Prim::Transpose(ax0, ax1), &[a])
    }
    fn reshape(&mut self, a: &Self::Val, shape: &[usize]) -> Result<Self::Val> {
        self.apply(Prim::Reshape(shape.to_vec()), &[a])
    }
    fn slice(&mut self, a: &Self::Val, axis: isize, start: usize, end: usize) -> Result<Self::Val> {
        self.apply(Prim::Slice { axis, start, end }, &[a])
    }
    fn concat(&mut self, parts: &[&Self::Val], axis: isize) -> Result<Self::Val> {
        self.apply(Prim::Concat(axis), parts)
    }
    fn sum(&mut self, a: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Sum(None), &[a])
    }
    fn sum_axis(&mut self, a: &Self::Val, axis: isize) -> Result<Self::Val> {
        self.apply(Prim::Sum(Some(axis)), &[a])
    }
    fn mean(&mut self, a: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Mean(None), &[a])
    }
    fn mean_axis(&mut self, a: &Self::Val, axis: isize) -> Result<Self::Val> {
        self.apply(Prim::Mean(Some(axis)), &[a])
    }
    fn exp(&mut self, a: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Exp, &[a])
    }
    fn log(&mut self, a: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Log, &[a])
    }
    fn abs(&mut self, a: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Abs, &[a])
    }
    fn sigmoid(&mut self, a: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Sigmoid, &[a])
    }
    fn softplus(&mut self, a: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Softplus, &[a])
    }
    fn gelu(&mut self, a: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Gelu, &[a])
    }
    fn relu(&mut self, a: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::Relu, &[a])
    }
    fn clamp(&mut self, a: &Self::Val, lo: f64, hi: f64) -> Result<Self::Val> {
        self.apply(Prim::Clamp(lo, hi), &[a])
    }
    fn softmax(&mut self, a: &Self::Val, axis: isize, temperature: f64) -> Result<Self::Val> {
        self.apply(Prim::Softmax { axis, temperature }, &[a])
    }
    fn layernorm(
        &mut self,
        x: &Self::Val,
        gamma: &Self::Val,
        beta: &Self::Val,
        eps: f64,
    ) -> Result<Self::Val> {
        self.apply(
            Prim::LayerNorm {
                axis: -1,
                eps,
                affine: true,
            },
            &[x, gamma, beta],
        )
    }
    fn conv2d(
        &mut self,
        x: &Self::Val,
        w: &Self::Val,
        bias: Option<&Self::Val>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Val> {
        let prim = Prim::Conv2d { stride, padding };
        match bias {
            Some(b) => self.apply(prim, &[x, w, b]),
            None => self.apply(prim, &[x, w]),
        }
    }
    fn bilinear_resample(&mut self, x: &Self::Val, grid: &Self::Val) -> Result<Self::Val> {
        self.apply(Prim::BilinearResample, &[x, grid])
    }
}

/// Non-recording executor. Values are shared tensors; nothing is retained
/// for differentiation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Element> Exec<T> for Eager {
    type Val = Arc<Tensor<T>>;

    fn constant(&mut self, t: Tensor<T>) -> Self::Val {
        Arc::new(t)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::Val {
        store.shared(id)
    }

    fn value<'a>(&'a self, v: &'a Self::Val) -> &'a Tensor<T> {
        v
    }

    fn apply(&mut self, prim: Prim, inputs: &[&Self::Val]) -> Result<Self::Val> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &***v).collect();
        Ok(Arc::new(prim.forward(&vals, false)?.0))
    }
}
