//! Parameter registration shared by fresh initialization and checkpoint
//! binding, so a model's layout is written down exactly once.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Element, Exec, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Either creates parameters with fresh values or binds to existing ones
/// by name, checking shapes.
pub enum Builder<'a, T> {
    Fresh {
        store: &'a mut ParamStore<T>,
        rng: &'a mut SplitMix64,
    },
    Bind {
        store: &'a ParamStore<T>,
    },
}

impl<T: Element> Builder<'_, T> {
    fn entry(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<ParamId> {
        match self {
            Builder::Fresh { store, rng } => {
                let value = match init {
                    Init::Zeros => Tensor::zeros(shape.to_vec()),
                    Init::Ones => Tensor::ones(shape.to_vec()),
                    Init::Normal(std) => Tensor::randn(shape.to_vec(), std, rng),
                };
                Ok(if trainable {
                    store.add(name, value)
                } else {
                    store.add_buffer(name, value)
                })
            }
            Builder::Bind { store } => {
                let id = store
                    .lookup(name)
                    .ok_or_else(|| Error::Invalid(format!("missing tensor `{name}`")))?;
                if store.get(id).shape() != shape {
                    return Err(Error::Invalid(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.entry(name, shape, init, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.entry(name, shape, init, false)
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
    ) -> Result<Self> {
        Ok(Self {
            weight: b.param(&format!("{name}.weight"), &[fan_in, fan_out], Init::Normal(std))?,
            bias: b.param(&format!("{name}.bias"), &[fan_out], Init::Zeros)?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        x: &E::Val,
    ) -> Result<E::Val> {
        let w = ctx.param(store, self.weight);
        let y = ctx.matmul(x, &w)?;
        let b = ctx.param(store, self.bias);
        ctx.add(&y, &b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: b.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        x: &E::Val,
    ) -> Result<E::Val> {
        let g = ctx.param(store, self.weight);
        let b = ctx.param(store, self.bias);
        ctx.layernorm(x, &g, &b, LN_EPS)
    }
}
