use std::collections::HashMap;
use std::sync::Arc;

use super::{Element, Exec, ParamId, ParamKey, ParamStore, Prim, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Option<(Prim, Vec<usize>)>,
    saved: Vec<Tensor<T>>,
    needs_grad: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so operands always precede their
/// consumers; [`Tape::backward`] walks the list once in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamKey, Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        crate::probe::tape_created();
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Record an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node {
            value: Arc::new(value),
            op: None,
            saved: Vec::new(),
            needs_grad: requires_grad,
        })
    }

    /// Make later `param(store, id)` lookups for `key` resolve to `var`.
    /// Used to differentiate with respect to a substituted parameter value.
    pub fn bind_param(&mut self, key: ParamKey, var: Var) {
        self.params.insert(key, var);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record `prim` applied to `inputs`.
    pub fn record(&mut self, prim: Prim, inputs: &[Var]) -> Result<Var> {
        let needs: Vec<bool> = inputs
            .iter()
            .enumerate()
            .map(|(i, v)| prim.differentiable_input(i) && self.nodes[v.0].needs_grad)
            .collect();
        let any = needs.iter().any(|&b| b);
        let (value, saved) = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
            prim.forward(&vals, any)?
        };
        let op = any.then(|| (prim, inputs.iter().map(|v| v.0).collect()));
        Ok(self.push(Node {
            value: Arc::new(value),
            op,
            saved,
            needs_grad: any,
        }))
    }

    /// Accumulate d(root)/d(node) for every node that needs a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some((prim, ins)) = &node.op {
                let vals: Vec<&Tensor<T>> = ins.iter().map(|&j| &*self.nodes[j].value).collect();
                let needs: Vec<bool> = ins
                    .iter()
                    .enumerate()
                    .map(|(k, &j)| prim.differentiable_input(k) && self.nodes[j].needs_grad)
                    .collect();
                let input_grads = prim.vjp(&vals, &node.value, &node.saved, &g, &needs)?;
                for (&j, ig) in ins.iter().zip(input_grads) {
                    if let Some(ig) = ig {
                        match &mut self.grads[j] {
                            Some(acc) => acc.add_assign(&ig),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient after [`backward`](Self::backward); `None` when the value
    /// did not influence the root or needs no gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter of `store` used on this tape.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = store
            .ids()
            .filter_map(|id| {
                let v = *self.params.get(&store.key(id))?;
                self.grad(v).map(|g| (id, g.clone()))
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl<T: Element> Exec<T> for Tape<T> {
    type Val = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = store.key(id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(Node {
            value: store.shared(id),
            op: None,
            saved: Vec::new(),
            needs_grad: store.is_trainable(id) && !store.is_frozen(),
        });
        self.params.insert(key, v);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        Tape::value(self, *v)
    }

    fn apply(&mut self, prim: Prim, inputs: &[&Var]) -> Result<Var> {
        let ins: Vec<Var> = inputs.iter().map(|v| **v).collect();
        self.record(prim, &ins)
    }
}
