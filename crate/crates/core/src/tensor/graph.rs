//! Wengert-tape reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass as a topologically ordered list of
//! nodes; each differentiable op pushes a backward closure that routes the
//! incoming gradient to its parents. [`Graph::backward`] walks the tape once
//! in reverse. Parameters live outside the graph in a [`ParamStore`] and are
//! bound into a pass on first use.

use std::collections::HashMap;

use super::{Element, Result, Tensor, TensorError};

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

/// Handle to a parameter in a [`ParamStore`]. Stable across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies (false for biases, norms,
    /// gains and state-matrix logs).
    pub decay: bool,
}

/// Flat registry of trainable tensors, addressed by [`ParamId`] and by name.
#[derive(Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), decay: e.decay })
                .collect(),
        }
    }
}

/// Whether a pass runs with stochastic regularizers active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<T>)>;

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub needs_grad: bool,
    pub backward: Option<BackwardFn<T>>,
}

/// Accumulates gradients per node during the reverse sweep.
pub struct GradSink<T> {
    bufs: Vec<Option<Vec<T>>>,
    numels: Vec<usize>,
}

impl<T: Element> GradSink<T> {
    /// Add a contribution to `target`'s gradient buffer, allocating it to
    /// zeros on first touch.
    pub(crate) fn accum(&mut self, target: Var, f: impl FnOnce(&mut [T])) {
        let buf = self.bufs[target.id].get_or_insert_with(|| vec![T::zero(); self.numels[target.id]]);
        f(buf);
    }
}

/// Gradients extracted by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a bound parameter. `None` when the parameter did not
    /// participate in the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars.get(&id).and_then(|&v| self.wrt(v))
    }
}

/// One forward pass under construction.
pub struct Graph<'p, T: Element> {
    pub(crate) store: &'p ParamStore<T>,
    pub(crate) nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    consumed: bool,
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>, mode: Mode) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new(), mode, consumed: false }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Bind a parameter as a differentiable leaf (cached per graph).
    /// In `Eval` mode parameters are bound frozen, so no backward closures
    /// are recorded anywhere downstream.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let needs_grad = self.mode == Mode::Train;
        let v = self.push(self.store.value(id).clone(), needs_grad, None);
        self.param_vars.insert(id, v);
        v
    }

    /// Insert a non-differentiable input leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    /// Insert an input leaf that receives a gradient (used by gradient
    /// probes and finite-difference checks).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, None)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.id].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    #[inline]
    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.id].needs_grad
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        needs_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        self.nodes.push(Node { value, needs_grad, backward });
        Var { id: self.nodes.len() - 1 }
    }

    /// Push an op result, surfacing NaN/Inf immediately rather than letting
    /// it propagate.
    pub(crate) fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: Option<BackwardFn<T>>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let needs_grad = parents.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(value, needs_grad, if needs_grad { backward } else { None }))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// reached by the chain rule; consume-once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        self.consumed = true;
        if self.value(loss).numel() != 1 {
            return Err(TensorError::LossNotScalar(self.value(loss).shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut sink = GradSink {
            bufs: (0..n).map(|_| None).collect(),
            numels: self.nodes.iter().map(|nd| nd.value.numel()).collect(),
        };
        sink.bufs[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            if sink.bufs[id].is_none() {
                continue;
            }
            // Take the buffer while the node's closure runs; parents have
            // smaller ids so the closure never touches slot `id`.
            let gout = sink.bufs[id].take().expect("checked above");
            if let Some(bk) = self.nodes[id].backward.as_ref() {
                bk(&gout, &mut sink);
            }
            sink.bufs[id] = Some(gout);
        }

        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        for (id, buf) in sink.bufs.into_iter().enumerate() {
            match buf {
                Some(b) if self.nodes[id].needs_grad => {
                    grads.push(Some(Tensor::new(self.nodes[id].value.shape().to_vec(), b)?))
                }
                _ => grads.push(None),
            }
        }
        Ok(Gradients { grads, param_vars: self.param_vars.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_loss() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input_with_grad(Tensor::zeros(vec![2, 2]));
        assert!(matches!(g.backward(x), Err(TensorError::LossNotScalar(_))));
    }

    #[test]
    fn backward_consumes_graph() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input_with_grad(Tensor::scalar(1.0));
        g.backward(x).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::GraphConsumed)));
    }

    #[test]
    fn grad_of_identity_leaf_is_one() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input_with_grad(Tensor::scalar(3.0));
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn eval_mode_binds_frozen_params() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", Tensor::scalar(2.0), true);
        let mut g = Graph::new(&store, Mode::Eval);
        let v = g.param(p);
        assert!(!g.needs_grad(v));
    }
}
