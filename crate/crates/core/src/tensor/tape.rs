use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::marker::PhantomData;
use std::sync::Arc;

use super::ops::backward_primitive;
use super::{eval_primitive, lit, Primitive, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::quant::QuantParams;

thread_local! {
    static TAPES_CREATED: Cell<usize> = const { Cell::new(0) };
}

/// Number of tapes constructed on the current thread. Used to assert that the
/// device inference path never records gradients.
pub fn tapes_created() -> usize {
    TAPES_CREATED.with(|c| c.get())
}

/// A computation context. Model code is written once against this trait.
pub trait Graph<T: Scalar> {
    type Node: Clone;

    fn constant(&self, t: Tensor<T>) -> Self::Node;
    /// A constant that shares storage with the caller.
    fn shared(&self, t: &Arc<Tensor<T>>) -> Self::Node;
    /// A named parameter; only trainable parameters receive gradients.
    fn param(&self, name: &str, t: &Arc<Tensor<T>>, trainable: bool) -> Self::Node;
    fn apply(&self, p: Primitive, inputs: &[&Self::Node]) -> Result<Self::Node>;
    fn value(&self, n: &Self::Node) -> Arc<Tensor<T>>;
    /// Whether operations are recorded for a backward sweep.
    fn records_gradients(&self) -> bool;

    fn matmul(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    fn transpose(&self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Transpose, &[a])
    }
    fn add(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Add, &[a, b])
    }
    fn sub(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, &nb)
    }
    fn mul(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Mul, &[a, b])
    }
    fn scale(&self, a: &Self::Node, c: f64) -> Result<Self::Node> {
        self.apply(Primitive::Scale(c), &[a])
    }
    fn concat(&self, xs: &[&Self::Node], axis: usize) -> Result<Self::Node> {
        self.apply(Primitive::Concat { axis }, xs)
    }
    fn gather(&self, table: &Self::Node, indices: Vec<usize>) -> Result<Self::Node> {
        self.apply(Primitive::Gather { indices }, &[table])
    }
    fn softmax(&self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Softmax, &[a])
    }
    fn log_softmax(&self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::LogSoftmax, &[a])
    }
    fn layer_norm(&self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::LayerNorm { eps: 1e-5 }, &[a])
    }
    fn relu(&self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Relu, &[a])
    }
    fn sigmoid(&self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    fn tanh(&self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Tanh, &[a])
    }
    fn abs(&self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Abs, &[a])
    }
    fn conv2d(&self, x: &Self::Node, w: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Conv2d, &[x, w])
    }
    fn max_over_time(&self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::MaxOverTime, &[a])
    }
    fn sum(&self, a: &Self::Node, axis: Option<usize>) -> Result<Self::Node> {
        self.apply(Primitive::Sum { axis }, &[a])
    }
    fn mean(&self, a: &Self::Node, axis: Option<usize>) -> Result<Self::Node> {
        self.apply(Primitive::Mean { axis }, &[a])
    }
    fn stop_gradient(&self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::StopGradient, &[a])
    }
    fn reshape(&self, a: &Self::Node, shape: &[usize]) -> Result<Self::Node> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }
    fn fake_quant(&self, a: &Self::Node, params: Vec<QuantParams>) -> Result<Self::Node> {
        self.apply(Primitive::FakeQuant { params }, &[a])
    }
    /// `x [n, in] * w[out, in]^T + b[out]`
    fn linear(&self, x: &Self::Node, w: &Self::Node, b: Option<&Self::Node>) -> Result<Self::Node> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, &wt)?;
        match b {
            Some(b) => self.add(&y, b),
            None => Ok(y),
        }
    }
    fn scalar_value(&self, n: &Self::Node) -> T {
        self.value(n).item()
    }
}

/// Plain evaluation; nothing is recorded.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager<T> {
    _marker: PhantomData<T>,
}

impl<T: Scalar> Eager<T> {
    pub fn new() -> Self {
        Self {
            _marker: PhantomData,
        }
    }
}

impl<T: Scalar> Graph<T> for Eager<T> {
    type Node = Arc<Tensor<T>>;

    fn constant(&self, t: Tensor<T>) -> Self::Node {
        Arc::new(t)
    }
    fn shared(&self, t: &Arc<Tensor<T>>) -> Self::Node {
        Arc::clone(t)
    }
    fn param(&self, _name: &str, t: &Arc<Tensor<T>>, _trainable: bool) -> Self::Node {
        Arc::clone(t)
    }
    fn apply(&self, p: Primitive, inputs: &[&Self::Node]) -> Result<Self::Node> {
        if p == Primitive::StopGradient {
            return Ok(Arc::clone(inputs[0]));
        }
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|a| a.as_ref()).collect();
        Ok(Arc::new(eval_primitive(&p, &refs)?))
    }
    fn value(&self, n: &Self::Node) -> Arc<Tensor<T>> {
        Arc::clone(n)
    }
    fn records_gradients(&self) -> bool {
        false
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Record<T> {
    value: Arc<Tensor<T>>,
    prim: Option<Primitive>,
    inputs: Vec<usize>,
    requires_grad: bool,
    param: Option<String>,
}

/// Ordered record of primitive applications. Records are appended in
/// evaluation order, so inputs always precede the records that use them.
pub struct Tape<T> {
    records: RefCell<Vec<Record<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        TAPES_CREATED.with(|c| c.set(c.get() + 1));
        Self {
            records: RefCell::new(Vec::new()),
        }
    }

    /// A leaf that may require gradients but is not a named parameter.
    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Arc::new(t), None, Vec::new(), requires_grad, None)
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Arc<Tensor<T>>,
        prim: Option<Primitive>,
        inputs: Vec<usize>,
        requires_grad: bool,
        param: Option<String>,
    ) -> Var {
        let mut r = self.records.borrow_mut();
        r.push(Record {
            value,
            prim,
            inputs,
            requires_grad,
            param,
        });
        Var(r.len() - 1)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let records = self.records.borrow();
        let root = &records[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        let mut grads = Gradients {
            by_param: BTreeMap::new(),
            by_leaf: HashMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let rec = &records[i];
            if !rec.requires_grad {
                continue;
            }
            match &rec.prim {
                None => {
                    if let Some(name) = &rec.param {
                        match grads.by_param.get_mut(name) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                grads.by_param.insert(name.clone(), g.clone());
                            }
                        }
                    }
                    grads.by_leaf.insert(i, g);
                }
                Some(p) => {
                    let inputs: Vec<&Tensor<T>> = rec
                        .inputs
                        .iter()
                        .map(|&j| records[j].value.as_ref())
                        .collect();
                    let in_grads = backward_primitive(p, &inputs, &rec.value, &g)?;
                    for (&j, dg) in rec.inputs.iter().zip(in_grads) {
                        let Some(dg) = dg else { continue };
                        if !records[j].requires_grad {
                            continue;
                        }
                        match &mut adj[j] {
                            Some(acc) => acc.add_assign(&dg),
                            slot @ None => *slot = Some(dg),
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Node = Var;

    fn constant(&self, t: Tensor<T>) -> Var {
        self.push(Arc::new(t), None, Vec::new(), false, None)
    }
    fn shared(&self, t: &Arc<Tensor<T>>) -> Var {
        self.push(Arc::clone(t), None, Vec::new(), false, None)
    }
    fn param(&self, name: &str, t: &Arc<Tensor<T>>, trainable: bool) -> Var {
        self.push(
            Arc::clone(t),
            None,
            Vec::new(),
            trainable,
            Some(name.to_string()),
        )
    }
    fn apply(&self, p: Primitive, inputs: &[&Var]) -> Result<Var> {
        let (value, requires_grad, ids) = {
            let records = self.records.borrow();
            let refs: Vec<&Tensor<T>> =
                inputs.iter().map(|v| records[v.0].value.as_ref()).collect();
            let value = eval_primitive(&p, &refs)?;
            let rg =
                p != Primitive::StopGradient && inputs.iter().any(|v| records[v.0].requires_grad);
            (value, rg, inputs.iter().map(|v| v.0).collect::<Vec<_>>())
        };
        Ok(self.push(Arc::new(value), Some(p), ids, requires_grad, None))
    }
    fn value(&self, n: &Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.records.borrow()[n.0].value)
    }
    fn records_gradients(&self) -> bool {
        true
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    by_param: BTreeMap<String, Tensor<T>>,
    by_leaf: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.by_param
    }

    /// Gradient of a leaf; `None` when no gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&v.0)
    }

    /// Gradient of a leaf, zeros when nothing reached it.
    pub fn grad_or_zero(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::full(shape, lit(0.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq, None).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let s = tape.stop_gradient(&x).unwrap();
        let loss = tape.sum(&s, None).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad_or_zero(x, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_get_no_entry() {
        let tape = Tape::<f64>::new();
        let w = Arc::new(Tensor::vector(vec![1.0, 2.0]));
        let a = tape.param("frozen", &w, false);
        let b = tape.param("live", &w, true);
        let p = tape.mul(&a, &b).unwrap();
        let loss = tape.sum(&p, None).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.param("frozen").is_none());
        assert_eq!(g.param("live").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn tape_counter_tracks_this_thread() {
        let before = tapes_created();
        let _t = Tape::<f32>::new();
        assert_eq!(tapes_created(), before + 1);
        let e = Eager::<f32>::new();
        let _ = e.constant(Tensor::scalar(1.0));
        assert_eq!(tapes_created(), before + 1);
    }
}
