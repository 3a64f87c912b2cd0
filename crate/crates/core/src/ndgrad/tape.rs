//! Reverse-mode automatic differentiation over a linear tape.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, Unary};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Constant input; receives an adjoint but is not reported as a parameter.
    Constant,
    /// Tracked parameter, reported by name in [`Tape::grad`].
    Param(String),
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar with respect to every named parameter on the tape.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after a backward sweep.
#[derive(Debug, Clone)]
pub struct Adjoints {
    grads: Vec<Tensor>,
}

impl Adjoints {
    pub fn of(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(Op::Param(name.into()), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn unary(&mut self, f: Unary, a: Var) -> Var {
        let value = f.forward(self.value(a));
        self.push(Op::Unary(f, a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(kernels::sum(self.value(a)));
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(kernels::sum(t) / t.len() as f64);
        self.push(Op::Mean(a), value)
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(kernels::sq_norm(self.value(a)));
        self.push(Op::SqNorm(a), value)
    }

    // Composites built from the primitives above.

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.scalar(c);
        self.mul(a, k)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let l = self.log(a);
        let h = self.scale(l, 0.5)?;
        Ok(self.exp(h))
    }

    /// Per-row sum: `(n, m) -> (n, 1)`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        let ones = self.constant(Tensor::full(cols, 1, 1.0));
        self.matmul(a, ones)
    }

    /// Columns `start..end` of `a`, via a constant selection matrix.
    pub fn select_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        if start > end || end > cols {
            return Err(Error::contract(alloc::format!(
                "column range {start}..{end} outside 0..{cols}"
            )));
        }
        let width = end - start;
        let mut sel = Tensor::zeros(cols, width);
        for j in 0..width {
            sel.data_mut()[(start + j) * width + j] = 1.0;
        }
        let sel = self.constant(sel);
        self.matmul(a, sel)
    }

    /// `[a | b]` column concatenation, composed as `a E_a + b E_b`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, cb) = (self.value(a).cols(), self.value(b).cols());
        let width = ca + cb;
        let mut ea = Tensor::zeros(ca, width);
        for j in 0..ca {
            ea.data_mut()[j * width + j] = 1.0;
        }
        let mut eb = Tensor::zeros(cb, width);
        for j in 0..cb {
            eb.data_mut()[j * width + ca + j] = 1.0;
        }
        let ea = self.constant(ea);
        let eb = self.constant(eb);
        let pa = self.matmul(a, ea)?;
        let pb = self.matmul(b, eb)?;
        self.add(pa, pb)
    }

    /// Adjoints of all nodes with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(alloc::format!(
                "gradient requested for non-scalar node of shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::Add(a, b) => {
                    let ga = kernels::reduce_to(&g, self.value(*a));
                    let gb = kernels::reduce_to(&g, self.value(*b));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = kernels::mul(&g, self.value(*b))?;
                    let gb = kernels::mul(&g, self.value(*a))?;
                    let ga = kernels::reduce_to(&ga, self.value(*a));
                    let gb = kernels::reduce_to(&gb, self.value(*b));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = kernels::matmul_nt(&g, self.value(*b));
                    let gb = kernels::matmul_tn(self.value(*a), &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Unary(f, a) => {
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .zip(g.data())
                        .map(|((&xv, &yv), &gv)| gv * f.derivative(xv, yv))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, x.map(|_| gv));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let gv = g.data()[0] / x.len() as f64;
                    accumulate(&mut grads, *a, x.map(|_| gv));
                }
                Op::SqNorm(a) => {
                    let x = self.value(*a);
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, x.map(|v| 2.0 * gv * v));
                }
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros_like(&self.nodes[i].value)))
            .chain(self.nodes[loss.0 + 1..].iter().map(|n| Tensor::zeros_like(&n.value)))
            .collect();
        Ok(Adjoints { grads })
    }

    /// `∂loss/∂p` for every named parameter; unreachable parameters get zeros.
    /// A name registered more than once accumulates over its occurrences.
    pub fn grad(&self, loss: Var) -> Result<Gradients> {
        let adj = self.backward(loss)?;
        let mut out = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = &adj.grads[i];
                match out.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Recomputes every node from the recorded leaves in tape order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Constant | Op::Param(_) => node.value.clone(),
                Op::Add(a, b) => kernels::add(&values[a.0], &values[b.0])?,
                Op::Mul(a, b) => kernels::mul(&values[a.0], &values[b.0])?,
                Op::MatMul(a, b) => kernels::matmul(&values[a.0], &values[b.0])?,
                Op::Unary(f, a) => f.forward(&values[a.0]),
                Op::Sum(a) => Tensor::scalar(kernels::sum(&values[a.0])),
                Op::Mean(a) => {
                    let t = &values[a.0];
                    Tensor::scalar(kernels::sum(t) / t.len() as f64)
                }
                Op::SqNorm(a) => Tensor::scalar(kernels::sq_norm(&values[a.0])),
            };
            values.push(v);
        }
        Ok(values)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
