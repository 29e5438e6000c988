//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in execution order, so the node list is already a topological order and
//! the reverse pass is a single backwards sweep that visits each recorded
//! operation once.
//!
//! Tape policy: a tape is built per forward pass and dropped after the
//! optimizer has consumed the gradients. [`Tape::backward`] borrows the tape
//! immutably, so it may be called more than once on the same tape; each call
//! starts from fresh zero gradients.
//!
//! The op set is deliberately small: matmul, add/sub, element-wise multiply,
//! row scaling by a vector (the only broadcast), scalar scaling, softmax, sum,
//! squared-error and cross-entropy losses.

use crate::error::{Error, Result};
use crate::tensor::{softmax, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    Sum(Var),
    SquaredError(Var, Tensor<T>),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Row `i` of matrix `m` multiplied by `v[i]`.
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let out = self.value(m).scale_rows(self.value(v))?;
        let rg = self.needs(m) || self.needs(v);
        Ok(self.push(out, Op::ScaleRows(m, v), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.needs(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        let out = softmax(self.value(v))?;
        let rg = self.needs(v);
        Ok(self.push(out, Op::Softmax(v), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Mean over samples (columns) of the squared Euclidean error,
    /// `(1/n) Σ_j ‖pred[:, j] − target[:, j]‖²`. A vector is one sample.
    pub fn squared_error(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        let diff = p.sub(target).map_err(|_| Error::Dimension {
            op: "squared_error",
            lhs: p.shape().to_vec(),
            rhs: target.shape().to_vec(),
        })?;
        let n = samples(p);
        let loss = diff.data().iter().fold(T::zero(), |acc, &d| acc + d * d) / n;
        let rg = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SquaredError(pred, target.clone()),
            rg,
        ))
    }

    /// Mean softmax cross-entropy. `logits` is `classes × batch`; `labels`
    /// holds one class index per column.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.ndim() != 2 || l.cols() != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: l.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = l.rows();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut total = T::zero();
        for (j, &y) in labels.iter().enumerate() {
            let col = l.column(j);
            let max = col.data().iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = col
                .data()
                .iter()
                .fold(T::zero(), |a, &v| a + (v - max).exp())
                .ln()
                + max;
            total = total + lse - col.data()[y];
        }
        let loss = total / T::from_usize(labels.len()).unwrap();
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy"));
        }
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, labels.to_vec()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every node
    /// that depends on a trainable leaf and lies on a path to `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.ndim() > 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        let slot = &mut grads[v.0];
        *slot = Some(match slot.take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        });
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = self.value(*a).transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::ScaleRows(m, v) => {
                let mv = self.value(*m);
                let vv = self.value(*v);
                if self.needs(*m) {
                    self.accumulate(grads, *m, g.scale_rows(vv)?)?;
                }
                if self.needs(*v) {
                    let n = mv.cols();
                    let gv: Vec<T> = g
                        .data()
                        .chunks(n)
                        .zip(mv.data().chunks(n))
                        .map(|(gr, mr)| {
                            gr.iter()
                                .zip(mr)
                                .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                        })
                        .collect();
                    self.accumulate(grads, *v, Tensor::vector(gv))?;
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.scale(*c))?;
            }
            Op::Softmax(v) => {
                let dot = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                let gv = g.sub(&Tensor::full(g.shape(), dot))?.mul(out)?;
                self.accumulate(grads, *v, gv)?;
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gs))?;
            }
            Op::SquaredError(pred, target) => {
                let p = self.value(*pred);
                let coeff = T::from_f64_lossy(2.0) * g.data()[0] / samples(p);
                let gp = p.sub(target)?.scale(coeff);
                self.accumulate(grads, *pred, gp)?;
            }
            Op::CrossEntropy(logits, labels) => {
                let l = self.value(*logits);
                let (classes, batch) = (l.rows(), l.cols());
                let coeff = g.data()[0] / T::from_usize(batch).unwrap();
                let mut gl = Tensor::zeros(&[classes, batch]);
                for (j, &y) in labels.iter().enumerate() {
                    let probs = softmax(&l.column(j))?;
                    for c in 0..classes {
                        let mut d = probs.data()[c];
                        if c == y {
                            d = d - T::one();
                        }
                        gl.set(c, j, d * coeff);
                    }
                }
                self.accumulate(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

fn samples<T: Scalar>(t: &Tensor<T>) -> T {
    let n = if t.ndim() == 2 { t.cols() } else { 1 };
    T::from_usize(n).unwrap()
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
