//! Stacks of linear layers, some of them carrying adapters.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{AdapterVars, LoraAdapter};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over samples of the squared Euclidean error.
    #[default]
    SquaredError,
    /// Mean softmax cross-entropy over output rows as classes.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T: Scalar = f64> {
    Regression(Tensor<T>),
    Classes(Vec<usize>),
}

impl<T: Scalar> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(t) => t.cols(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Targets for the given sample (column) indices.
    pub fn select(&self, idx: &[usize]) -> Targets<T> {
        match self {
            Targets::Regression(t) => Targets::Regression(select_columns(t, idx)),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Gathers columns of a matrix.
pub fn select_columns<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let (m, n) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(m * idx.len());
    for i in 0..m {
        let row = &t.data()[i * n..(i + 1) * n];
        data.extend(idx.iter().map(|&j| row[j]));
    }
    Tensor::matrix(m, idx.len(), data).expect("sizes agree")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Scalar = f64> {
    Frozen(Tensor<T>),
    Adapted(LoraAdapter<T>),
}

impl<T: Scalar> Layer<T> {
    fn dims(&self) -> (usize, usize) {
        match self {
            Layer::Frozen(w) => (w.rows(), w.cols()),
            Layer::Adapted(a) => (a.out_dim(), a.in_dim()),
        }
    }
}

/// Forward-pass record needed to pull gradients off the tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub loss: Var,
    pub adapters: Vec<AdapterVars>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel<T: Scalar = f64> {
    layers: Vec<Layer<T>>,
    loss: LossKind,
}

impl<T: Scalar> AdapterModel<T> {
    /// Layers are applied first to last: `y = L_n(…L_1(x))`.
    pub fn new(layers: Vec<Layer<T>>, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            let (_, k_next) = pair[1].dims();
            let (d_prev, _) = pair[0].dims();
            if d_prev != k_next {
                return Err(Error::Dimension {
                    op: "layer chaining",
                    lhs: vec![pair[0].dims().0, pair[0].dims().1],
                    rhs: vec![pair[1].dims().0, pair[1].dims().1],
                });
            }
        }
        Ok(Self { layers, loss })
    }

    pub fn single(adapter: LoraAdapter<T>, loss: LossKind) -> Self {
        Self {
            layers: vec![Layer::Adapted(adapter)],
            loss,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].dims().1
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].dims().0
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Adapted(a) => Some(a),
            Layer::Frozen(_) => None,
        })
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Adapted(a) => Some(a),
            Layer::Frozen(_) => None,
        })
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters().count()
    }

    pub fn adapter(&self, i: usize) -> Option<&LoraAdapter<T>> {
        self.adapters().nth(i)
    }

    pub fn adapter_mut(&mut self, i: usize) -> Option<&mut LoraAdapter<T>> {
        self.adapters_mut().nth(i)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Frozen(w) => w.matmul(&h)?,
                Layer::Adapted(a) => a.forward(&h)?,
            };
        }
        Ok(h)
    }

    /// Records forward pass and loss on a fresh tape.
    pub fn loss_on(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        targets: &Targets<T>,
        train_scores: bool,
    ) -> Result<ModelVars> {
        let mut h = tape.constant(x.clone());
        let mut adapters = Vec::new();
        for layer in &self.layers {
            h = match layer {
                Layer::Frozen(w) => {
                    let w = tape.constant(w.clone());
                    tape.matmul(w, h)?
                }
                Layer::Adapted(a) => {
                    let (y, vars) = a.forward_on(tape, h, train_scores)?;
                    adapters.push(vars);
                    y
                }
            };
        }
        let loss = self.attach_loss(tape, h, targets)?;
        Ok(ModelVars { loss, adapters })
    }

    fn attach_loss(&self, tape: &mut Tape<T>, out: Var, targets: &Targets<T>) -> Result<Var> {
        match (self.loss, targets) {
            (LossKind::SquaredError, Targets::Regression(y)) => tape.squared_error(out, y),
            (LossKind::CrossEntropy, Targets::Classes(c)) => tape.cross_entropy(out, c),
            _ => Err(Error::contract("target kind does not match the model's loss")),
        }
    }

    /// Mean loss over all columns of `x`, without recording gradients.
    pub fn evaluate(&self, x: &Tensor<T>, targets: &Targets<T>) -> Result<f64> {
        let out = self.forward(x)?;
        let mut tape = Tape::new();
        let o = tape.constant(out);
        let loss = self.attach_loss(&mut tape, o, targets)?;
        Ok(tape.value(loss).data()[0].as_f64())
    }
}
