//! Low-rank adapter with a trainable per-rank score vector.
//!
//! The adapted map is
//!
//! ```text
//! y = W0·x + scale · B · (softmax(logits) ⊙_rows A) · x
//! ```
//!
//! where `⊙_rows` multiplies row `i` of `A` by the `i`-th normalized score.
//! Scores are stored as raw logits; the softmax is part of the forward graph
//! so gradients reach the logits through the normalization. An adapter built
//! with [`LoraAdapter::without_scores`] drops the score vector and computes
//! the textbook `W0·x + scale·B·A·x`.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax, Scalar, Tensor};

/// Which trainable tensor of an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    /// `d × r`; rank `i` is column `i`.
    B,
    /// `r × k`; rank `i` is row `i`.
    A,
    /// Length-`r` raw score logits.
    Logits,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::B, Factor::A, Factor::Logits];
}

/// Importance measure for [`LoraAdapter::rank_importance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMode {
    /// `‖b_i a_iᵀ‖_F`
    Frobenius,
    /// `s_i · ‖b_i a_iᵀ‖_F`
    FrobeniusScored,
    /// `softmax(logits)_i`
    Score,
}

impl ImportanceMode {
    pub const ALL: [ImportanceMode; 3] = [
        ImportanceMode::Frobenius,
        ImportanceMode::FrobeniusScored,
        ImportanceMode::Score,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ImportanceMode::Frobenius => "frobenius",
            ImportanceMode::FrobeniusScored => "frobenius_scored",
            ImportanceMode::Score => "score",
        }
    }
}

impl std::str::FromStr for ImportanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" => Ok(ImportanceMode::Frobenius),
            "frobenius_scored" => Ok(ImportanceMode::FrobeniusScored),
            "score" => Ok(ImportanceMode::Score),
            other => Err(Error::config(format!("unknown importance mode `{other}`"))),
        }
    }
}

/// One rank's share of the adapter: column `i` of `B`, row `i` of `A` and
/// the normalized score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSlice<T: Scalar = f64> {
    pub index: usize,
    pub b: Tensor<T>,
    pub a: Tensor<T>,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Scalar = f64> {
    base: Tensor<T>,
    b: Tensor<T>,
    a: Tensor<T>,
    logits: Tensor<T>,
    scale: T,
    scored: bool,
    seed: u64,
}

/// Tape handles produced by [`LoraAdapter::forward_on`].
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub b: Var,
    pub a: Var,
    /// `None` when the adapter has no score vector or scores are frozen.
    pub logits: Option<Var>,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Wraps a frozen `d × k` base weight with a rank-`rank` adapter:
    /// `B = 0`, `A ~ N(0, init_std²)` from `seed`, all score logits zero.
    pub fn new(base: Tensor<T>, rank: usize, init_std: T, seed: u64) -> Result<Self> {
        if base.ndim() != 2 {
            return Err(Error::config(format!(
                "base weight must be a matrix, got shape {:?}",
                base.shape()
            )));
        }
        let (d, k) = (base.rows(), base.cols());
        if rank == 0 || d == 0 || k == 0 {
            return Err(Error::config("d, k and r must all be at least 1"));
        }
        if rank > d.min(k) {
            return Err(Error::config(format!(
                "rank {rank} exceeds min(d, k) = {}",
                d.min(k)
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[rank, k], init_std, &mut rng);
        Ok(Self {
            base,
            b: Tensor::zeros(&[d, rank]),
            a,
            logits: Tensor::zeros(&[rank]),
            scale: T::one(),
            scored: true,
            seed,
        })
    }

    /// Adapter over a zero base weight.
    pub fn init(d: usize, k: usize, rank: usize, seed: u64, init_std: T) -> Result<Self> {
        Self::new(Tensor::zeros(&[d, k]), rank, init_std, seed)
    }

    pub fn with_scale(mut self, scale: T) -> Self {
        self.scale = scale;
        self
    }

    /// Plain LoRA: no score vector in the forward pass.
    pub fn without_scores(mut self) -> Self {
        self.scored = false;
        self
    }

    /// Reassembles an adapter from stored parts (checkpoint loading).
    pub fn from_parts(
        base: Tensor<T>,
        b: Tensor<T>,
        a: Tensor<T>,
        logits: Tensor<T>,
        scale: T,
        scored: bool,
        seed: u64,
    ) -> Result<Self> {
        let ok = base.ndim() == 2
            && b.ndim() == 2
            && a.ndim() == 2
            && logits.ndim() == 1
            && b.rows() == base.rows()
            && a.cols() == base.cols()
            && b.cols() == a.rows()
            && a.rows() == logits.len();
        if !ok {
            return Err(Error::Dimension {
                op: "adapter parts",
                lhs: [b.shape(), a.shape()].concat(),
                rhs: [base.shape(), logits.shape()].concat(),
            });
        }
        Ok(Self {
            base,
            b,
            a,
            logits,
            scale,
            scored,
            seed,
        })
    }

    pub fn rank(&self) -> usize {
        self.logits.len()
    }

    pub fn out_dim(&self) -> usize {
        self.base.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.base.cols()
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn is_scored(&self) -> bool {
        self.scored
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base(&self) -> &Tensor<T> {
        &self.base
    }

    pub fn factor(&self, which: Factor) -> &Tensor<T> {
        match which {
            Factor::B => &self.b,
            Factor::A => &self.a,
            Factor::Logits => &self.logits,
        }
    }

    /// Mutable access for the optimizer and rank surgery. The base weight has
    /// no mutable accessor.
    pub fn factor_mut(&mut self, which: Factor) -> &mut Tensor<T> {
        match which {
            Factor::B => &mut self.b,
            Factor::A => &mut self.a,
            Factor::Logits => &mut self.logits,
        }
    }

    /// `(B, A, logits)` borrowed mutably at once.
    pub fn factors_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.b, &mut self.a, &mut self.logits)
    }

    /// Normalized scores. Plain adapters keep zero logits, so this is uniform
    /// for them.
    pub fn scores(&self) -> Tensor<T> {
        softmax(&self.logits).expect("logits are finite")
    }

    /// Per-rank multipliers actually applied in the forward pass.
    fn rank_weights(&self) -> Tensor<T> {
        if self.scored {
            self.scores()
        } else {
            Tensor::full(&[self.rank()], T::one())
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() != 2 || x.rows() != self.in_dim() {
            return Err(Error::Dimension {
                op: "adapter forward",
                lhs: self.base.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `x` is `k × batch`.
    /// With `train_scores == false` the logits enter as a constant.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        train_scores: bool,
    ) -> Result<(Var, AdapterVars)> {
        self.check_input(tape.value(x))?;
        let base = tape.constant(self.base.clone());
        let base_out = tape.matmul(base, x)?;
        let b = tape.param(self.b.clone());
        let a = tape.param(self.a.clone());

        let (a_eff, logits) = if self.scored {
            let logits = if train_scores {
                tape.param(self.logits.clone())
            } else {
                tape.constant(self.logits.clone())
            };
            let s = tape.softmax(logits)?;
            let scaled = tape.scale_rows(a, s)?;
            (scaled, train_scores.then_some(logits))
        } else {
            (a, None)
        };

        let h = tape.matmul(a_eff, x)?;
        let branch = tape.matmul(b, h)?;
        let branch = tape.scale(branch, self.scale);
        let y = tape.add(base_out, branch)?;
        Ok((y, AdapterVars { b, a, logits }))
    }

    /// Value-only forward (no tape).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let h = self.a.scale_rows(&self.rank_weights())?.matmul(x)?;
        let branch = self.b.matmul(&h)?.scale(self.scale);
        self.base.matmul(x)?.add(&branch)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.rank() {
            return Err(Error::RankIndex {
                index: i,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    /// `b_i a_iᵀ`, times the rank's forward multiplier when `include_score`.
    pub fn delta_w(&self, i: usize, include_score: bool) -> Result<Tensor<T>> {
        self.check_index(i)?;
        let dw = Tensor::outer(&self.b.column(i), &self.a.row(i));
        if include_score {
            Ok(dw.scale(self.rank_weights().data()[i]))
        } else {
            Ok(dw)
        }
    }

    /// Full update `B·A` (no scores, no scale).
    pub fn delta_w_total(&self) -> Tensor<T> {
        self.b.matmul(&self.a).expect("factor shapes agree")
    }

    pub fn rank_importance(&self, mode: ImportanceMode) -> Tensor<T> {
        let scores = self.scores();
        let norms = || {
            (0..self.rank()).map(|i| {
                // ‖b aᵀ‖_F = ‖b‖·‖a‖
                self.b.column(i).l2_norm() * self.a.row(i).l2_norm()
            })
        };
        match mode {
            ImportanceMode::Frobenius => Tensor::vector(norms().collect()),
            ImportanceMode::FrobeniusScored => Tensor::vector(
                norms()
                    .zip(scores.data())
                    .map(|(n, &s)| n * s)
                    .collect(),
            ),
            ImportanceMode::Score => scores,
        }
    }

    /// Sets `b_i` and `a_i` to zero for every listed rank.
    pub fn zero_ranks(&mut self, indices: &BTreeSet<usize>) -> Result<()> {
        for &i in indices {
            self.check_index(i)?;
        }
        let zb = vec![T::zero(); self.out_dim()];
        let za = vec![T::zero(); self.in_dim()];
        for &i in indices {
            self.b.set_column(i, &zb)?;
            self.a.set_row(i, &za)?;
        }
        Ok(())
    }

    pub fn rank_slice(&self, i: usize) -> Result<RankSlice<T>> {
        self.check_index(i)?;
        Ok(RankSlice {
            index: i,
            b: self.b.column(i),
            a: self.a.row(i),
            score: self.scores().data()[i],
        })
    }

    pub fn rank_slices(&self) -> Vec<RankSlice<T>> {
        (0..self.rank())
            .map(|i| self.rank_slice(i).expect("index in range"))
            .collect()
    }

    /// Rebuilds `(B, A)` from a full set of slices (any order).
    pub fn assemble_factors(slices: &[RankSlice<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
        let r = slices.len();
        let first = slices
            .first()
            .ok_or_else(|| Error::contract("no slices to assemble"))?;
        let (d, k) = (first.b.len(), first.a.len());
        let mut b = Tensor::zeros(&[d, r]);
        let mut a = Tensor::zeros(&[r, k]);
        let mut seen = vec![false; r];
        for s in slices {
            if s.index >= r || seen[s.index] {
                return Err(Error::contract(format!("bad slice index {}", s.index)));
            }
            seen[s.index] = true;
            b.set_column(s.index, s.b.data())?;
            a.set_row(s.index, s.a.data())?;
        }
        Ok((b, a))
    }

    /// Overwrites rank `i` with the given factor vectors.
    pub fn set_rank(&mut self, i: usize, b: &[T], a: &[T]) -> Result<()> {
        self.check_index(i)?;
        self.b.set_column(i, b)?;
        self.a.set_row(i, a)
    }

    /// Folds the scores into `A` (`A' = s ⊙ A`), giving a plain low-rank
    /// triple for inference.
    pub fn merge(&self) -> MergedAdapter<T> {
        MergedAdapter {
            base: self.base.clone(),
            b: self.b.clone(),
            a: self
                .a
                .scale_rows(&self.rank_weights())
                .expect("score length equals rank"),
            scale: self.scale,
        }
    }
}

/// Score-free adapter produced by [`LoraAdapter::merge`].
#[derive(Debug, Clone, PartialEq)]
pub struct MergedAdapter<T: Scalar = f64> {
    pub base: Tensor<T>,
    pub b: Tensor<T>,
    pub a: Tensor<T>,
    pub scale: T,
}

impl<T: Scalar> MergedAdapter<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let branch = self.b.matmul(&self.a.matmul(x)?)?.scale(self.scale);
        self.base.matmul(x)?.add(&branch)
    }

    /// Dense `W0 + scale·B·A'`.
    pub fn dense_weight(&self) -> Result<Tensor<T>> {
        self.base.add(&self.b.matmul(&self.a)?.scale(self.scale))
    }
}
