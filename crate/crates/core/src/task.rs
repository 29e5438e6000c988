//! Synthetic teacher–student tasks with a planted low-rank update.
//!
//! The teacher is `W0 + ΔW*` with `ΔW* = Σ_j σ_j u_j v_jᵀ` built from random
//! orthonormal `u`, `v` and a caller-chosen spectrum `σ`. A sharply decaying
//! spectrum makes a few rank directions matter far more than the rest; a flat
//! one is the control.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LossKind, Targets};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Output dimension.
    pub d: usize,
    /// Input dimension.
    pub k: usize,
    /// Planted singular values, non-increasing and positive.
    pub spectrum: Vec<f64>,
    pub n_train: usize,
    pub n_eval: usize,
    /// Std of Gaussian label noise (regression) or logit noise before the
    /// argmax (classification).
    pub noise: f64,
    pub loss: LossKind,
    /// Number of chained linear layers, each with its own planted update.
    /// More than one requires `d == k`.
    pub layers: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            d: 32,
            k: 32,
            spectrum: vec![4.0, 2.0, 1.0, 0.5, 0.25, 0.05, 0.05, 0.05],
            n_train: 512,
            n_eval: 512,
            noise: 0.05,
            loss: LossKind::SquaredError,
            layers: 1,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 {
            return Err(Error::config("task dimensions must be positive"));
        }
        if self.spectrum.len() > self.d.min(self.k) {
            return Err(Error::config(format!(
                "planted rank {} exceeds min(d, k) = {}",
                self.spectrum.len(),
                self.d.min(self.k)
            )));
        }
        if self.spectrum.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("spectrum values must be positive and finite"));
        }
        if self.spectrum.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("spectrum must be non-increasing"));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::config("train and eval splits must be non-empty"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be non-negative"));
        }
        if self.layers == 0 {
            return Err(Error::config("task needs at least one layer"));
        }
        if self.layers > 1 && self.d != self.k {
            return Err(Error::config("chained layers require d == k"));
        }
        Ok(())
    }

    pub fn planted_energy(&self) -> f64 {
        self.spectrum.iter().map(|s| s * s).sum()
    }
}

/// Generated data. Stored in double precision; cast per run.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudentTask {
    pub config: TaskConfig,
    pub seed: u64,
    /// Frozen base weights, one per layer.
    pub bases: Vec<Tensor<f64>>,
    /// Planted updates `ΔW*`, one per layer.
    pub planted: Vec<Tensor<f64>>,
    pub x_train: Tensor<f64>,
    pub y_train: Targets<f64>,
    pub x_eval: Tensor<f64>,
    pub y_eval: Targets<f64>,
    /// SHA-256 over the generated tensors.
    pub fingerprint: String,
}

/// Split of a task cast to the training precision.
#[derive(Debug, Clone)]
pub struct TaskData<T: Scalar> {
    pub x_train: Tensor<T>,
    pub y_train: Targets<T>,
    pub x_eval: Tensor<T>,
    pub y_eval: Targets<T>,
}

fn cast_targets<T: Scalar>(t: &Targets<f64>) -> Targets<T> {
    match t {
        Targets::Regression(y) => Targets::Regression(y.cast()),
        Targets::Classes(c) => Targets::Classes(c.clone()),
    }
}

/// `n × q` matrix with orthonormal columns.
fn random_orthonormal(n: usize, q: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = Tensor::<f64>::randn(&[n, q], 1.0, rng);
    DMatrix::from_row_slice(n, q, g.data()).qr().q()
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor<f64> {
    let (r, c) = m.shape();
    let data = (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect();
    Tensor::matrix(r, c, data).expect("sizes agree")
}

fn argmax_columns(t: &Tensor<f64>) -> Vec<usize> {
    (0..t.cols())
        .map(|j| {
            let col = t.column(j);
            col.data()
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn gen_teacher_student(config: &TaskConfig, seed: u64) -> Result<TeacherStudentTask> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, k) = (config.d, config.k);
    let q = config.spectrum.len();

    let mut bases = Vec::with_capacity(config.layers);
    let mut planted = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let base = Tensor::randn(&[d, k], 1.0 / (k as f64).sqrt(), &mut rng);
        let u = random_orthonormal(d, q, &mut rng);
        let v = random_orthonormal(k, q, &mut rng);
        let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(config.spectrum.clone()));
        bases.push(base);
        planted.push(to_tensor(&(u * sigma * v.transpose())));
    }

    let teacher: Vec<Tensor<f64>> = bases
        .iter()
        .zip(&planted)
        .map(|(b, p)| b.add(p))
        .collect::<Result<_>>()?;

    let mut make_split = |n: usize| -> Result<(Tensor<f64>, Targets<f64>)> {
        let x = Tensor::randn(&[k, n], 1.0, &mut rng);
        let mut h = x.clone();
        for w in &teacher {
            h = w.matmul(&h)?;
        }
        let noise = Tensor::randn(&[d, n], config.noise, &mut rng);
        let noisy = h.add(&noise)?;
        let y = match config.loss {
            LossKind::SquaredError => Targets::Regression(noisy),
            LossKind::CrossEntropy => Targets::Classes(argmax_columns(&noisy)),
        };
        Ok((x, y))
    };
    let (x_train, y_train) = make_split(config.n_train)?;
    let (x_eval, y_eval) = make_split(config.n_eval)?;

    let mut hasher = Sha256::new();
    let feed = |h: &mut Sha256, t: &Tensor<f64>| {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    };
    for t in bases.iter().chain(&planted).chain([&x_train, &x_eval]) {
        feed(&mut hasher, t);
    }
    for y in [&y_train, &y_eval] {
        match y {
            Targets::Regression(t) => feed(&mut hasher, t),
            Targets::Classes(c) => c
                .iter()
                .for_each(|&i| hasher.update((i as u64).to_le_bytes())),
        }
    }
    let fingerprint = hex::encode(hasher.finalize());

    Ok(TeacherStudentTask {
        config: config.clone(),
        seed,
        bases,
        planted,
        x_train,
        y_train,
        x_eval,
        y_eval,
        fingerprint,
    })
}

impl TeacherStudentTask {
    pub fn data<T: Scalar>(&self) -> TaskData<T> {
        TaskData {
            x_train: self.x_train.cast(),
            y_train: cast_targets(&self.y_train),
            x_eval: self.x_eval.cast(),
            y_eval: cast_targets(&self.y_eval),
        }
    }

    /// Teacher weights `W0 + ΔW*` per layer.
    pub fn teacher_weights(&self) -> Result<Vec<Tensor<f64>>> {
        self.bases.iter().zip(&self.planted).map(|(b, p)| b.add(p)).collect()
    }
}
