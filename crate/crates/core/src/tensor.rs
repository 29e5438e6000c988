//! Dense row-major tensors.
//!
//! Only rank-0 (scalar), rank-1 and rank-2 shapes are used by the rest of the
//! crate. Values are immutable through the public arithmetic API; the
//! optimizer and the rank controller mutate storage in place through
//! [`Tensor::data_mut`] and the row/column setters.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64_lossy(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let z: f64 = StandardNormal.sample(rng);
        Self::from_f64_lossy(z)
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64_lossy(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => f.write_str("f32"),
            Precision::F64 => f.write_str("f64"),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor construction",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if shape.len() > 2 {
            return Err(Error::contract(format!(
                "only rank <= 2 tensors are supported, got shape {shape:?}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: T, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::sample_standard_normal(rng) * std)
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// In-place access to storage. Used by the optimizer update and by rank
    /// surgery; everything else treats tensors as values.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.shape[1] + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        let cols = self.shape[1];
        self.data[row * cols + col] = value;
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = self.expect_matrix("matmul")?;
        let (n2, p) = rhs.expect_matrix("matmul")?;
        if n != n2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let out_row = &mut out[i * p..(i + 1) * p];
            for l in 0..n {
                let a = self.data[i * n + l];
                if a == T::zero() {
                    continue;
                }
                let rhs_row = &rhs.data[l * p..(l + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, p],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = self.expect_matrix("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    fn zip_with(&self, rhs: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Self> {
        self.zip_with(rhs, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, rhs: &Tensor<T>) -> Result<T> {
        let d = self.sub(rhs)?;
        Ok(d.data.iter().fold(T::zero(), |acc, v| acc.max(v.abs())))
    }

    /// Scales row `i` of a matrix by `v[i]`.
    pub fn scale_rows(&self, v: &Tensor<T>) -> Result<Self> {
        let (m, n) = self.expect_matrix("scale_rows")?;
        if v.shape != [m] {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for (i, row) in out.chunks_mut(n).enumerate() {
            let s = v.data[i];
            row.iter_mut().for_each(|x| *x = *x * s);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn row(&self, i: usize) -> Tensor<T> {
        let n = self.shape[1];
        Tensor::vector(self.data[i * n..(i + 1) * n].to_vec())
    }

    pub fn column(&self, j: usize) -> Tensor<T> {
        let (m, n) = (self.shape[0], self.shape[1]);
        Tensor::vector((0..m).map(|i| self.data[i * n + j]).collect())
    }

    pub fn set_row(&mut self, i: usize, values: &[T]) -> Result<()> {
        let n = self.shape[1];
        if values.len() != n {
            return Err(Error::Dimension {
                op: "set_row",
                lhs: self.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        self.data[i * n..(i + 1) * n].copy_from_slice(values);
        Ok(())
    }

    pub fn set_column(&mut self, j: usize, values: &[T]) -> Result<()> {
        let (m, n) = (self.shape[0], self.shape[1]);
        if values.len() != m {
            return Err(Error::Dimension {
                op: "set_column",
                lhs: self.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        for (i, &v) in values.iter().enumerate() {
            self.data[i * n + j] = v;
        }
        Ok(())
    }

    /// Outer product `u vᵀ` of two vectors.
    pub fn outer(u: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
        let (m, n) = (u.len(), v.len());
        let mut data = Vec::with_capacity(m * n);
        for &a in &u.data {
            data.extend(v.data.iter().map(|&b| a * b));
        }
        Tensor {
            shape: vec![m, n],
            data,
        }
    }

    /// Euclidean norm of the flattened storage.
    pub fn l2_norm(&self) -> T {
        let max = self.data.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
        if max == T::zero() || !max.is_finite() {
            return max;
        }
        let sum = self
            .data
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v / max) * (v / max));
        sum.sqrt() * max
    }

    /// Frobenius norm of a matrix. Overflow is reported rather than returned
    /// as infinity.
    pub fn frobenius_norm(&self) -> Result<T> {
        self.expect_matrix("frobenius_norm")?;
        let n = self.l2_norm();
        if n.is_finite() {
            Ok(n)
        } else {
            Err(Error::NonFinite("frobenius_norm"))
        }
    }

    /// Bitwise comparison of shape and storage. Distinguishes `0.0` from
    /// `-0.0`, unlike `==`.
    pub fn bitwise_eq(&self, rhs: &Tensor<T>) -> bool {
        self.shape == rhs.shape
            && self
                .data
                .iter()
                .zip(&rhs.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

/// Numerically stable softmax of a vector (max-subtracted).
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.ndim() != 1 {
        return Err(Error::Dimension {
            op: "softmax",
            lhs: logits.shape().to_vec(),
            rhs: vec![0],
        });
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = logits
        .data()
        .iter()
        .fold(T::neg_infinity(), |acc, &v| acc.max(v));
    let exps: Vec<T> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |acc, &v| acc + v);
    Ok(Tensor::vector(exps.into_iter().map(|e| e / total).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_product() {
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
        let v = Tensor::from_rows(&[&[5.0], &[6.0]]);
        let p = m.matmul(&v).unwrap();
        assert_eq!(p.data(), &[17.0, 39.0]);
        assert_eq!(p.shape(), &[2, 1]);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let mut rng = rand::rng();
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let any = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(z.matmul(&any).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0f64; 4])).unwrap();
        assert_eq!(s.data(), &[0.25; 4]);

        let c = 3.7f64;
        let s = softmax(&Tensor::vector(vec![c, c + 2f64.ln()])).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-12);

        // direct formula as oracle
        let z: f64 = (0..3).map(|i| (i as f64).exp()).sum();
        let s = softmax(&Tensor::vector(vec![0.0, 1.0, 2.0])).unwrap();
        for i in 0..3 {
            assert!((s.data()[i] - (i as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&Tensor::vector(vec![0.0, f64::NAN])),
            Err(Error::NonFinite(_))
        ));
        assert!(softmax(&Tensor::vector(vec![f64::INFINITY])).is_err());
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(
            Tensor::from_rows(&[&[3.0f64, 4.0]]).frobenius_norm().unwrap(),
            5.0
        );
        assert_eq!(Tensor::<f64>::zeros(&[3, 2]).frobenius_norm().unwrap(), 0.0);
        let b = Tensor::vector(vec![1.0f64, -2.0, 2.0]);
        let a = Tensor::vector(vec![0.5f64, 1.5]);
        let n = Tensor::outer(&b, &a).frobenius_norm().unwrap();
        assert!((n - b.l2_norm() * a.l2_norm()).abs() < 1e-12);
    }

    #[test]
    fn frobenius_handles_large_values_and_overflow() {
        let big = Tensor::from_rows(&[&[3e200f64, 4e200]]);
        assert!((big.frobenius_norm().unwrap() / 5e200 - 1.0).abs() < 1e-12);
        let inf = Tensor::from_rows(&[&[f64::INFINITY]]);
        assert!(inf.frobenius_norm().is_err());
        assert!(Tensor::vector(vec![1.0f64]).frobenius_norm().is_err());
    }

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2, 1], vec![0.0; 4]).is_err());
        assert_eq!(Tensor::<f64>::scalar(1.0).len(), 1);
    }

    #[test]
    fn rows_and_columns_round_trip() {
        let mut m = Tensor::from_rows(&[&[1.0f64, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(m.column(1).data(), &[2.0, 5.0]);
        assert_eq!(m.row(1).data(), &[4.0, 5.0, 6.0]);
        m.set_column(0, &[9.0, 8.0]).unwrap();
        m.set_row(1, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.data(), &[9.0, 2.0, 3.0, 0.0, 0.0, 1.0]);
        assert!(m.set_row(0, &[1.0]).is_err());
    }

    #[test]
    fn bitwise_eq_distinguishes_signed_zero() {
        let a = Tensor::vector(vec![0.0f64]);
        let b = Tensor::vector(vec![-0.0f64]);
        assert_eq!(a, b);
        assert!(!a.bitwise_eq(&b));
    }
}
