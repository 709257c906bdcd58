//! Dense row-major tensors over a generic scalar.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;

/// Dense tensor with row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: S, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| S::standard_normal(rng) * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> S {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: S) {
        let c = self.cols();
        self.data[row * c + col] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Tensor<S> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Tensor<S> {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Tensor<S>) -> S {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Standard matrix product `self (p x q) * other (q x r)`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (p, q) = self.dims2()?;
        let (q2, r) = other.dims2()?;
        if q != q2 {
            return Err(Error::shape(format!(
                "matmul: inner dims {} vs {}",
                q, q2
            )));
        }
        let mut out = vec![S::zero(); p * r];
        for i in 0..p {
            for k in 0..q {
                let a = self.data[i * q + k];
                if a == S::zero() {
                    continue;
                }
                let brow = &other.data[k * r..(k + 1) * r];
                let orow = &mut out[i * r..(i + 1) * r];
                for j in 0..r {
                    orow[j] = orow[j] + a * brow[j];
                }
            }
        }
        Tensor::new(vec![p, r], out)
    }

    /// `self (p x q) * other^T (r x q) -> (p x r)`.
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (p, q) = self.dims2()?;
        let (r, q2) = other.dims2()?;
        if q != q2 {
            return Err(Error::shape(format!(
                "matmul_nt: inner dims {} vs {}",
                q, q2
            )));
        }
        let mut out = vec![S::zero(); p * r];
        for i in 0..p {
            let arow = &self.data[i * q..(i + 1) * q];
            for j in 0..r {
                let brow = &other.data[j * q..(j + 1) * q];
                let mut acc = S::zero();
                for k in 0..q {
                    acc = acc + arow[k] * brow[k];
                }
                out[i * r + j] = acc;
            }
        }
        Tensor::new(vec![p, r], out)
    }

    /// `self^T (q x p) * other (q x r) -> (p x r)` where self is (q x p).
    pub fn matmul_tn(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (q, p) = self.dims2()?;
        let (q2, r) = other.dims2()?;
        if q != q2 {
            return Err(Error::shape(format!(
                "matmul_tn: inner dims {} vs {}",
                q, q2
            )));
        }
        let mut out = vec![S::zero(); p * r];
        for k in 0..q {
            let arow = &self.data[k * p..(k + 1) * p];
            let brow = &other.data[k * r..(k + 1) * r];
            for i in 0..p {
                let a = arow[i];
                if a == S::zero() {
                    continue;
                }
                let orow = &mut out[i * r..(i + 1) * r];
                for j in 0..r {
                    orow[j] = orow[j] + a * brow[j];
                }
            }
        }
        Tensor::new(vec![p, r], out)
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        let (p, q) = self.dims2()?;
        let mut out = vec![S::zero(); p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = self.data[i * q + j];
            }
        }
        Tensor::new(vec![q, p], out)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [a, b] => Ok((*a, *b)),
            [a] => Ok((1, *a)),
            s => Err(Error::shape(format!("expected matrix, got shape {:?}", s))),
        }
    }
}
