//! Dense row-major `f64` tensors.
//!
//! Every constructor and arithmetic operation rejects NaN and infinities, so a
//! `Tensor` that exists is always finite.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Right-hand side of [`Tensor::binary`].
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    MulScalar,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(data: &[f64], context: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::DataLength { shape, len: data.len() });
        }
        check_finite(&data, "tensor construction")?;
        Ok(Self { shape, data })
    }

    /// Rank-1 tensor holding `data`.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    /// Build a rank-2 tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Build a tensor with the same shape from new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.shape.clone(), data)
    }

    /// Apply `f` elementwise, rejecting non-finite results.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data, "map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn binary(&self, op: BinaryOp, rhs: Operand<'_>) -> Result<Self> {
        let data: Vec<f64> = match (op, rhs) {
            (BinaryOp::Add | BinaryOp::Sub, Operand::Tensor(b)) => {
                if self.shape != b.shape {
                    return Err(Error::shape("elementwise operation", &self.shape, &b.shape));
                }
                if op == BinaryOp::Add {
                    self.data.iter().zip(&b.data).map(|(x, y)| x + y).collect()
                } else {
                    self.data.iter().zip(&b.data).map(|(x, y)| x - y).collect()
                }
            }
            (BinaryOp::MulScalar, Operand::Scalar(s)) => self.data.iter().map(|x| x * s).collect(),
            (BinaryOp::MulScalar, Operand::Tensor(_)) => {
                return Err(Error::InvalidConfig("mul_scalar requires a scalar operand".into()))
            }
            (_, Operand::Scalar(_)) => return Err(Error::InvalidConfig("add/sub require a tensor operand".into())),
        };
        check_finite(&data, "elementwise operation")?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.binary(BinaryOp::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.binary(BinaryOp::Sub, Operand::Tensor(other))
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Self> {
        self.binary(BinaryOp::MulScalar, Operand::Scalar(s))
    }

    /// `self + weight * other`, computed in one pass.
    pub fn axpy(&self, weight: f64, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", &self.shape, &other.shape));
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(x, y)| x + weight * y).collect();
        check_finite(&data, "axpy")?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape("matmul (rank-2 operands)", &[0, 0], &other.shape));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape("matmul inner dimension", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, b) in row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite(&out, "matmul")?;
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn add_sub_scale() {
        assert_eq!(v(&[1.0, 2.0]).add(&v(&[3.0, 4.0])).unwrap().data(), &[4.0, 6.0]);
        let x = v(&[0.25, -7.0, 3.5]);
        assert!(x.sub(&x).unwrap().is_zero());
        assert_eq!(v(&[1.0, -2.0]).mul_scalar(0.0).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_shape_mismatch_and_non_finite() {
        assert!(matches!(
            v(&[1.0]).add(&v(&[1.0, 2.0])),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(v(&[f64::MAX]).mul_scalar(10.0), Err(Error::NonFinite(_))));
        assert!(Tensor::vector(vec![f64::NAN]).is_err());
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::DataLength { .. })
        ));
    }

    #[test]
    fn rank_zero_holds_one_element() {
        let s = Tensor::scalar(3.0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.rank(), 0);
    }

    #[test]
    fn matmul_examples() {
        let col = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let row = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(col.matmul(&row).unwrap().data(), &[3.0, 4.0, 6.0, 8.0]);

        let m = Tensor::from_rows(&[vec![0.5, -1.5], vec![2.0, 9.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.5 - 2.0).collect()).unwrap();
        let b = Tensor::new(vec![4, 2], (0..8).map(|i| 1.0 - i as f64 * 0.25).collect()).unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert_eq!(c.data()[i * 2 + j], acc);
            }
        }
        assert!(a.matmul(&a).is_err());
    }
}
