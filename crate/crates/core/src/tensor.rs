//! Dense row-major tensors.
//!
//! [`Tensor`] is an immutable value: its buffer is reference counted, so
//! clones are cheap and tensors can be shared freely across threads.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)` so that a flat
/// index decomposes as `(o * extent + i) * inner + j`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor whose shape is known to match `data`. Panics otherwise.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_parts(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        std::sync::Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Left-to-right sum over the flat buffer.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, &x| acc.max(x.abs()))
    }

    /// `(min, max)` over all elements, `None` when empty.
    pub fn min_max(&self) -> Option<(f64, f64)> {
        let first = *self.data.first()?;
        Some(
            self.data
                .iter()
                .fold((first, first), |(lo, hi), &x| (lo.min(x), hi.max(x))),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Population mean and variance along `axis`; the axis is removed from
    /// the output shape.
    pub fn moments(&self, axis: usize) -> Result<(Tensor, Tensor)> {
        if axis >= self.rank() {
            return Err(Error::contract(format!(
                "moments axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let (outer, n, inner) = split_axis(&self.shape, axis);
        if n == 0 {
            return Err(Error::Degenerate(format!(
                "moments over empty axis {axis} of shape {:?}",
                self.shape
            )));
        }
        let mut mean = vec![0.0; outer * inner];
        let mut var = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut s = 0.0;
                for i in 0..n {
                    s += self.data[(o * n + i) * inner + j];
                }
                let m = s / n as f64;
                let mut v = 0.0;
                for i in 0..n {
                    let d = self.data[(o * n + i) * inner + j] - m;
                    v += d * d;
                }
                mean[o * inner + j] = m;
                var[o * inner + j] = v / n as f64;
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok((
            Self::from_parts(shape.clone(), mean),
            Self::from_parts(shape, var),
        ))
    }

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n, p) = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![0.0; m * p];
        crate::autograd::kernels::gemm_nn(&self.data, &other.data, &mut out, m, n, p);
        Ok(Self::from_parts(vec![m, p], out))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract(format!(
                "transpose2 on rank-{} tensor",
                self.rank()
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Self::from_parts(
            vec![c, r],
            crate::autograd::kernels::transpose(&self.data, r, c),
        ))
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs())))
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// Integer tensor holding quantized values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "int_tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(IntTensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.reshape(&[3, 2]).unwrap().len(), 6);
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let b = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);
        let r = Tensor::matrix(&[&[1.0, 2.0]])
            .matmul(&Tensor::matrix(&[&[3.0], &[4.0]]))
            .unwrap();
        assert_eq!(r.data(), &[11.0]);
        let err = Tensor::zeros(&[1, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn moments_examples() {
        let (m, v) = Tensor::vector(vec![1.0, 2.0, 3.0]).moments(0).unwrap();
        assert!((m.item().unwrap() - 2.0).abs() < 1e-15);
        assert!((v.item().unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let (m, v) = Tensor::vector(vec![4.5; 3]).moments(0).unwrap();
        assert_eq!((m.item().unwrap(), v.item().unwrap()), (4.5, 0.0));

        let (m, v) = Tensor::vector(vec![-7.0]).moments(0).unwrap();
        assert_eq!((m.item().unwrap(), v.item().unwrap()), (-7.0, 0.0));

        assert!(matches!(
            Tensor::zeros(&[2, 0]).moments(1),
            Err(Error::Degenerate(_))
        ));
        assert!(Tensor::zeros(&[2]).moments(1).is_err());
    }

    #[test]
    fn moments_along_middle_axis() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap();
        let (m, v) = t.moments(1).unwrap();
        assert_eq!(m.shape(), &[1, 2]);
        assert_eq!(m.data(), &[2.0, 20.0]);
        assert_eq!(v.data(), &[1.0, 100.0]);
    }
}
