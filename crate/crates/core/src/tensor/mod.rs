//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain shape-plus-data value; differentiable computation
//! happens on a [`Graph`] tape that records every operation and replays it
//! in reverse for gradients. Precision is fixed per tensor at creation:
//! `f32` for training throughput, `f64` for every oracle comparison.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{grad_check, grad_check_directions, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{Binding, ParamId, ParamStore, Parameter};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
}

/// Storage precision of a tensor, fixed at creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Width flag as stored in checkpoint files.
    pub fn bit_flag(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bit_flag(flag: u8) -> Option<Self> {
        match flag {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64` only.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// C += alpha * op(A) * op(B) + beta-scaled C, row-major contiguous
    /// operands with optional logical transposition.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! strides_for {
    ($stored_cols:expr, $trans:expr) => {
        // (row, col) strides of a row-major matrix, or of its logical
        // transpose: transposing swaps which logical axis walks contiguously.
        if $trans {
            (1isize, $stored_cols as isize)
        } else {
            ($stored_cols as isize, 1isize)
        }
    };
}

impl Element for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = strides_for!(if a_trans { m } else { k }, a_trans);
        let (rsb, csb) = strides_for!(if b_trans { k } else { n }, b_trans);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = strides_for!(if a_trans { m } else { k }, a_trans);
        let (rsb, csb) = strides_for!(if b_trans { k } else { n }, b_trans);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Dense N-dimensional array, contiguous row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Element by multi-index; test and small-scale use.
    pub fn at(&self, index: &[usize]) -> E {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest value along the last axis, lowest index on ties.
    pub fn argmax_last_axis(&self) -> Vec<usize> {
        let k = *self.shape.last().expect("argmax needs rank >= 1");
        self.data
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate().skip(1) {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { len: 5, .. }));
    }

    #[test]
    fn at_uses_row_major_order() {
        let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![0.5, 0.5, 0.1, 0.9]).unwrap();
        assert_eq!(t.argmax_last_axis(), vec![0, 1]);
    }

    #[test]
    fn gemm_matches_hand_product() {
        // 2x3 * 3x2
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = vec![0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_views() {
        // a stored as 3x2, used as aT (2x3); same product as above.
        let a_t = vec![1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = vec![0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a_t, true, &b, false, 0.0, &mut c);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }
}
