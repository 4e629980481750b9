//! Dense rank-4 tensors (batch, channels, height, width) in row-major order.
//!
//! The whole numeric core is generic over [`Scalar`] so that tests and
//! gradient checks can run in `f64` while training runs in `f32`.

use std::fmt;

use crate::error::AdError;

/// Element type of the numeric core. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + std::iter::Sum
    + Default
    + Copy
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C <- alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    ///
    /// # Safety
    /// Pointers must be valid for the given dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(dst: &mut Vec<u8>, src: &[Self]);
    fn read_le(src: &[u8]) -> Vec<Self>;
}

/// On-disk element type tag used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(dst: &mut Vec<u8>, src: &[Self]) {
        for v in src {
            dst.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(src: &[u8]) -> Vec<Self> {
        src.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(dst: &mut Vec<u8>, src: &[Self]) {
        for v in src {
            dst.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(src: &[u8]) -> Vec<Self> {
        src.chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect()
    }
}

/// Shape of a rank-4 tensor: (batch, channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    /// Shape of a scalar value.
    pub fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of element (n, c, y, x).
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + y) * self.0[3] + x
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// Spatial extent (h, w).
    pub fn hw(&self) -> (usize, usize) {
        (self.0[2], self.0[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

/// A dense rank-4 value. Gradients live on the tape and in the parameter
/// store, not on the tensor itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub shape: Shape,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, data: Vec<S>) -> Result<Self, AdError> {
        if data.len() != shape.len() {
            return Err(AdError::InvalidArgument {
                op: "tensor",
                msg: format!(
                    "data length {} does not match shape {} ({} elements)",
                    data.len(),
                    shape,
                    shape.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![S::zero(); shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: S) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n() {
            for c in 0..shape.c() {
                for y in 0..shape.h() {
                    for x in 0..shape.w() {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.shape.at(n, c, y, x)]
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> S {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    /// Lossless for f64 -> f64 and f32 -> f64; rounds for f64 -> f32.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S + Sync) -> Tensor<S> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_indexing_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.len(), 120);
        assert_eq!(s.at(0, 0, 0, 0), 0);
        assert_eq!(s.at(0, 0, 0, 1), 1);
        assert_eq!(s.at(0, 0, 1, 0), 5);
        assert_eq!(s.at(0, 1, 0, 0), 20);
        assert_eq!(s.at(1, 0, 0, 0), 60);
        assert_eq!(s.at(1, 2, 3, 4), 119);
    }

    #[test]
    fn tensor_rejects_wrong_length() {
        let err = Tensor::<f64>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]);
        assert!(err.is_err());
    }

    #[test]
    fn le_roundtrip() {
        let xs = vec![1.5f32, -2.25, 0.0, f32::MIN_POSITIVE];
        let mut buf = Vec::new();
        f32::write_le(&mut buf, &xs);
        assert_eq!(f32::read_le(&buf), xs);

        let ys = vec![1.5f64, -2.25, 1e-300];
        let mut buf = Vec::new();
        f64::write_le(&mut buf, &ys);
        assert_eq!(f64::read_le(&buf), ys);
    }
}
