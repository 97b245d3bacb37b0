//! Dense row-major tensors and the scalar abstraction shared by the
//! networks. Training runs in `f32`; gradient checks run the very same code
//! paths in `f64`.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type usable by the autodiff engine.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    /// Sixteen lanes of this type, for the convolution kernels.
    type Lanes: Lanes<Self>;

    /// `c = a · b + beta · c` where `a` is `m×k`, `b` is `k×n` (arbitrary
    /// strides) and `c` is a contiguous row-major `m×n` buffer.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    a: (isize, isize),
    b_len: usize,
    b: (isize, isize),
    c_len: usize,
) {
    let last = |rows: usize, cols: usize, s: (isize, isize)| -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows as isize - 1) as usize * s.0 as usize + (cols as isize - 1) as usize * s.1 as usize
    };
    assert!(a.0 >= 0 && a.1 >= 0 && b.0 >= 0 && b.1 >= 0);
    assert!(
        m * k == 0 || last(m, k, a) < a_len,
        "gemm: lhs out of bounds"
    );
    assert!(
        k * n == 0 || last(k, n, b) < b_len,
        "gemm: rhs out of bounds"
    );
    assert!(c_len >= m * n, "gemm: output too small");
}

impl Scalar for f32 {
    type Lanes = wide::f32x16;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm_bounds(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len());
        // SAFETY: every index touched by the kernel was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    type Lanes = F64x16;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm_bounds(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len());
        // SAFETY: every index touched by the kernel was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Width of [`Lanes`].
pub const LANES: usize = 16;

/// A short vector of [`LANES`] scalars.
pub trait Lanes<T>: Copy {
    fn zero() -> Self;
    fn splat(v: T) -> Self;
    /// Loads the first [`LANES`] values of `src`.
    fn load(src: &[T]) -> Self;
    /// Stores into the first [`LANES`] values of `dst`.
    fn store(self, dst: &mut [T]);
    /// `self + a·b`
    fn mul_acc(self, a: Self, b: Self) -> Self;
    fn sum(self) -> T;
}

impl Lanes<f32> for wide::f32x16 {
    #[inline(always)]
    fn zero() -> Self {
        wide::f32x16::ZERO
    }

    #[inline(always)]
    fn splat(v: f32) -> Self {
        wide::f32x16::splat(v)
    }

    #[inline(always)]
    fn load(src: &[f32]) -> Self {
        wide::f32x16::new(src[..LANES].try_into().unwrap())
    }

    #[inline(always)]
    fn store(self, dst: &mut [f32]) {
        dst[..LANES].copy_from_slice(self.as_array());
    }

    #[inline(always)]
    fn mul_acc(self, a: Self, b: Self) -> Self {
        a.mul_add(b, self)
    }

    #[inline(always)]
    fn sum(self) -> f32 {
        self.reduce_add()
    }
}

/// Two [`wide::f64x8`] halves.
#[derive(Debug, Clone, Copy)]
pub struct F64x16([wide::f64x8; 2]);

impl Lanes<f64> for F64x16 {
    #[inline(always)]
    fn zero() -> Self {
        F64x16([wide::f64x8::ZERO; 2])
    }

    #[inline(always)]
    fn splat(v: f64) -> Self {
        F64x16([wide::f64x8::splat(v); 2])
    }

    #[inline(always)]
    fn load(src: &[f64]) -> Self {
        F64x16([
            wide::f64x8::new(src[..8].try_into().unwrap()),
            wide::f64x8::new(src[8..LANES].try_into().unwrap()),
        ])
    }

    #[inline(always)]
    fn store(self, dst: &mut [f64]) {
        dst[..8].copy_from_slice(self.0[0].as_array());
        dst[8..LANES].copy_from_slice(self.0[1].as_array());
    }

    #[inline(always)]
    fn mul_acc(self, a: Self, b: Self) -> Self {
        F64x16([
            a.0[0].mul_add(b.0[0], self.0[0]),
            a.0[1].mul_add(b.0[1], self.0[1]),
        ])
    }

    #[inline(always)]
    fn sum(self) -> f64 {
        (self.0[0] + self.0[1]).reduce_add()
    }
}

/// An owned dense tensor in row-major (NCHW for images) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

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

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(
            self.shape.len(),
            4,
            "expected NCHW tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().powi(2)).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts between element types (used to lift trained `f32` weights
    /// into `f64` checks and back).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Copies sample `index` of the leading batch axis.
    pub fn sample(&self, index: usize) -> Tensor<T> {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[index * per..(index + 1) * per].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along a new (or the existing size-1)
    /// leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let inner: Vec<usize> = if first.shape.first() == Some(&1) && first.shape.len() > 1 {
            first.shape[1..].to_vec()
        } else {
            first.shape.clone()
        };
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.len() != first.len() {
                return Err(Error::invalid("cannot stack tensors of different sizes"));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Tensor::from_vec(&shape, data)
    }
}
