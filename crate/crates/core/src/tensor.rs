use std::fmt;

use crate::alloc;
use crate::error::{shape_err, Result};
use crate::scalar::Real;

/// Heap buffer that reports its size to the allocation tracker.
struct Buffer<T>(Vec<T>);

impl<T> Buffer<T> {
    fn new(data: Vec<T>) -> Self {
        alloc::acquire(data.len() * std::mem::size_of::<T>());
        Buffer(data)
    }
}

impl<T: Clone> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Buffer::new(self.0.clone())
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        alloc::release(self.0.len() * std::mem::size_of::<T>());
    }
}

/// Dense row-major tensor.
#[derive(Clone)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Buffer<T>,
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return shape_err("from_vec", format!("extents must be >= 1, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "from_vec",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            );
        }
        Ok(Tensor { shape: shape.to_vec(), data: Buffer::new(data) })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n]).expect("invalid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_vec(&[rows.len(), cols], data).expect("invalid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::from_vec(shape, (0..n).map(&mut f).collect()).expect("invalid shape")
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.0.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data.0
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data.0
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.0.clone()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor (product of trailing extents otherwise).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data.0[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data.0[i * c..(i + 1) * c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.data.0[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Buffer::new(data) }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data: Buffer::new(data) }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data_mut().iter_mut().zip(other.data()) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data_mut().iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data().iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::lit(v.to_f64().unwrap())).collect();
        Tensor { shape: self.shape.clone(), data: Buffer::new(data) }
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return shape_err("transpose", format!("rank-2 required, got {:?}", self.shape));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let src = self.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Tensor::from_vec(&[n, m], out)
    }

    /// `self · other` for 2-D operands.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = dims2("matmul", self)?;
        let (k2, n) = dims2("matmul", other)?;
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", self.shape, other.shape));
        }
        let (a, b) = (self.data(), other.data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = dims2("matmul_nt", self)?;
        let (n, k2) = dims2("matmul_nt", other)?;
        if k != k2 {
            return shape_err("matmul_nt", format!("{:?} x {:?}ᵀ", self.shape, other.shape));
        }
        let (a, b) = (self.data(), other.data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (k, m) = dims2("matmul_tn", self)?;
        let (k2, n) = dims2("matmul_tn", other)?;
        if k != k2 {
            return shape_err("matmul_tn", format!("{:?}ᵀ x {:?}", self.shape, other.shape));
        }
        let (a, b) = (self.data(), other.data());
        let mut out = vec![T::zero(); m * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let api = a[p * m + i];
                if api == T::zero() {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += api * bv;
                }
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Self {
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let src = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Tensor::from_vec(&shape, out).unwrap()
    }

    /// Repeat an extent-1 `axis` `n` times.
    pub fn expand(&self, axis: usize, n: usize) -> Result<Self> {
        if axis >= self.rank() || self.shape[axis] != 1 || n == 0 {
            return shape_err("expand", format!("axis {axis} of {:?} to {n}", self.shape));
        }
        let (outer, _, inner) = split_axis(&self.shape, axis);
        let src = self.data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(block);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = n;
        Tensor::from_vec(&shape, out)
    }
}

fn dims2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return shape_err(op, format!("rank-2 operand required, got {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head: Vec<_> = self.data().iter().take(SHOWN).collect();
        write!(f, "{head:?}")?;
        if self.len() > SHOWN {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}
