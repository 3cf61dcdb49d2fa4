//! Dense row-major tensors and the handful of kernels the rest of the crate
//! is written against.
//!
//! There are no strided views and no implicit broadcasting: every binary op
//! requires identical shapes, and a broadcast is an explicit call to
//! [`Tensor::broadcast_rows`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// Elementwise kernels exposed through [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Silu,
    Sigmoid,
    Exp,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, ElementwiseOp::Add | ElementwiseOp::Mul)
    }
}

/// Which entries of a row take part in a softmax.
#[derive(Debug, Clone, PartialEq)]
pub enum SoftmaxMask {
    None,
    /// Row `i` keeps columns `0..=i`.
    Causal,
    /// Row-major keep flags with the same extent as the input.
    Keep(Vec<bool>),
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                shape,
                reason: "extents must be >= 1 (scalars are shape [1])".into(),
            });
        }
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                reason: format!("data length {} != product of extents", data.len()),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::new(shape.to_vec(), vec![value; numel(shape)]).expect("valid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self::full(&[1], value)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |idx| if idx[0] == idx[1] { S::one() } else { S::zero() })
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> S) -> Self {
        let n = numel(shape);
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self::new(shape.to_vec(), data).expect("valid shape")
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::lit(z * std)
            })
            .collect();
        Self::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| S::lit(rng.random_range(lo..hi)))
            .collect();
        Self::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        S::DTYPE
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * S::DTYPE.size_of()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as a matrix, returning (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                shape: self.shape.clone(),
                reason: "expected a rank-2 tensor".into(),
            }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = *self.shape.last().expect("rank >= 1");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Shape {
                shape: self.shape.clone(),
                reason: "expected a single-element tensor".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(self.len());
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn silu(&self) -> Self {
        self.map(silu)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn exp(&self) -> Self {
        self.map(|v| v.exp())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::lit(self.len() as f64)
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest |a - b| over all elements.
    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        Ok(self.sub(other)?.max_abs())
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `[M×K] · [K×N]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    /// `[M×K] · [N×K]ᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul_t", &self.shape, &other.shape));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(dot(a, &other.data[j * k..(j + 1) * k]));
            }
        }
        Self::new(vec![m, n], out)
    }

    /// `[K×M]ᵀ · [K×N]` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("t_matmul", &self.shape, &other.shape));
        }
        let mut out = vec![S::zero(); m * n];
        for p in 0..k {
            let a = &self.data[p * m..(p + 1) * m];
            let b = &other.data[p * n..(p + 1) * n];
            for (i, &av) in a.iter().enumerate() {
                if av == S::zero() {
                    continue;
                }
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(b) {
                    *d += av * bv;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    /// Tiles a `[N]` or `[1×N]` tensor into `[rows×N]`.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Self> {
        let n = match self.shape.as_slice() {
            [n] | [1, n] => *n,
            _ => {
                return Err(Error::Shape {
                    shape: self.shape.clone(),
                    reason: "broadcast_rows expects [N] or [1, N]".into(),
                })
            }
        };
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&self.data);
        }
        Self::new(vec![rows, n], data)
    }

    /// Column block `[.., start..start+width]` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if width == 0 || start + width > c {
            return Err(Error::Shape {
                shape: self.shape.clone(),
                reason: format!("column slice {start}..{} out of range", start + width),
            });
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Self::new(vec![r, width], out)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of zero tensors".into()))?;
        let (r, _) = first.dims2()?;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pr != r {
                return Err(Error::dim("concat_cols", first.shape(), p.shape()));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Self::new(vec![r, total], out)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::dim("stack", first.shape(), p.shape()));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    /// Sub-tensor `index` along the leading axis.
    pub fn index_outer(&self, index: usize) -> Result<Self> {
        if self.rank() < 2 || index >= self.shape[0] {
            return Err(Error::Shape {
                shape: self.shape.clone(),
                reason: format!("outer index {index} out of range"),
            });
        }
        let inner = &self.shape[1..];
        let n = numel(inner);
        Self::new(inner.to_vec(), self.data[index * n..(index + 1) * n].to_vec())
    }
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out[M×N] += a[M×K] · b[K×N]`, i-k-j order.
pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let src = &b[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(src) {
                *d += av * bv;
            }
        }
    }
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.matmul(b)
}

pub fn elementwise<S: Scalar>(
    op: ElementwiseOp,
    a: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    match (op, b) {
        (ElementwiseOp::Add, Some(b)) => a.add(b),
        (ElementwiseOp::Mul, Some(b)) => a.mul(b),
        (ElementwiseOp::Silu, None) => Ok(a.silu()),
        (ElementwiseOp::Sigmoid, None) => Ok(a.sigmoid()),
        (ElementwiseOp::Exp, None) => Ok(a.exp()),
        (op, _) => Err(Error::Input(format!(
            "{op:?} expects {} operand(s)",
            if op.is_binary() { 2 } else { 1 }
        ))),
    }
}

/// Numerically stabilized row softmax of a matrix. Masked entries are exactly zero.
pub fn softmax_rows<S: Scalar>(a: &Tensor<S>, mask: &SoftmaxMask) -> Result<Tensor<S>> {
    let (m, n) = a.dims2()?;
    if let SoftmaxMask::Keep(keep) = mask {
        if keep.len() != m * n {
            return Err(Error::dim("softmax_rows mask", a.shape(), &[keep.len()]));
        }
    }
    let kept = |i: usize, j: usize| match mask {
        SoftmaxMask::None => true,
        SoftmaxMask::Causal => j <= i,
        SoftmaxMask::Keep(keep) => keep[i * n + j],
    };
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = a.row(i);
        let mut max = S::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if kept(i, j) {
                max = max.max(v);
            }
        }
        if max == S::neg_infinity() {
            return Err(Error::Numeric(format!(
                "softmax row {i} has no unmasked entries"
            )));
        }
        let dst = &mut out[i * n..(i + 1) * n];
        let mut total = S::zero();
        for (j, &v) in row.iter().enumerate() {
            if kept(i, j) {
                let e = (v - max).exp();
                dst[j] = e;
                total += e;
            }
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise log-softmax without masking.
pub fn log_softmax_rows<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = a.dims2()?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = a.row(i);
        let max = row.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(vec![m, n], out)
}
