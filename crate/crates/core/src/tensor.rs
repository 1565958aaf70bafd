//! Dense row-major tensors and the primitive kernels the rest of the crate is
//! built on.
//!
//! Storage is generic over [`Element`] so the same kernels run in `f32` for
//! training and in `f64` when a high-precision shadow evaluation is needed
//! (finite-difference gradient audits). Reductions and matrix products always
//! accumulate in `f64`.

use std::cell::Cell;
use std::fmt;

use crate::error::{Error, Result};

/// Scalar storage type of a [`Tensor`].
///
/// Arithmetic is performed by widening to `f64` and rounding back, which for
/// a single `+ - * / sqrt` is bit-identical to native `f32` arithmetic.
pub trait Element:
    Copy + Default + PartialEq + PartialOrd + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const ZERO: Self;
    const NAME: &'static str;

    fn from_wide(v: f64) -> Self;
    fn to_wide(self) -> f64;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const NAME: &'static str = "f32";

    #[inline]
    fn from_wide(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_wide(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const NAME: &'static str = "f64";

    #[inline]
    fn from_wide(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_wide(self) -> f64 {
        self
    }
}

/// Axis extents. Every extent is at least one.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::invalid("shape", "a shape needs at least one axis"));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::invalid("shape", format!("axis {axis} has extent 0")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::invalid("shape", format!("{dims:?} overflows usize")))?;
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("shape has at least one axis")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("×"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(dims: &[usize], data: Vec<E>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| E::from_wide(v)).collect())
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, E::ZERO)
    }

    pub fn full(dims: &[usize], value: E) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> E) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(&mut f).collect();
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_wide()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("tensor {} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data.clone())
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_wide(v.to_wide())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| E::from_wide(f(v.to_wide()))).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{} vs {}", self.shape, other.shape)));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| E::from_wide(f(a.to_wide(), b.to_wide())))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::shape("matrix", format!("expected rank 2, got {}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[E] {
        let c = self.shape.last();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_wide().is_finite())
    }

    pub fn sum_wide(&self) -> f64 {
        self.data.iter().map(|v| v.to_wide()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_wide() - b.to_wide()).abs())
            .fold(0.0, f64::max)
    }
}

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Thread-local multiply-accumulate counter fed by [`matmul`].
pub mod flops {
    use super::MACS;

    pub fn reset() {
        MACS.with(|c| c.set(0));
    }

    pub fn read() -> u64 {
        MACS.with(|c| c.get())
    }

    pub(super) fn add(n: u64) {
        MACS.with(|c| c.set(c.get().wrapping_add(n)));
    }

    /// Runs `f` and returns its result with the multiply-accumulates it performed.
    pub fn count<T>(f: impl FnOnce() -> T) -> (T, u64) {
        let before = read();
        let out = f();
        (out, read().wrapping_sub(before))
    }
}

pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = a.matrix_dims()?;
    let (k2, p) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {} · {}", a.shape, b.shape),
        ));
    }
    let bw: Vec<f64> = b.data.iter().map(|v| v.to_wide()).collect();
    let mut out = Vec::with_capacity(m * p);
    let mut acc = vec![0f64; p];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (kk, av) in a.row(i).iter().enumerate() {
            let av = av.to_wide();
            let brow = &bw[kk * p..(kk + 1) * p];
            for (o, bv) in acc.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
        out.extend(acc.iter().map(|&v| E::from_wide(v)));
    }
    flops::add((m * k * p) as u64);
    Tensor::new(&[m, p], out)
}

pub fn transpose<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let (r, c) = a.matrix_dims()?;
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(a.data[i * c + j]);
        }
    }
    Tensor::new(&[c, r], out)
}

/// Splits `dims` around `axis` into (outer, len, inner) strides.
fn axis_split(dims: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= dims.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for rank {}", dims.len())));
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}

/// Temperature-scaled softmax along `axis`.
pub fn softmax<E: Element>(x: &Tensor<E>, axis: usize, temperature: f64) -> Result<Tensor<E>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid("softmax", format!("temperature must be positive, got {temperature}")));
    }
    let (outer, len, inner) = axis_split(x.dims(), axis, "softmax")?;
    let mut out = vec![E::ZERO; x.numel()];
    let mut buf = vec![0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x.data[idx(j)].to_wide()).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, b) in buf.iter_mut().enumerate() {
                // (x - max) / τ rather than x/τ - max/τ keeps the argmax term at exactly exp(0).
                *b = ((x.data[idx(j)].to_wide() - max) / temperature).exp();
                total += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[idx(j)] = E::from_wide(b / total);
            }
        }
    }
    Tensor::new(x.dims(), out)
}

/// Per-row standardization along the last axis followed by `gain`/`bias`.
pub fn layer_norm<E: Element>(x: &Tensor<E>, gain: &Tensor<E>, bias: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
    let c = x.shape.last();
    if gain.dims() != [c] || bias.dims() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!("gain {} / bias {} must be [{c}]", gain.shape, bias.shape),
        ));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data.chunks(c) {
        let (mean, rstd) = row_stats(row, eps);
        for ((v, g), b) in row.iter().zip(&gain.data).zip(&bias.data) {
            let xhat = (v.to_wide() - mean) * rstd;
            out.push(E::from_wide(xhat * g.to_wide() + b.to_wide()));
        }
    }
    Tensor::new(x.dims(), out)
}

/// Mean and reciprocal standard deviation (biased variance) of a row.
pub(crate) fn row_stats<E: Element>(row: &[E], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.to_wide()).sum::<f64>() / n;
    let var = row.iter().map(|v| (v.to_wide() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Exact GELU, `x·Φ(x)` with Φ evaluated through `erf` (no tanh approximation).
pub fn gelu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(gelu_scalar)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx of [`gelu_scalar`]: Φ(x) + x·φ(x).
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Zero-padded cross-correlation along the last axis; output keeps length N.
pub fn conv1d_same<E: Element>(x: &Tensor<E>, kernel: &Tensor<E>) -> Result<Tensor<E>> {
    let k = kernel.numel();
    let n = x.shape.last();
    if kernel.shape.rank() != 1 || k.is_multiple_of(2) {
        return Err(Error::invalid("conv1d_same", format!("kernel must be 1-D with odd length, got {}", kernel.shape)));
    }
    if k > n {
        return Err(Error::invalid("conv1d_same", format!("kernel length {k} exceeds signal length {n}")));
    }
    let half = (k / 2) as isize;
    let w: Vec<f64> = kernel.to_f64_vec();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data.chunks(n) {
        for i in 0..n as isize {
            let mut acc = 0.0;
            for (t, wt) in w.iter().enumerate() {
                let j = i + t as isize - half;
                if (0..n as isize).contains(&j) {
                    acc += wt * row[j as usize].to_wide();
                }
            }
            out.push(E::from_wide(acc));
        }
    }
    Tensor::new(x.dims(), out)
}

/// Mean along `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
pub fn reduce_mean<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let (outer, len, inner) = axis_split(x.dims(), axis, "reduce_mean")?;
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let s: f64 = (0..len).map(|j| x.data[o * len * inner + j * inner + i].to_wide()).sum();
            out.push(E::from_wide(s / len as f64));
        }
    }
    let mut dims: Vec<usize> = x.dims().to_vec();
    dims.remove(axis);
    if dims.is_empty() {
        dims.push(1);
    }
    Tensor::new(&dims, out)
}

pub fn abs<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(f64::abs)
}

/// Indices of the `k` largest values, ties broken toward the lower index,
/// returned in ascending index order.
pub fn topk_indices<E: Element>(x: &Tensor<E>, k: usize) -> Result<Vec<usize>> {
    if x.shape.rank() != 1 {
        return Err(Error::shape("topk_indices", format!("expected rank 1, got {}", x.shape)));
    }
    topk_slice(x.data(), k)
}

/// [`topk_indices`] over a plain slice.
pub fn topk_slice<E: Element>(values: &[E], k: usize) -> Result<Vec<usize>> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(Error::invalid("topk_indices", format!("k = {k} outside 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // total_cmp gives a platform-independent order even with NaN present.
    order.sort_by(|&a, &b| {
        values[b]
            .to_wide()
            .total_cmp(&values[a].to_wide())
            .then(a.cmp(&b))
    });
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}
