//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation in execution order, so node ids are
//! already a topological order and backward is a single reverse sweep.
//! Backward rules accumulate in `f64` and do not touch the multiply counter,
//! which therefore measures forward work only.

use crate::error::{Error, Result};
use crate::tensor::{self, gelu_grad_scalar, Element, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a) | Op::Scale(a, _) | Op::Gelu(a) | Op::Softmax(a) | Op::Sum(a) | Op::Mean(a) => {
                vec![*a]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::SliceCols { x, .. } | Op::GatherRows { x, .. } => vec![*x],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<E: Element> {
    value: Tensor<E>,
    op: Op,
    needs_grad: bool,
}

/// Operation log for one forward pass. Create a fresh tape per step.
#[derive(Debug, Default)]
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    #[cfg(test)]
    fault: Option<FaultyRule>,
}

/// Deliberately wrong backward rule, used to prove the gradient audit can fail.
#[cfg(test)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum FaultyRule {
    Gelu,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<E: Element = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            #[cfg(test)]
            fault: None,
        }
    }

    #[cfg(test)]
    pub(crate) fn inject_fault(&mut self, rule: FaultyRule) {
        self.fault = Some(rule);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            ref other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Leaf treated as a constant input.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `x[M×N] + bias[N]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (_, n) = xv.matrix_dims()?;
        if bv.dims() != [n] {
            return Err(Error::shape("add_row", format!("bias {} vs row width {n}", bv.shape())));
        }
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(a, b)| E::from_wide(a.to_wide() + b.to_wide())))
            .collect();
        let out = Tensor::new(xv.dims(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = tensor::gelu(self.value(a));
        self.push(out, Op::Gelu(a))
    }

    /// Softmax along the last axis at unit temperature.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = tensor::softmax(v, v.shape().rank() - 1, 1.0)?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let out = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let xv = self.value(x);
        let c = xv.shape().last();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.numel() / c);
        for row in xv.data().chunks(c) {
            let (mean, r) = tensor::row_stats(row, eps);
            xhat.extend(row.iter().map(|v| (v.to_wide() - mean) * r));
            rstd.push(r);
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.matrix_dims()?;
        if len == 0 || start + len > c {
            return Err(Error::invalid("slice_cols", format!("columns {start}..{} of {c}", start + len)));
        }
        let data = (0..r).flat_map(|i| xv.row(i)[start..start + len].to_vec()).collect();
        let out = Tensor::new(&[r, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (r, _) = self.value(first).matrix_dims()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).matrix_dims()?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, c) = self.value(first).matrix_dims()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).matrix_dims()?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("column counts {pc} vs {c}")));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Copies the listed rows, in order. Rows not listed receive no gradient.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.matrix_dims()?;
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "empty row list"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of {r}")));
        }
        let data = rows.iter().flat_map(|&i| xv.row(i).to_vec()).collect();
        let out = Tensor::new(&[rows.len(), c], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_wide();
        self.push(Tensor::scalar(E::from_wide(s)), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum_wide() / v.numel() as f64;
        self.push(Tensor::scalar(E::from_wide(s)), Op::Mean(a))
    }

    /// Mean softmax cross-entropy of `logits[B×C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.matrix_dims()?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} with {c} classes")));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = lv.row(i).iter().map(|v| v.to_wide()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let out = Tensor::scalar(E::from_wide(loss / b as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got {}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.needs_grad).map(|g| {
                    Tensor::new(node.value.dims(), g.into_iter().map(E::from_wide).collect())
                        .expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn wide(&self, v: Var) -> Vec<f64> {
        self.value(v).to_f64_vec()
    }

    fn propagate(&self, op: &Op, out: &Tensor<E>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).matrix_dims().expect("rank 2");
                let p = out.dims()[1];
                let av = self.wide(*a);
                let bv = self.wide(*b);
                // dA = G · Bᵀ
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * p..(i + 1) * p];
                        for kk in 0..k {
                            let brow = &bv[kk * p..(kk + 1) * p];
                            ga[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · G
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * p..(i + 1) * p];
                        for kk in 0..k {
                            let a_ik = av[i * k + kk];
                            for (o, gv) in gb[kk * p..(kk + 1) * p].iter_mut().zip(grow) {
                                *o += a_ik * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = out.matrix_dims().expect("rank 2");
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |gv| gv.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                let n = out.shape().last();
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.wide(*a);
                let bv = self.wide(*b);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += c * v));
            }
            Op::Gelu(a) => {
                let av = self.wide(*a);
                #[cfg(test)]
                let bias = if self.fault == Some(FaultyRule::Gelu) { 1.05 } else { 1.0 };
                #[cfg(not(test))]
                let bias = 1.0;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_grad_scalar(av[i]) * bias;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = out.to_f64_vec();
                let n = out.shape().last();
                self.accumulate(grads, *a, |ga| {
                    for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            orow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.shape().last();
                let gv = self.wide(*gain);
                self.accumulate(grads, *gain, |gg| {
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * xrow[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for grow in g.chunks(n) {
                        gb.iter_mut().zip(grow).for_each(|(o, v)| *o += v);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for (r, ((grow, xrow), orow)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let dxhat: Vec<f64> = grow.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            orow[j] += rstd[r] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, len) = out.matrix_dims().expect("rank 2");
                let c = self.value(*x).shape().last();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.matrix_dims().expect("rank 2");
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape().last();
                    self.accumulate(grads, p, |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |gp| {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(o, v)| *o += v)
                    });
                    offset += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let c = out.shape().last();
                self.accumulate(grads, *x, |gx| {
                    for (k, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[k * c + j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                self.accumulate(grads, *logits, |gl| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[i * c + j] += g[0] * (probs[i * c + j] - onehot) / b as f64;
                        }
                    }
                });
            }
        }
    }
}

/// Central-difference gradient `(f(x + h·e) − f(x − h·e)) / 2h` per coordinate.
pub fn finite_diff_grad<E: Element>(
    mut f: impl FnMut(&Tensor<E>) -> Result<f64>,
    x: &Tensor<E>,
    h: f64,
) -> Result<Tensor<E>> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite_diff_grad", format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = E::from_wide(orig.to_wide() + h);
        let plus = f(&probe)?;
        probe.data_mut()[i] = E::from_wide(orig.to_wide() - h);
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push(E::from_wide((plus - minus) / (2.0 * h)));
    }
    Tensor::new(x.dims(), out)
}

/// `|a − n| / max(|a|, |n|, floor)`: relative error that degrades to an
/// absolute error for gradients whose magnitude is below `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
