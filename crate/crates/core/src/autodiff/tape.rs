//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends one entry holding its output value and the
//! handles of its operands, so operands always precede their consumers.
//! `backward` walks the list once in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Leaf {
    Constant,
    Input,
    Param(String),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(Leaf),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Sqrt { a: Var },
    Square { a: Var },
    Abs { a: Var },
    Sum { a: Var },
    SumRows { a: Var },
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, index: Arc<[usize]> },
    ScatterAddRows { a: Var, index: Arc<[usize]> },
    RepeatRows { a: Var },
}

impl Op {
    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Leaf(_) => Vec::new(),
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::ConcatCols { parts } => parts.clone(),
            Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Relu { a }
            | Op::Sigmoid { a }
            | Op::Sqrt { a }
            | Op::Square { a }
            | Op::Abs { a }
            | Op::Sum { a }
            | Op::SumRows { a }
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::ScatterAddRows { a, .. }
            | Op::RepeatRows { a } => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Entry {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.entries[v.0].requires_grad
    }

    /// True when every operand of every entry was recorded before it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.entries
            .iter()
            .enumerate()
            .all(|(i, e)| e.op.operands().iter().all(|o| o.0 < i))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf(Leaf::Constant) => false,
            Op::Leaf(_) => true,
            other => other
                .operands()
                .iter()
                .any(|o| self.entries[o.0].requires_grad),
        };
        self.entries.push(Entry {
            value,
            op,
            requires_grad,
        });
        Var(self.entries.len() - 1)
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(Leaf::Constant))
    }

    /// Unnamed differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(Leaf::Input))
    }

    /// Named trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.push(t, Op::Leaf(Leaf::Param(name.to_string())))
    }

    fn mat(&self, v: Var) -> Result<(usize, usize), AutodiffError> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `x · w + b` with `x: [n × i]`, `w: [i × o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (n, i) = self.mat(x)?;
        let (wi, o) = match self.value(w).shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(AutodiffError::Rank {
                    expected: 2,
                    shape: s.to_vec(),
                })
            }
        };
        if wi != i {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                left: self.value(x).shape().to_vec(),
                right: self.value(w).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != o {
                return Err(AutodiffError::ShapeMismatch {
                    op: "linear bias",
                    left: vec![o],
                    right: bias.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(o.max(1)) {
                row.copy_from_slice(bias.data());
            }
        }
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            b.is_some(),
        );
        let t = Tensor::new(vec![n, o], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.mat(a)?;
        let (k2, n) = self.mat(b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b }))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, logistic, Op::Sigmoid { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt { a })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs { a })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    /// Column sums: `[n × k] → [1 × k]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (n, k) = self.mat(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; k];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&src[r * k..(r + 1) * k]) {
                *o += v;
            }
        }
        Ok(self.push(Tensor::new(vec![1, k], out)?, Op::SumRows { a }))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::EmptyConcat)?;
        let n = self.mat(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat(p)?;
            if r != n {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..n {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let t = Tensor::new(vec![n, total], out)?;
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (n, k) = self.mat(a)?;
        if start + len > k {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: k,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * k + start..r * k + start + len]);
        }
        let t = Tensor::new(vec![n, len], out)?;
        Ok(self.push(t, Op::SliceCols { a, start }))
    }

    /// `out[r] = a[index[r]]`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var, AutodiffError> {
        let (n, k) = self.mat(a)?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * k);
        for &i in index.iter() {
            if i >= n {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            out.extend_from_slice(&src[i * k..(i + 1) * k]);
        }
        let t = Tensor::new(vec![index.len(), k], out)?;
        Ok(self.push(t, Op::GatherRows { a, index }))
    }

    /// `out[index[r]] += a[r]` into `rows` output rows; untouched rows are zero.
    pub fn scatter_add_rows(&mut self, a: Var, index: Arc<[usize]>, rows: usize) -> Result<Var, AutodiffError> {
        let (n, k) = self.mat(a)?;
        if index.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add_rows",
                left: vec![n, k],
                right: vec![index.len()],
            });
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * k];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: i,
                    bound: rows,
                });
            }
            for (o, v) in out[i * k..(i + 1) * k].iter_mut().zip(&src[r * k..(r + 1) * k]) {
                *o += v;
            }
        }
        let t = Tensor::new(vec![rows, k], out)?;
        Ok(self.push(t, Op::ScatterAddRows { a, index }))
    }

    /// Broadcasts a `[1 × k]` row to `[rows × k]`.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Result<Var, AutodiffError> {
        let (n, k) = self.mat(a)?;
        if n != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "repeat_rows",
                left: vec![1, k],
                right: self.value(a).shape().to_vec(),
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        let t = Tensor::new(vec![rows, k], out)?;
        Ok(self.push(t, Op::RepeatRows { a }))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every differentiable leaf on the tape receives a gradient, zero when
    /// the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let Some(entry) = self.entries.get(loss.0) else {
            return Err(AutodiffError::Detached {
                index: loss.0,
                len: self.entries.len(),
            });
        };
        if !entry.value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: entry.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let e = &self.entries[idx];
            if matches!(e.op, Op::Leaf(_)) || !e.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_entry(e, &dy, &mut grads);
        }

        let mut leaves = BTreeMap::new();
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (idx, e) in self.entries.iter().enumerate() {
            let Op::Leaf(kind) = &e.op else { continue };
            if matches!(kind, Leaf::Constant) {
                continue;
            }
            let data = grads
                .get_mut(idx)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; e.value.numel()]);
            let g = Tensor::new(e.value.shape().to_vec(), data)?;
            if let Leaf::Param(name) = kind {
                match params.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                }
            }
            leaves.insert(Var(idx), g);
        }
        Ok(Gradients { leaves, params })
    }

    fn backprop_entry(&self, e: &Entry, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.entries[v.0].requires_grad;
        let val = |v: Var| &self.entries[v.0].value;
        match &e.op {
            Op::Leaf(_) => {}
            Op::Linear { x, w, b } => {
                let (n, i) = val(*x).dims2().expect("recorded shape");
                let o = val(*w).shape()[1];
                if needs(*x) {
                    let g = slot(grads, *x, n * i);
                    gemm(n, o, i, dy, false, val(*w).data(), true, g, true);
                }
                if needs(*w) {
                    let g = slot(grads, *w, i * o);
                    gemm(i, n, o, val(*x).data(), true, dy, false, g, true);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let g = slot(grads, *b, o);
                        for row in dy.chunks(o.max(1)) {
                            for (gb, d) in g.iter_mut().zip(row) {
                                *gb += d;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = val(*a).dims2().expect("recorded shape");
                let n = val(*b).dims2().expect("recorded shape").1;
                if needs(*a) {
                    let g = slot(grads, *a, m * k);
                    gemm(m, n, k, dy, false, val(*b).data(), true, g, true);
                }
                if needs(*b) {
                    let g = slot(grads, *b, k * n);
                    gemm(k, m, n, val(*a).data(), true, dy, false, g, true);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_into(slot(grads, v, dy.len()), dy);
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    add_into(slot(grads, *a, dy.len()), dy);
                }
                if needs(*b) {
                    let g = slot(grads, *b, dy.len());
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi -= d;
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let other = val(*b).data();
                    let g = slot(grads, *a, dy.len());
                    for ((gi, d), o) in g.iter_mut().zip(dy).zip(other) {
                        *gi += d * o;
                    }
                }
                if needs(*b) {
                    let other = val(*a).data();
                    let g = slot(grads, *b, dy.len());
                    for ((gi, d), o) in g.iter_mut().zip(dy).zip(other) {
                        *gi += d * o;
                    }
                }
            }
            Op::Scale { a, c } => {
                let g = slot(grads, *a, dy.len());
                for (gi, d) in g.iter_mut().zip(dy) {
                    *gi += c * d;
                }
            }
            Op::AddScalar { a } => add_into(slot(grads, *a, dy.len()), dy),
            Op::Relu { a } => {
                let y = e.value.data();
                let g = slot(grads, *a, dy.len());
                for ((gi, d), yi) in g.iter_mut().zip(dy).zip(y) {
                    if *yi > 0.0 {
                        *gi += d;
                    }
                }
            }
            Op::Sigmoid { a } => {
                let y = e.value.data();
                let g = slot(grads, *a, dy.len());
                for ((gi, d), yi) in g.iter_mut().zip(dy).zip(y) {
                    *gi += d * yi * (1.0 - yi);
                }
            }
            Op::Sqrt { a } => {
                let y = e.value.data();
                let g = slot(grads, *a, dy.len());
                for ((gi, d), yi) in g.iter_mut().zip(dy).zip(y) {
                    *gi += d * 0.5 / yi;
                }
            }
            Op::Square { a } => {
                let x = val(*a).data();
                let g = slot(grads, *a, dy.len());
                for ((gi, d), xi) in g.iter_mut().zip(dy).zip(x) {
                    *gi += 2.0 * d * xi;
                }
            }
            Op::Abs { a } => {
                let x = val(*a).data();
                let g = slot(grads, *a, dy.len());
                for ((gi, d), xi) in g.iter_mut().zip(dy).zip(x) {
                    if *xi > 0.0 {
                        *gi += d;
                    } else if *xi < 0.0 {
                        *gi -= d;
                    }
                }
            }
            Op::Sum { a } => {
                let g = slot(grads, *a, val(*a).numel());
                for gi in g.iter_mut() {
                    *gi += dy[0];
                }
            }
            Op::SumRows { a } => {
                let k = dy.len();
                let g = slot(grads, *a, val(*a).numel());
                for row in g.chunks_mut(k.max(1)) {
                    add_into(row, dy);
                }
            }
            Op::ConcatCols { parts } => {
                let total = e.value.cols();
                let n = e.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        let g = slot(grads, p, n * w);
                        for r in 0..n {
                            add_into(&mut g[r * w..(r + 1) * w], &dy[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { a, start } => {
                let (n, k) = val(*a).dims2().expect("recorded shape");
                let len = e.value.cols();
                let g = slot(grads, *a, n * k);
                for r in 0..n {
                    add_into(&mut g[r * k + start..r * k + start + len], &dy[r * len..(r + 1) * len]);
                }
            }
            Op::GatherRows { a, index } => {
                let k = e.value.cols();
                let g = slot(grads, *a, val(*a).numel());
                for (r, &i) in index.iter().enumerate() {
                    add_into(&mut g[i * k..(i + 1) * k], &dy[r * k..(r + 1) * k]);
                }
            }
            Op::ScatterAddRows { a, index } => {
                let k = e.value.cols();
                let g = slot(grads, *a, val(*a).numel());
                for (r, &i) in index.iter().enumerate() {
                    add_into(&mut g[r * k..(r + 1) * k], &dy[i * k..(i + 1) * k]);
                }
            }
            Op::RepeatRows { a } => {
                let k = e.value.cols();
                let g = slot(grads, *a, k);
                for row in dy.chunks(k.max(1)) {
                    add_into(g, row);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    leaves: BTreeMap<Var, Tensor>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a differentiable leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    /// Gradients keyed by parameter name (shared names are summed).
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(3.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row(&[-1.0, 2.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(AutodiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn detached_loss_rejected() {
        let mut other = Tape::new();
        let a = other.input(Tensor::scalar(1.0));
        let b = other.square(a);
        let t = Tape::new();
        assert!(matches!(t.backward(b), Err(AutodiffError::Detached { .. })));
    }

    #[test]
    fn unreached_params_get_zero_gradient() {
        let mut t = Tape::new();
        let used = t.param("used", Tensor::scalar(2.0));
        let _unused = t.param("unused", Tensor::row(&[1.0, 1.0, 1.0]));
        let y = t.square(used);
        let g = t.backward(y).unwrap();
        assert_eq!(g.params()["used"].item(), 4.0);
        assert_eq!(g.params()["unused"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_param_name_accumulates() {
        let mut t = Tape::new();
        let a = t.param("w", Tensor::scalar(2.0));
        let b = t.param("w", Tensor::scalar(2.0));
        let p = t.mul(a, b).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.params()["w"].item(), 4.0);
    }

    #[test]
    fn scatter_leaves_untouched_rows_zero() {
        let mut t = Tape::new();
        let a = t.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let idx: Arc<[usize]> = vec![2, 2].into();
        let s = t.scatter_add_rows(a, idx, 4).unwrap();
        assert_eq!(t.value(s).data(), &[0.0, 0.0, 0.0, 0.0, 4.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.input(Tensor::row(&[1.0, 2.0]));
        let b = t.input(Tensor::row(&[1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        let w = t.input(Tensor::zeros(&[3, 1]));
        assert!(t.linear(a, w, None).is_err());
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(1.0));
        let d = t.square(c);
        assert!(!t.requires_grad(d));
        let x = t.input(Tensor::scalar(1.0));
        let e = t.mul(d, x).unwrap();
        assert!(t.requires_grad(e));
        assert!(t.is_topologically_ordered());
    }
}
