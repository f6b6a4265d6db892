//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Node indices are a topological order by
//! construction, so [`Tape::backward`] is a single reverse sweep.

use std::rc::Rc;

use super::tensor::{gemm, Element, MatRef, Tensor};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean mask over the trailing dimensions of a softmax input;
/// `true` keeps an entry, `false` removes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, allowed: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().product::<usize>() != allowed.len() {
            return Err(Error::shape("mask", format!("shape {shape:?}, {} flags", allowed.len())));
        }
        Ok(Self { shape, allowed })
    }

    pub fn all_allowed(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            allowed: vec![true; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.shape[self.shape.len() - 1] + col]
    }

    pub fn blocked_count(&self) -> usize {
        self.allowed.iter().filter(|a| !**a).count()
    }
}

/// Per-row rotation angles for [`Tape::rotate_pairs`].
///
/// Row `r` of the input (counting over all leading dimensions) uses angle
/// row `r % rows`; pair `p` of that row is `(x[2p], x[2p + 1])`.
#[derive(Clone, Debug)]
pub struct PairRotation<E> {
    rows: usize,
    pairs: usize,
    cos: Vec<E>,
    sin: Vec<E>,
}

impl<E: Element> PairRotation<E> {
    /// Build from angles in radians, `rows x pairs`, computed in `f64`.
    pub fn from_angles(rows: usize, pairs: usize, angles: &[f64]) -> Result<Self> {
        if angles.len() != rows * pairs {
            return Err(Error::shape("rotation", format!("{rows}x{pairs} needs {} angles", rows * pairs)));
        }
        Ok(Self {
            rows,
            pairs,
            cos: angles.iter().map(|a| E::of_f64(a.cos())).collect(),
            sin: angles.iter().map(|a| E::of_f64(a.sin())).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }
}

enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, E),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Silu(Var),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<E> },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Rc<[usize]> },
    IndexAddRows { base: Var, src: Var, idx: Rc<[usize]> },
    SliceCols { x: Var, start: usize },
    SplitHeads { x: Var, heads: usize },
    MergeHeads(Var),
    RotatePairs { x: Var, rot: Rc<PairRotation<E>> },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
}

/// Recorded computation. Single-threaded; use one tape per thread.
pub struct Tape<E: Element = f32> {
    values: Vec<Tensor<E>>,
    ops: Vec<Op<E>>,
    tracked: Vec<bool>,
    consumed: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], one per tracked leaf.
pub struct Gradients<E = f32> {
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

fn shape_eq(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            tracked: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    fn push(&mut self, name: &'static str, op: Op<E>, value: Tensor<E>, tracked: bool) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        #[cfg(not(debug_assertions))]
        let _ = name;
        let op = if tracked { op } else { Op::Leaf };
        self.values.push(value);
        self.ops.push(op);
        self.tracked.push(tracked);
        Ok(Var(self.values.len() - 1))
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<E>) -> Result<Var> {
        self.push("constant", Op::Leaf, t, false)
    }

    /// Tracked leaf; receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, t: Tensor<E>) -> Result<Var> {
        self.push("param", Op::Leaf, t, true)
    }

    fn zip_with(&self, a: Var, b: Var, op: &'static str, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        shape_eq(op, ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let tr = self.any_tracked(&[a, b]);
        self.push("add", Op::Add(a, b), out, tr)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let tr = self.any_tracked(&[a, b]);
        self.push("sub", Op::Sub(a, b), out, tr)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let tr = self.any_tracked(&[a, b]);
        self.push("mul", Op::Mul(a, b), out, tr)
    }

    /// `x[.., n] + bias[n]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.values[x.0], &self.values[bias.0]);
        let n = tx.last_dim();
        if tb.numel() != n || tb.ndim() != 1 {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let b = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, v)| *v + b[i % n]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let tr = self.any_tracked(&[x, bias]);
        self.push("add_row", Op::AddRow(x, bias), out, tr)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = E::of_f64(s);
        let tx = &self.values[x.0];
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| *v * s).collect())?;
        let tr = self.tracked[x.0];
        self.push("scale", Op::Scale(x, s), out, tr)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![E::zero(); m * n];
        gemm(MatRef::new(ta.data(), m, k), MatRef::new(tb.data(), k, n), &mut out, E::zero());
        let out = Tensor::new([m, n], out)?;
        let tr = self.any_tracked(&[a, b]);
        self.push("matmul", Op::MatMul(a, b), out, tr)
    }

    /// Batched product of `[B, M, K]` with `[B, K, N]` (or `[B, N, K]` when
    /// `trans_b`), giving `[B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let bad = || Error::shape("bmm", format!("{:?} x {:?} (trans_b={trans_b})", ta.shape(), tb.shape()));
        if ta.ndim() != 3 || tb.ndim() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![E::zero(); batch * m * n];
        for bi in 0..batch {
            let am = MatRef::new(&ta.data()[bi * m * k..(bi + 1) * m * k], m, k);
            let bslice = &tb.data()[bi * k * n..(bi + 1) * k * n];
            let bm = if trans_b {
                MatRef::new(bslice, n, k).t()
            } else {
                MatRef::new(bslice, k, n)
            };
            gemm(am, bm, &mut out[bi * m * n..(bi + 1) * m * n], E::zero());
        }
        let out = Tensor::new([batch, m, n], out)?;
        let tr = self.any_tracked(&[a, b]);
        self.push("bmm", Op::Bmm { a, b, trans_b }, out, tr)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let data = tx.data().iter().map(|v| *v / (E::one() + (-*v).exp())).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let tr = self.tracked[x.0];
        self.push("silu", Op::Silu(x), out, tr)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let c = E::of_f64(GELU_C);
        let k = E::of_f64(0.044715);
        let half = E::of_f64(0.5);
        let data = tx
            .data()
            .iter()
            .map(|v| half * *v * (E::one() + (c * (*v + k * *v * *v * *v)).tanh()))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let tr = self.tracked[x.0];
        self.push("gelu", Op::Gelu(x), out, tr)
    }

    /// Root-mean-square normalization over the last dimension, then
    /// elementwise gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (&self.values[x.0], &self.values[gain.0]);
        let d = tx.last_dim();
        if tg.ndim() != 1 || tg.numel() != d {
            return Err(Error::shape("rmsnorm", format!("{:?} with gain {:?}", tx.shape(), tg.shape())));
        }
        let eps = E::of_f64(RMS_EPS);
        let dn = E::of_f64(d as f64);
        let rows = tx.numel() / d.max(1);
        let mut inv_rms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            let row = tx.row(r);
            let ms = row.iter().map(|v| *v * *v).sum::<E>() / dn;
            let inv = E::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(tg.data()).map(|(v, g)| *v * inv * *g));
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let tr = self.any_tracked(&[x, gain]);
        self.push("rmsnorm", Op::RmsNorm { x, gain, inv_rms }, out, tr)
    }

    /// Softmax over the last dimension. Masked entries are exactly zero.
    ///
    /// The mask shape must be a suffix of the input shape; it is broadcast
    /// over the leading dimensions.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let tx = &self.values[x.0];
        let n = tx.last_dim();
        if let Some(m) = mask {
            let ms = m.shape();
            let xs = tx.shape();
            if ms.len() > xs.len() || xs[xs.len() - ms.len()..] != *ms {
                return Err(Error::shape("softmax", format!("mask {ms:?} does not broadcast to {xs:?}")));
            }
        }
        let rows = if n == 0 { 0 } else { tx.numel() / n };
        let mask_rows = mask.map(|m| m.allowed.len() / n.max(1)).unwrap_or(1);
        let mut data = vec![E::zero(); tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let keep = mask.map(|m| &m.allowed[(r % mask_rows) * n..(r % mask_rows + 1) * n]);
            let allowed = |j: usize| keep.map_or(true, |k| k[j]);
            let mut max = E::neg_infinity();
            for (j, v) in row.iter().enumerate() {
                if allowed(j) && *v > max {
                    max = *v;
                }
            }
            if max == E::neg_infinity() {
                return Err(Error::AllMasked { row: r });
            }
            let out = &mut data[r * n..(r + 1) * n];
            let mut sum = E::zero();
            for (j, v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (*v - max).exp();
                    out[j] = e;
                    sum = sum + e;
                }
            }
            let inv = E::one() / sum;
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let tr = self.tracked[x.0];
        self.push("softmax", Op::Softmax(x), out, tr)
    }

    /// Stack 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.values[first.0].last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.values[p.0];
            if t.ndim() != 2 || t.shape()[1] != cols {
                return Err(Error::shape("concat_rows", format!("{:?} with {cols} columns", t.shape())));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new([rows, cols], data)?;
        let tr = self.any_tracked(parts);
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), out, tr)
    }

    /// Join 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.values[first.0].shape().first().copied().unwrap_or(0);
        let mut cols = 0;
        for p in parts {
            let t = &self.values[p.0];
            if t.ndim() != 2 || t.shape()[0] != rows {
                return Err(Error::shape("concat_cols", format!("{:?} with {rows} rows", t.shape())));
            }
            cols += t.shape()[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.values[p.0].row(r));
            }
        }
        let out = Tensor::new([rows, cols], data)?;
        let tr = self.any_tracked(parts);
        self.push("concat_cols", Op::ConcatCols(parts.to_vec()), out, tr)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.ndim() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", tx.shape())));
        }
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            if i >= rows {
                return Err(Error::shape("gather_rows", format!("row {i} of {rows}")));
            }
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new([idx.len(), cols], data)?;
        let tr = self.tracked[x.0];
        self.push("gather_rows", Op::GatherRows { x, idx }, out, tr)
    }

    /// `out = base; out[idx[r]] += src[r]`.
    pub fn index_add_rows(&mut self, base: Var, src: Var, idx: Rc<[usize]>) -> Result<Var> {
        let (tb, ts) = (&self.values[base.0], &self.values[src.0]);
        if tb.ndim() != 2 || ts.ndim() != 2 || tb.shape()[1] != ts.shape()[1] || ts.shape()[0] != idx.len() {
            return Err(Error::shape(
                "index_add_rows",
                format!("base {:?}, src {:?}, {} indices", tb.shape(), ts.shape(), idx.len()),
            ));
        }
        let (rows, cols) = (tb.shape()[0], tb.shape()[1]);
        let mut data = tb.data().to_vec();
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::shape("index_add_rows", format!("row {i} of {rows}")));
            }
            add_into(&mut data[i * cols..(i + 1) * cols], ts.row(r));
        }
        let out = Tensor::new([rows, cols], data)?;
        let tr = self.any_tracked(&[base, src]);
        self.push("index_add_rows", Op::IndexAddRows { base, src, idx }, out, tr)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.ndim() != 2 || start + len > tx.shape()[1] {
            return Err(Error::shape("slice_cols", format!("{:?}[.., {start}..{}]", tx.shape(), start + len)));
        }
        let rows = tx.shape()[0];
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let out = Tensor::new([rows, len], data)?;
        let tr = self.tracked[x.0];
        self.push("slice_cols", Op::SliceCols { x, start }, out, tr)
    }

    /// `[L, H*D] -> [H, L, D]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.ndim() != 2 || heads == 0 || tx.shape()[1] % heads != 0 {
            return Err(Error::shape("split_heads", format!("{:?} into {heads} heads", tx.shape())));
        }
        let (l, width) = (tx.shape()[0], tx.shape()[1]);
        let d = width / heads;
        let mut data = Vec::with_capacity(tx.numel());
        for h in 0..heads {
            for r in 0..l {
                data.extend_from_slice(&tx.row(r)[h * d..(h + 1) * d]);
            }
        }
        let out = Tensor::new([heads, l, d], data)?;
        let tr = self.tracked[x.0];
        self.push("split_heads", Op::SplitHeads { x, heads }, out, tr)
    }

    /// `[H, L, D] -> [L, H*D]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.ndim() != 3 {
            return Err(Error::shape("merge_heads", format!("{:?}", tx.shape())));
        }
        let (heads, l, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut data = Vec::with_capacity(tx.numel());
        for r in 0..l {
            for h in 0..heads {
                data.extend_from_slice(&tx.data()[(h * l + r) * d..(h * l + r + 1) * d]);
            }
        }
        let out = Tensor::new([l, heads * d], data)?;
        let tr = self.tracked[x.0];
        self.push("merge_heads", Op::MergeHeads(x), out, tr)
    }

    /// Rotate consecutive value pairs of every row by per-row angles.
    pub fn rotate_pairs(&mut self, x: Var, rot: Rc<PairRotation<E>>) -> Result<Var> {
        let tx = &self.values[x.0];
        let w = tx.last_dim();
        if w != 2 * rot.pairs || tx.ndim() < 2 || tx.shape()[tx.ndim() - 2] % rot.rows != 0 {
            return Err(Error::shape(
                "rotate_pairs",
                format!("{:?} with {}x{} rotation", tx.shape(), rot.rows, rot.pairs),
            ));
        }
        let mut data = tx.data().to_vec();
        rotate_rows(&mut data, &rot, false);
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let tr = self.tracked[x.0];
        self.push("rotate_pairs", Op::RotatePairs { x, rot }, out, tr)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.values[x.0].clone().reshape(shape)?;
        let tr = self.tracked[x.0];
        self.push("reshape", Op::Reshape(x), out, tr)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].sum();
        let tr = self.tracked[x.0];
        self.push("sum_all", Op::SumAll(x), Tensor::scalar(s), tr)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        if t.numel() == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let m = t.sum() / E::of_f64(t.numel() as f64);
        let tr = self.tracked[x.0];
        self.push("mean_all", Op::MeanAll(x), Tensor::scalar(m), tr)
    }

    /// `x W + b` for `x [m, k]`, `W [k, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Reverse sweep from a scalar `loss`. A tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.values[loss.0].shape())));
        }
        self.consumed = true;

        let n = self.values.len();
        let mut grads: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<E>>> = (0..n).map(|_| None).collect();
        if self.tracked[loss.0] {
            grads[loss.0] = Some(vec![E::one()]);
        }

        for i in (0..=loss.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, g, &mut grads, &mut out)?;
        }
        // Tracked leaves the loss never reached still get a (zero) gradient.
        for i in 0..n {
            if self.tracked[i] && matches!(self.ops[i], Op::Leaf) && out[i].is_none() {
                out[i] = Some(Tensor::zeros(self.values[i].shape().to_vec()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<E>,
        grads: &mut [Option<Vec<E>>],
        out: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let vals = &self.values;
        let tracked = &self.tracked;
        macro_rules! buf {
            ($v:expr) => {
                grad_slot(grads, vals, tracked, $v)
            };
        }

        match &self.ops[i] {
            Op::Leaf => {
                out[i] = Some(Tensor::new(vals[i].shape().to_vec(), g)?);
            }
            Op::Add(a, b) => {
                if let Some(ga) = buf!(*a) {
                    add_into(ga, &g);
                }
                if let Some(gb) = buf!(*b) {
                    add_into(gb, &g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = buf!(*a) {
                    add_into(ga, &g);
                }
                if let Some(gb) = buf!(*b) {
                    gb.iter_mut().zip(&g).for_each(|(d, s)| *d = *d - *s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (vals[a.0].data(), vals[b.0].data());
                if let Some(ga) = buf!(*a) {
                    for ((d, s), y) in ga.iter_mut().zip(&g).zip(vb) {
                        *d = *d + *s * *y;
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for ((d, s), x) in gb.iter_mut().zip(&g).zip(va) {
                        *d = *d + *s * *x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = buf!(*x) {
                    add_into(gx, &g);
                }
                if let Some(gb) = buf!(*bias) {
                    let n = gb.len();
                    for (j, s) in g.iter().enumerate() {
                        gb[j % n] = gb[j % n] + *s;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = buf!(*x) {
                    for (d, v) in gx.iter_mut().zip(&g) {
                        *d = *d + *v * *s;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let gm = MatRef::new(&g, m, n);
                if let Some(ga) = buf!(*a) {
                    gemm(gm, MatRef::new(tb.data(), k, n).t(), ga, E::one());
                }
                if let Some(gb) = buf!(*b) {
                    gemm(MatRef::new(ta.data(), m, k).t(), gm, gb, E::one());
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = vals[i].shape()[2];
                let ga_on = tracked[a.0];
                let gb_on = tracked[b.0];
                if ga_on {
                    let ga = buf!(*a).expect("tracked");
                    for bi in 0..batch {
                        let gm = MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n);
                        let bs = &tb.data()[bi * k * n..(bi + 1) * k * n];
                        // c = a b  => da = dc b^T ;  c = a b^T => da = dc b
                        let bm = if *trans_b {
                            MatRef::new(bs, n, k)
                        } else {
                            MatRef::new(bs, k, n).t()
                        };
                        gemm(gm, bm, &mut ga[bi * m * k..(bi + 1) * m * k], E::one());
                    }
                }
                if gb_on {
                    let gb = buf!(*b).expect("tracked");
                    for bi in 0..batch {
                        let gm = MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n);
                        let am = MatRef::new(&ta.data()[bi * m * k..(bi + 1) * m * k], m, k);
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // db [n, k] = dc^T a
                            gemm(gm.t(), am, dst, E::one());
                        } else {
                            // db [k, n] = a^T dc
                            gemm(am.t(), gm, dst, E::one());
                        }
                    }
                }
            }
            Op::Silu(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((d, s), v) in gx.iter_mut().zip(&g).zip(vals[x.0].data()) {
                        let sig = E::one() / (E::one() + (-*v).exp());
                        *d = *d + *s * sig * (E::one() + *v * (E::one() - sig));
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = buf!(*x) {
                    let c = E::of_f64(GELU_C);
                    let k = E::of_f64(0.044715);
                    let half = E::of_f64(0.5);
                    let three = E::of_f64(3.0);
                    for ((d, s), v) in gx.iter_mut().zip(&g).zip(vals[x.0].data()) {
                        let v = *v;
                        let th = (c * (v + k * v * v * v)).tanh();
                        let dinner = c * (E::one() + three * k * v * v);
                        let dv = half * (E::one() + th) + half * v * (E::one() - th * th) * dinner;
                        *d = *d + *s * dv;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let tx = &vals[x.0];
                let gn = vals[gain.0].data();
                let dlen = tx.last_dim();
                let dn = E::of_f64(dlen as f64);
                if tracked[gain.0] {
                    let gg = buf!(*gain).expect("tracked");
                    for (r, inv) in inv_rms.iter().enumerate() {
                        let row = tx.row(r);
                        for j in 0..dlen {
                            gg[j] = gg[j] + g[r * dlen + j] * row[j] * *inv;
                        }
                    }
                }
                if let Some(gx) = buf!(*x) {
                    for (r, inv) in inv_rms.iter().enumerate() {
                        let row = tx.row(r);
                        let gr = &g[r * dlen..(r + 1) * dlen];
                        // dn_j = g_j * gain_j ; dx = inv * (dn - n * mean(dn * n))
                        let dot = (0..dlen).map(|j| gr[j] * gn[j] * row[j] * *inv).sum::<E>() / dn;
                        for j in 0..dlen {
                            let nj = row[j] * *inv;
                            let dnj = gr[j] * gn[j];
                            gx[r * dlen + j] = gx[r * dlen + j] + *inv * (dnj - nj * dot);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = buf!(*x) {
                    let y = &vals[i];
                    let n = y.last_dim();
                    for r in 0..y.numel() / n.max(1) {
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: E = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for j in 0..n {
                            gx[r * n + j] = gx[r * n + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = vals[p.0].numel();
                    if let Some(gp) = buf!(*p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = vals[i].shape()[0];
                let total = vals[i].shape()[1];
                let mut off = 0;
                for p in parts {
                    let c = vals[p.0].shape()[1];
                    if let Some(gp) = buf!(*p) {
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = vals[x.0].last_dim();
                if let Some(gx) = buf!(*x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::IndexAddRows { base, src, idx } => {
                let cols = vals[base.0].last_dim();
                if let Some(gb) = buf!(*base) {
                    add_into(gb, &g);
                }
                if let Some(gs) = buf!(*src) {
                    for (r, &dst) in idx.iter().enumerate() {
                        add_into(&mut gs[r * cols..(r + 1) * cols], &g[dst * cols..(dst + 1) * cols]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let total = vals[x.0].last_dim();
                let len = vals[i].last_dim();
                if let Some(gx) = buf!(*x) {
                    for r in 0..vals[i].shape()[0] {
                        add_into(&mut gx[r * total + start..r * total + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                let (l, width) = (vals[x.0].shape()[0], vals[x.0].shape()[1]);
                let d = width / heads;
                if let Some(gx) = buf!(*x) {
                    for h in 0..*heads {
                        for r in 0..l {
                            add_into(
                                &mut gx[r * width + h * d..r * width + (h + 1) * d],
                                &g[(h * l + r) * d..(h * l + r + 1) * d],
                            );
                        }
                    }
                }
            }
            Op::MergeHeads(x) => {
                let s = vals[x.0].shape();
                let (heads, l, d) = (s[0], s[1], s[2]);
                if let Some(gx) = buf!(*x) {
                    for r in 0..l {
                        for h in 0..heads {
                            add_into(
                                &mut gx[(h * l + r) * d..(h * l + r + 1) * d],
                                &g[r * heads * d + h * d..r * heads * d + (h + 1) * d],
                            );
                        }
                    }
                }
            }
            Op::RotatePairs { x, rot } => {
                if let Some(gx) = buf!(*x) {
                    let mut back = g;
                    rotate_rows(&mut back, rot, true);
                    add_into(gx, &back);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = buf!(*x) {
                    add_into(gx, &g);
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = buf!(*x) {
                    let s = g[0];
                    gx.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::MeanAll(x) => {
                if let Some(gx) = buf!(*x) {
                    let s = g[0] / E::of_f64(gx.len() as f64);
                    gx.iter_mut().for_each(|d| *d = *d + s);
                }
            }
        }
        Ok(())
    }
}

/// Lazily zero-initialised gradient buffer of a tracked input.
fn grad_slot<'a, E: Element>(
    grads: &'a mut [Option<Vec<E>>],
    vals: &[Tensor<E>],
    tracked: &[bool],
    v: Var,
) -> Option<&'a mut Vec<E>> {
    if !tracked[v.0] {
        return None;
    }
    let len = vals[v.0].numel();
    Some(grads[v.0].get_or_insert_with(|| vec![E::zero(); len]))
}

fn rotate_rows<E: Element>(data: &mut [E], rot: &PairRotation<E>, inverse: bool) {
    let w = 2 * rot.pairs;
    for (r, row) in data.chunks_exact_mut(w).enumerate() {
        let base = (r % rot.rows) * rot.pairs;
        for p in 0..rot.pairs {
            let c = rot.cos[base + p];
            let s = if inverse { -rot.sin[base + p] } else { rot.sin[base + p] };
            let (a, b) = (row[2 * p], row[2 * p + 1]);
            row[2 * p] = a * c - b * s;
            row[2 * p + 1] = a * s + b * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f32>::new();
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = tape.constant(i2.clone()).unwrap();
        let b = tape.constant(i2.clone()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &i2);
    }

    #[test]
    fn hand_computed_matmul() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(t(&[2, 1], &[0.0, 1.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros([2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax_lastdim(x, None).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn masked_softmax_single_survivor() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[2], &[5.0, 1.0])).unwrap();
        let m = Mask::new([2], vec![true, false]).unwrap();
        let y = tape.softmax_lastdim(x, Some(&m)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = Mask::new([2, 2], vec![true, true, false, false]).unwrap();
        assert!(matches!(tape.softmax_lastdim(x, Some(&m)), Err(Error::AllMasked { row: 1 })));
    }

    #[test]
    fn rmsnorm_hand_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let g = tape.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let y = tape.rmsnorm(x, g).unwrap();
        let s = 12.5f32.sqrt();
        let out = tape.value(y).data();
        assert!((out[0] - 3.0 / s).abs() < 1e-6 && (out[1] - 4.0 / s).abs() < 1e-6);

        let ones = tape.constant(Tensor::full([4], 1.0)).unwrap();
        let g4 = tape.constant(Tensor::full([4], 1.0)).unwrap();
        let y = tape.rmsnorm(ones, g4).unwrap();
        assert!(tape.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn rmsnorm_zero_vector_is_finite() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([3])).unwrap();
        let g = tape.constant(Tensor::full([3], 1.0)).unwrap();
        let y = tape.rmsnorm(x, g).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::from_fn([2, 3, 4], |i| i as f32 * 0.1)).unwrap();
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let c = tape.constant(Tensor::scalar(5.0)).unwrap();
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn second_backward_fails() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(f32::MAX)).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn heads_round_trip() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([5, 6], |i| i as f32)).unwrap();
        let h = tape.split_heads(x, 3).unwrap();
        assert_eq!(tape.shape(h), &[3, 5, 2]);
        assert_eq!(tape.value(h).data()[..4], [0.0, 1.0, 6.0, 7.0]);
        let m = tape.merge_heads(h).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }
}
