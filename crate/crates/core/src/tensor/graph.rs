use std::collections::HashMap;
use std::sync::Arc;

use super::ops::{self, Broadcast, MatView};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAxis(Var, usize),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    /// Input and the derivative at each input value.
    Gelu(Var, Vec<T>),
    Relu(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    MaskedFill(Var, Arc<[bool]>),
    Softmax(Var),
    Normalize(Var, Vec<T>),
    IndexSelect {
        a: Var,
        axis: usize,
        idx: Arc<[usize]>,
    },
    IndexAdd {
        a: Var,
        axis: usize,
        idx: Arc<[usize]>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of primitive evaluations.
///
/// Nodes are immutable once recorded, so the graph seen by `backward` is
/// exactly the one built by the forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to the leaves that asked for them.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.remove(&v)
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn normalize_axis(rank: usize, axis: isize) -> Result<usize> {
    let a = if axis < 0 { rank as isize + axis } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(shape_err("axis", format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient in `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Broadcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let plan = Broadcast::plan(sa, sb)
            .ok_or_else(|| shape_err(name, format!("cannot broadcast {sb:?} onto {sa:?}")))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<T> = match &plan {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Suffix(n) => {
                let mut out = Vec::with_capacity(av.len());
                for chunk in av.chunks_exact(*n) {
                    out.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            Broadcast::General(idx) => av.iter().zip(idx).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        check_finite(name, &data)?;
        Ok((Tensor::from_parts(sa.to_vec(), data), plan))
    }

    /// Elementwise `a + b`; `b` broadcasts onto `a` (right-aligned, dims equal or 1).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b, plan), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b, plan), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b, plan), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let data: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        check_finite("scale", &data)?;
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Scale(a, c), rg))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let data: Vec<T> = self.value(a).data().iter().map(|&x| f(x)).collect();
        check_finite(name, &data)?;
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.unary("exp", a, |x| x.exp())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Exp(a), rg))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let t = self.unary("ln", a, |x| x.ln())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Ln(a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.unary("tanh", a, |x| x.tanh())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Tanh(a), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let rg = self.rg(a);
        let (y, d): (Vec<T>, Vec<T>) = if rg {
            self.value(a).data().iter().map(|&x| ops::gelu_with_grad(x)).unzip()
        } else {
            (self.value(a).data().iter().map(|&x| ops::gelu(x)).collect(), Vec::new())
        };
        check_finite("gelu", &y)?;
        let t = Tensor::from_parts(self.shape(a).to_vec(), y);
        Ok(self.push(t, Op::Gelu(a, d), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.unary("relu", a, |x| x.max(T::zero()))?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Relu(a), rg))
    }

    /// Batched matrix product `a @ b` over the last two axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a @ b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// General batched product `op(a) @ op(b)`, `op` transposing the last
    /// two axes when its flag is set. Batch dims must agree, or one side is
    /// a plain matrix shared by every batch entry.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} @ {sb:?}: rank < 2")));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let av = MatView::new(ra, ca, ta);
        let bv = MatView::new(rb, cb, tb);
        if av.cols != bv.rows {
            return Err(shape_err(
                "matmul",
                format!("{sa:?} (t={ta}) @ {sb:?} (t={tb}): inner dims differ"),
            ));
        }
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let batch_b: usize = sb[..sb.len() - 2].iter().product();
        let lead: Vec<usize> = if sa.len() >= sb.len() {
            sa[..sa.len() - 2].to_vec()
        } else {
            sb[..sb.len() - 2].to_vec()
        };
        let shared_a = sa.len() == 2 && sb.len() > 2;
        let shared_b = sb.len() == 2 && sa.len() > 2;
        if !(shared_a || shared_b) && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", format!("batch dims differ: {sa:?} @ {sb:?}")));
        }
        let batch = batch_a.max(batch_b);
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![T::zero(); batch * m * n];
        let adata = self.value(a).data();
        let bdata = self.value(b).data();
        if shared_b && !ta {
            // Fold the batch into rows: a single large product.
            let big = MatView::new(batch * ra, ca, false);
            ops::gemm(adata, big, bdata, bv, &mut out, T::zero());
        } else {
            let (sza, szb) = (ra * ca, rb * cb);
            for i in 0..batch {
                let ai = if shared_a { 0 } else { i * sza };
                let bi = if shared_b { 0 } else { i * szb };
                ops::gemm(
                    &adata[ai..ai + sza],
                    av,
                    &bdata[bi..bi + szb],
                    bv,
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::zero(),
                );
            }
        }
        check_finite("matmul", &out)?;
        let mut shape = lead;
        shape.push(m);
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let (data, out_shape) = ops::permute(self.value(a).data(), shape, axes);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Sum over one axis (removed from the shape).
    pub fn sum_axis(&mut self, a: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let axis = normalize_axis(shape.len(), axis)?;
        let (outer, len, inner) = ops::split_axis(&shape, axis);
        let data = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        check_finite("sum", &out)?;
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: isize) -> Result<Var> {
        let r = self.shape(a).len();
        let n = self.shape(a)[normalize_axis(r, axis)?];
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&mut self, parts: &[Var], axis: isize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        let axis = normalize_axis(first.len(), axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} along {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = ops::split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let axis = normalize_axis(shape.len(), axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("[{start}, {}) of {shape:?} axis {axis}", start + len)));
        }
        let (outer, full, inner) = ops::split_axis(&shape, axis);
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&data[s..s + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Narrow { a, axis, start }, rg))
    }

    /// Split into equal chunks along `axis`.
    pub fn split(&mut self, a: Var, axis: isize, chunks: usize) -> Result<Vec<Var>> {
        let shape = self.shape(a).to_vec();
        let ax = normalize_axis(shape.len(), axis)?;
        if chunks == 0 || !shape[ax].is_multiple_of(chunks) {
            return Err(shape_err("split", format!("{} into {chunks}", shape[ax])));
        }
        let len = shape[ax] / chunks;
        (0..chunks).map(|i| self.narrow(a, axis, i * len, len)).collect()
    }

    /// Replace entries where `mask` is true with `value`. The mask covers
    /// the trailing dims of `a` and repeats over the leading ones.
    pub fn masked_fill(&mut self, a: Var, mask: Arc<[bool]>, value: f64) -> Result<Var> {
        let data = self.value(a).data();
        if mask.is_empty() || !data.len().is_multiple_of(mask.len()) {
            return Err(shape_err("masked_fill", format!("mask of {} vs {}", mask.len(), data.len())));
        }
        let v = T::from_f64_lossy(value);
        let out: Vec<T> = data
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % mask.len()] { v } else { x })
            .collect();
        check_finite("masked_fill", &out)?;
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(a);
        Ok(self.push(t, Op::MaskedFill(a, mask), rg))
    }

    /// Row softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    /// Row softmax over the last axis. `allowed` (covering the trailing two
    /// dims and repeated over leading ones) marks entries that take part; the
    /// rest receive probability exactly zero. A row with nothing allowed is
    /// an error.
    pub fn softmax_masked(&mut self, a: Var, allowed: Option<Arc<[bool]>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("softmax", "rank 0"))?;
        let data = self.value(a).data();
        if let Some(m) = &allowed {
            if m.len() % n != 0 || !data.len().is_multiple_of(m.len()) {
                return Err(shape_err("softmax", format!("mask of {} for rows of {n}", m.len())));
            }
        }
        let mut out = vec![T::zero(); data.len()];
        for (r, (row, orow)) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let ok = |j: usize| match &allowed {
                None => true,
                Some(m) => m[(r * n + j) % m.len()],
            };
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if ok(j) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::AllMasked { row: r });
            }
            let mut sum = T::zero();
            for (j, (&x, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if ok(j) {
                    let e = (x - max).exp();
                    *o = e;
                    sum += e;
                }
            }
            let inv = T::one() / sum;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        check_finite("softmax", &out)?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg))
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("normalize", "rank 0"))?;
        let data = self.value(a).data();
        let eps = T::from_f64_lossy(NORM_EPS);
        let nf = T::from_usize(n).unwrap();
        let mut out = Vec::with_capacity(data.len());
        let mut inv_std = Vec::with_capacity(data.len() / n);
        for row in data.chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|&x| (x - mean) * is));
        }
        check_finite("normalize", &out)?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Normalize(a, inv_std), rg))
    }

    /// Gather along `axis`: output entry `r` is input entry `idx[r]`.
    pub fn index_select(&mut self, a: Var, axis: isize, idx: Arc<[usize]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let axis = normalize_axis(shape.len(), axis)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= shape[axis]) {
            return Err(shape_err("index_select", format!("index out of range for extent {}", shape[axis])));
        }
        let out = ops::index_select(self.value(a).data(), &shape, axis, &idx);
        let mut new_shape = shape;
        new_shape[axis] = idx.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::IndexSelect { a, axis, idx }, rg))
    }

    /// Scatter-add along `axis` into a zero tensor of extent `len` there.
    pub fn index_add(&mut self, a: Var, axis: isize, idx: Arc<[usize]>, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let axis = normalize_axis(shape.len(), axis)?;
        if idx.len() != shape[axis] || idx.iter().any(|&i| i >= len) {
            return Err(shape_err("index_add", format!("index map of {} into {len}", idx.len())));
        }
        let out = ops::index_add(self.value(a).data(), &shape, axis, &idx, len);
        check_finite("index_add", &out)?;
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::IndexAdd { a, axis, idx }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Invalid(format!("unknown node {}", loss.0)));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut leaves, i);
        }
        Ok(Gradients { leaves })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaves: &mut HashMap<Var, Tensor<T>>,
        i: usize,
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {
                leaves.insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
            Op::Add(a, b, plan) => {
                if self.rg(*b) {
                    acc(*b, plan.reduce(&g, self.nodes[b.0].value.len()));
                }
                acc(*a, g);
            }
            Op::Sub(a, b, plan) => {
                if self.rg(*b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    acc(*b, plan.reduce(&neg, self.nodes[b.0].value.len()));
                }
                acc(*a, g);
            }
            Op::Mul(a, b, plan) => {
                let (av, bv) = (val(*a), val(*b));
                if self.rg(*b) {
                    let ga: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    acc(*b, plan.reduce(&ga, bv.len()));
                }
                if self.rg(*a) {
                    let gb: Vec<T> = g.iter().enumerate().map(|(k, &x)| x * bv[plan.map(k)]).collect();
                    acc(*a, gb);
                }
            }
            Op::Scale(a, c) => acc(*a, g.into_iter().map(|x| x * *c).collect()),
            Op::MatMul { a, b, ta, tb } => self.matmul_backward(*a, *b, *ta, *tb, &g, &mut acc),
            Op::Permute(a, axes) => {
                let inv = ops::inverse_axes(axes);
                let (d, _) = ops::permute(&g, node.value.shape(), &inv);
                acc(*a, d);
            }
            Op::Reshape(a) => acc(*a, g),
            Op::SumAxis(a, axis) => {
                let shape = self.nodes[a.0].value.shape();
                let (outer, len, inner) = ops::split_axis(shape, *axis);
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*a, d);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(&x, &e)| x * e).collect());
            }
            Op::Ln(a) => {
                let x = val(*a);
                acc(*a, g.iter().zip(x).map(|(&d, &v)| d / v).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect());
            }
            Op::Gelu(a, deriv) => {
                acc(*a, g.iter().zip(deriv).map(|(&d, &s)| d * s).collect());
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = ops::split_axis(shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if self.rg(*p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&g[s..s + len * inner]);
                        }
                        acc(*p, d);
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let shape = self.nodes[a.0].value.shape();
                let (outer, full, inner) = ops::split_axis(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    d[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*a, d);
            }
            Op::MaskedFill(a, mask) => {
                let m = mask.len();
                acc(
                    *a,
                    g.iter()
                        .enumerate()
                        .map(|(k, &d)| if mask[k % m] { T::zero() } else { d })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(n).zip(g.chunks_exact(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    d.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                acc(*a, d);
            }
            Op::Normalize(a, inv_std) => {
                let n = *node.value.shape().last().unwrap();
                let nf = T::from_usize(n).unwrap();
                let y = node.value.data();
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &is) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(inv_std) {
                    let mg = gr.iter().copied().sum::<T>() / nf;
                    let mgy = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / nf;
                    d.extend(yr.iter().zip(gr).map(|(&p, &q)| is * (q - mg - p * mgy)));
                }
                acc(*a, d);
            }
            Op::IndexSelect { a, axis, idx } => {
                let shape = node.value.shape();
                let full = self.nodes[a.0].value.shape()[*axis];
                acc(*a, ops::index_add(&g, shape, *axis, idx, full));
            }
            Op::IndexAdd { a, axis, idx } => {
                acc(*a, ops::index_select(&g, node.value.shape(), *axis, idx));
            }
        }
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        g: &[T],
        acc: &mut impl FnMut(Var, Vec<T>),
    ) {
        let at = &self.nodes[a.0].value;
        let bt = &self.nodes[b.0].value;
        let (sa, sb) = (at.shape(), bt.shape());
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let av = MatView::new(ra, ca, ta);
        let bv = MatView::new(rb, cb, tb);
        let (m, n) = (av.rows, bv.cols);
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let batch_b: usize = sb[..sb.len() - 2].iter().product();
        let shared_a = sa.len() == 2 && sb.len() > 2;
        let shared_b = sb.len() == 2 && sa.len() > 2;
        let batch = batch_a.max(batch_b);
        let (sza, szb) = (ra * ca, rb * cb);
        let gv = MatView::new(m, n, false);
        let gvt = MatView::new(m, n, true);

        if self.rg(a) {
            let mut da = vec![T::zero(); at.len()];
            if shared_b && !ta {
                // dA_flat = dC_flat @ op(B)^T
                let big = MatView::new(batch * m, n, false);
                ops::gemm(g, big, bt.data(), MatView::new(rb, cb, !tb), &mut da, T::zero());
            } else {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = if shared_b { 0 } else { i * szb };
                    let bslice = &bt.data()[bi..bi + szb];
                    let ai = if shared_a { 0 } else { i * sza };
                    let beta = if shared_a && i > 0 { T::one() } else { T::zero() };
                    let dst = &mut da[ai..ai + sza];
                    if !ta {
                        // dA = dC @ op(B)^T
                        ops::gemm(gi, gv, bslice, MatView::new(rb, cb, !tb), dst, beta);
                    } else {
                        // dA = op(B) @ dC^T
                        ops::gemm(bslice, MatView::new(rb, cb, tb), gi, gvt, dst, beta);
                    }
                }
            }
            acc(a, da);
        }
        if self.rg(b) {
            let mut db = vec![T::zero(); bt.len()];
            if shared_b && !ta {
                let big_a = MatView::new(batch * ra, ca, false);
                let big_g = MatView::new(batch * m, n, false);
                if !tb {
                    // dB = A_flat^T @ dC_flat
                    ops::gemm(at.data(), MatView::new(batch * ra, ca, true), g, big_g, &mut db, T::zero());
                } else {
                    // dB = dC_flat^T @ A_flat
                    ops::gemm(g, MatView::new(batch * m, n, true), at.data(), big_a, &mut db, T::zero());
                }
            } else {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = if shared_a { 0 } else { i * sza };
                    let aslice = &at.data()[ai..ai + sza];
                    let bi = if shared_b { 0 } else { i * szb };
                    let beta = if shared_b && i > 0 { T::one() } else { T::zero() };
                    let dst = &mut db[bi..bi + szb];
                    if !tb {
                        // dB = op(A)^T @ dC
                        ops::gemm(aslice, MatView::new(ra, ca, !ta), gi, gv, dst, beta);
                    } else {
                        // dB = dC^T @ op(A)
                        ops::gemm(gi, gvt, aslice, MatView::new(ra, ca, ta), dst, beta);
                    }
                }
            }
            acc(b, db);
        }
    }
}
