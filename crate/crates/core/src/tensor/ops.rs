// Slice-level kernels shared by the forward and backward passes.

use crate::scalar::Scalar;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// How the second operand of a binary op maps onto the output.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// `b` equals the trailing dims of `a`; index is `i % n`.
    Suffix(usize),
    /// Explicit per-output-element index into `b`.
    General(Vec<usize>),
}

impl Broadcast {
    /// `b_shape` is right-aligned against `out`; every dim must match or be 1.
    pub(crate) fn plan(out: &[usize], b_shape: &[usize]) -> Option<Self> {
        if out == b_shape {
            return Some(Broadcast::Same);
        }
        if b_shape.len() > out.len() {
            return None;
        }
        let off = out.len() - b_shape.len();
        if out[off..] == *b_shape {
            return Some(Broadcast::Suffix(b_shape.iter().product()));
        }
        for (i, &d) in b_shape.iter().enumerate() {
            if d != 1 && d != out[off + i] {
                return None;
            }
        }
        let bs = strides(b_shape);
        let mut eff = vec![0usize; out.len()];
        for (i, &d) in b_shape.iter().enumerate() {
            if d != 1 {
                eff[off + i] = bs[i];
            }
        }
        let n: usize = out.iter().product();
        let mut idx = Vec::with_capacity(n);
        let mut counter = vec![0usize; out.len()];
        let mut cur = 0usize;
        for _ in 0..n {
            idx.push(cur);
            for ax in (0..out.len()).rev() {
                counter[ax] += 1;
                cur += eff[ax];
                if counter[ax] < out[ax] {
                    break;
                }
                cur -= eff[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        Some(Broadcast::General(idx))
    }

    #[inline]
    pub(crate) fn map(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(n) => i % n,
            Broadcast::General(idx) => idx[i],
        }
    }

    /// Reduce an output-shaped gradient onto `b`.
    pub(crate) fn reduce<T: Scalar>(&self, g: &[T], b_len: usize) -> Vec<T> {
        match self {
            Broadcast::Same => g.to_vec(),
            Broadcast::Suffix(n) => {
                let mut out = vec![T::zero(); *n];
                for chunk in g.chunks_exact(*n) {
                    for (o, &v) in out.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                out
            }
            Broadcast::General(idx) => {
                let mut out = vec![T::zero(); b_len];
                for (&j, &v) in idx.iter().zip(g) {
                    out[j] += v;
                }
                out
            }
        }
    }
}

pub(crate) fn permute<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_stride: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_stride[rank - 1];
    let outer = n / inner;
    let mut counter = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            let mut p = base;
            for _ in 0..inner {
                out.push(data[p]);
                p += inner_stride;
            }
        }
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            base += src_stride[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            base -= src_stride[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Logical `(rows, cols)` of a stored `(r, c)` matrix, and its strides.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub(crate) fn new(stored_rows: usize, stored_cols: usize, transposed: bool) -> Self {
        if transposed {
            MatView {
                rows: stored_cols,
                cols: stored_rows,
                rs: 1,
                cs: stored_cols as isize,
            }
        } else {
            MatView {
                rows: stored_rows,
                cols: stored_cols,
                rs: stored_cols as isize,
                cs: 1,
            }
        }
    }
}

/// `c <- a @ b + beta * c` for logical views.
pub(crate) fn gemm<T: Scalar>(a: &[T], av: MatView, b: &[T], bv: MatView, c: &mut [T], beta: T) {
    assert_eq!(av.cols, bv.rows);
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    assert!(c.len() >= m * n);
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: bounds asserted above; c does not alias a or b (distinct borrows).
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Outer/axis/inner factorization of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn index_select<T: Scalar>(data: &[T], shape: &[usize], axis: usize, idx: &[usize]) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        let base = o * len * inner;
        for &i in idx {
            let s = base + i * inner;
            out.extend_from_slice(&data[s..s + inner]);
        }
    }
    out
}

/// Scatter-add along `axis`: `out[.., idx[r], ..] += data[.., r, ..]`.
pub(crate) fn index_add<T: Scalar>(
    data: &[T],
    shape: &[usize],
    axis: usize,
    idx: &[usize],
    out_len: usize,
) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    debug_assert_eq!(len, idx.len());
    let mut out = vec![T::zero(); outer * out_len * inner];
    for o in 0..outer {
        for (r, &i) in idx.iter().enumerate() {
            let src = &data[(o * len + r) * inner..(o * len + r + 1) * inner];
            let dst = &mut out[(o * out_len + i) * inner..(o * out_len + i + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `(gelu(x), gelu'(x))` sharing one tanh.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    gelu_with_grad(x).0
}

pub(crate) fn gelu_with_grad<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    // tanh through one exp; saturates cleanly for large |z|.
    let z = c * (x + a * x * x * x);
    let two = T::from_f64_lossy(2.0);
    let t = if z.abs() > T::from_f64_lossy(15.0) { z.signum() } else { T::one() - two / ((two * z).exp() + T::one()) };
    let y = half * x * (T::one() + t);
    (y, half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x))
}
