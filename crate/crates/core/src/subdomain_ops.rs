//! Neural operators acting on one subdomain block at a time.
//!
//! Every operator maps a batch of blocks `(B, p, m_in)` to `(B, p, m_out)`
//! with one parameter set shared by all subdomains. Kernels see local
//! coordinates in `[0, 1]^2`, so the quadrature weight passed to the
//! integral operators is that of the reference square, `1 / p`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::ops::{gelu, gemm, MatView};
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

/// Cell-centered coordinates of a `p1 x p2` block, local to the subdomain.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalCoords {
    pub sub_resolution: [usize; 2],
    pub points: Vec<[f64; 2]>,
}

impl LocalCoords {
    pub fn new(sub_resolution: [usize; 2]) -> Self {
        let [p1, p2] = sub_resolution;
        let mut points = Vec::with_capacity(p1 * p2);
        for a in 0..p1 {
            for b in 0..p2 {
                points.push([(a as f64 + 0.5) / p1 as f64, (b as f64 + 0.5) / p2 as f64]);
            }
        }
        Self { sub_resolution, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Midpoint weight of the reference square.
    pub fn reference_weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    /// `(p, 2)` point features.
    pub fn point_features<T: Scalar>(&self) -> Tensor<T> {
        let flat: Vec<f64> = self.points.iter().flatten().copied().collect();
        Tensor::from_f64(&[self.len(), 2], &flat).expect("point features")
    }

    /// `(p * p, 4)` pair features `x_i (+) x_j`, `i` major.
    pub fn pair_features<T: Scalar>(&self) -> Tensor<T> {
        self.pair_rows(0..self.len())
    }

    /// Pair features for the targets `x_i`, `i` in `rows`, against every source.
    pub fn pair_rows<T: Scalar>(&self, rows: Range<usize>) -> Tensor<T> {
        let (p, r) = (self.len(), rows.len());
        let mut flat = Vec::with_capacity(r * p * 4);
        for x in &self.points[rows] {
            for y in &self.points {
                flat.extend_from_slice(&[x[0], x[1], y[0], y[1]]);
            }
        }
        Tensor::from_f64(&[r * p, 4], &flat).expect("pair features")
    }
}

fn init_weight<T: Scalar>(shape: &[usize], fan_in: usize, extra: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::uniform(shape, extra / (fan_in as f64).sqrt(), rng)
}

/// `x @ w (+ b)` on the last axis of `x`.
pub(crate) fn dense<T: Scalar>(g: &mut Graph<T>, b: &Bound, x: Var, w: ParamId, bias: Option<ParamId>) -> Result<Var> {
    let y = g.matmul(x, b.var(w))?;
    match bias {
        Some(id) => g.add(y, b.var(id)),
        None => Ok(y),
    }
}

/// Pointwise linear map with optional bias, registered in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        m_in: usize,
        m_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_weight(&[m_in, m_out], m_in, 1.0, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[m_out])));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        dense(g, b, x, self.w, self.b)
    }
}

/// Coordinate network with gelu between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMLP {
    pub widths: Vec<usize>,
    pub layers: Vec<Linear>,
}

impl KernelMLP {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, widths: &[usize], rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self {
            widths: widths.to_vec(),
            layers,
        }
    }

    fn hidden_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1)
    }

    /// Frozen evaluation on point pairs, with the first layer split into
    /// per-point projections so pair features are never formed.
    fn prepare_pairs<'a, T: Scalar>(&'a self, g: &'a Graph<T>, b: &'a Bound, coords: &LocalCoords) -> Result<PairNet<'a, T>> {
        if self.layers.len() < 2 || self.widths[0] != 4 {
            return Err(Error::Invalid(format!("pair kernel widths {:?}", self.widths)));
        }
        let h0 = self.widths[1];
        let w0 = g.value(b.var(self.layers[0].w)).data();
        let b0 = self.layers[0].b.map(|id| g.value(b.var(id)).data());
        let p = coords.len();
        let (mut target, mut source) = (vec![T::zero(); p * h0], vec![T::zero(); p * h0]);
        for (i, pt) in coords.points.iter().enumerate() {
            let [x0, x1] = pt.map(T::from_f64_lossy);
            for k in 0..h0 {
                let bias = b0.map_or(T::zero(), |bv| bv[k]);
                target[i * h0 + k] = x0 * w0[k] + x1 * w0[h0 + k] + bias;
                source[i * h0 + k] = x0 * w0[2 * h0 + k] + x1 * w0[3 * h0 + k];
            }
        }
        Ok(PairNet {
            net: self,
            g,
            b,
            target,
            source,
            p,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, b, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h)?;
            }
        }
        Ok(h)
    }
}

/// Per-pair cost of contracting the last vanilla kernel layer with the input
/// (`batch h m_out`) against forming the kernel (`m_in m_out (h + batch)`).
fn vanilla_contracts_first(batch: usize, h: usize, m_in: usize) -> bool {
    batch * h < m_in * (h + batch)
}

struct PairNet<'a, T> {
    net: &'a KernelMLP,
    g: &'a Graph<T>,
    b: &'a Bound,
    /// `(p, h0)` first-layer projections of targets (with bias) and sources.
    target: Vec<T>,
    source: Vec<T>,
    p: usize,
}

impl<T: Scalar> PairNet<'_, T> {
    fn value(&self, id: ParamId) -> &[T] {
        self.g.value(self.b.var(id)).data()
    }

    /// Activations entering the last layer for target `rows`, `(rows p, h)`.
    fn hidden(&self, rows: Range<usize>) -> Vec<T> {
        let (p, widths) = (self.p, &self.net.widths);
        let h0 = widths[1];
        let mut h = Vec::with_capacity(rows.len() * p * h0);
        for i in rows {
            let t = &self.target[i * h0..(i + 1) * h0];
            for s in self.source.chunks(h0) {
                h.extend(t.iter().zip(s).map(|(&a, &b)| gelu(a + b)));
            }
        }
        let n = h.len() / h0;
        let last = self.net.layers.len() - 1;
        for (layer, w) in self.net.layers[1..last].iter().zip(widths[1..].windows(2)) {
            let mut next = vec![T::zero(); n * w[1]];
            gemm(&h, MatView::new(n, w[0], false), self.value(layer.w), MatView::new(w[0], w[1], false), &mut next, T::zero());
            let bias = layer.b.map(|id| self.value(id));
            for row in next.chunks_mut(w[1]) {
                for (k, v) in row.iter_mut().enumerate() {
                    *v = gelu(*v + bias.map_or(T::zero(), |bv| bv[k]));
                }
            }
            h = next;
        }
        h
    }

    /// Last layer applied to `hidden` output.
    fn output(&self, h: &[T]) -> Vec<T> {
        let layer = self.net.layers.last().expect("at least two layers");
        let w = &self.net.widths[self.net.widths.len() - 2..];
        let n = h.len() / w[0];
        let mut out = vec![T::zero(); n * w[1]];
        gemm(h, MatView::new(n, w[0], false), self.value(layer.w), MatView::new(w[0], w[1], false), &mut out, T::zero());
        if let Some(id) = layer.b {
            let bv = self.value(id);
            for row in out.chunks_mut(w[1]) {
                row.iter_mut().zip(bv).for_each(|(v, &c)| *v += c);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorKind {
    Vanilla,
    LowRank,
    Mixture,
    SeparableMixture,
    Interpolating,
    Attention,
    Spectral,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 7] = [
        OperatorKind::Vanilla,
        OperatorKind::LowRank,
        OperatorKind::Mixture,
        OperatorKind::SeparableMixture,
        OperatorKind::Interpolating,
        OperatorKind::Attention,
        OperatorKind::Spectral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::Vanilla => "vanilla",
            OperatorKind::LowRank => "lowrank",
            OperatorKind::Mixture => "mixture",
            OperatorKind::SeparableMixture => "separable_mixture",
            OperatorKind::Interpolating => "interpolating",
            OperatorKind::Attention => "attention",
            OperatorKind::Spectral => "spectral",
        }
    }

    /// Linear in the input block for fixed parameters.
    pub fn is_linear(self) -> bool {
        self != OperatorKind::Attention
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown operator kind {s:?}")))
    }
}

/// Hyperparameters of a subdomain operator; fields that do not apply to
/// the chosen kind are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorConfig {
    pub kind: OperatorKind,
    /// Hidden width of coordinate kernel networks.
    pub kernel_hidden: usize,
    /// Low-rank and interpolating rank; 0 picks `m / 2`.
    pub rank: usize,
    /// Number of mixture matrices `l`.
    pub mixture_size: usize,
    pub anchors: [usize; 2],
    pub heads: usize,
    pub modes: [usize; 2],
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            kind: OperatorKind::Mixture,
            kernel_hidden: 32,
            rank: 0,
            mixture_size: 32,
            anchors: [4, 4],
            heads: 1,
            modes: [4, 4],
        }
    }
}

impl OperatorConfig {
    pub fn with_kind(kind: OperatorKind) -> Self {
        Self { kind, ..Self::default() }
    }

    fn effective_rank(&self, m_in: usize, m_out: usize) -> usize {
        if self.rank > 0 {
            self.rank
        } else {
            (m_in.min(m_out) / 2).max(1)
        }
    }
}

const COEFF_HIDDEN: usize = 8;

/// Frozen evaluations with more point pairs than this run in row chunks on
/// scratch graphs, so the `(p, p, ..)` kernels are never held whole.
const PAIR_CHUNK: usize = 1 << 20;
/// Scalars per pair intermediate in one block of target rows.
const BLOCK_ELEMENTS: usize = 1 << 17;
/// Attention row chunks carry several `(rows, p)` score tensors per head.
const BLOCK_ATTENTION: usize = 1;

#[derive(Clone, Debug, PartialEq)]
enum Params {
    Vanilla {
        kernel: KernelMLP,
    },
    LowRank {
        rank: usize,
        phi: KernelMLP,
        psi: KernelMLP,
    },
    Mixture {
        l: usize,
        coeff: KernelMLP,
        /// `(l, m_out, m_in)`.
        matrices: ParamId,
    },
    SeparableMixture {
        l: usize,
        coeff: KernelMLP,
        /// `(l, m)`.
        diagonals: ParamId,
        pointwise: ParamId,
    },
    Interpolating {
        rank: usize,
        anchors: [usize; 2],
        /// `(a1 * a2, m_out * rank)`.
        phi: ParamId,
        /// `(a1 * a2, m_in * rank)`.
        psi: ParamId,
    },
    Attention {
        heads: usize,
        q: ParamId,
        k: ParamId,
        v: ParamId,
    },
    Spectral {
        modes: [usize; 2],
        /// `(k1 * k2, m_in, m_out)` each.
        w_re: ParamId,
        w_im: ParamId,
        skip: ParamId,
    },
}

/// A subdomain operator whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct SubdomainOperator {
    pub kind: OperatorKind,
    pub m_in: usize,
    pub m_out: usize,
    params: Params,
}

impl SubdomainOperator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &OperatorConfig,
        m_in: usize,
        m_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if m_in == 0 || m_out == 0 {
            return Err(Error::Invalid(format!("{name}: channel counts must be positive")));
        }
        let h = config.kernel_hidden;
        let params = match config.kind {
            OperatorKind::Vanilla => Params::Vanilla {
                kernel: KernelMLP::new(store, &format!("{name}.kernel"), &[4, h, h, m_out * m_in], rng),
            },
            OperatorKind::LowRank => {
                let rank = config.effective_rank(m_in, m_out);
                Params::LowRank {
                    rank,
                    phi: KernelMLP::new(store, &format!("{name}.phi"), &[2, h, h, m_out * rank], rng),
                    psi: KernelMLP::new(store, &format!("{name}.psi"), &[2, h, h, m_in * rank], rng),
                }
            }
            OperatorKind::Mixture => {
                let l = positive(config.mixture_size, "mixture_size")?;
                let coeff = KernelMLP::new(store, &format!("{name}.coeff"), &[4, COEFF_HIDDEN, l], rng);
                let extra = 1.0 / (l as f64).sqrt();
                let matrices = store.add(format!("{name}.matrices"), init_weight(&[l, m_out, m_in], m_in, extra, rng));
                Params::Mixture { l, coeff, matrices }
            }
            OperatorKind::SeparableMixture => {
                let l = positive(config.mixture_size, "mixture_size")?;
                let coeff = KernelMLP::new(store, &format!("{name}.coeff"), &[4, COEFF_HIDDEN, l], rng);
                let extra = 1.0 / (l as f64).sqrt();
                let diagonals = store.add(format!("{name}.diagonals"), init_weight(&[l, m_in], 1, extra, rng));
                let pointwise = store.add(format!("{name}.pointwise"), init_weight(&[m_in, m_out], m_in, 1.0, rng));
                Params::SeparableMixture {
                    l,
                    coeff,
                    diagonals,
                    pointwise,
                }
            }
            OperatorKind::Interpolating => {
                let rank = config.effective_rank(m_in, m_out);
                let anchors = config.anchors;
                if anchors[0] < 2 || anchors[1] < 2 {
                    return Err(Error::Invalid(format!("{name}: anchor grid {anchors:?} must be at least 2x2")));
                }
                let a = anchors[0] * anchors[1];
                Params::Interpolating {
                    rank,
                    anchors,
                    phi: store.add(format!("{name}.phi"), init_weight(&[a, m_out * rank], rank, 1.0, rng)),
                    psi: store.add(format!("{name}.psi"), init_weight(&[a, m_in * rank], m_in, 1.0, rng)),
                }
            }
            OperatorKind::Attention => {
                let heads = positive(config.heads, "heads")?;
                if !m_out.is_multiple_of(heads) {
                    return Err(Error::Divisibility {
                        what: format!("{name}: channels vs heads"),
                        extent: m_out,
                        divisor: heads,
                    });
                }
                let mut lin = |s: &str| store.add(format!("{name}.{s}"), init_weight(&[m_in, m_out], m_in, 1.0, rng));
                Params::Attention {
                    heads,
                    q: lin("q"),
                    k: lin("k"),
                    v: lin("v"),
                }
            }
            OperatorKind::Spectral => {
                let modes = config.modes;
                if modes[0] == 0 || modes[1] == 0 {
                    return Err(Error::Invalid(format!("{name}: modes {modes:?} must be positive")));
                }
                let k = modes[0] * modes[1];
                Params::Spectral {
                    modes,
                    w_re: store.add(format!("{name}.w_re"), init_weight(&[k, m_in, m_out], m_in, 1.0, rng)),
                    w_im: store.add(format!("{name}.w_im"), init_weight(&[k, m_in, m_out], m_in, 1.0, rng)),
                    skip: store.add(format!("{name}.skip"), init_weight(&[m_in, m_out], m_in, 1.0, rng)),
                }
            }
        };
        Ok(Self {
            kind: config.kind,
            m_in,
            m_out,
            params,
        })
    }

    /// Apply to a batch of blocks `x: (B, p, m_in)` with quadrature weight `w`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        coords: &LocalCoords,
        w: f64,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let p = coords.len();
        if shape.len() != 3 || shape[1] != p || shape[2] != self.m_in {
            return Err(shape_err(
                "subdomain_operator",
                format!("{} expects (B, {p}, {}), got {shape:?}", self.kind, self.m_in),
            ));
        }
        let batch = shape[0];
        let (m_in, m_out) = (self.m_in, self.m_out);
        if p * p > PAIR_CHUNK && self.pairwise() && !g.requires_grad(x) && b.vars().iter().all(|&v| !g.requires_grad(v)) {
            let u = self.forward_frozen(g, b, x, coords, w)?;
            return Ok(g.constant(u));
        }
        match &self.params {
            Params::Vanilla { kernel } => {
                let pairs = g.constant(coords.pair_features());
                let k = kernel.forward(g, b, pairs)?;
                let k = g.reshape(k, &[p, p, m_out, m_in])?;
                let k = g.permute(k, &[0, 2, 1, 3])?;
                let k = g.reshape(k, &[p * m_out, p * m_in])?;
                let xf = g.reshape(x, &[batch, p * m_in])?;
                let u = g.matmul_nt(xf, k)?;
                let u = g.scale(u, w)?;
                g.reshape(u, &[batch, p, m_out])
            }
            Params::LowRank { rank, phi, psi } => {
                let pts = g.constant(coords.point_features());
                let ph = phi.forward(g, b, pts)?;
                let ps = psi.forward(g, b, pts)?;
                low_rank_contract(g, x, ph, ps, *rank, [batch, p, m_in, m_out], w)
            }
            Params::Interpolating { rank, anchors, phi, psi } => {
                let interp = g.constant(bilinear_matrix(coords, *anchors));
                let ph = g.matmul(interp, b.var(*phi))?;
                let ps = g.matmul(interp, b.var(*psi))?;
                low_rank_contract(g, x, ph, ps, *rank, [batch, p, m_in, m_out], w)
            }
            Params::Mixture { l, coeff, matrices } if m_in < m_out => {
                // Contract the spatial kernels on the narrower side first:
                // rows of `a` are (point i, term k), so each block product
                // lands directly in (B p, l m_in) layout.
                let c = coefficients(g, b, coeff, coords, *l)?;
                let c = g.permute(c, &[0, 2, 1])?;
                let c = g.reshape(c, &[p * l, p])?;
                let a = g.scale(c, w)?;
                let z = g.matmul(a, x)?;
                let z = g.reshape(z, &[batch * p, l * m_in])?;
                let m = g.permute(b.var(*matrices), &[0, 2, 1])?;
                let m = g.reshape(m, &[l * m_in, m_out])?;
                let u = g.matmul(z, m)?;
                g.reshape(u, &[batch, p, m_out])
            }
            Params::Mixture { l, coeff, matrices } => {
                let a = coefficient_matrix(g, b, coeff, coords, *l, w)?;
                let m = g.permute(b.var(*matrices), &[2, 0, 1])?;
                let m = g.reshape(m, &[m_in, l * m_out])?;
                let y = g.matmul(x, m)?;
                mixture_contract(g, a, y, [batch, p, *l, m_out])
            }
            Params::SeparableMixture {
                l,
                coeff,
                diagonals,
                pointwise,
            } => {
                let a = coefficient_matrix(g, b, coeff, coords, *l, w)?;
                // Repeat each block once per mixture term, then scale channels.
                let y = g.reshape(x, &[batch, p, 1, m_in])?;
                let y = g.index_select(y, 2, vec![0; *l].into())?;
                let y = g.mul(y, b.var(*diagonals))?;
                let u = mixture_contract(g, a, y, [batch, p, *l, m_in])?;
                g.matmul(u, b.var(*pointwise))
            }
            Params::Attention { heads, q, k, v } => {
                let d = m_out / heads;
                let split = |g: &mut Graph<T>, t: Var| -> Result<Var> {
                    let t = g.reshape(t, &[batch, p, *heads, d])?;
                    let t = g.permute(t, &[0, 2, 1, 3])?;
                    g.reshape(t, &[batch * heads, p, d])
                };
                let qv = g.matmul(x, b.var(*q))?;
                let kv = g.matmul(x, b.var(*k))?;
                let vv = g.matmul(x, b.var(*v))?;
                let (qv, kv, vv) = (split(g, qv)?, split(g, kv)?, split(g, vv)?);
                let s = g.matmul_nt(qv, kv)?;
                let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
                let pr = g.softmax(s)?;
                let u = g.matmul(pr, vv)?;
                let u = g.reshape(u, &[batch, *heads, p, d])?;
                let u = g.permute(u, &[0, 2, 1, 3])?;
                g.reshape(u, &[batch, p, m_out])
            }
            Params::Spectral { modes, w_re, w_im, skip } => {
                let [p1, p2] = coords.sub_resolution;
                if modes[0] > p1 || modes[1] > p2 {
                    return Err(Error::Invalid(format!(
                        "spectral modes {modes:?} exceed block resolution {:?}",
                        coords.sub_resolution
                    )));
                }
                let kk = modes[0] * modes[1];
                let dft = SpectralBasis::new(coords.sub_resolution, *modes);
                let fr = g.constant(dft.forward_re());
                let fi = g.constant(dft.forward_im());
                let gr = g.constant(dft.inverse_re());
                let gi = g.constant(dft.inverse_im());
                // (p, B * m_in) so each transform is one product.
                let xt = g.permute(x, &[1, 0, 2])?;
                let xt = g.reshape(xt, &[p, batch * m_in])?;
                let xr = g.matmul(fr, xt)?;
                let xi = g.matmul(fi, xt)?;
                let xr = g.reshape(xr, &[kk, batch, m_in])?;
                let xi = g.reshape(xi, &[kk, batch, m_in])?;
                let (wr, wi) = (b.var(*w_re), b.var(*w_im));
                let rr = g.matmul(xr, wr)?;
                let ii = g.matmul(xi, wi)?;
                let ri = g.matmul(xr, wi)?;
                let ir = g.matmul(xi, wr)?;
                let yr = g.sub(rr, ii)?;
                let yi = g.add(ri, ir)?;
                let yr = g.reshape(yr, &[kk, batch * m_out])?;
                let yi = g.reshape(yi, &[kk, batch * m_out])?;
                let ur = g.matmul(gr, yr)?;
                let ui = g.matmul(gi, yi)?;
                let u = g.add(ur, ui)?;
                let u = g.reshape(u, &[p, batch, m_out])?;
                let u = g.permute(u, &[1, 0, 2])?;
                let s = g.matmul(x, b.var(*skip))?;
                g.add(u, s)
            }
        }
    }

    fn pairwise(&self) -> bool {
        matches!(
            self.params,
            Params::Vanilla { .. } | Params::Mixture { .. } | Params::SeparableMixture { .. } | Params::Attention { .. }
        )
    }

    /// Large frozen evaluation: kernel networks run over blocks of target
    /// rows straight on the parameter values; attention runs in row chunks
    /// on scratch graphs.
    fn forward_frozen<T: Scalar>(&self, g: &Graph<T>, b: &Bound, x: Var, coords: &LocalCoords, w: f64) -> Result<Tensor<T>> {
        let p = coords.len();
        let batch = g.shape(x)[0];
        let (m_in, m_out) = (self.m_in, self.m_out);
        let xs = g.value(x).data();
        let val = |id: ParamId| g.value(b.var(id)).data();
        let wt = T::from_f64_lossy(w);
        let mut out = vec![T::zero(); batch * p * m_out];
        let rows_for = |width: usize| (BLOCK_ELEMENTS / (p * width)).max(1);
        let row_blocks = |step: usize| (0..p).step_by(step).map(move |r0| r0..(r0 + step).min(p));
        let place = |out: &mut [T], u: &[T], r0: usize, bi: usize| {
            let n = u.len();
            let dst = (bi * p + r0) * m_out;
            out[dst..dst + n].copy_from_slice(u);
        };
        match &self.params {
            Params::Vanilla { kernel } if !vanilla_contracts_first(batch, kernel.widths[kernel.widths.len() - 2], m_in) => {
                let net = kernel.prepare_pairs(g, b, coords)?;
                let width = m_out * m_in;
                for rows in row_blocks(rows_for(width.max(kernel.hidden_width()))) {
                    let r = rows.len();
                    let k = net.output(&net.hidden(rows.clone()));
                    // (r, p, m_out, m_in) -> (r, m_out, p, m_in)
                    let mut kp = vec![T::zero(); k.len()];
                    for i in 0..r {
                        for j in 0..p {
                            for o in 0..m_out {
                                let src = ((i * p + j) * m_out + o) * m_in;
                                let dst = ((i * m_out + o) * p + j) * m_in;
                                kp[dst..dst + m_in].copy_from_slice(&k[src..src + m_in]);
                            }
                        }
                    }
                    let mut u = vec![T::zero(); batch * r * m_out];
                    gemm(xs, MatView::new(batch, p * m_in, false), &kp, MatView::new(r * m_out, p * m_in, true), &mut u, T::zero());
                    u.iter_mut().for_each(|v| *v *= wt);
                    for (bi, ub) in u.chunks(r * m_out).enumerate() {
                        place(&mut out, ub, rows.start, bi);
                    }
                }
            }
            Params::Vanilla { kernel } => {
                // The last kernel layer is linear, so contract it with the
                // input first: z[b, j, (k, o)] = sum_c W[k, (o, c)] x[b, j, c].
                let net = kernel.prepare_pairs(g, b, coords)?;
                let last = kernel.layers.last().expect("at least two layers");
                let h = kernel.widths[kernel.widths.len() - 2];
                let wl = val(last.w);
                let mut wr = vec![T::zero(); m_in * h * m_out];
                for k in 0..h {
                    for o in 0..m_out {
                        for c in 0..m_in {
                            wr[c * h * m_out + k * m_out + o] = wl[k * m_out * m_in + o * m_in + c];
                        }
                    }
                }
                let mut z = vec![T::zero(); batch * p * h * m_out];
                gemm(xs, MatView::new(batch * p, m_in, false), &wr, MatView::new(m_in, h * m_out, false), &mut z, T::zero());
                // Bias term: sum_c bias[(o, c)] sum_j x[b, j, c].
                let mut offset = vec![T::zero(); batch * m_out];
                if let Some(id) = last.b {
                    let bv = val(id);
                    for bi in 0..batch {
                        let mut col = vec![T::zero(); m_in];
                        for row in xs[bi * p * m_in..(bi + 1) * p * m_in].chunks(m_in) {
                            col.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                        }
                        for o in 0..m_out {
                            offset[bi * m_out + o] = (0..m_in).map(|c| bv[o * m_in + c] * col[c]).sum();
                        }
                    }
                }
                let mut u = vec![T::zero(); rows_for(h) * m_out];
                for rows in row_blocks(rows_for(kernel.hidden_width())) {
                    let r = rows.len();
                    let hid = net.hidden(rows.clone());
                    let u = &mut u[..r * m_out];
                    for bi in 0..batch {
                        let zb = &z[bi * p * h * m_out..(bi + 1) * p * h * m_out];
                        gemm(&hid, MatView::new(r, p * h, false), zb, MatView::new(p * h, m_out, false), u, T::zero());
                        for row in u.chunks_mut(m_out) {
                            for (v, &c) in row.iter_mut().zip(&offset[bi * m_out..(bi + 1) * m_out]) {
                                *v = (*v + c) * wt;
                            }
                        }
                        place(&mut out, u, rows.start, bi);
                    }
                }
            }
            Params::Mixture { l, coeff, matrices } => {
                let l = *l;
                // y[b, j, (k, o)] = sum_c x[b, j, c] M[k, o, c]
                let mt = val(*matrices);
                let mut y = vec![T::zero(); batch * p * l * m_out];
                gemm(xs, MatView::new(batch * p, m_in, false), mt, MatView::new(l * m_out, m_in, true), &mut y, T::zero());
                let net = coeff.prepare_pairs(g, b, coords)?;
                for rows in row_blocks(rows_for(l.max(coeff.hidden_width()))) {
                    let r = rows.len();
                    let mut a = net.output(&net.hidden(rows.clone()));
                    a.iter_mut().for_each(|v| *v *= wt);
                    let mut u = vec![T::zero(); r * m_out];
                    for bi in 0..batch {
                        let yb = &y[bi * p * l * m_out..(bi + 1) * p * l * m_out];
                        gemm(&a, MatView::new(r, p * l, false), yb, MatView::new(p * l, m_out, false), &mut u, T::zero());
                        place(&mut out, &u, rows.start, bi);
                    }
                }
            }
            Params::SeparableMixture {
                l,
                coeff,
                diagonals,
                pointwise,
            } => {
                let l = *l;
                let (diag, pw) = (val(*diagonals), val(*pointwise));
                let net = coeff.prepare_pairs(g, b, coords)?;
                let mut y = vec![T::zero(); batch * p * l * m_in];
                for (bj, yv) in y.chunks_mut(l * m_in).enumerate() {
                    let xr = &xs[bj * m_in..(bj + 1) * m_in];
                    for (k, yk) in yv.chunks_mut(m_in).enumerate() {
                        for c in 0..m_in {
                            yk[c] = xr[c] * diag[k * m_in + c];
                        }
                    }
                }
                for rows in row_blocks(rows_for(l.max(coeff.hidden_width()))) {
                    let r = rows.len();
                    let mut a = net.output(&net.hidden(rows.clone()));
                    a.iter_mut().for_each(|v| *v *= wt);
                    let mut z = vec![T::zero(); r * m_in];
                    let mut u = vec![T::zero(); r * m_out];
                    for bi in 0..batch {
                        let yb = &y[bi * p * l * m_in..(bi + 1) * p * l * m_in];
                        gemm(&a, MatView::new(r, p * l, false), yb, MatView::new(p * l, m_in, false), &mut z, T::zero());
                        gemm(&z, MatView::new(r, m_in, false), pw, MatView::new(m_in, m_out, false), &mut u, T::zero());
                        place(&mut out, &u, rows.start, bi);
                    }
                }
            }
            Params::Attention { heads, .. } => {
                for rows in row_blocks(rows_for(*heads * BLOCK_ATTENTION)) {
                    let r = rows.len();
                    let mut lg = Graph::new();
                    let lb = b.transfer(g, &mut lg);
                    let lx = lg.constant(g.value(x).clone());
                    let u = self.attention_rows(&mut lg, &lb, lx, coords, rows.clone())?;
                    for (bi, ub) in lg.value(u).data().chunks(r * m_out).enumerate() {
                        place(&mut out, ub, rows.start, bi);
                    }
                }
            }
            _ => return Err(Error::Invalid(format!("{} has no frozen pairwise evaluation", self.kind))),
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "subdomain_operator" });
        }
        Tensor::new(vec![batch, p, m_out], out)
    }

    /// Output rows `rows` of in-subdomain attention, shape `(B, rows, m_out)`.
    fn attention_rows<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, coords: &LocalCoords, rows: Range<usize>) -> Result<Var> {
        let Params::Attention { heads, q, k, v } = &self.params else {
            return Err(Error::Invalid(format!("{} is not attention", self.kind)));
        };
        let (p, r) = (coords.len(), rows.len());
        let batch = g.shape(x)[0];
        let m_out = self.m_out;
        let d = m_out / heads;
        let split = |g: &mut Graph<T>, t: Var, n: usize| -> Result<Var> {
            let t = g.reshape(t, &[batch, n, *heads, d])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[batch * heads, n, d])
        };
        let xr = g.narrow(x, 1, rows.start, r)?;
        let qv = g.matmul(xr, b.var(*q))?;
        let kv = g.matmul(x, b.var(*k))?;
        let vv = g.matmul(x, b.var(*v))?;
        let (qv, kv, vv) = (split(g, qv, r)?, split(g, kv, p)?, split(g, vv, p)?);
        let s = g.matmul_nt(qv, kv)?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
        let pr = g.softmax(s)?;
        let u = g.matmul(pr, vv)?;
        let u = g.reshape(u, &[batch, *heads, r, d])?;
        let u = g.permute(u, &[0, 2, 1, 3])?;
        g.reshape(u, &[batch, r, m_out])
    }

    /// Evaluate on a single `(p, m_in)` block with frozen parameters.
    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        block: &Tensor<T>,
        coords: &LocalCoords,
        w: f64,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let x = g.constant(block.clone().reshape(&[1, coords.len(), self.m_in])?);
        let u = self.forward(&mut g, &b, x, coords, w)?;
        g.value(u).clone().reshape(&[coords.len(), self.m_out])
    }
}

fn positive(v: usize, what: &str) -> Result<usize> {
    if v == 0 {
        Err(Error::Invalid(format!("{what} must be positive")))
    } else {
        Ok(v)
    }
}

/// Coefficient kernels `C[i, j, k]` on point pairs, shape `(p, p, l)`.
fn coefficients<T: Scalar>(g: &mut Graph<T>, b: &Bound, coeff: &KernelMLP, coords: &LocalCoords, l: usize) -> Result<Var> {
    let p = coords.len();
    let pairs = g.constant(coords.pair_features());
    let c = coeff.forward(g, b, pairs)?;
    g.reshape(c, &[p, p, l])
}

/// `w C` flattened to `(p, p l)` with columns ordered (point j, term k).
fn coefficient_matrix<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    coeff: &KernelMLP,
    coords: &LocalCoords,
    l: usize,
    w: f64,
) -> Result<Var> {
    let p = coords.len();
    let c = coefficients(g, b, coeff, coords, l)?;
    let c = g.reshape(c, &[p, p * l])?;
    g.scale(c, w)
}

/// `u[b, i] = sum_j sum_k A[i, (j, k)] y[b, j, k]` with `y: (B, p, l, c)`.
fn mixture_contract<T: Scalar>(g: &mut Graph<T>, a: Var, y: Var, dims: [usize; 4]) -> Result<Var> {
    let [batch, p, l, c] = dims;
    let y = g.reshape(y, &[batch, p * l, c])?;
    g.matmul(a, y)
}

/// `u(x) = phi(x) (w sum_j psi(x_j)^T v(x_j))` with `phi: (p, m_out r)` and
/// `psi: (p, m_in r)`.
fn low_rank_contract<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    phi: Var,
    psi: Var,
    rank: usize,
    dims: [usize; 4],
    w: f64,
) -> Result<Var> {
    let [batch, p, m_in, m_out] = dims;
    let xf = g.reshape(x, &[batch, p * m_in])?;
    let psi = g.reshape(psi, &[p * m_in, rank])?;
    let c = g.matmul(xf, psi)?;
    let c = g.scale(c, w)?;
    let phi = g.reshape(phi, &[p * m_out, rank])?;
    let u = g.matmul_nt(c, phi)?;
    g.reshape(u, &[batch, p, m_out])
}

/// `(p, a1 * a2)` bilinear weights of anchors at `k / (a - 1)` per axis.
pub fn bilinear_matrix<T: Scalar>(coords: &LocalCoords, anchors: [usize; 2]) -> Tensor<T> {
    let [a1, a2] = anchors;
    let axis = |x: f64, a: usize| {
        let pos = x * (a - 1) as f64;
        let k = (pos.floor() as usize).min(a - 2);
        (k, pos - k as f64)
    };
    let mut m = vec![0.0; coords.len() * a1 * a2];
    for (i, pt) in coords.points.iter().enumerate() {
        let (k1, f1) = axis(pt[0], a1);
        let (k2, f2) = axis(pt[1], a2);
        let row = &mut m[i * a1 * a2..(i + 1) * a1 * a2];
        row[k1 * a2 + k2] += (1.0 - f1) * (1.0 - f2);
        row[k1 * a2 + k2 + 1] += (1.0 - f1) * f2;
        row[(k1 + 1) * a2 + k2] += f1 * (1.0 - f2);
        row[(k1 + 1) * a2 + k2 + 1] += f1 * f2;
    }
    Tensor::from_f64(&[coords.len(), a1 * a2], &m).expect("bilinear matrix")
}

/// Signed frequencies ordered by magnitude, `0, 1, -1, 2, -2, ...`,
/// truncated to `k` entries. With `k = n` this covers every DFT index of a
/// length `n` axis exactly once.
pub fn lowest_frequencies(k: usize) -> Vec<i64> {
    let mut f = vec![0i64];
    let mut j = 1i64;
    while f.len() < k {
        f.push(j);
        if f.len() < k {
            f.push(-j);
        }
        j += 1;
    }
    f.truncate(k);
    f
}

struct SpectralBasis {
    p: [usize; 2],
    freqs: Vec<(i64, i64)>,
}

impl SpectralBasis {
    fn new(p: [usize; 2], modes: [usize; 2]) -> Self {
        let f1 = lowest_frequencies(modes[0]);
        let f2 = lowest_frequencies(modes[1]);
        let freqs = f1.iter().flat_map(|&a| f2.iter().map(move |&b| (a, b))).collect();
        Self { p, freqs }
    }

    fn phase(&self, f: (i64, i64), n: usize) -> f64 {
        let (a, b) = (n / self.p[1], n % self.p[1]);
        2.0 * PI * (f.0 as f64 * a as f64 / self.p[0] as f64 + f.1 as f64 * b as f64 / self.p[1] as f64)
    }

    fn table<T: Scalar>(&self, rows_are_modes: bool, f: impl Fn(f64) -> f64) -> Tensor<T> {
        let (k, p) = (self.freqs.len(), self.p[0] * self.p[1]);
        let mut m = vec![0.0; k * p];
        for (q, &fr) in self.freqs.iter().enumerate() {
            for n in 0..p {
                let v = f(self.phase(fr, n));
                if rows_are_modes {
                    m[q * p + n] = v;
                } else {
                    m[n * k + q] = v;
                }
            }
        }
        let shape = if rows_are_modes { [k, p] } else { [p, k] };
        Tensor::from_f64(&shape, &m).expect("dft table")
    }

    fn forward_re<T: Scalar>(&self) -> Tensor<T> {
        self.table(true, f64::cos)
    }

    fn forward_im<T: Scalar>(&self) -> Tensor<T> {
        self.table(true, |t| -t.sin())
    }

    fn inverse_re<T: Scalar>(&self) -> Tensor<T> {
        let p = (self.p[0] * self.p[1]) as f64;
        self.table(false, |t| t.cos() / p)
    }

    fn inverse_im<T: Scalar>(&self) -> Tensor<T> {
        let p = (self.p[0] * self.p[1]) as f64;
        self.table(false, |t| -t.sin() / p)
    }
}

#[cfg(test)]
mod tests;
