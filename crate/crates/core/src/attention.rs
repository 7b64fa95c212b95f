//! Softmax attention over sequences of subdomain functions.
//!
//! Tokens are whole subdomain blocks. Scores are midpoint-rule `L2` inner
//! products of query and key blocks, so they converge as the blocks are
//! refined. Windowed, shifted-window and neighborhood variants are all
//! expressed as a permutation of the token sequence plus an optional mask.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::geometry::{decompose, recompose, DiscreteFunction, SubdomainSequence};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::subdomain_ops::{LocalCoords, OperatorConfig, SubdomainOperator};
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Global,
    Windowed,
    Neighborhood,
}

impl AttentionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::Global => "global",
            AttentionVariant::Windowed => "windowed",
            AttentionVariant::Neighborhood => "neighborhood",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [AttentionVariant::Global, AttentionVariant::Windowed, AttentionVariant::Neighborhood]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown attention variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionKind {
    None,
    ConstantVector,
    RelativeBias,
}

impl PositionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PositionKind::None => "none",
            PositionKind::ConstantVector => "constant_vector",
            PositionKind::RelativeBias => "relative_bias",
        }
    }
}

impl fmt::Display for PositionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [PositionKind::None, PositionKind::ConstantVector, PositionKind::RelativeBias]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown position encoding {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub heads: usize,
    /// Softmax temperature; `None` uses `1 / sqrt(m / heads)`.
    pub tau: Option<f64>,
    /// Window size in subdomains.
    pub window: [usize; 2],
    /// Cyclic shift in subdomains applied before windowing.
    pub shift: [usize; 2],
    /// Chebyshev radius in subdomain index units.
    pub radius: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::Global,
            heads: 1,
            tau: None,
            window: [1, 1],
            shift: [0, 0],
            radius: 1,
        }
    }
}

impl AttentionConfig {
    pub fn tau_for(&self, m: usize) -> f64 {
        self.tau.unwrap_or_else(|| 1.0 / ((m / self.heads) as f64).sqrt())
    }
}

/// Position information attached to an attention layer.
#[derive(Clone, Debug, PartialEq)]
pub enum PositionEncoding {
    None,
    /// `(s, m)` vectors added to each block before the projection.
    ConstantVector(ParamId),
    /// `(heads, (2 s1 - 1) (2 s2 - 1))` table indexed by grid offset.
    RelativeBias { table: ParamId, grid: [usize; 2] },
}

impl PositionEncoding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, kind: PositionKind, grid: [usize; 2], m: usize, heads: usize) -> Self {
        match kind {
            PositionKind::None => PositionEncoding::None,
            PositionKind::ConstantVector => {
                PositionEncoding::ConstantVector(store.add(format!("{name}.pos"), Tensor::zeros(&[grid[0] * grid[1], m])))
            }
            PositionKind::RelativeBias => PositionEncoding::RelativeBias {
                table: store.add(
                    format!("{name}.rel_bias"),
                    Tensor::zeros(&[heads, (2 * grid[0] - 1) * (2 * grid[1] - 1)]),
                ),
                grid,
            },
        }
    }

    pub fn kind(&self) -> PositionKind {
        match self {
            PositionEncoding::None => PositionKind::None,
            PositionEncoding::ConstantVector(_) => PositionKind::ConstantVector,
            PositionEncoding::RelativeBias { .. } => PositionKind::RelativeBias,
        }
    }
}

/// Table column of the offset between grid cells `k` and `j`.
pub fn relative_offset_index(grid: [usize; 2], k: (usize, usize), j: (usize, usize)) -> usize {
    let dr = k.0 as isize - j.0 as isize + grid[0] as isize - 1;
    let dc = k.1 as isize - j.1 as isize + grid[1] as isize - 1;
    dr as usize * (2 * grid[1] - 1) + dc as usize
}

/// Bias matrix `(s, s)` of one head from a relative-bias table.
pub fn relative_bias_lookup<T: Scalar>(store: &ParamStore<T>, pos: &PositionEncoding, head: usize) -> Result<Tensor<T>> {
    let PositionEncoding::RelativeBias { table, grid } = pos else {
        return Err(Error::Invalid("relative_bias_lookup needs a relative-bias encoding".into()));
    };
    let t = store.value(*table);
    let cols = t.shape()[1];
    let s = grid[0] * grid[1];
    let cell = |i: usize| (i / grid[1], i % grid[1]);
    let data = (0..s * s)
        .map(|kj| t.data()[head * cols + relative_offset_index(*grid, cell(kj / s), cell(kj % s))])
        .collect();
    Tensor::new(vec![s, s], data)
}

/// How the token sequence is regrouped before attention.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    /// Source subdomain of every token, windows major.
    pub order: Arc<[usize]>,
    /// Inverse of `order`.
    pub inverse: Arc<[usize]>,
    pub windows: usize,
    pub tokens_per_window: usize,
    /// Grid position of each token inside its attention frame.
    pub positions: Vec<(usize, usize)>,
    /// `(windows, n, n)` allowed pairs, `None` when every pair is allowed.
    pub allowed: Option<Arc<[bool]>>,
}

impl TokenLayout {
    pub fn new(config: &AttentionConfig, grid: [usize; 2]) -> Result<Self> {
        let [s1, s2] = grid;
        let cell = |i: usize| (i / s2, i % s2);
        match config.variant {
            AttentionVariant::Global | AttentionVariant::Neighborhood => {
                let s = s1 * s2;
                let allowed = (config.variant == AttentionVariant::Neighborhood).then(|| {
                    (0..s * s)
                        .map(|kj| {
                            let (a, b) = (cell(kj / s), cell(kj % s));
                            a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) <= config.radius
                        })
                        .collect::<Vec<_>>()
                        .into()
                });
                let ident: Arc<[usize]> = (0..s).collect::<Vec<_>>().into();
                Ok(Self {
                    order: ident.clone(),
                    inverse: ident,
                    windows: 1,
                    tokens_per_window: s,
                    positions: (0..s).map(cell).collect(),
                    allowed,
                })
            }
            AttentionVariant::Windowed => {
                let [w1, w2] = config.window;
                let [t1, t2] = config.shift;
                for ax in 0..2 {
                    if config.window[ax] == 0 || !grid[ax].is_multiple_of(config.window[ax]) {
                        return Err(Error::Divisibility {
                            what: format!("subdomain grid axis {ax} vs window"),
                            extent: grid[ax],
                            divisor: config.window[ax],
                        });
                    }
                    if config.shift[ax] >= config.window[ax] {
                        return Err(Error::Invalid(format!(
                            "shift {:?} must be smaller than window {:?}",
                            config.shift, config.window
                        )));
                    }
                }
                let (n1, n2) = (s1 / w1, s2 / w2);
                let mut order = Vec::with_capacity(s1 * s2);
                let mut frame = Vec::with_capacity(s1 * s2);
                for a in 0..n1 {
                    for b in 0..n2 {
                        for r in 0..w1 {
                            for c in 0..w2 {
                                // Shifted position (i, j) holds subdomain (i + t1, j + t2).
                                let (i, j) = (a * w1 + r, b * w2 + c);
                                order.push(((i + t1) % s1) * s2 + (j + t2) % s2);
                                frame.push((i, j));
                            }
                        }
                    }
                }
                let mut inverse = vec![0; order.len()];
                for (t, &src) in order.iter().enumerate() {
                    inverse[src] = t;
                }
                let n = w1 * w2;
                let allowed = (t1 > 0 || t2 > 0).then(|| {
                    // Tokens that wrapped around on an axis were not contiguous
                    // with the rest of their window before the shift.
                    let label = |(i, j): (usize, usize)| (t1 > 0 && i >= s1 - t1, t2 > 0 && j >= s2 - t2);
                    let mut mask = Vec::with_capacity(n1 * n2 * n * n);
                    for win in frame.chunks(n) {
                        for &k in win {
                            for &j in win {
                                mask.push(label(k) == label(j));
                            }
                        }
                    }
                    mask.into()
                });
                Ok(Self {
                    order: order.into(),
                    inverse: inverse.into(),
                    windows: n1 * n2,
                    tokens_per_window: n,
                    positions: frame[..n].iter().map(|&(i, j)| (i % w1, j % w2)).collect(),
                    allowed,
                })
            }
        }
    }

    fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &v)| i == v)
    }
}

/// Graph nodes produced by one attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub output: Var,
    /// Raw scores `<Q_k, K_j> (+ B_kj)`, shape `(B * windows, heads, n, n)`.
    pub scores: Var,
    /// Row-stochastic attention weights, same shape as `scores`.
    pub probs: Var,
}

/// Split the output of `I_QKV` on `(B, s, p, m)` tokens into `Q, K, V`.
pub fn compute_qkv<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    op: &SubdomainOperator,
    x: Var,
    coords: &LocalCoords,
) -> Result<(Var, Var, Var)> {
    let shape = g.shape(x).to_vec();
    let [batch, s, p, m] = shape[..] else {
        return Err(shape_err("compute_qkv", format!("expected (B, s, p, m), got {shape:?}")));
    };
    if op.m_out != 3 * m {
        return Err(shape_err("compute_qkv", format!("operator gives {} channels, need {}", op.m_out, 3 * m)));
    }
    let flat = g.reshape(x, &[batch * s, p, m])?;
    let y = op.forward(g, b, flat, coords, coords.reference_weight())?;
    let y = g.reshape(y, &[batch, s, p, 3 * m])?;
    let parts = g.split(y, -1, 3)?;
    Ok((parts[0], parts[1], parts[2]))
}

/// Multihead attention on `(B, n, p, m)` token groups. Scores use the
/// physical quadrature weight `cell_weight`; `bias` is `(heads, n, n)` and
/// `allowed` covers `(heads, n, n)` or a multiple of it that repeats over `B`.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    tau: f64,
    cell_weight: f64,
    bias: Option<Var>,
    allowed: Option<Arc<[bool]>>,
) -> Result<AttentionTrace> {
    let shape = g.shape(q).to_vec();
    let [batch, n, p, m] = shape[..] else {
        return Err(shape_err("attend", format!("expected (B, n, p, m), got {shape:?}")));
    };
    if heads == 0 || m % heads != 0 {
        return Err(Error::Divisibility {
            what: "channels vs heads".into(),
            extent: m,
            divisor: heads,
        });
    }
    let d = m / heads;
    let split = |g: &mut Graph<T>, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[batch, n, p, heads, d])?;
        let t = g.permute(t, &[0, 3, 1, 2, 4])?;
        g.reshape(t, &[batch * heads, n, p * d])
    };
    let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let s = g.matmul_nt(qh, kh)?;
    let s = g.scale(s, cell_weight)?;
    let s = g.reshape(s, &[batch, heads, n, n])?;
    let s = match bias {
        Some(bv) => g.add(s, bv)?,
        None => s,
    };
    let logits = g.scale(s, tau)?;
    let probs = g.softmax_masked(logits, allowed)?;
    let pf = g.reshape(probs, &[batch * heads, n, n])?;
    let u = g.matmul(pf, vh)?;
    let u = g.reshape(u, &[batch, heads, n, p, d])?;
    let u = g.permute(u, &[0, 2, 3, 1, 4])?;
    let output = g.reshape(u, &[batch, n, p, m])?;
    Ok(AttentionTrace { output, scores: s, probs })
}

/// One attention sublayer: a `QKV` operator, a token layout, and a
/// position encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub config: AttentionConfig,
    pub m: usize,
    pub grid: [usize; 2],
    pub qkv: SubdomainOperator,
    pub pos: PositionEncoding,
    layout: TokenLayout,
    /// Relative-bias table columns for each `(k, j)` token pair of a window.
    bias_index: Option<Arc<[usize]>>,
    /// Layout mask repeated per head, `(windows, heads, n, n)`.
    allowed: Option<Arc<[bool]>>,
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &AttentionConfig,
        op_config: &OperatorConfig,
        pos: PositionKind,
        m: usize,
        grid: [usize; 2],
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.heads == 0 || !m.is_multiple_of(config.heads) {
            return Err(Error::Divisibility {
                what: format!("{name}: channels vs heads"),
                extent: m,
                divisor: config.heads,
            });
        }
        if let Some(tau) = config.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Invalid(format!("{name}: temperature {tau} must be positive")));
            }
        }
        let layout = TokenLayout::new(config, grid)?;
        let qkv = SubdomainOperator::new(store, &format!("{name}.qkv"), op_config, m, 3 * m, rng)?;
        let pos = PositionEncoding::new(store, name, pos, grid, m, config.heads);
        let bias_index = matches!(pos, PositionEncoding::RelativeBias { .. }).then(|| {
            let ps = &layout.positions;
            ps.iter()
                .flat_map(|&a| ps.iter().map(move |&b| relative_offset_index(grid, a, b)))
                .collect::<Vec<_>>()
                .into()
        });
        let nn = layout.tokens_per_window * layout.tokens_per_window;
        let allowed = layout.allowed.as_ref().map(|mask| {
            mask.chunks(nn)
                .flat_map(|win| std::iter::repeat_n(win, config.heads).flatten().copied())
                .collect::<Vec<_>>()
                .into()
        });
        Ok(Self {
            config: config.clone(),
            m,
            grid,
            qkv,
            pos,
            layout,
            bias_index,
            allowed,
        })
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    /// Attend over `x: (B, s, p, m)` blocks in row-major subdomain order.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        coords: &LocalCoords,
        cell_weight: f64,
    ) -> Result<AttentionTrace> {
        let shape = g.shape(x).to_vec();
        let s = self.grid[0] * self.grid[1];
        let [batch, s_in, p, m] = shape[..] else {
            return Err(shape_err("attention", format!("expected (B, s, p, m), got {shape:?}")));
        };
        if s_in != s || m != self.m || p != coords.len() {
            return Err(shape_err(
                "attention",
                format!("expected (B, {s}, {}, {}), got {shape:?}", coords.len(), self.m),
            ));
        }
        let x = match &self.pos {
            PositionEncoding::ConstantVector(id) => {
                let pv = g.reshape(b.var(*id), &[s, 1, m])?;
                g.add(x, pv)?
            }
            _ => x,
        };
        let permuted = !self.layout.is_identity();
        let x = if permuted {
            g.index_select(x, 1, self.layout.order.clone())?
        } else {
            x
        };
        let (nw, n) = (self.layout.windows, self.layout.tokens_per_window);
        let x = g.reshape(x, &[batch * nw, n, p, m])?;
        let (q, k, v) = compute_qkv(g, b, &self.qkv, x, coords)?;
        let bias = match (&self.pos, &self.bias_index) {
            (PositionEncoding::RelativeBias { table, .. }, Some(idx)) => {
                let t = g.index_select(b.var(*table), 1, idx.clone())?;
                Some(g.reshape(t, &[self.config.heads, n, n])?)
            }
            _ => None,
        };
        let trace = attend(
            g,
            q,
            k,
            v,
            self.config.heads,
            self.config.tau_for(m),
            cell_weight,
            bias,
            self.allowed.clone(),
        )?;
        let out = g.reshape(trace.output, &[batch, s, p, m])?;
        let output = if permuted {
            g.index_select(out, 1, self.layout.inverse.clone())?
        } else {
            out
        };
        Ok(AttentionTrace { output, ..trace })
    }

    /// Evaluate on one subdomain sequence with frozen parameters.
    pub fn apply_seq<T: Scalar>(&self, store: &ParamStore<T>, seq: &SubdomainSequence<T>) -> Result<(SubdomainSequence<T>, ScoreMatrix<T>)> {
        if seq.decomposition.grid != self.grid {
            return Err(shape_err(
                "attention",
                format!("layer grid {:?} vs sequence grid {:?}", self.grid, seq.decomposition.grid),
            ));
        }
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let (s, p, m) = (seq.len(), seq.points(), seq.channels());
        let x = g.constant(seq.values.clone().reshape(&[1, s, p, m])?);
        let coords = LocalCoords::new(seq.sub_resolution);
        let tr = self.forward(&mut g, &b, x, &coords, seq.cell_weight)?;
        let out = SubdomainSequence {
            values: g.value(tr.output).clone().reshape(&[s, p, m])?,
            ..seq.clone()
        };
        let scores = ScoreMatrix {
            scores: g.value(tr.scores).clone(),
            probs: g.value(tr.probs).clone(),
            allowed: self.allowed.clone(),
        };
        Ok((out, scores))
    }

    /// Decompose, attend, and recompose a discrete function.
    pub fn apply_fn<T: Scalar>(&self, store: &ParamStore<T>, f: &DiscreteFunction<T>) -> Result<DiscreteFunction<T>> {
        let seq = decompose(f, self.grid)?;
        let (out, _) = self.apply_seq(store, &seq)?;
        recompose(&out)
    }
}

/// Scores and probabilities of one evaluation, `(windows, heads, n, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<T> {
    pub scores: Tensor<T>,
    pub probs: Tensor<T>,
    /// `(windows, heads, n, n)`; `None` when unmasked.
    pub allowed: Option<Arc<[bool]>>,
}

#[cfg(test)]
mod tests;
