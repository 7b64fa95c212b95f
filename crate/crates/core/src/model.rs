//! Transformer neural operators on subdomain sequences: lifting, pre-norm
//! attention and feed-forward blocks, recomposition and projection.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::attention::{AttentionConfig, AttentionLayer, AttentionVariant, PositionKind};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{cell_center, decompose_index, Decomposition, DiscreteFunction, Domain};
use crate::kv::{Fields, Writer};
use crate::rng::{stream, Rng};
use crate::scalar::Scalar;
use crate::subdomain_ops::{Linear, LocalCoords, OperatorConfig, SubdomainOperator};
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Vit,
    Swin,
    Nbr,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Vit => "vit",
            Architecture::Swin => "swin",
            Architecture::Nbr => "nbr",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Architecture::Vit, Architecture::Swin, Architecture::Nbr]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown architecture {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Subdomains per axis.
    pub grid: [usize; 2],
    /// Window size in subdomains (swin).
    pub window: [usize; 2],
    /// Shift in subdomains applied on odd layers (swin).
    pub shift: [usize; 2],
    /// Neighborhood radius (nbr).
    pub radius: usize,
    pub layers: usize,
    pub embed: usize,
    pub heads: usize,
    pub tau: Option<f64>,
    pub position: PositionKind,
    pub coord_channels: bool,
    /// Feed-forward width as a multiple of `embed`.
    pub ff_mult: usize,
    /// Sampling range of `gamma`, fixing the log-normalization statistics.
    pub gamma_range: [f64; 2],
    pub operator: OperatorConfig,
}

impl Default for ModelConfig {
    /// Full-scale configuration: 8x8 subdomains, 64 channels, 64 mixture terms.
    fn default() -> Self {
        Self {
            architecture: Architecture::Vit,
            grid: [8, 8],
            window: [4, 4],
            shift: [2, 2],
            radius: 1,
            layers: 4,
            embed: 64,
            heads: 4,
            tau: None,
            position: PositionKind::RelativeBias,
            coord_channels: true,
            ff_mult: 2,
            gamma_range: [1e-4, 5e-3],
            operator: OperatorConfig {
                mixture_size: 64,
                ..OperatorConfig::default()
            },
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: grid, width and mixture size halved.
    pub fn desk() -> Self {
        let full = Self::default();
        Self {
            grid: [4, 4],
            window: [2, 2],
            shift: [1, 1],
            embed: 32,
            operator: OperatorConfig {
                mixture_size: 32,
                ..full.operator.clone()
            },
            ..full
        }
    }

    pub fn in_channels(&self) -> usize {
        if self.coord_channels {
            4
        } else {
            2
        }
    }

    /// `(mean, std)` of `ln gamma` under log-uniform sampling on `gamma_range`.
    pub fn gamma_stats(&self) -> (f64, f64) {
        let (a, b) = (self.gamma_range[0].ln(), self.gamma_range[1].ln());
        ((a + b) / 2.0, (b - a) / 12f64.sqrt())
    }

    pub fn normalize_gamma(&self, gamma: f64) -> Result<f64> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Invalid(format!("gamma must be positive, got {gamma}")));
        }
        let (mean, std) = self.gamma_stats();
        Ok((gamma.ln() - mean) / std)
    }

    fn attention_config(&self, layer: usize) -> AttentionConfig {
        let base = AttentionConfig {
            heads: self.heads,
            tau: self.tau,
            ..AttentionConfig::default()
        };
        match self.architecture {
            Architecture::Vit => base,
            Architecture::Swin => AttentionConfig {
                variant: AttentionVariant::Windowed,
                window: self.window,
                shift: if layer % 2 == 1 { self.shift } else { [0, 0] },
                ..base
            },
            Architecture::Nbr => AttentionConfig {
                variant: AttentionVariant::Neighborhood,
                radius: self.radius,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid", self.grid[0].min(self.grid[1])),
            ("layers", self.layers),
            ("embed", self.embed),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if !self.embed.is_multiple_of(self.heads) {
            return Err(Error::Divisibility {
                what: "embed vs heads".into(),
                extent: self.embed,
                divisor: self.heads,
            });
        }
        if !(self.gamma_range[0] > 0.0 && self.gamma_range[1] > self.gamma_range[0]) {
            return Err(Error::Invalid(format!("gamma range {:?} must be positive and increasing", self.gamma_range)));
        }
        if self.architecture == Architecture::Swin {
            for l in 0..self.layers.min(2) {
                crate::attention::TokenLayout::new(&self.attention_config(l), self.grid)?;
            }
        }
        Ok(())
    }

    /// Check that a grid resolution is usable with this configuration.
    pub fn check_resolution(&self, resolution: [usize; 2]) -> Result<[usize; 2]> {
        Decomposition::new(Domain::unit(), self.grid)?.sub_resolution(resolution)
    }

    pub fn to_text(&self) -> String {
        let mut w = Writer::new();
        let op = &self.operator;
        w.put("architecture", self.architecture)
            .put_pair("grid", self.grid)
            .put_pair("window", self.window)
            .put_pair("shift", self.shift)
            .put("radius", self.radius)
            .put("layers", self.layers)
            .put("embed", self.embed)
            .put("heads", self.heads)
            .put("tau", self.tau.map_or("auto".to_string(), |t| t.to_string()))
            .put("position", self.position)
            .put("coord_channels", self.coord_channels)
            .put("ff_mult", self.ff_mult)
            .put("gamma_min", self.gamma_range[0])
            .put("gamma_max", self.gamma_range[1])
            .put("operator", op.kind)
            .put("kernel_hidden", op.kernel_hidden)
            .put("rank", op.rank)
            .put("mixture_size", op.mixture_size)
            .put_pair("anchors", op.anchors)
            .put("op_heads", op.heads)
            .put_pair("modes", op.modes);
        w.finish()
    }

    /// Consume model keys from `fields`, defaulting absent ones to `base`.
    pub fn take_fields(fields: &mut Fields, base: &ModelConfig) -> Result<Self> {
        let tau: String = fields.take("tau", base.tau.map_or("auto".to_string(), |t| t.to_string()))?;
        let tau = if tau == "auto" {
            None
        } else {
            Some(tau.parse().map_err(|e| Error::Invalid(format!("tau = {tau}: {e}")))?)
        };
        let b = &base.operator;
        let cfg = Self {
            architecture: fields.take("architecture", base.architecture)?,
            grid: fields.take_pair("grid", base.grid)?,
            window: fields.take_pair("window", base.window)?,
            shift: fields.take_pair("shift", base.shift)?,
            radius: fields.take("radius", base.radius)?,
            layers: fields.take("layers", base.layers)?,
            embed: fields.take("embed", base.embed)?,
            heads: fields.take("heads", base.heads)?,
            tau,
            position: fields.take("position", base.position)?,
            coord_channels: fields.take("coord_channels", base.coord_channels)?,
            ff_mult: fields.take("ff_mult", base.ff_mult)?,
            gamma_range: [fields.take("gamma_min", base.gamma_range[0])?, fields.take("gamma_max", base.gamma_range[1])?],
            operator: OperatorConfig {
                kind: fields.take("operator", b.kind)?,
                kernel_hidden: fields.take("kernel_hidden", b.kernel_hidden)?,
                rank: fields.take("rank", b.rank)?,
                mixture_size: fields.take("mixture_size", b.mixture_size)?,
                anchors: fields.take_pair("anchors", b.anchors)?,
                heads: fields.take("op_heads", b.heads)?,
                modes: fields.take_pair("modes", b.modes)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = Fields::parse(text)?;
        let cfg = Self::take_fields(&mut fields, &Self::default())?;
        fields.finish()?;
        Ok(cfg)
    }
}

/// Learned per-channel scale and offset after pointwise normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub scale: ParamId,
    pub offset: ParamId,
}

impl Norm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, m: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Tensor::full(&[m], T::one())),
            offset: store.add(format!("{name}.offset"), Tensor::zeros(&[m])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let n = g.normalize(x)?;
        let s = g.mul(n, b.var(self.scale))?;
        g.add(s, b.var(self.offset))
    }
}

/// `I2[gelu(I1 v + b1)] + b2` with constant-in-space biases.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub i1: SubdomainOperator,
    pub b1: ParamId,
    pub i2: SubdomainOperator,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, op: &OperatorConfig, m: usize, m_ff: usize, rng: &mut Rng) -> Result<Self> {
        let i1 = SubdomainOperator::new(store, &format!("{name}.i1"), op, m, m_ff, rng)?;
        let b1 = store.add(format!("{name}.b1"), Tensor::zeros(&[m_ff]));
        let i2 = SubdomainOperator::new(store, &format!("{name}.i2"), op, m_ff, m, rng)?;
        let b2 = store.add(format!("{name}.b2"), Tensor::zeros(&[m]));
        Ok(Self { i1, b1, i2, b2 })
    }

    /// Apply to `x: (B, p, m)` blocks.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, coords: &LocalCoords) -> Result<Var> {
        self.forward_with(g, b, x, coords, |g, v| g.gelu(v))
    }

    /// As [`forward`](Self::forward) with a custom activation.
    pub fn forward_with<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        coords: &LocalCoords,
        act: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
    ) -> Result<Var> {
        let w = coords.reference_weight();
        let h = self.i1.forward(g, b, x, coords, w)?;
        let h = g.add(h, b.var(self.b1))?;
        let h = act(g, h)?;
        let u = self.i2.forward(g, b, h, coords, w)?;
        g.add(u, b.var(self.b2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub attn: AttentionLayer,
    pub norm2: Norm,
    pub ff: FeedForward,
}

impl Block {
    /// `x <- x + Attn(Norm x); x <- x + FF(Norm x)` on `(B, s, p, m)` blocks.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, coords: &LocalCoords, cell_weight: f64) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let h = self.norm1.forward(g, b, x)?;
        let a = self.attn.forward(g, b, h, coords, cell_weight)?.output;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, b, x)?;
        let h = g.reshape(h, &[shape[0] * shape[1], shape[2], shape[3]])?;
        let f = self.ff.forward(g, b, h, coords)?;
        let f = g.reshape(f, &shape)?;
        g.add(x, f)
    }
}

/// A model: configuration, parameters, and the layout of those parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub lift: Linear,
    pub blocks: Vec<Block>,
    pub project: Linear,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0x6d6f_6465);
        let mut params = ParamStore::new();
        let m = config.embed;
        let lift = Linear::new(&mut params, "lift", config.in_channels(), m, true, &mut rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = format!("block{l}");
            blocks.push(Block {
                norm1: Norm::new(&mut params, &format!("{name}.norm1"), m),
                attn: AttentionLayer::new(
                    &mut params,
                    &format!("{name}.attn"),
                    &config.attention_config(l),
                    &config.operator,
                    config.position,
                    m,
                    config.grid,
                    &mut rng,
                )?,
                norm2: Norm::new(&mut params, &format!("{name}.norm2"), m),
                ff: FeedForward::new(&mut params, &format!("{name}.ff"), &config.operator, m, config.ff_mult * m, &mut rng)?,
            });
        }
        let project = Linear::new(&mut params, "project", m, 1, true, &mut rng);
        Ok(Self {
            config,
            params,
            lift,
            blocks,
            project,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Input channels `(u0, gamma', [x, y])` for a batch `u0: (n, N1, N2)`.
    pub fn lift_input(&self, u0: &Tensor<T>, gammas: &[f64]) -> Result<Tensor<T>> {
        let s = u0.shape();
        if s.len() != 3 || s[0] != gammas.len() {
            return Err(shape_err("lift", format!("u0 {s:?} with {} gamma values", gammas.len())));
        }
        let (n, n1, n2) = (s[0], s[1], s[2]);
        let c = self.config.in_channels();
        let mut data = Vec::with_capacity(n * n1 * n2 * c);
        for (k, &gamma) in gammas.iter().enumerate() {
            let gn = T::from_f64_lossy(self.config.normalize_gamma(gamma)?);
            for i in 0..n1 {
                for j in 0..n2 {
                    data.push(u0.data()[(k * n1 + i) * n2 + j]);
                    data.push(gn);
                    if self.config.coord_channels {
                        let [x, y] = cell_center(&Domain::unit(), [n1, n2], i, j);
                        data.push(T::from_f64_lossy(x));
                        data.push(T::from_f64_lossy(y));
                    }
                }
            }
        }
        Tensor::new(vec![n, n1, n2, c], data)
    }

    /// Embed lifted channels `(n, N1, N2, c_in)` into `(n, N1, N2, m)`.
    pub fn lift(&self, g: &mut Graph<T>, b: &Bound, input: Var) -> Result<Var> {
        self.lift.forward(g, b, input)
    }

    /// Map `(n, N1, N2, m)` to the one-channel output `(n, N1, N2, 1)`.
    pub fn project(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        self.project.forward(g, b, x)
    }

    /// Full forward pass on lifted input `(n, N1, N2, c_in)`.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, input: Var) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        let [n, n1, n2, _] = shape[..] else {
            return Err(shape_err("model", format!("expected (n, N1, N2, c), got {shape:?}")));
        };
        let sub = self.config.check_resolution([n1, n2])?;
        let s = self.config.grid[0] * self.config.grid[1];
        let p = sub[0] * sub[1];
        let m = self.config.embed;
        let coords = LocalCoords::new(sub);
        let cell_weight = Decomposition::new(Domain::unit(), self.config.grid)?.cell_weight([n1, n2])?;
        let idx: Arc<[usize]> = decompose_index([n1, n2], self.config.grid)?.into();
        let mut inverse = vec![0; idx.len()];
        for (r, &k) in idx.iter().enumerate() {
            inverse[k] = r;
        }

        let x = self.lift(g, b, input)?;
        let x = g.reshape(x, &[n, n1 * n2, m])?;
        let x = g.index_select(x, 1, idx)?;
        let mut x = g.reshape(x, &[n, s, p, m])?;
        for block in &self.blocks {
            x = block.forward(g, b, x, &coords, cell_weight)?;
        }
        let x = g.reshape(x, &[n, s * p, m])?;
        let x = g.index_select(x, 1, inverse.into())?;
        let x = g.reshape(x, &[n, n1, n2, m])?;
        self.project(g, b, x)
    }

    /// Predict `u(T)` for a batch `u0: (n, N1, N2)`, evaluating at most
    /// `chunk` samples per graph.
    pub fn predict(&self, u0: &Tensor<T>, gammas: &[f64], chunk: usize) -> Result<Tensor<T>> {
        let s = u0.shape().to_vec();
        if s.len() != 3 || s[0] != gammas.len() {
            return Err(shape_err("predict", format!("u0 {s:?} with {} gamma values", gammas.len())));
        }
        let per = s[1] * s[2];
        let mut out = Vec::with_capacity(u0.len());
        for start in (0..s[0]).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(s[0]);
            let part = Tensor::new(vec![end - start, s[1], s[2]], u0.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let b = self.params.bind_frozen(&mut g);
            let input = g.constant(self.lift_input(&part, &gammas[start..end])?);
            let y = self.forward(&mut g, &b, input)?;
            out.extend_from_slice(g.value(y).data());
        }
        Tensor::new(s, out)
    }

    /// Predict on a single discrete function.
    pub fn predict_fn(&self, u0: &DiscreteFunction<T>, gamma: f64) -> Result<DiscreteFunction<T>> {
        if u0.channels != 1 {
            return Err(shape_err("predict", format!("expected one channel, got {}", u0.channels)));
        }
        let [n1, n2] = u0.resolution;
        let t = u0.values.clone().reshape(&[1, n1, n2])?;
        let y = self.predict(&t, &[gamma], 1)?;
        DiscreteFunction::new(u0.domain, y.reshape(&[n1, n2, 1])?)
    }

    /// Loss-ready output: mean squared error against `target: (n, N1, N2)`.
    pub fn mse_loss(&self, g: &mut Graph<T>, b: &Bound, u0: &Tensor<T>, gammas: &[f64], target: &Tensor<T>) -> Result<Var> {
        let input = g.constant(self.lift_input(u0, gammas)?);
        let y = self.forward(g, b, input)?;
        let t = g.constant(target.clone().reshape(g.shape(y))?);
        let d = g.sub(y, t)?;
        let sq = g.mul(d, d)?;
        g.mean_all(sq)
    }
}
