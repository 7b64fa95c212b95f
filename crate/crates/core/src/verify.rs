//! Finite-difference gradient checks for every differentiable component, in
//! f64 at small sizes. Shared by the `gradcheck` command and the tests.

use crate::attention::{AttentionConfig, AttentionLayer, AttentionVariant, PositionKind};
use crate::error::Result;
use crate::geometry::{cell_center, decompose, DiscreteFunction, Domain};
use crate::model::{Architecture, FeedForward, Model, ModelConfig};
use crate::rng::stream;
use crate::subdomain_ops::{LocalCoords, OperatorConfig, OperatorKind, SubdomainOperator};
use crate::tensor::{grad_check, GradCheckReport, Graph, ParamStore, Tensor, Var, Bound};

/// Components must stay below this relative error.
pub const TOLERANCE: f64 = 1e-4;

pub type CheckFn = Box<dyn Fn(f64) -> Result<GradCheckReport> + Send + Sync>;

/// A named gradient check, run at a given finite-difference step.
pub struct NamedCheck {
    pub name: String,
    pub run: CheckFn,
}

impl NamedCheck {
    pub fn new(name: impl Into<String>, run: impl Fn(f64) -> Result<GradCheckReport> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }
}

fn small_operator(kind: OperatorKind) -> OperatorConfig {
    OperatorConfig {
        kind,
        kernel_hidden: 8,
        rank: 2,
        mixture_size: 3,
        anchors: [3, 3],
        heads: 2,
        modes: [2, 2],
    }
}

/// Replace parameters whose names end in one of `suffixes` (or that are all
/// zero) with random values, so every code path carries signal.
fn randomize(store: &mut ParamStore<f64>, suffixes: &[&str], seed: u64) {
    let mut rng = stream(seed, 0x7261_6e64);
    for id in store.ids().collect::<Vec<_>>() {
        let hit = suffixes.iter().any(|s| store.name(id).ends_with(s)) || store.value(id).max_abs() == 0.0;
        if hit {
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::uniform(&shape, 0.3, &mut rng)).expect("same shape");
        }
    }
}

/// `sum(out * r)` for a fixed random `r`.
fn project_loss(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = g.constant(Tensor::uniform(&shape, 1.0, &mut stream(seed, 9)));
    let prod = g.mul(out, r)?;
    g.sum_all(prod)
}

pub fn operator_check(kind: OperatorKind, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let op = SubdomainOperator::new(&mut store, "op", &small_operator(kind), 2, 4, &mut stream(seed, 1))?;
    randomize(&mut store, &[".b"], seed);
    let coords = LocalCoords::new([2, 2]);
    let x = Tensor::<f64>::uniform(&[3, 4, 2], 1.0, &mut stream(seed, 8));
    grad_check(
        |g, b| {
            let xv = g.constant(x.clone());
            let u = op.forward(g, b, xv, &coords, 0.25)?;
            project_loss(g, u, seed)
        },
        &mut store,
        eps,
        seed,
    )
}

/// The three attention variants at a 4x4 grid: global, shifted windows, radius 1.
pub fn attention_variants() -> [AttentionConfig; 3] {
    [
        AttentionConfig {
            heads: 2,
            ..AttentionConfig::default()
        },
        AttentionConfig {
            variant: AttentionVariant::Windowed,
            heads: 2,
            window: [2, 2],
            shift: [1, 1],
            ..AttentionConfig::default()
        },
        AttentionConfig {
            variant: AttentionVariant::Neighborhood,
            heads: 2,
            radius: 1,
            ..AttentionConfig::default()
        },
    ]
}

pub fn attention_check(config: &AttentionConfig, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let grid = [4, 4];
    let m = 4;
    let mut store = ParamStore::new();
    let op = OperatorConfig {
        mixture_size: 2,
        ..small_operator(OperatorKind::Mixture)
    };
    let layer = AttentionLayer::new(&mut store, "attn", config, &op, PositionKind::RelativeBias, m, grid, &mut stream(seed, 3))?;
    randomize(&mut store, &["rel_bias", ".pos", ".b"], seed);
    let f = DiscreteFunction::new(Domain::unit(), Tensor::uniform(&[8, 8, m], 1.0, &mut stream(seed, 4)))?;
    let seq = decompose(&f, grid)?;
    let s = seq.len();
    let coords = LocalCoords::new([2, 2]);
    grad_check(
        |g, b| {
            let x = g.constant(seq.values.clone().reshape(&[1, s, 4, m])?);
            let tr = layer.forward(g, b, x, &coords, seq.cell_weight)?;
            project_loss(g, tr.output, seed)
        },
        &mut store,
        eps,
        seed,
    )
}

pub fn feed_forward_check(kind: OperatorKind, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let op = OperatorConfig {
        kernel_hidden: 6,
        mixture_size: 2,
        anchors: [2, 2],
        ..small_operator(kind)
    };
    let ff = FeedForward::new(&mut store, "ff", &op, 3, 6, &mut stream(seed, 5))?;
    randomize(&mut store, &[".b1", ".b2"], seed);
    let coords = LocalCoords::new([3, 3]);
    let x = Tensor::<f64>::uniform(&[2, 9, 3], 1.0, &mut stream(seed, 6));
    grad_check(
        |g, b| {
            let xv = g.constant(x.clone());
            let y = ff.forward(g, b, xv, &coords)?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        },
        &mut store,
        eps,
        seed,
    )
}

/// Two layers, embedding 8, 2x2 grid, evaluated on 8x8 inputs.
pub fn tiny_model_config(architecture: Architecture) -> ModelConfig {
    ModelConfig {
        architecture,
        grid: [2, 2],
        window: [2, 2],
        shift: [1, 1],
        radius: 1,
        layers: 2,
        embed: 8,
        heads: 2,
        operator: OperatorConfig {
            kind: OperatorKind::Mixture,
            kernel_hidden: 8,
            mixture_size: 3,
            ..OperatorConfig::default()
        },
        ..ModelConfig::desk()
    }
}

pub fn model_check(architecture: Architecture, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::new(tiny_model_config(architecture), seed)?;
    randomize(&mut model.params, &[], seed);
    let n = 8;
    let mut data = Vec::with_capacity(2 * n * n);
    for k in 0..2 {
        for i in 0..n {
            for j in 0..n {
                let [x, y] = cell_center(&Domain::unit(), [n, n], i, j);
                let v = (2.0 * std::f64::consts::PI * x).sin() * (2.0 * std::f64::consts::PI * y).cos();
                data.push(0.8 * v + 0.1 * k as f64);
            }
        }
    }
    let u0 = Tensor::new(vec![2, n, n], data)?;
    let target = Tensor::uniform(&[2, n, n], 1.0, &mut stream(seed, 7));
    let gammas = [1e-3, 2e-4];
    let mut params = model.params.clone();
    grad_check(|g, b: &Bound| model.mse_loss(g, b, &u0, &gammas, &target), &mut params, eps, seed)
}

/// Every operator kind, attention variant and the feed-forward block, plus a
/// tiny model per architecture.
pub fn gradient_checks(seed: u64) -> Vec<NamedCheck> {
    let mut out = Vec::new();
    for kind in OperatorKind::ALL {
        out.push(NamedCheck::new(format!("operator/{kind}"), move |eps| operator_check(kind, eps, seed)));
    }
    for (name, cfg) in ["global", "windowed", "neighborhood"].into_iter().zip(attention_variants()) {
        out.push(NamedCheck::new(format!("attention/{name}"), move |eps| attention_check(&cfg, eps, seed)));
    }
    out.push(NamedCheck::new("feed_forward", move |eps| feed_forward_check(OperatorKind::Mixture, eps, seed)));
    for arch in [Architecture::Vit, Architecture::Swin, Architecture::Nbr] {
        out.push(NamedCheck::new(format!("model/{arch}"), move |eps| model_check(arch, eps, seed)));
    }
    out
}
