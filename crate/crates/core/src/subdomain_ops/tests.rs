use super::*;
use crate::rng::stream;
use crate::tensor::grad_check;

fn small_config(kind: OperatorKind) -> OperatorConfig {
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

fn build(kind: OperatorKind, m_in: usize, m_out: usize, seed: u64) -> (ParamStore<f64>, SubdomainOperator) {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, 1);
    let op = SubdomainOperator::new(&mut store, "op", &small_config(kind), m_in, m_out, &mut rng).unwrap();
    // Nonzero biases so the oracles exercise every parameter.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".b") {
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::uniform(&shape, 0.3, &mut rng)).unwrap();
        }
    }
    (store, op)
}

fn random_block(p: usize, m: usize, seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[p, m], 1.0, &mut stream(seed, 2))
}

fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.value(store.id(name).unwrap_or_else(|| panic!("no {name}"))).data()
}

fn set_param(store: &mut ParamStore<f64>, name: &str, f: impl Fn(&[usize]) -> f64) {
    let id = store.id(name).unwrap();
    let shape = store.value(id).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let data = (0..n)
        .map(|flat| {
            let idx: Vec<usize> = strides.iter().zip(&shape).map(|(s, d)| flat / s % d).collect();
            f(&idx)
        })
        .collect();
    store.set(id, Tensor::new(shape, data).unwrap()).unwrap();
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Straight-line evaluation of a kernel network stored under `prefix`.
fn mlp(store: &ParamStore<f64>, prefix: &str, layers: usize, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for layer in 0..layers {
        let w = param(store, &format!("{prefix}.{layer}.w"));
        let b = param(store, &format!("{prefix}.{layer}.b"));
        let out = b.len();
        let mut next = b.to_vec();
        for (i, hi) in h.iter().enumerate() {
            for o in 0..out {
                next[o] += hi * w[i * out + o];
            }
        }
        if layer + 1 < layers {
            next.iter_mut().for_each(|v| *v = gelu(*v));
        }
        h = next;
    }
    h
}

fn pair(x: [f64; 2], y: [f64; 2]) -> [f64; 4] {
    [x[0], x[1], y[0], y[1]]
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn local_coords_are_cell_centered_and_deterministic() {
    let c = LocalCoords::new([2, 4]);
    assert_eq!(c.points[0], [0.25, 0.125]);
    assert_eq!(c.points[7], [0.75, 0.875]);
    assert_eq!(c, LocalCoords::new([2, 4]));
    assert_eq!(c.reference_weight(), 0.125);
}

#[test]
fn operator_kind_round_trips_through_strings() {
    for k in OperatorKind::ALL {
        assert_eq!(k.as_str().parse::<OperatorKind>().unwrap(), k);
    }
    assert!("fourier".parse::<OperatorKind>().is_err());
}

#[test]
fn vanilla_matches_double_loop() {
    let (m_in, m_out) = (2, 3);
    for seed in 0..5 {
        let (store, op) = build(OperatorKind::Vanilla, m_in, m_out, seed);
        let coords = LocalCoords::new([2, 2]);
        let v = random_block(4, m_in, seed);
        let w = 0.25;
        let got = op.apply(&store, &v, &coords, w).unwrap();
        let mut want = vec![0.0; 4 * m_out];
        for (i, &xi) in coords.points.iter().enumerate() {
            for (j, &xj) in coords.points.iter().enumerate() {
                let k = mlp(&store, "op.kernel", 3, &pair(xi, xj));
                for o in 0..m_out {
                    for c in 0..m_in {
                        want[i * m_out + o] += w * k[o * m_in + c] * v.data()[j * m_in + c];
                    }
                }
            }
        }
        assert!(max_diff(got.data(), &want) < 1e-12);
    }
}

#[test]
fn vanilla_with_identity_kernel_integrates() {
    let m = 2;
    let (mut store, op) = build(OperatorKind::Vanilla, m, m, 0);
    set_param(&mut store, "op.kernel.2.w", |_| 0.0);
    set_param(&mut store, "op.kernel.2.b", |i| if i[0] / m == i[0] % m { 1.0 } else { 0.0 });
    let coords = LocalCoords::new([3, 3]);
    let v = random_block(9, m, 4);
    let u = op.apply(&store, &v, &coords, coords.reference_weight()).unwrap();
    for c in 0..m {
        let mean: f64 = (0..9).map(|j| v.data()[j * m + c]).sum::<f64>() / 9.0;
        for i in 0..9 {
            assert!((u.data()[i * m + c] - mean).abs() < 1e-14);
        }
    }
    let zero = op.apply(&store, &Tensor::zeros(&[9, m]), &coords, 1.0 / 9.0).unwrap();
    assert_eq!(zero.max_abs(), 0.0);
}

#[test]
fn lowrank_equals_vanilla_with_factored_kernel() {
    let (m_in, m_out, r) = (3, 2, 2);
    for seed in 0..5 {
        let (store, op) = build(OperatorKind::LowRank, m_in, m_out, seed);
        let coords = LocalCoords::new([2, 3]);
        let v = random_block(6, m_in, seed + 10);
        let w = 1.0 / 6.0;
        let got = op.apply(&store, &v, &coords, w).unwrap();
        let mut want = vec![0.0; 6 * m_out];
        for (i, &xi) in coords.points.iter().enumerate() {
            let phi = mlp(&store, "op.phi", 3, &xi);
            for (j, &xj) in coords.points.iter().enumerate() {
                let psi = mlp(&store, "op.psi", 3, &xj);
                for o in 0..m_out {
                    for c in 0..m_in {
                        let kappa: f64 = (0..r).map(|q| phi[o * r + q] * psi[c * r + q]).sum();
                        want[i * m_out + o] += w * kappa * v.data()[j * m_in + c];
                    }
                }
            }
        }
        assert!(max_diff(got.data(), &want) < 1e-12);
    }
}

#[test]
fn lowrank_identity_factors_integrate() {
    let m = 2;
    let mut store = ParamStore::new();
    let cfg = OperatorConfig {
        rank: m,
        ..small_config(OperatorKind::LowRank)
    };
    let op = SubdomainOperator::new(&mut store, "op", &cfg, m, m, &mut stream(0, 0)).unwrap();
    for f in ["phi", "psi"] {
        set_param(&mut store, &format!("op.{f}.2.w"), |_| 0.0);
        set_param(&mut store, &format!("op.{f}.2.b"), |i| if i[0] / m == i[0] % m { 1.0 } else { 0.0 });
    }
    let coords = LocalCoords::new([2, 2]);
    let v = random_block(4, m, 1);
    let u = op.apply(&store, &v, &coords, 0.25).unwrap();
    for c in 0..m {
        let mean: f64 = (0..4).map(|j| v.data()[j * m + c]).sum::<f64>() / 4.0;
        assert!((u.data()[c] - mean).abs() < 1e-14);
    }
}

fn mixture_oracle(store: &ParamStore<f64>, coords: &LocalCoords, v: &Tensor<f64>, l: usize, m_in: usize, m_out: usize, w: f64) -> Vec<f64> {
    let mats = param(store, "op.matrices");
    let p = coords.len();
    let mut out = vec![0.0; p * m_out];
    for (i, &xi) in coords.points.iter().enumerate() {
        for (j, &xj) in coords.points.iter().enumerate() {
            let c = mlp(store, "op.coeff", 2, &pair(xi, xj));
            for q in 0..l {
                for o in 0..m_out {
                    for ch in 0..m_in {
                        out[i * m_out + o] += w * c[q] * mats[(q * m_out + o) * m_in + ch] * v.data()[j * m_in + ch];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn mixture_matches_triple_loop() {
    // Both contraction orders: narrow-to-wide and wide-to-narrow.
    for (seed, (m_in, m_out)) in (0..6).zip([(3, 2), (2, 5)].into_iter().cycle()) {
        let (store, op) = build(OperatorKind::Mixture, m_in, m_out, seed);
        let coords = LocalCoords::new([2, 2]);
        let v = random_block(4, m_in, seed + 3);
        let got = op.apply(&store, &v, &coords, 0.25).unwrap();
        let want = mixture_oracle(&store, &coords, &v, 3, m_in, m_out, 0.25);
        assert!(max_diff(got.data(), &want) < 1e-12);
    }
}

#[test]
fn mixture_degenerate_cases() {
    let m = 3;
    let mut store = ParamStore::new();
    let cfg = OperatorConfig {
        mixture_size: 1,
        ..small_config(OperatorKind::Mixture)
    };
    let op = SubdomainOperator::new(&mut store, "op", &cfg, m, m, &mut stream(2, 0)).unwrap();
    set_param(&mut store, "op.coeff.1.w", |_| 0.0);
    set_param(&mut store, "op.coeff.1.b", |_| 1.0);
    set_param(&mut store, "op.matrices", |i| if i[1] == i[2] { 1.0 } else { 0.0 });
    let coords = LocalCoords::new([4, 2]);
    let v = random_block(8, m, 9);
    let u = op.apply(&store, &v, &coords, 0.125).unwrap();
    for c in 0..m {
        let mean: f64 = (0..8).map(|j| v.data()[j * m + c]).sum::<f64>() / 8.0;
        for i in 0..8 {
            assert!((u.data()[i * m + c] - mean).abs() < 1e-14);
        }
    }
    set_param(&mut store, "op.matrices", |_| 0.0);
    assert_eq!(op.apply(&store, &v, &coords, 0.125).unwrap().max_abs(), 0.0);
}

#[test]
fn separable_mixture_restricts_full_mixture() {
    let m = 3;
    for seed in 0..5 {
        let (mut sep_store, sep) = build(OperatorKind::SeparableMixture, m, m, seed);
        let (mut mix_store, mix) = build(OperatorKind::Mixture, m, m, seed + 100);
        set_param(&mut sep_store, "op.pointwise", |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        for name in ["op.coeff.0.w", "op.coeff.0.b", "op.coeff.1.w", "op.coeff.1.b"] {
            let src = Tensor::new(sep_store.value(sep_store.id(name).unwrap()).shape().to_vec(), param(&sep_store, name).to_vec()).unwrap();
            let id = mix_store.id(name).unwrap();
            mix_store.set(id, src).unwrap();
        }
        let diag = param(&sep_store, "op.diagonals").to_vec();
        set_param(&mut mix_store, "op.matrices", |i| if i[1] == i[2] { diag[i[0] * m + i[1]] } else { 0.0 });
        let coords = LocalCoords::new([3, 2]);
        let v = random_block(6, m, seed);
        let a = sep.apply(&sep_store, &v, &coords, 1.0 / 6.0).unwrap();
        let b = mix.apply(&mix_store, &v, &coords, 1.0 / 6.0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn separable_mixture_degenerate_cases() {
    let m = 2;
    let mut store = ParamStore::new();
    let cfg = OperatorConfig {
        mixture_size: 1,
        ..small_config(OperatorKind::SeparableMixture)
    };
    let op = SubdomainOperator::new(&mut store, "op", &cfg, m, m, &mut stream(5, 0)).unwrap();
    set_param(&mut store, "op.coeff.1.w", |_| 0.0);
    set_param(&mut store, "op.coeff.1.b", |_| 1.0);
    set_param(&mut store, "op.diagonals", |_| 1.0);
    set_param(&mut store, "op.pointwise", |i| if i[0] == i[1] { 1.0 } else { 0.0 });
    let coords = LocalCoords::new([2, 2]);
    let v = random_block(4, m, 3);
    let u = op.apply(&store, &v, &coords, 0.25).unwrap();
    for c in 0..m {
        let mean: f64 = (0..4).map(|j| v.data()[j * m + c]).sum::<f64>() / 4.0;
        assert!((u.data()[3 * m + c] - mean).abs() < 1e-14);
    }
    set_param(&mut store, "op.pointwise", |_| 0.0);
    assert_eq!(op.apply(&store, &v, &coords, 0.25).unwrap().max_abs(), 0.0);
}

#[test]
fn separable_mixture_has_fewer_parameters() {
    let count = |kind| {
        let mut store = ParamStore::<f64>::new();
        let cfg = OperatorConfig::with_kind(kind);
        SubdomainOperator::new(&mut store, "op", &cfg, 32, 32, &mut stream(0, 0)).unwrap();
        store.count()
    };
    assert!(count(OperatorKind::SeparableMixture) < count(OperatorKind::Mixture));
}

#[test]
fn bilinear_interpolation_is_cardinal_at_anchors() {
    let anchors = [3, 4];
    let mut points = Vec::new();
    for a in 0..3 {
        for b in 0..4 {
            points.push([a as f64 / 2.0, b as f64 / 3.0]);
        }
    }
    let coords = LocalCoords {
        sub_resolution: [3, 4],
        points,
    };
    let m: Tensor<f64> = bilinear_matrix(&coords, anchors);
    let eye = Tensor::<f64>::eye(12);
    assert!(m.max_abs_diff(&eye) < 1e-15);
    // rows of a partition of unity
    let c = LocalCoords::new([5, 7]);
    let m: Tensor<f64> = bilinear_matrix(&c, anchors);
    for row in m.data().chunks(12) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
}

#[test]
fn interpolating_with_constant_anchors_is_outer_product_of_means() {
    let (m_in, m_out, r) = (2, 3, 2);
    let (mut store, op) = build(OperatorKind::Interpolating, m_in, m_out, 7);
    let phi_c: Vec<f64> = (0..m_out * r).map(|k| 0.3 * k as f64 - 0.5).collect();
    let psi_c: Vec<f64> = (0..m_in * r).map(|k| 0.7 - 0.2 * k as f64).collect();
    set_param(&mut store, "op.phi", |i| phi_c[i[1]]);
    set_param(&mut store, "op.psi", |i| psi_c[i[1]]);
    let coords = LocalCoords::new([4, 4]);
    let v = random_block(16, m_in, 2);
    let u = op.apply(&store, &v, &coords, 1.0 / 16.0).unwrap();
    let mean: Vec<f64> = (0..m_in).map(|c| (0..16).map(|j| v.data()[j * m_in + c]).sum::<f64>() / 16.0).collect();
    for o in 0..m_out {
        let want: f64 = (0..r)
            .map(|q| phi_c[o * r + q] * (0..m_in).map(|c| psi_c[c * r + q] * mean[c]).sum::<f64>())
            .sum();
        for i in 0..16 {
            assert!((u.data()[i * m_out + o] - want).abs() < 1e-13);
        }
    }
}

/// Smooth two-channel test input on the reference square.
fn smooth(x: f64, y: f64) -> [f64; 2] {
    [(2.0 * x + 0.5).sin() * (1.5 * y).cos(), (x - 0.3 * y).exp() - 1.0]
}

fn sample_smooth(p: usize) -> Tensor<f64> {
    let c = LocalCoords::new([p, p]);
    let data: Vec<f64> = c.points.iter().flat_map(|pt| smooth(pt[0], pt[1])).collect();
    Tensor::new(vec![p * p, 2], data).unwrap()
}

/// Average a `(q, q, m)` field down to `(p, p, m)` cells.
fn block_average(u: &[f64], q: usize, p: usize, m: usize) -> Vec<f64> {
    let f = q / p;
    let mut out = vec![0.0; p * p * m];
    for a in 0..q {
        for b in 0..q {
            for c in 0..m {
                out[((a / f) * p + b / f) * m + c] += u[(a * q + b) * m + c] / (f * f) as f64;
            }
        }
    }
    out
}

#[test]
fn interpolating_inner_products_converge_under_refinement() {
    let (store, _) = build(OperatorKind::Interpolating, 2, 2, 3);
    let psi = Tensor::new(vec![9, 4], param(&store, "op.psi").to_vec()).unwrap();
    let inner = |p: usize| -> Vec<f64> {
        let c = LocalCoords::new([p, p]);
        let interp: Tensor<f64> = bilinear_matrix(&c, [3, 3]);
        let v = sample_smooth(p);
        let mut acc = vec![0.0; 2];
        for i in 0..p * p {
            for a in 0..9 {
                let wgt = interp.data()[i * 9 + a];
                for ch in 0..2 {
                    for q in 0..2 {
                        acc[q] += wgt * psi.data()[a * 4 + ch * 2 + q] * v.data()[i * 2 + ch] / (p * p) as f64;
                    }
                }
            }
        }
        acc
    };
    let reference = inner(64);
    let e4 = max_diff(&inner(4), &reference);
    let e8 = max_diff(&inner(8), &reference);
    let e16 = max_diff(&inner(16), &reference);
    assert!(e8 < e4 && e16 < e8, "{e4} {e8} {e16}");
}

fn attention_oracle(store: &ParamStore<f64>, v: &Tensor<f64>, p: usize, m_in: usize, m_out: usize, heads: usize) -> Vec<f64> {
    let lin = |name: &str| -> Vec<f64> {
        let w = param(store, name);
        (0..p)
            .flat_map(|i| (0..m_out).map(move |o| (i, o)))
            .map(|(i, o)| (0..m_in).map(|c| v.data()[i * m_in + c] * w[c * m_out + o]).sum())
            .collect()
    };
    let (q, k, val) = (lin("op.q"), lin("op.k"), lin("op.v"));
    let d = m_out / heads;
    let mut out = vec![0.0; p * m_out];
    for h in 0..heads {
        for i in 0..p {
            let scores: Vec<f64> = (0..p)
                .map(|j| (0..d).map(|e| q[i * m_out + h * d + e] * k[j * m_out + h * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for j in 0..p {
                let pr = (scores[j] - max).exp() / z;
                for e in 0..d {
                    out[i * m_out + h * d + e] += pr * val[j * m_out + h * d + e];
                }
            }
        }
    }
    out
}

#[test]
fn in_subdomain_attention_matches_explicit_softmax() {
    let coords = LocalCoords::new([3, 1]);
    for seed in 0..10 {
        let (store, op) = build(OperatorKind::Attention, 3, 4, seed);
        let v = random_block(3, 3, seed);
        let got = op.apply(&store, &v, &coords, 1.0 / 3.0).unwrap();
        let want = attention_oracle(&store, &v, 3, 3, 4, 2);
        assert!(max_diff(got.data(), &want) < 1e-12);
    }
}

#[test]
fn in_subdomain_attention_degenerate_cases() {
    let (store, op) = build(OperatorKind::Attention, 2, 2, 1);
    let one = LocalCoords::new([1, 1]);
    let v = random_block(1, 2, 0);
    let u = op.apply(&store, &v, &one, 1.0).unwrap();
    let wv = param(&store, "op.v");
    for o in 0..2 {
        let want = v.data()[0] * wv[o] + v.data()[1] * wv[2 + o];
        assert!((u.data()[o] - want).abs() < 1e-15);
    }
    let coords = LocalCoords::new([2, 2]);
    let same = Tensor::from_f64(&[4, 2], &[0.3, -0.2, 0.3, -0.2, 0.3, -0.2, 0.3, -0.2]).unwrap();
    let u = op.apply(&store, &same, &coords, 0.25).unwrap();
    for row in u.data().chunks(2) {
        assert_eq!(row, &u.data()[..2]);
    }
    let mut s = ParamStore::<f64>::new();
    let cfg = OperatorConfig {
        heads: 3,
        ..small_config(OperatorKind::Attention)
    };
    assert!(SubdomainOperator::new(&mut s, "op", &cfg, 2, 4, &mut stream(0, 0)).is_err());
}

#[test]
fn lowest_frequencies_cover_the_dft_at_full_width() {
    assert_eq!(lowest_frequencies(1), vec![0]);
    assert_eq!(lowest_frequencies(4), vec![0, 1, -1, 2]);
    for n in 1..9usize {
        let mut idx: Vec<usize> = lowest_frequencies(n).iter().map(|f| f.rem_euclid(n as i64) as usize).collect();
        idx.sort_unstable();
        assert_eq!(idx, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn spectral_round_trip_and_degenerate_cases() {
    let m = 2;
    let mut store = ParamStore::new();
    let cfg = OperatorConfig {
        modes: [4, 3],
        ..small_config(OperatorKind::Spectral)
    };
    let op = SubdomainOperator::new(&mut store, "op", &cfg, m, m, &mut stream(0, 0)).unwrap();
    set_param(&mut store, "op.w_re", |i| if i[1] == i[2] { 1.0 } else { 0.0 });
    set_param(&mut store, "op.w_im", |_| 0.0);
    set_param(&mut store, "op.skip", |_| 0.0);
    let coords = LocalCoords::new([4, 3]);
    let v = random_block(12, m, 6);
    let u = op.apply(&store, &v, &coords, 1.0 / 12.0).unwrap();
    assert!(u.max_abs_diff(&v) < 1e-10);

    set_param(&mut store, "op.w_re", |_| 0.0);
    assert_eq!(op.apply(&store, &v, &coords, 1.0 / 12.0).unwrap().max_abs(), 0.0);

    let (store, op) = build(OperatorKind::Spectral, m, 3, 4);
    let constant = Tensor::from_f64(&[16, m], &[0.4, -1.1].repeat(16)).unwrap();
    let u = op.apply(&store, &constant, &LocalCoords::new([4, 4]), 1.0 / 16.0).unwrap();
    for o in 0..3 {
        let col: Vec<f64> = u.data().chunks(3).map(|r| r[o]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(var < 1e-12);
    }
    assert!(op.apply(&store, &random_block(1, m, 0), &LocalCoords::new([1, 1]), 1.0).is_err());
}

#[test]
fn linear_operators_are_linear() {
    for kind in OperatorKind::ALL.into_iter().filter(|k| k.is_linear()) {
        for seed in 0..5 {
            let (store, op) = build(kind, 2, 4, seed);
            let coords = LocalCoords::new([2, 3]);
            let (a, b) = (random_block(6, 2, seed), random_block(6, 2, seed + 50));
            let (alpha, beta) = (1.7, -0.6);
            let combo = Tensor::new(vec![6, 2], a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + beta * y).collect()).unwrap();
            let w = 1.0 / 6.0;
            let lhs = op.apply(&store, &combo, &coords, w).unwrap();
            let (ua, ub) = (op.apply(&store, &a, &coords, w).unwrap(), op.apply(&store, &b, &coords, w).unwrap());
            let rhs: Vec<f64> = ua.data().iter().zip(ub.data()).map(|(x, y)| alpha * x + beta * y).collect();
            assert!(max_diff(lhs.data(), &rhs) < 1e-10, "{kind}");
        }
    }
}

/// Max relative gradient error of `sum(op(x) * r)` for a random batch.
pub(crate) fn operator_grad_error(kind: OperatorKind, seed: u64) -> f64 {
    let (mut store, op) = build(kind, 2, 4, seed);
    let coords = LocalCoords::new([2, 2]);
    let x = Tensor::<f64>::uniform(&[3, 4, 2], 1.0, &mut stream(seed, 8));
    let r = Tensor::<f64>::uniform(&[3, 4, 4], 1.0, &mut stream(seed, 9));
    let report = grad_check(
        |g, b| {
            let xv = g.constant(x.clone());
            let u = op.forward(g, b, xv, &coords, 0.25)?;
            let rv = g.constant(r.clone());
            let prod = g.mul(u, rv)?;
            g.sum_all(prod)
        },
        &mut store,
        1e-6,
        seed,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn every_operator_passes_grad_check() {
    for kind in OperatorKind::ALL {
        for seed in 0..3 {
            let err = operator_grad_error(kind, seed);
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }
}

#[test]
fn outputs_converge_under_refinement() {
    for kind in OperatorKind::ALL.into_iter().filter(|&k| k != OperatorKind::Spectral) {
        let (store, op) = build(kind, 2, 4, 21);
        let run = |p: usize| {
            let c = LocalCoords::new([p, p]);
            op.apply(&store, &sample_smooth(p), &c, c.reference_weight()).unwrap().into_data()
        };
        let fine = run(32);
        let err = |p: usize| max_diff(&run(p), &block_average(&fine, 32, p, 4));
        let (e4, e8, e16) = (err(4), err(8), err(16));
        let order = ((e4 / e8).log2() + (e8 / e16).log2()) / 2.0;
        assert!(order >= 1.0, "{kind}: errors {e4:e} {e8:e} {e16:e}, order {order}");
    }
}

#[test]
fn congruent_blocks_share_outputs() {
    for kind in OperatorKind::ALL {
        let (store, op) = build(kind, 2, 4, 3);
        let coords = LocalCoords::new([2, 2]);
        let blk = random_block(4, 2, 1);
        let twice = Tensor::new(vec![2, 4, 2], [blk.data(), blk.data()].concat()).unwrap();
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let x = g.constant(twice);
        let u = op.forward(&mut g, &b, x, &coords, 0.25).unwrap();
        let d = g.value(u).data();
        assert_eq!(&d[..16], &d[16..], "{kind}");
        let single = op.apply(&store, &blk, &coords, 0.25).unwrap();
        assert!(max_diff(single.data(), &d[..16]) < 1e-14, "{kind}");
    }
}

#[test]
fn chunked_frozen_evaluation_matches_the_recorded_graph() {
    // 33x33 blocks have just over PAIR_CHUNK point pairs.
    let coords = LocalCoords::new([33, 33]);
    let p = coords.len();
    assert!(p * p > PAIR_CHUNK);
    // Batch 2 contracts the vanilla kernel's last layer first, batch 6 forms it.
    for (batch, kind) in [
        (2, OperatorKind::Vanilla),
        (6, OperatorKind::Vanilla),
        (2, OperatorKind::Mixture),
        (2, OperatorKind::SeparableMixture),
        (2, OperatorKind::Attention),
    ] {
        let x = Tensor::<f64>::uniform(&[batch, p, 2], 1.0, &mut stream(3, 2));
        let (store, op) = build(kind, 2, 4, 11);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let full = op.forward(&mut g, &b, xv, &coords, 1.0 / p as f64).unwrap();
        let mut fg = Graph::new();
        let fb = store.bind_frozen(&mut fg);
        let xv = fg.constant(x.clone());
        let chunked = op.forward(&mut fg, &fb, xv, &coords, 1.0 / p as f64).unwrap();
        assert_eq!(fg.len(), fb.vars().len() + 2, "{kind} did not take the chunked path");
        let d = max_diff(g.value(full).data(), fg.value(chunked).data());
        assert!(d < 1e-12, "{kind}: {d:e}");
    }
}
