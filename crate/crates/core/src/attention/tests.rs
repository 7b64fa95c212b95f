use super::*;
use crate::geometry::{Decomposition, Domain};
use crate::rng::stream;
use crate::subdomain_ops::OperatorKind;
use crate::tensor::grad_check;

fn op_config(kind: OperatorKind) -> OperatorConfig {
    OperatorConfig {
        kind,
        kernel_hidden: 8,
        rank: 2,
        mixture_size: 2,
        ..OperatorConfig::default()
    }
}

fn layer(config: &AttentionConfig, pos: PositionKind, m: usize, grid: [usize; 2], seed: u64) -> (ParamStore<f64>, AttentionLayer) {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, 3);
    let l = AttentionLayer::new(&mut store, "attn", config, &op_config(OperatorKind::Mixture), pos, m, grid, &mut rng).unwrap();
    // Nonzero position parameters so every code path carries signal.
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if name.ends_with("rel_bias") || name.ends_with(".pos") || name.ends_with(".b") {
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::uniform(&shape, 0.5, &mut rng)).unwrap();
        }
    }
    (store, l)
}

fn random_seq(grid: [usize; 2], p: [usize; 2], m: usize, seed: u64) -> SubdomainSequence<f64> {
    let f = DiscreteFunction::new(
        Domain::unit(),
        Tensor::uniform(&[grid[0] * p[0], grid[1] * p[1], m], 1.0, &mut stream(seed, 4)),
    )
    .unwrap();
    decompose(&f, grid).unwrap()
}

fn global(heads: usize) -> AttentionConfig {
    AttentionConfig {
        heads,
        ..AttentionConfig::default()
    }
}

/// Straight-line global attention with explicit quadrature and softmax.
fn oracle(store: &ParamStore<f64>, layer: &AttentionLayer, seq: &SubdomainSequence<f64>) -> Vec<f64> {
    let (s, p, m) = (seq.len(), seq.points(), seq.channels());
    let h = layer.config.heads;
    let d = m / h;
    let coords = LocalCoords::new(seq.sub_resolution);
    let mut qkv = Vec::new();
    for i in 0..s {
        let mut blk = seq.block(i).to_vec();
        if let PositionEncoding::ConstantVector(id) = layer.pos {
            let pv = store.value(id).data();
            for (k, v) in blk.iter_mut().enumerate() {
                *v += pv[i * m + k % m];
            }
        }
        let blk = Tensor::new(vec![p, m], blk).unwrap();
        qkv.push(layer.qkv.apply(store, &blk, &coords, 1.0 / p as f64).unwrap().into_data());
    }
    let at = |i: usize, pt: usize, which: usize, ch: usize| qkv[i][pt * 3 * m + which * m + ch];
    let tau = layer.config.tau_for(m);
    let mut out = vec![0.0; s * p * m];
    for head in 0..h {
        let bias = match layer.pos {
            PositionEncoding::RelativeBias { .. } => Some(relative_bias_lookup(store, &layer.pos, head).unwrap()),
            _ => None,
        };
        for k in 0..s {
            let mut scores = vec![0.0; s];
            for (j, sc) in scores.iter_mut().enumerate() {
                let mut ip = 0.0;
                for pt in 0..p {
                    for e in 0..d {
                        ip += seq.cell_weight * at(k, pt, 0, head * d + e) * at(j, pt, 1, head * d + e);
                    }
                }
                if let Some(b) = &bias {
                    ip += b.data()[k * s + j];
                }
                *sc = tau * ip;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|x| (x - mx).exp()).sum();
            for j in 0..s {
                let pr = (scores[j] - mx).exp() / z;
                for pt in 0..p {
                    for e in 0..d {
                        out[(k * p + pt) * m + head * d + e] += pr * at(j, pt, 2, head * d + e);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn global_attention_matches_brute_force() {
    for seed in 0..100u64 {
        let grid = [1 + (seed as usize % 2), 1 + (seed as usize / 2 % 2)];
        let pos = [PositionKind::None, PositionKind::ConstantVector, PositionKind::RelativeBias][seed as usize % 3];
        let heads = 1 + seed as usize % 2;
        let (store, l) = layer(&global(heads), pos, 4, grid, seed);
        let seq = random_seq(grid, [2, 3], 4, seed);
        let (out, sm) = l.apply_seq(&store, &seq).unwrap();
        let want = oracle(&store, &l, &seq);
        let diff = out.values.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "seed {seed}: {diff}");
        for row in sm.probs.data().chunks(seq.len()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn single_subdomain_returns_values() {
    let (store, l) = layer(&global(1), PositionKind::None, 3, [1, 1], 0);
    let seq = random_seq([1, 1], [2, 2], 3, 1);
    let (out, sm) = l.apply_seq(&store, &seq).unwrap();
    assert_eq!(sm.probs.data(), &[1.0]);
    let v = l.qkv.apply(&store, &Tensor::new(vec![4, 3], seq.block(0).to_vec()).unwrap(), &LocalCoords::new([2, 2]), 0.25).unwrap();
    for pt in 0..4 {
        for c in 0..3 {
            assert!((out.values.data()[pt * 3 + c] - v.data()[pt * 9 + 6 + c]).abs() < 1e-15);
        }
    }
}

#[test]
fn identical_blocks_split_attention_evenly() {
    let (store, l) = layer(&global(1), PositionKind::None, 2, [1, 2], 0);
    let mut seq = random_seq([1, 2], [2, 2], 2, 3);
    let first = seq.block(0).to_vec();
    seq.values.data_mut()[8..].copy_from_slice(&first);
    let (out, sm) = l.apply_seq(&store, &seq).unwrap();
    for &pr in sm.probs.data() {
        assert!((pr - 0.5).abs() < 1e-15);
    }
    assert_eq!(out.block(0), out.block(1));
}

#[test]
fn compute_qkv_matches_per_block_application() {
    let mut store = ParamStore::<f64>::new();
    let op = SubdomainOperator::new(&mut store, "qkv", &op_config(OperatorKind::Mixture), 2, 6, &mut stream(0, 0)).unwrap();
    let seq = random_seq([1, 2], [2, 2], 2, 5);
    let coords = LocalCoords::new([2, 2]);
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let x = g.constant(seq.values.clone().reshape(&[1, 2, 4, 2]).unwrap());
    let (q, k, v) = compute_qkv(&mut g, &b, &op, x, &coords).unwrap();
    for i in 0..2 {
        let blk = Tensor::new(vec![4, 2], seq.block(i).to_vec()).unwrap();
        let full = op.apply(&store, &blk, &coords, 0.25).unwrap();
        for (which, var) in [q, k, v].into_iter().enumerate() {
            let got = &g.value(var).data()[i * 8..(i + 1) * 8];
            for pt in 0..4 {
                for c in 0..2 {
                    assert_eq!(got[pt * 2 + c], full.data()[pt * 6 + which * 2 + c]);
                }
            }
        }
    }
    let bad = SubdomainOperator::new(&mut store, "bad", &op_config(OperatorKind::Mixture), 2, 5, &mut stream(0, 0)).unwrap();
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let x = g.constant(seq.values.clone().reshape(&[1, 2, 4, 2]).unwrap());
    assert!(compute_qkv(&mut g, &b, &bad, x, &coords).is_err());
}

fn windowed(window: [usize; 2], shift: [usize; 2]) -> AttentionConfig {
    AttentionConfig {
        variant: AttentionVariant::Windowed,
        heads: 2,
        window,
        shift,
        ..AttentionConfig::default()
    }
}

#[test]
fn one_window_equals_global_bit_exactly() {
    for pos in [PositionKind::None, PositionKind::RelativeBias, PositionKind::ConstantVector] {
        let grid = [2, 3];
        let (store, g) = layer(&global(2), pos, 4, grid, 7);
        let (_, w) = layer(&windowed(grid, [0, 0]), pos, 4, grid, 7);
        let seq = random_seq(grid, [2, 2], 4, 8);
        assert_eq!(g.apply_seq(&store, &seq).unwrap().0, w.apply_seq(&store, &seq).unwrap().0);
    }
}

#[test]
fn windows_on_an_eight_by_eight_grid() {
    let layout = TokenLayout::new(&windowed([4, 4], [0, 0]), [8, 8]).unwrap();
    assert_eq!(layout.windows, 4);
    assert_eq!(layout.tokens_per_window, 16);
    assert!(layout.allowed.is_none());
    // first window holds the top-left 4x4 block of subdomains
    let first: Vec<usize> = layout.order[..16].to_vec();
    let want: Vec<usize> = (0..4).flat_map(|r| (0..4).map(move |c| r * 8 + c)).collect();
    assert_eq!(first, want);
    let shifted = TokenLayout::new(&windowed([4, 4], [2, 2]), [8, 8]).unwrap();
    assert_eq!(shifted.order[0], 2 * 8 + 2);
    assert!(TokenLayout::new(&windowed([3, 4], [0, 0]), [8, 8]).is_err());
    assert!(TokenLayout::new(&windowed([4, 4], [4, 0]), [8, 8]).is_err());
}

#[test]
fn windows_do_not_leak_without_shift() {
    let grid = [4, 4];
    let (store, l) = layer(&windowed([2, 2], [0, 0]), PositionKind::RelativeBias, 2, grid, 1);
    let mut f = DiscreteFunction::new(Domain::unit(), Tensor::<f64>::zeros(&[8, 8, 2])).unwrap();
    // delta at a cell of subdomain (0, 1), which lies in window (0, 0)
    f.values.data_mut()[(8 + 3) * 2] = 1.0;
    let out = l.apply_fn(&store, &f).unwrap();
    let dec = Decomposition::new(Domain::unit(), grid).unwrap();
    let seq = decompose(&out, grid).unwrap();
    for i in 0..16 {
        let (r, c) = dec.position(i);
        let inside = r < 2 && c < 2;
        let mag = seq.block(i).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert_eq!(inside, mag > 0.0, "subdomain {i}");
    }
}

#[test]
fn zero_shift_equals_windowed_and_masks_are_exact() {
    let grid = [4, 4];
    let seq = random_seq(grid, [2, 2], 4, 9);
    let (store, plain) = layer(&windowed([2, 2], [0, 0]), PositionKind::RelativeBias, 4, grid, 2);
    let cfg = AttentionConfig {
        shift: [0, 0],
        ..windowed([2, 2], [0, 0])
    };
    let (_, swin0) = layer(&cfg, PositionKind::RelativeBias, 4, grid, 2);
    assert_eq!(plain.apply_seq(&store, &seq).unwrap(), swin0.apply_seq(&store, &seq).unwrap());

    let (store, shifted) = layer(&windowed([2, 2], [1, 1]), PositionKind::RelativeBias, 4, grid, 2);
    let (_, sm) = shifted.apply_seq(&store, &seq).unwrap();
    let allowed = sm.allowed.as_ref().expect("shifted layout is masked");
    assert_eq!(allowed.len(), sm.probs.len());
    let mut masked = 0;
    for (&ok, &pr) in allowed.iter().zip(sm.probs.data()) {
        if ok {
            assert!(pr > 0.0);
        } else {
            assert_eq!(pr, 0.0);
            masked += 1;
        }
    }
    assert!(masked > 0);
    for row in sm.probs.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn shifted_mask_separates_wrapped_subdomains() {
    // 4x4 grid, 2x2 windows, shift (1, 1): the last window in shifted
    // coordinates holds subdomains (3,3), (3,0), (0,3), (0,0); none were
    // contiguous before the shift.
    let layout = TokenLayout::new(&windowed([2, 2], [1, 1]), [4, 4]).unwrap();
    let last = &layout.order[12..16];
    assert_eq!(last, &[15, 12, 3, 0]);
    let mask = layout.allowed.unwrap();
    let win = &mask[3 * 16..4 * 16];
    for k in 0..4 {
        for j in 0..4 {
            assert_eq!(win[k * 4 + j], k == j);
        }
    }
    // interior windows are unmasked
    assert!(mask[..16].iter().all(|&b| b));
}

fn neighborhood(r: usize) -> AttentionConfig {
    AttentionConfig {
        variant: AttentionVariant::Neighborhood,
        heads: 1,
        radius: r,
        ..AttentionConfig::default()
    }
}

#[test]
fn neighborhood_degenerate_radii() {
    let grid = [3, 2];
    let seq = random_seq(grid, [2, 2], 2, 4);
    let (store, g) = layer(&global(1), PositionKind::RelativeBias, 2, grid, 5);
    let (_, full) = layer(&neighborhood(3), PositionKind::RelativeBias, 2, grid, 5);
    assert_eq!(g.apply_seq(&store, &seq).unwrap().0, full.apply_seq(&store, &seq).unwrap().0);

    let (_, zero) = layer(&neighborhood(0), PositionKind::RelativeBias, 2, grid, 5);
    let (out, sm) = zero.apply_seq(&store, &seq).unwrap();
    assert_eq!(sm.probs, Tensor::eye(6).reshape(&[1, 1, 6, 6]).unwrap());
    let coords = LocalCoords::new([2, 2]);
    for i in 0..6 {
        let blk = Tensor::new(vec![4, 2], seq.block(i).to_vec()).unwrap();
        let v = zero.qkv.apply(&store, &blk, &coords, 0.25).unwrap();
        for pt in 0..4 {
            for c in 0..2 {
                assert!((out.block(i)[pt * 2 + c] - v.data()[pt * 6 + 4 + c]).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn radius_one_mask_is_the_eight_neighborhood() {
    let layout = TokenLayout::new(&neighborhood(1), [3, 3]).unwrap();
    let mask = layout.allowed.unwrap();
    let neighbors = |k: usize| -> Vec<usize> {
        let (r, c) = ((k / 3) as isize, (k % 3) as isize);
        let mut v = Vec::new();
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (a, b) = (r + dr, c + dc);
                if (0..3).contains(&a) && (0..3).contains(&b) {
                    v.push((a * 3 + b) as usize);
                }
            }
        }
        v
    };
    for k in 0..9 {
        let got: Vec<usize> = (0..9).filter(|&j| mask[k * 9 + j]).collect();
        assert_eq!(got, neighbors(k));
    }
    assert_eq!((0..9).filter(|&j| mask[4 * 9 + j]).count(), 9);
    assert_eq!((0..9).filter(|&j| mask[j]).count(), 4);
}

#[test]
fn relative_bias_table_lookup() {
    let grid = [2, 2];
    let mut store = ParamStore::<f64>::new();
    let pos = PositionEncoding::new(&mut store, "a", PositionKind::RelativeBias, grid, 4, 2);
    assert_eq!(relative_bias_lookup(&store, &pos, 0).unwrap(), Tensor::zeros(&[4, 4]));
    let PositionEncoding::RelativeBias { table, .. } = pos else { unreachable!() };
    assert_eq!(store.value(table).shape(), &[2, 9]);
    let vals: Vec<f64> = (0..18).map(|v| v as f64).collect();
    store.set(table, Tensor::from_f64(&[2, 9], &vals).unwrap()).unwrap();
    let b = relative_bias_lookup(&store, &pos, 1).unwrap();
    let cell = |i: usize| ((i / 2) as isize, (i % 2) as isize);
    let mut used = std::collections::BTreeSet::new();
    for k in 0..4 {
        for j in 0..4 {
            let (a, c) = (cell(k), cell(j));
            let off = (a.0 - c.0, a.1 - c.1);
            let expect = 9.0 + ((off.0 + 1) * 3 + off.1 + 1) as f64;
            assert_eq!(b.data()[k * 4 + j], expect);
            used.insert(off);
        }
    }
    assert_eq!(used.len(), 9);
    let none = PositionEncoding::None;
    assert!(relative_bias_lookup(&store, &none, 0).is_err());
}

#[test]
fn zero_bias_table_leaves_attention_unchanged() {
    let grid = [2, 2];
    let seq = random_seq(grid, [2, 2], 2, 1);
    let (mut store, with) = layer(&global(1), PositionKind::RelativeBias, 2, grid, 3);
    let id = store.id("attn.rel_bias").unwrap();
    store.set(id, Tensor::zeros(&[1, 9])).unwrap();
    let mut plain_store = ParamStore::<f64>::new();
    let plain = AttentionLayer::new(&mut plain_store, "attn", &global(1), &op_config(OperatorKind::Mixture), PositionKind::None, 2, grid, &mut stream(0, 0)).unwrap();
    plain_store.load_from(&store).unwrap();
    let a = with.apply_seq(&store, &seq).unwrap().0;
    let b = plain.apply_seq(&plain_store, &seq).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn global_attention_is_permutation_equivariant() {
    let grid = [2, 2];
    let (store, l) = layer(&global(2), PositionKind::None, 4, grid, 6);
    for seed in 0..10u64 {
        let seq = random_seq(grid, [2, 2], 4, seed);
        let perm = [[1, 0, 3, 2], [3, 2, 1, 0], [2, 0, 3, 1], [0, 3, 1, 2]][seed as usize % 4];
        let mut permuted = seq.clone();
        let n = 16;
        for (dst, &src) in perm.iter().enumerate() {
            permuted.values.data_mut()[dst * n..(dst + 1) * n].copy_from_slice(seq.block(src));
        }
        let (a, _) = l.apply_seq(&store, &seq).unwrap();
        let (b, _) = l.apply_seq(&store, &permuted).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            let d = b.block(dst).iter().zip(a.block(src)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12);
        }
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = stream(0, 0);
    let oc = op_config(OperatorKind::Mixture);
    assert!(AttentionLayer::new(&mut store, "a", &global(3), &oc, PositionKind::None, 4, [2, 2], &mut rng).is_err());
    let bad_tau = AttentionConfig {
        tau: Some(0.0),
        ..global(1)
    };
    assert!(AttentionLayer::new(&mut store, "b", &bad_tau, &oc, PositionKind::None, 4, [2, 2], &mut rng).is_err());
}

/// Max relative gradient error of an attention layer over its parameters.
pub(crate) fn attention_grad_error(config: &AttentionConfig, grid: [usize; 2], seed: u64) -> f64 {
    let (mut store, l) = layer(config, PositionKind::RelativeBias, 4, grid, seed);
    let seq = random_seq(grid, [2, 2], 4, seed + 1);
    let s = seq.len();
    let r = Tensor::<f64>::uniform(&[1, s, 4, 4], 1.0, &mut stream(seed, 11));
    let coords = LocalCoords::new([2, 2]);
    grad_check(
        |g, b| {
            let x = g.constant(seq.values.clone().reshape(&[1, s, 4, 4])?);
            let tr = l.forward(g, b, x, &coords, seq.cell_weight)?;
            let rv = g.constant(r.clone());
            let prod = g.mul(tr.output, rv)?;
            g.sum_all(prod)
        },
        &mut store,
        1e-6,
        seed,
    )
    .unwrap()
    .max_rel_error
}

#[test]
fn attention_variants_pass_grad_check() {
    let configs = [global(2), windowed([2, 2], [1, 1]), neighborhood(1)];
    for cfg in &configs {
        for seed in 0..2 {
            let err = attention_grad_error(cfg, [4, 4], seed);
            assert!(err < 1e-4, "{:?}: {err}", cfg.variant);
        }
    }
}

#[test]
fn scores_converge_at_second_order() {
    let grid = [2, 2];
    let mut store = ParamStore::<f64>::new();
    let l = AttentionLayer::new(&mut store, "attn", &global(1), &op_config(OperatorKind::LowRank), PositionKind::None, 2, grid, &mut stream(4, 0)).unwrap();
    let scores = |p: usize| {
        let f = DiscreteFunction::<f64>::from_fn(Domain::unit(), [2 * p, 2 * p], 2, |x, y| {
            vec![(3.0 * x).sin() + y, (x * y * 2.0).cos()]
        })
        .unwrap();
        let seq = decompose(&f, grid).unwrap();
        l.apply_seq(&store, &seq).unwrap().1.scores.into_data()
    };
    let reference = scores(64);
    let err = |p: usize| scores(p).iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (e4, e8, e16) = (err(4), err(8), err(16));
    let order = ((e4 / e8).log2() + (e8 / e16).log2()) / 2.0;
    assert!(order >= 1.9, "errors {e4:e} {e8:e} {e16:e}: order {order}");
}
