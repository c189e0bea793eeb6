mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgormer::attention::{
    scaled_dot_attention, spatial_attention, spd_bias, temporal_attention, AttentionParams,
    SpdBiasTable,
};
use stgormer::graph::SpatioTemporalGraph;
use stgormer::layers::Linear;
use stgormer::numerics::{finite_difference_check, GradCheckOptions, NdArray, ParameterStore, Tape};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray {
    NdArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Attention parameters with non-trivial biases so every term matters.
fn params(store: &mut ParameterStore, prefix: &str, d: usize, heads: usize, seed: u64) -> AttentionParams {
    let p = AttentionParams::new(store, prefix, d, heads, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for l in [&p.query, &p.key, &p.value, &p.output] {
        let b = random(&[d], &mut rng).map(|v| 0.3 * v);
        *store.value_mut(l.bias) = b;
    }
    p
}

fn apply_linear(store: &ParameterStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(l.weight);
    let b = store.value(l.bias);
    (0..l.out_dim)
        .map(|o| b.data()[o] + (0..l.in_dim).map(|i| x[i] * w.at(&[i, o])).sum::<f64>())
        .collect()
}

/// Straight per-pair loop: scores, softmax, weighted values, output projection.
fn oracle(h: &NdArray, p: &AttentionParams, store: &ParameterStore, bias: Option<&NdArray>) -> NdArray {
    let [b, l, d] = *h.shape() else { panic!() };
    let nh = p.heads();
    let dh = d / nh;
    let mut out = NdArray::zeros(&[b, l, d]);
    for bi in 0..b {
        let rows: Vec<Vec<f64>> = (0..l)
            .map(|i| h.data()[(bi * l + i) * d..(bi * l + i + 1) * d].to_vec())
            .collect();
        let q: Vec<_> = rows.iter().map(|r| apply_linear(store, &p.query, r)).collect();
        let k: Vec<_> = rows.iter().map(|r| apply_linear(store, &p.key, r)).collect();
        let v: Vec<_> = rows.iter().map(|r| apply_linear(store, &p.value, r)).collect();
        for i in 0..l {
            let mut ctx = vec![0.0; d];
            for head in 0..nh {
                let cols = head * dh..(head + 1) * dh;
                let mut s: Vec<f64> = (0..l)
                    .map(|j| {
                        let dot: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                        dot / (dh as f64).sqrt() + bias.map_or(0.0, |bb| bb.at(&[i, j]))
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                s.iter_mut().for_each(|x| *x = (*x - m).exp());
                let z: f64 = s.iter().sum();
                for j in 0..l {
                    for c in cols.clone() {
                        ctx[c] += s[j] / z * v[j][c];
                    }
                }
            }
            let o = apply_linear(store, &p.output, &ctx);
            out.data_mut()[(bi * l + i) * d..(bi * l + i + 1) * d].copy_from_slice(&o);
        }
    }
    out
}

#[test]
fn matches_per_pair_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    let p = params(&mut store, "a", 8, 2, 1);
    let h = random(&[2, 5, 8], &mut rng);
    let bias = random(&[5, 5], &mut rng);
    for b in [None, Some(&bias)] {
        let got = scaled_dot_attention(&h, &p, &store, b).unwrap();
        assert!(got.max_abs_diff(&oracle(&h, &p, &store, b)) < 1e-10);
    }
}

#[test]
fn weight_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParameterStore::new();
    let p = params(&mut store, "a", 8, 4, 2);
    let mut tape = Tape::new();
    let h = tape.constant(random(&[3, 6, 8], &mut rng));
    let bias = tape.constant(random(&[6, 6], &mut rng).map(|v| 5.0 * v));
    let (_, w) = p.forward_with_weights(&mut tape, &store, h, Some(bias)).unwrap();
    assert_eq!(tape.shape(w), &[12, 6, 6]);
    for row in tape.value(w).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_keys_give_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParameterStore::new();
    let p = params(&mut store, "a", 4, 2, 3);
    *store.value_mut(p.key.weight) = NdArray::zeros(&[4, 4]);
    let h = random(&[1, 5, 4], &mut rng);
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let (out, w) = p.forward_with_weights(&mut tape, &store, hv, None).unwrap();
    assert!(tape.value(w).data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    // output = O(mean of values), the same for every query
    let mut mean_v = vec![0.0; 4];
    for i in 0..5 {
        let v = apply_linear(&store, &p.value, &h.data()[i * 4..(i + 1) * 4]);
        mean_v.iter_mut().zip(&v).for_each(|(m, x)| *m += x / 5.0);
    }
    let want = apply_linear(&store, &p.output, &mean_v);
    for row in tape.value(out).data().chunks(4) {
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn temporal_attention_matches_per_node_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParameterStore::new();
    let p = params(&mut store, "a", 6, 3, 4);
    let (b, t, n, d) = (2, 5, 4, 6);
    let h = random(&[b, t, n, d], &mut rng);
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let y = temporal_attention(&mut tape, &store, &p, hv).unwrap();
    let y = tape.value(y).clone();
    for bi in 0..b {
        for ni in 0..n {
            let seq = NdArray::from_fn(&[1, t, d], |i| h.at(&[bi, i / d, ni, i % d]));
            let want = scaled_dot_attention(&seq, &p, &store, None).unwrap();
            for ti in 0..t {
                for c in 0..d {
                    assert!((y.at(&[bi, ti, ni, c]) - want.at(&[0, ti, c])).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn single_node_spatial_attention_is_plain_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParameterStore::new();
    let p = params(&mut store, "a", 4, 2, 5);
    let h = random(&[1, 3, 1, 4], &mut rng);
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let y = spatial_attention(&mut tape, &store, &p, hv, None).unwrap();
    let want = scaled_dot_attention(&h.reshape(&[3, 1, 4]).unwrap(), &p, &store, None).unwrap();
    assert!(tape.value(y).clone().reshape(&[3, 1, 4]).unwrap().max_abs_diff(&want) < 1e-15);
}

fn run_axis(spatial: bool, h: &NdArray, p: &AttentionParams, store: &ParameterStore, bias: Option<&NdArray>) -> NdArray {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let bv = bias.map(|b| tape.constant(b.clone()));
    let y = if spatial {
        spatial_attention(&mut tape, store, p, hv, bv).unwrap()
    } else {
        temporal_attention(&mut tape, store, p, hv).unwrap()
    };
    tape.value(y).clone()
}

#[test]
fn temporal_attention_is_node_local_and_spatial_is_step_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParameterStore::new();
    let p = params(&mut store, "a", 4, 2, 6);
    let (b, t, n, d) = (2, 4, 5, 4);
    let h = random(&[b, t, n, d], &mut rng);
    let base_t = run_axis(false, &h, &p, &store, None);
    let base_s = run_axis(true, &h, &p, &store, None);
    // perturb node 2 everywhere, and separately step 1 everywhere
    let node_pert = NdArray::from_fn(&[b, t, n, d], |i| {
        h.data()[i] + if (i / d) % n == 2 { 0.7 } else { 0.0 }
    });
    let step_pert = NdArray::from_fn(&[b, t, n, d], |i| {
        h.data()[i] + if (i / (n * d)) % t == 1 { 0.7 } else { 0.0 }
    });
    let yt = run_axis(false, &node_pert, &p, &store, None);
    let ys = run_axis(true, &step_pert, &p, &store, None);
    for i in 0..h.len() {
        if (i / d) % n != 2 {
            assert_eq!(yt.data()[i].to_bits(), base_t.data()[i].to_bits());
        }
        if (i / (n * d)) % t != 1 {
            assert_eq!(ys.data()[i].to_bits(), base_s.data()[i].to_bits());
        }
    }
    assert_ne!(yt, base_t);
    assert_ne!(ys, base_s);
}

#[test]
fn unreachable_bucket_as_soft_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // nodes 3 and 4 cannot be reached from 0..=2
    let g = SpatioTemporalGraph::new(5, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 3), (3, 0)], true).unwrap();
    let spd = g.shortest_path_matrix();
    let mut table = vec![0.1, 0.2, -0.1, 0.05, 0.0, 0.0];
    table[5] = -1e9;
    let bias = spd_bias(&spd, &table).unwrap();
    let mut store = ParameterStore::new();
    let p = params(&mut store, "a", 4, 2, 7);
    let mut tape = Tape::new();
    let h = tape.constant(random(&[2, 5, 4], &mut rng));
    let bv = tape.constant(bias);
    let (_, w) = p.forward_with_weights(&mut tape, &store, h, Some(bv)).unwrap();
    let w = tape.value(w);
    for bh in 0..4 {
        for i in 0..5 {
            for j in 0..5 {
                if spd.get(i, j) == -1 {
                    assert!(w.at(&[bh, i, j]) < 1e-12);
                }
            }
        }
    }
}

#[test]
fn bias_lookup_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let g = common::random_graph(&mut rng, 12, 0.15, true);
        let spd = g.shortest_path_matrix();
        let max_spd = rng.random_range(1..6);
        let table: Vec<f64> = (0..max_spd + 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = spd_bias(&spd, &table).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let s = spd.get(i, j);
                let idx = if s < 0 { max_spd + 2 } else { (s as usize).min(max_spd + 1) };
                assert_eq!(bias.at(&[i, j]), table[idx]);
            }
        }
        // the taped table agrees with the value-level lookup
        let mut store = ParameterStore::new();
        let t = SpdBiasTable::new(&mut store, "tbl", max_spd, 0).unwrap();
        *store.value_mut(t.table) = NdArray::from_vec(table.clone());
        let mut tape = Tape::new();
        let v = t.forward(&mut tape, &store, &spd).unwrap();
        assert_eq!(tape.value(v), &bias);
    }
}

#[test]
fn fresh_table_starts_with_zero_unreachable_bucket() {
    let mut store = ParameterStore::new();
    let t = SpdBiasTable::new(&mut store, "tbl", 10, 3).unwrap();
    assert_eq!(t.len(), 13);
    assert_eq!(store.value(t.table).data()[t.unreachable_bucket()], 0.0);
}

#[test]
fn table_gradient_is_sum_over_spatial_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = SpatioTemporalGraph::new(5, &[(0, 1), (1, 2), (2, 3), (4, 0)], true).unwrap();
    let spd = g.shortest_path_matrix();
    let mut store = ParameterStore::new();
    let table = SpdBiasTable::new(&mut store, "tbl", 2, 0).unwrap();
    let p1 = params(&mut store, "l1", 4, 2, 1);
    let p2 = params(&mut store, "l2", 4, 2, 2);
    let h = random(&[1, 2, 5, 4], &mut rng);
    let w = random(&[1, 2, 5, 4], &mut rng);
    let fixed_bias = spd_bias(&spd, store.value(table.table).data()).unwrap();
    // live[k] says whether layer k sees the table as a parameter or a detached constant
    let table_grad = |live: [bool; 2], store: &mut ParameterStore| {
        let mut tape = Tape::new();
        let shared = table.forward(&mut tape, store, &spd).unwrap();
        let detached = tape.constant(fixed_bias.clone());
        let pick = |k: usize| if live[k] { shared } else { detached };
        let x = tape.constant(h.clone());
        let x = spatial_attention(&mut tape, store, &p1, x, Some(pick(0))).unwrap();
        let x = spatial_attention(&mut tape, store, &p2, x, Some(pick(1))).unwrap();
        let wv = tape.constant(w.clone());
        let y = tape.mul(x, wv).unwrap();
        let loss = tape.sum(y);
        store.zero_grads();
        tape.backward(loss, store).unwrap();
        store.grad(table.table).clone()
    };
    let both = table_grad([true, true], &mut store);
    let first = table_grad([true, false], &mut store);
    let second = table_grad([false, true], &mut store);
    let sum = first.zip_map(&second, |a, b| a + b).unwrap();
    assert!(both.max_abs_diff(&sum) < 1e-12);
    assert!(first.data().iter().any(|&v| v != 0.0) && second.data().iter().any(|&v| v != 0.0));
}

#[test]
fn attention_and_table_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = SpatioTemporalGraph::new(4, &[(0, 1), (1, 2), (3, 2)], true).unwrap();
    let spd = g.shortest_path_matrix();
    let mut store = ParameterStore::new();
    let table = SpdBiasTable::new(&mut store, "tbl", 1, 0).unwrap();
    *store.value_mut(table.table) = NdArray::from_vec(vec![0.3, -0.2, 0.5, -0.4]);
    let ps = params(&mut store, "s", 4, 2, 1);
    let pt = params(&mut store, "t", 4, 2, 2);
    let h = random(&[2, 3, 4, 4], &mut rng);
    let w = random(&[2, 3, 4, 4], &mut rng);
    let run = |store: &ParameterStore| {
        let mut tape = Tape::new();
        let bias = table.forward(&mut tape, store, &spd).unwrap();
        let x = tape.constant(h.clone());
        let x = spatial_attention(&mut tape, store, &ps, x, Some(bias)).unwrap();
        let x = temporal_attention(&mut tape, store, &pt, x).unwrap();
        let wv = tape.constant(w.clone());
        let y = tape.mul(x, wv).unwrap();
        let loss = tape.mean(y);
        (tape, loss)
    };
    let (tape, loss) = run(&store);
    tape.backward(loss, &mut store).unwrap();
    let r = finite_difference_check(
        |s| {
            let (t, l) = run(s);
            t.value(l).item()
        },
        &mut store,
        GradCheckOptions { max_coords: 400, ..Default::default() },
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{:?}", r.worst);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn constant_bias_shift_is_invisible(seed in any::<u64>(), c in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let p = params(&mut store, "a", 4, 2, seed);
        let h = random(&[1, 2, 5, 4], &mut rng);
        let bias = random(&[5, 5], &mut rng);
        let a = run_axis(true, &h, &p, &store, Some(&bias));
        let b = run_axis(true, &h, &p, &store, Some(&bias.map(|v| v + c)));
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn spatial_attention_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let g = common::random_graph(&mut rng, n, 0.3, true);
        let perm = common::random_perm(&mut rng, n);
        let table: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = spd_bias(&g.shortest_path_matrix(), &table).unwrap();
        let pbias = spd_bias(&g.permuted(&perm).unwrap().shortest_path_matrix(), &table).unwrap();
        let mut store = ParameterStore::new();
        let p = params(&mut store, "a", 4, 2, seed);
        let h = random(&[1, 2, n, 4], &mut rng);
        let y = run_axis(true, &h, &p, &store, Some(&bias));
        let py = run_axis(true, &common::permute_nodes(&h, 2, &perm), &p, &store, Some(&pbias));
        prop_assert!(common::permute_nodes(&y, 2, &perm).max_abs_diff(&py) < 1e-10);
    }
}
