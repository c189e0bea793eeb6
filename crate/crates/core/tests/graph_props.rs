use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgormer::graph::{load_graph, save_graph, SpatioTemporalGraph, UNREACHABLE};

/// Independent all-pairs hop distances.
fn floyd_warshall(g: &SpatioTemporalGraph) -> Vec<i64> {
    let n = g.num_nodes();
    let inf = i64::MAX / 4;
    let mut d = vec![inf; n * n];
    for i in 0..n {
        d[i * n + i] = 0;
    }
    for &(u, v) in g.edges() {
        d[u * n + v] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i * n + k] + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d.into_iter().map(|x| if x >= inf { UNREACHABLE } else { x }).collect()
}

fn random_graph(rng: &mut ChaCha8Rng, max_n: usize, p: f64, directed: bool) -> SpatioTemporalGraph {
    let n = rng.random_range(1..=max_n);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            let ok = if directed { u != v } else { u < v };
            if ok && rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    SpatioTemporalGraph::new(n, &edges, directed).unwrap()
}

fn arb_graph() -> impl Strategy<Value = SpatioTemporalGraph> {
    (1usize..=12, any::<bool>(), any::<u64>()).prop_map(|(n, directed, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in 0..n {
                let ok = if directed { u != v } else { u < v };
                if ok && rng.random_bool(0.25) {
                    edges.push((u, v));
                }
            }
        }
        SpatioTemporalGraph::new(n, &edges, directed).unwrap()
    })
}

#[test]
fn spd_matches_floyd_warshall_on_random_directed_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let g = random_graph(&mut rng, 20, 0.2, true);
        assert_eq!(g.shortest_path_matrix().values(), floyd_warshall(&g).as_slice());
    }
}

#[test]
fn degrees_match_edge_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let g = random_graph(&mut rng, 20, 0.2, true);
        let n = g.num_nodes();
        let (mut ind, mut outd) = (vec![0; n], vec![0; n]);
        for u in 0..n {
            for v in 0..n {
                if g.has_edge(u, v) {
                    outd[u] += 1;
                    ind[v] += 1;
                }
            }
        }
        assert_eq!(g.degrees(), (ind, outd));
    }
}

#[test]
fn chain_file_parses() {
    let g = SpatioTemporalGraph::parse("3 directed\n0 1\n1 2\n", "chain").unwrap();
    assert_eq!(g.num_nodes(), 3);
    assert_eq!(g.edges().len(), 2);
}

#[test]
fn out_of_range_node_names_line() {
    let err = SpatioTemporalGraph::parse("3 directed\n0 1\n0 5\n", "g.txt").unwrap_err();
    assert!(err.to_string().starts_with("g.txt:3:"), "{err}");
}

#[test]
fn save_load_is_canonical_on_random_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..20 {
        let directed = i % 2 == 0;
        let g = random_graph(&mut rng, 15, 0.3, directed);
        let path = dir.path().join(format!("g{i}.txt"));
        save_graph(&path, &g).unwrap();
        let back = load_graph(&path).unwrap();
        assert_eq!(back.edges(), g.edges());
        let again = dir.path().join(format!("h{i}.txt"));
        save_graph(&again, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn shuffled_edge_file_saves_canonically() {
    let g = SpatioTemporalGraph::parse("# comment\n4 undirected\n\n3 2\n1 0\n2 1\n", "g").unwrap();
    assert_eq!(g.to_edge_list(), "4 undirected\n0 1\n1 2\n2 3\n");
}

proptest! {
    #[test]
    fn spd_invariants(g in arb_graph()) {
        let n = g.num_nodes();
        let spd = g.shortest_path_matrix();
        for i in 0..n {
            prop_assert_eq!(spd.get(i, i), 0);
            for j in 0..n {
                let v = spd.get(i, j);
                prop_assert!(v == UNREACHABLE || (0..n as i64).contains(&v));
                for k in 0..n {
                    let (a, b) = (spd.get(i, k), spd.get(k, j));
                    if a >= 0 && b >= 0 {
                        prop_assert!(v >= 0 && v <= a + b);
                    }
                }
            }
        }
        if !g.is_directed() {
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(spd.get(i, j), spd.get(j, i));
                }
            }
        }
    }

    #[test]
    fn degree_sums_equal_edge_count(g in arb_graph()) {
        let (ind, outd) = g.degrees();
        prop_assert_eq!(ind.iter().sum::<usize>(), g.edges().len());
        prop_assert_eq!(outd.iter().sum::<usize>(), g.edges().len());
    }

    #[test]
    fn relabeling_conjugates_spd(g in arb_graph(), seed in any::<u64>()) {
        let n = g.num_nodes();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let h = g.permuted(&perm).unwrap();
        let (a, b) = (g.shortest_path_matrix(), h.shortest_path_matrix());
        let (gi, go) = g.degrees();
        let (hi, ho) = h.degrees();
        for i in 0..n {
            prop_assert_eq!(gi[i], hi[perm[i]]);
            prop_assert_eq!(go[i], ho[perm[i]]);
            for j in 0..n {
                prop_assert_eq!(a.get(i, j), b.get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn adding_an_edge_never_lengthens_paths(g in arb_graph(), u in 0usize..12, v in 0usize..12) {
        let n = g.num_nodes();
        let (u, v) = (u % n, v % n);
        prop_assume!(u != v && !g.has_edge(u, v));
        let h = g.with_edge(u, v).unwrap();
        let (a, b) = (g.shortest_path_matrix(), h.shortest_path_matrix());
        for i in 0..n {
            for j in 0..n {
                if a.get(i, j) >= 0 {
                    prop_assert!(b.get(i, j) >= 0 && b.get(i, j) <= a.get(i, j));
                }
            }
        }
    }
}
