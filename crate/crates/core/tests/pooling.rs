mod common;

use std::collections::HashMap;

use common::*;
use mulgt::pooling::{drop_select, top_k_indices, Pool, PoolShape};
use mulgt::{Error, NodeSampler, ParamStore, PoolKind, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shape(dim: usize, keep: usize, clusters: usize) -> PoolShape {
    PoolShape {
        dim,
        keep,
        clusters,
        heads: 2,
        scaled: true,
        relu_only: false,
    }
}

struct Pooled {
    pooled: Tensor,
    assignment: Option<Tensor>,
    kept: Option<Vec<usize>>,
}

fn run_pool(
    pool: &Pool,
    store: &ParamStore,
    h: &Tensor,
    adj: &Tensor,
    sampler: &mut NodeSampler<'_>,
) -> Pooled {
    let mut tape = Tape::with_params(store);
    let hv = tape.constant(h.clone()).unwrap();
    let av = tape.constant(adj.clone()).unwrap();
    let out = pool.forward(&mut tape, hv, av, sampler).unwrap();
    Pooled {
        pooled: tape.value(out.pooled).clone(),
        assignment: out.assignment.map(|s| tape.value(s).clone()),
        kept: out.kept,
    }
}

#[test]
fn gcmincut_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let g = random_graph(5, 5, 6, 0.8, 5);
    let mut store = ParamStore::new();
    let pool = Pool::new(
        PoolKind::GcMinCut,
        &mut store,
        "p",
        shape(6, 3, 4),
        &mut rng,
    )
    .unwrap();
    let h = g.node_features().clone();
    let out = run_pool(
        &pool,
        &store,
        &h,
        g.norm_adj(),
        &mut NodeSampler::Fixed(&[]),
    );

    let s = softmax_rows(&relu(&mm(
        &to_mat(g.norm_adj()),
        &mm(&to_mat(&h), &to_mat(store.by_name("p.w").unwrap())),
    )));
    assert!(max_diff(out.assignment.as_ref().unwrap(), &s) < 1e-12);
    assert!(max_diff(&out.pooled, &mm(&transpose(&s), &to_mat(&h))) < 1e-12);
    assert_eq!(out.pooled.shape(), [4, 6]);
}

#[test]
fn relu_only_assignment_fills_dead_rows_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let pool = Pool::new(
        PoolKind::GcMinCut,
        &mut store,
        "p",
        PoolShape {
            relu_only: true,
            ..shape(3, 2, 4)
        },
        &mut rng,
    )
    .unwrap();
    // A zero feature row gives an all-zero ReLU row.
    let h = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, -0.5, 2.0]]).unwrap();
    let out = run_pool(
        &pool,
        &store,
        &h,
        &Tensor::eye(2),
        &mut NodeSampler::Fixed(&[]),
    );
    let s = out.assignment.unwrap();
    assert_eq!(s.row(0), &[0.25; 4]);
    assert!(s.row(1).iter().all(|&v| v >= 0.0));
}

#[test]
fn cluster_pools_are_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let g = random_graph(6, 5, 4, 0.8, 6);
    for kind in [
        PoolKind::GcMinCut,
        PoolKind::MinCut,
        PoolKind::Diff,
        PoolKind::Gm,
    ] {
        let mut store = ParamStore::new();
        let pool = Pool::new(kind, &mut store, "p", shape(4, 3, 3), &mut rng).unwrap();
        let h = g.node_features().clone();
        let base = run_pool(
            &pool,
            &store,
            &h,
            g.norm_adj(),
            &mut NodeSampler::Fixed(&[]),
        )
        .pooled;
        for _ in 0..20 {
            let perm = permutation(g.num_nodes(), &mut rng);
            let pg = g.permuted(&perm).unwrap();
            let out = run_pool(
                &pool,
                &store,
                pg.node_features(),
                pg.norm_adj(),
                &mut NodeSampler::Fixed(&[]),
            );
            assert!(out.pooled.max_abs_diff(&base) < 1e-10, "{kind}");
        }
    }
}

#[test]
fn every_kind_produces_the_configured_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let g = random_graph(4, 4, 6, 0.9, 7);
    for kind in PoolKind::ALL {
        let mut store = ParamStore::new();
        let pool = Pool::new(kind, &mut store, "p", shape(6, 5, 3), &mut rng).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let out = run_pool(
            &pool,
            &store,
            g.node_features(),
            g.norm_adj(),
            &mut NodeSampler::Random(&mut r),
        );
        let rows = if kind.is_drop_based() { 5 } else { 3 };
        assert_eq!(out.pooled.shape(), [rows, 6], "{kind}");
        assert!(out.pooled.is_finite());
        assert_eq!(out.kept.is_some(), kind.is_drop_based(), "{kind}");
        assert_eq!(
            out.assignment.is_some(),
            matches!(kind, PoolKind::GcMinCut | PoolKind::MinCut),
            "{kind}"
        );
    }
}

#[test]
fn single_node_graph_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let h = Tensor::full(1, 4, 0.7);
    for kind in PoolKind::ALL {
        let mut store = ParamStore::new();
        let pool = Pool::new(kind, &mut store, "p", shape(4, 3, 2), &mut rng).unwrap();
        let out = run_pool(
            &pool,
            &store,
            &h,
            &Tensor::eye(1),
            &mut NodeSampler::Random(&mut rng),
        );
        assert!(out.pooled.is_finite(), "{kind}");
        if kind == PoolKind::Drop {
            assert_eq!(out.kept, Some(vec![0]));
            assert_eq!(out.pooled, h);
        }
    }
}

#[test]
fn drop_keeps_everything_when_graph_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    assert_eq!(drop_select(4, 10, &mut rng), vec![0, 1, 2, 3]);
    assert_eq!(drop_select(4, 4, &mut rng), vec![0, 1, 2, 3]);
}

#[test]
fn fixed_drop_selection_is_validated() {
    let mut store = ParamStore::new();
    let pool = Pool::new(
        PoolKind::Drop,
        &mut store,
        "p",
        shape(2, 2, 2),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let mut tape = Tape::with_params(&store);
    let h = tape.constant(Tensor::zeros(3, 2)).unwrap();
    let a = tape.constant(Tensor::eye(3)).unwrap();
    let res = pool.forward(&mut tape, h, a, &mut NodeSampler::Fixed(&[0, 7]));
    assert!(matches!(res, Err(Error::Contract(_))));
}

#[test]
fn drop_subsets_are_uniform() {
    // |V| = 4, k = 2: six subsets; chi-square with 5 degrees of freedom.
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let draws = 10_000;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..draws {
        *counts.entry(drop_select(4, 2, &mut rng)).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    let expected = draws as f64 / 6.0;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // Upper 1% point of chi-square(5).
    assert!(chi2 < 15.086, "chi2 = {chi2}");
}

/// P(at least one of `marked` nodes survives) by enumerating all
/// `keep`-subsets of `n` nodes.
fn retention_by_enumeration(n: usize, keep: usize, marked: usize) -> f64 {
    let (mut hit, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != keep {
            continue;
        }
        total += 1;
        if (0..marked).any(|i| mask >> i & 1 == 1) {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

#[test]
fn marked_node_retention_is_hypergeometric() {
    assert!((retention_by_enumeration(4, 2, 1) - 0.5).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    for (n, keep, marked) in [(4, 2, 1), (10, 3, 2), (12, 5, 3)] {
        let p = retention_by_enumeration(n, keep, marked);
        let draws = 10_000;
        let hits = (0..draws)
            .filter(|_| drop_select(n, keep, &mut rng).iter().any(|&i| i < marked))
            .count();
        let rate = hits as f64 / draws as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        assert!(
            (rate - p).abs() < 3.0 * sigma,
            "n={n} k={keep}: {rate} vs {p}"
        );
    }
}

#[test]
fn top_k_breaks_ties_by_index() {
    assert_eq!(top_k_indices(&[0.5, 0.9, 0.5, 0.1], 3), vec![1, 0, 2]);
    assert_eq!(top_k_indices(&[1.0], 4), vec![0]);
}

#[test]
fn pool_names_round_trip() {
    for kind in PoolKind::ALL {
        assert_eq!(kind.name().parse::<PoolKind>().unwrap(), kind);
    }
    assert!(matches!("avg".parse::<PoolKind>(), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drop_select_is_a_sorted_subset(n in 1usize..40, keep in 1usize..50, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = drop_select(n, keep, &mut rng);
        prop_assert_eq!(idx.len(), keep.min(n));
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
    }

    #[test]
    fn soft_assignments_are_row_stochastic(seed in any::<u64>(), p in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(4, 4, 3, 0.7, rng.random());
        let mut store = ParamStore::new();
        let pool = Pool::new(PoolKind::GcMinCut, &mut store, "p", shape(3, 2, p), &mut rng).unwrap();
        let out = run_pool(&pool, &store, g.node_features(), g.norm_adj(), &mut NodeSampler::Fixed(&[]));
        let s = out.assignment.unwrap();
        for i in 0..s.rows() {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
