mod common;

use common::*;
use mulgt::attention::MultiHeadWeights;
use mulgt::gcn::GcnStack;
use mulgt::injection::{InjectionBlock, InjectionKind, TokenBank};
use mulgt::{Error, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gcn_forward(stack: &GcnStack, store: &ParamStore, adj: &Tensor, x: &Tensor) -> Tensor {
    let mut tape = Tape::with_params(store);
    let a = tape.constant(adj.clone()).unwrap();
    let x = tape.constant(x.clone()).unwrap();
    let h = stack.forward(&mut tape, a, x).unwrap();
    tape.value(h).clone()
}

#[test]
fn gcn_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = random_graph(5, 6, 7, 0.8, 3);
    let mut store = ParamStore::new();
    let stack = GcnStack::new(&mut store, "g", 7, 4, 3, &mut rng).unwrap();
    let got = gcn_forward(&stack, &store, g.norm_adj(), g.node_features());

    // Â from the edge list, one entry at a time.
    let n = g.num_nodes();
    let mut deg = vec![1.0f64; n];
    for &(i, j) in g.edges() {
        deg[i] += 1.0;
        deg[j] += 1.0;
    }
    let mut adj = vec![vec![0.0; n]; n];
    for i in 0..n {
        adj[i][i] = 1.0 / deg[i];
    }
    for &(i, j) in g.edges() {
        adj[i][j] = 1.0 / (deg[i] * deg[j]).sqrt();
        adj[j][i] = adj[i][j];
    }
    let mut h = mm(
        &to_mat(g.node_features()),
        &to_mat(store.by_name("g.input_proj").unwrap()),
    );
    for &w in stack.layer_ids() {
        h = relu(&mm(&adj, &mm(&h, &param(&store, w))));
    }
    assert!(max_diff(&got, &h) < 1e-12);
}

#[test]
fn gcn_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = random_graph(6, 6, 5, 0.75, 4);
    let mut store = ParamStore::new();
    let stack = GcnStack::new(&mut store, "g", 5, 5, 2, &mut rng).unwrap();
    let base = gcn_forward(&stack, &store, g.norm_adj(), g.node_features());
    for _ in 0..20 {
        let perm = permutation(g.num_nodes(), &mut rng);
        let pg = g.permuted(&perm).unwrap();
        let out = gcn_forward(&stack, &store, pg.norm_adj(), pg.node_features());
        assert!(out.max_abs_diff(&permute_rows(&base, &perm)) < 1e-10);
    }
}

#[test]
fn gcn_rejects_wrong_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let stack = GcnStack::new(&mut store, "g", 3, 4, 1, &mut rng).unwrap();
    let mut tape = Tape::with_params(&store);
    let a = tape.constant(Tensor::eye(2)).unwrap();
    let x = tape.constant(Tensor::zeros(2, 5)).unwrap();
    assert!(matches!(
        stack.forward(&mut tape, a, x),
        Err(Error::Shape { .. })
    ));
}

fn random_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn attend(w: &MultiHeadWeights, store: &ParamStore, q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let mut tape = Tape::with_params(store);
    let (q, k, v) = (
        tape.constant(q.clone()).unwrap(),
        tape.constant(k.clone()).unwrap(),
        tape.constant(v.clone()).unwrap(),
    );
    let out = w.attend(&mut tape, q, k, v).unwrap();
    tape.value(out).clone()
}

#[test]
fn attention_matches_triple_loop() {
    for (heads, scaled) in [(1, true), (2, true), (4, false)] {
        let mut rng = ChaCha8Rng::seed_from_u64(21 + heads as u64);
        let mut store = ParamStore::new();
        let w = MultiHeadWeights::new(&mut store, "a", 8, heads, scaled, &mut rng).unwrap();
        let (q, k, v) = (
            random_mat(5, 8, &mut rng),
            random_mat(3, 8, &mut rng),
            random_mat(3, 8, &mut rng),
        );
        let got = attend(&w, &store, &q, &k, &v);
        let want = attention(&store, &w, &to_mat(&q), &to_mat(&k), &to_mat(&v));
        assert!(max_diff(&got, &want) < 1e-12, "heads {heads}");
    }
}

#[test]
fn identical_keys_give_uniform_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut store = ParamStore::new();
    let w = MultiHeadWeights::new(&mut store, "a", 4, 2, true, &mut rng).unwrap();
    let mut tape = Tape::with_params(&store);
    let q = tape.constant(random_mat(3, 4, &mut rng)).unwrap();
    let row = random_mat(1, 4, &mut rng);
    let k = tape.constant(row.gather_rows(&[0, 0, 0, 0])).unwrap();
    let (_, weights) = w.attend_with_weights(&mut tape, q, k, k).unwrap();
    for a in weights {
        for v in tape.value(a).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn attention_rejects_bad_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    assert!(MultiHeadWeights::new(&mut store, "bad", 6, 4, true, &mut rng).is_err());
    let w = MultiHeadWeights::new(&mut store, "a", 4, 2, true, &mut rng).unwrap();
    let mut tape = Tape::with_params(&store);
    let q = tape.constant(Tensor::zeros(2, 4)).unwrap();
    let empty = tape.constant(Tensor::zeros(0, 4)).unwrap();
    assert!(matches!(
        w.attend(&mut tape, q, empty, empty),
        Err(Error::Contract(_))
    ));
    let narrow = tape.constant(Tensor::zeros(2, 3)).unwrap();
    assert!(matches!(
        w.attend(&mut tape, q, narrow, narrow),
        Err(Error::Shape { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_is_query_equivariant_and_key_invariant(seed in any::<u64>(), nq in 1usize..6, nk in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = MultiHeadWeights::new(&mut store, "a", 4, 2, true, &mut rng).unwrap();
        let (q, kv) = (random_mat(nq, 4, &mut rng), random_mat(nk, 4, &mut rng));
        let base = attend(&w, &store, &q, &kv, &kv);
        let pq = permutation(nq, &mut rng);
        let pk = permutation(nk, &mut rng);
        let kv2 = permute_rows(&kv, &pk);
        let out = attend(&w, &store, &permute_rows(&q, &pq), &kv2, &kv2);
        prop_assert!(out.max_abs_diff(&permute_rows(&base, &pq)) < 1e-12);
    }
}

fn inject(
    block: &InjectionBlock,
    bank: Option<&TokenBank>,
    store: &ParamStore,
    h: &Tensor,
) -> Tensor {
    let mut tape = Tape::with_params(store);
    let h = tape.constant(h.clone()).unwrap();
    let out = block.inject(&mut tape, bank, h).unwrap();
    tape.value(out).clone()
}

/// Injection blocks with non-trivial layer-norm and bias parameters.
fn injection_setup(kind: InjectionKind, seed: u64) -> (ParamStore, InjectionBlock, TokenBank) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bank = TokenBank::new(&mut store, "t", 3, 8, &mut rng).unwrap();
    let block = InjectionBlock::new(&mut store, "inj", kind, 8, 2, true, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    (store, block, bank)
}

#[test]
fn injection_matches_scalar_oracle() {
    let (store, block, bank) = injection_setup(InjectionKind::Attention, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let h = random_mat(6, 8, &mut rng);
    let got = inject(&block, Some(&bank), &store, &h);

    let names = |s: &str| to_mat(store.by_name(s).unwrap());
    let hm = to_mat(&h);
    let t = names("t");
    let attn = attention(&store, block.attention().unwrap(), &hm, &t, &t);
    let ln = |x: &Mat, p: &str| {
        layer_norm(
            x,
            &names(&format!("{p}.gamma"))[0],
            &names(&format!("{p}.beta"))[0],
            mulgt::layers::LAYER_NORM_EPS,
        )
    };
    let z = ln(&add(&hm, &attn), "inj.ln1");
    let lin = |x: &Mat, p: &str| {
        let b = names(&format!("{p}.b"))[0].clone();
        mm(x, &names(&format!("{p}.w")))
            .into_iter()
            .map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect())
            .collect::<Mat>()
    };
    let f = lin(&relu(&lin(&z, "inj.rff.fc1")), "inj.rff.fc2");
    let want = ln(&add(&z, &f), "inj.ln2");
    assert!(max_diff(&got, &want) < 1e-12);
}

#[test]
fn injection_is_row_local() {
    for kind in [InjectionKind::Attention, InjectionKind::Linear] {
        let (store, block, bank) = injection_setup(kind, 33);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let h = random_mat(7, 8, &mut rng);
        let base = inject(&block, Some(&bank), &store, &h);
        for j in 0..7 {
            let mut h2 = h.clone();
            for v in h2.row_mut(j) {
                *v = rng.random_range(-3.0..3.0);
            }
            let out = inject(&block, Some(&bank), &store, &h2);
            for i in (0..7).filter(|&i| i != j) {
                assert_eq!(
                    out.row(i),
                    base.row(i),
                    "{kind:?}: row {i} moved when row {j} changed"
                );
            }
        }
    }
}

#[test]
fn single_node_injection_is_well_defined() {
    let (store, block, bank) = injection_setup(InjectionKind::Attention, 35);
    let out = inject(&block, Some(&bank), &store, &Tensor::full(1, 8, 0.5));
    assert_eq!(out.shape(), [1, 8]);
    assert!(out.is_finite());
}

#[test]
fn identity_injection_passes_features_through() {
    let (store, block, _) = injection_setup(InjectionKind::Identity, 36);
    let h = random_mat(4, 8, &mut ChaCha8Rng::seed_from_u64(37));
    assert_eq!(inject(&block, None, &store, &h), h);
}

#[test]
fn attention_injection_needs_a_bank() {
    let (store, block, _) = injection_setup(InjectionKind::Attention, 38);
    let mut tape = Tape::with_params(&store);
    let h = tape.constant(Tensor::zeros(2, 8)).unwrap();
    assert!(matches!(
        block.inject(&mut tape, None, h),
        Err(Error::Contract(_))
    ));
}
