//! Scalar-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use mulgt::attention::MultiHeadWeights;
use mulgt::graph::{build_graph, FeatureGrid, TileGraph};
use mulgt::layers::{FeedForward, LayerNorm, Linear};
use mulgt::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, |r| r.len()));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i][l] * b[l][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let m = a.first().map_or(0, |r| r.len());
    (0..m).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|&x| x.max(0.0)).collect())
        .collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, x)| (x - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn param(store: &ParamStore, id: mulgt::ParamId) -> Mat {
    to_mat(store.get(id))
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let b = store.get(l.bias).row(0).to_vec();
    mm(x, &param(store, l.weight))
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect())
        .collect()
}

pub fn feed_forward(store: &ParamStore, f: &FeedForward, x: &Mat) -> Mat {
    linear(store, &f.out, &relu(&linear(store, &f.hidden, x)))
}

pub fn norm(store: &ParamStore, l: &LayerNorm, x: &Mat) -> Mat {
    layer_norm(
        x,
        store.get(l.gamma).row(0),
        store.get(l.beta).row(0),
        mulgt::layers::LAYER_NORM_EPS,
    )
}

/// Multi-head attention with explicit loops over heads, queries and keys.
pub fn attention(store: &ParamStore, w: &MultiHeadWeights, q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let scale = w.logit_scale();
    let dh = w.head_dim();
    let mut cat = vec![vec![0.0; w.dim()]; q.len()];
    for h in 0..w.heads() {
        let qh = mm(q, &param(store, w.query_ids()[h]));
        let kh = mm(k, &param(store, w.key_ids()[h]));
        let vh = mm(v, &param(store, w.value_ids()[h]));
        for i in 0..q.len() {
            let logits: Vec<f64> = (0..k.len())
                .map(|j| scale * (0..dh).map(|c| qh[i][c] * kh[j][c]).sum::<f64>())
                .collect();
            let a = &softmax_rows(&vec![logits])[0];
            for c in 0..dh {
                cat[i][h * dh + c] = (0..k.len()).map(|j| a[j] * vh[j][c]).sum();
            }
        }
    }
    mm(&cat, &param(store, w.output_id()))
}

pub fn max_diff(a: &Tensor, b: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    assert_eq!(a.rows(), b.len());
    for (i, row) in b.iter().enumerate() {
        assert_eq!(a.cols(), row.len());
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((a.get(i, j) - v).abs());
        }
    }
    worst
}

/// A random grid graph with occupancy `p` and standard-normal features.
pub fn random_graph(rows: usize, cols: usize, dim: usize, p: f64, seed: u64) -> TileGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut occ: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(p)).collect();
    occ[0] = true;
    let n = occ.iter().filter(|&&o| o).count();
    let feats = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    build_graph(&FeatureGrid::new(rows, cols, dim, occ, feats).unwrap()).unwrap()
}

/// A uniformly random permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Rows of `t` reordered so that new row `i` is old row `perm[i]`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    t.gather_rows(perm)
}
