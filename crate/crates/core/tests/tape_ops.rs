//! Every differentiable op against central finite differences. Each op's
//! output is contracted with a fixed random weight matrix so that all
//! output entries contribute to the checked scalar.

use mulgt::{Error, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

fn positive(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(0.2..2.0))
}

type Op = dyn Fn(&mut Tape<'_>, &[Var]) -> mulgt::Result<Var>;

fn eval(inputs: &[Tensor], weight: &mut Option<Tensor>, seed: u64, f: &Op) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true).unwrap())
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let [r, c] = tape.shape(out);
    let w = weight.get_or_insert_with(|| random(r, c, &mut ChaCha8Rng::seed_from_u64(seed)));
    let w = tape.constant(w.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .map(|&v| grads.wrt(v).unwrap().clone())
        .collect();
    (tape.value(loss).item(), g)
}

fn check(name: &str, inputs: Vec<Tensor>, f: &Op) {
    let mut weight = None;
    let (_, analytic) = eval(&inputs, &mut weight, 99, f);
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut up = inputs.clone();
            up[k].data_mut()[i] += h;
            let mut down = inputs.clone();
            down[k].data_mut()[i] -= h;
            let fu = eval(&up, &mut weight, 99, f).0;
            let fd = eval(&down, &mut weight, 99, f).0;
            let numeric = (fu - fd) / (2.0 * h);
            let a = analytic[k].data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "{name}: input {k} entry {i}: analytic {a}, numeric {numeric}"
            );
        }
    }
}

#[test]
fn matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(
        "matmul",
        vec![random(3, 4, &mut rng), random(4, 2, &mut rng)],
        &|t, v| t.matmul(v[0], v[1]),
    );
    check(
        "matmul_nt",
        vec![random(3, 4, &mut rng), random(5, 4, &mut rng)],
        &|t, v| t.matmul_nt(v[0], v[1]),
    );
    check(
        "matmul_tn",
        vec![random(4, 3, &mut rng), random(4, 2, &mut rng)],
        &|t, v| t.matmul_tn(v[0], v[1]),
    );
    check("transpose", vec![random(3, 5, &mut rng)], &|t, v| {
        t.transpose(v[0])
    });
}

#[test]
fn elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pair = |rng: &mut ChaCha8Rng| vec![random(3, 4, rng), random(3, 4, rng)];
    check("add", pair(&mut rng), &|t, v| t.add(v[0], v[1]));
    check("sub", pair(&mut rng), &|t, v| t.sub(v[0], v[1]));
    check("mul", pair(&mut rng), &|t, v| t.mul(v[0], v[1]));
    check(
        "add_row",
        vec![random(3, 4, &mut rng), random(1, 4, &mut rng)],
        &|t, v| t.add_row(v[0], v[1]),
    );
    check(
        "mul_col",
        vec![random(3, 4, &mut rng), random(3, 1, &mut rng)],
        &|t, v| t.mul_col(v[0], v[1]),
    );
    check("scale", vec![random(2, 3, &mut rng)], &|t, v| {
        t.scale(v[0], -1.7)
    });
    check("tanh", vec![random(3, 3, &mut rng)], &|t, v| t.tanh(v[0]));
    check("sqrt", vec![positive(3, 3, &mut rng)], &|t, v| t.sqrt(v[0]));
    // Entries bounded away from zero so the kink is never straddled.
    let away = Tensor::from_fn(3, 4, |i, j| {
        if (i + j) % 2 == 0 {
            0.3 + i as f64
        } else {
            -0.4 - j as f64
        }
    });
    check("relu", vec![away], &|t, v| t.relu(v[0]));
}

#[test]
fn normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check("softmax_rows", vec![random(4, 5, &mut rng)], &|t, v| {
        t.softmax_rows(v[0])
    });
    check(
        "layer_norm",
        vec![
            random(3, 6, &mut rng),
            random(1, 6, &mut rng),
            random(1, 6, &mut rng),
        ],
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn structural() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(
        "concat_cols",
        vec![random(3, 2, &mut rng), random(3, 3, &mut rng)],
        &|t, v| t.concat_cols(&[v[0], v[1]]),
    );
    check(
        "concat_rows",
        vec![random(1, 3, &mut rng), random(4, 3, &mut rng)],
        &|t, v| t.concat_rows(&[v[0], v[1]]),
    );
    check("slice_cols", vec![random(3, 6, &mut rng)], &|t, v| {
        t.slice_cols(v[0], 2, 3)
    });
    check("gather_rows", vec![random(5, 2, &mut rng)], &|t, v| {
        t.gather_rows(v[0], &[4, 1, 1, 0])
    });
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check("sum", vec![random(3, 4, &mut rng)], &|t, v| t.sum(v[0]));
    check("trace", vec![random(4, 4, &mut rng)], &|t, v| t.trace(v[0]));
    check(
        "div_scalar",
        vec![random(2, 3, &mut rng), positive(1, 1, &mut rng)],
        &|t, v| t.div_scalar(v[0], v[1]),
    );
    check("cross_entropy", vec![random(4, 3, &mut rng)], &|t, v| {
        t.cross_entropy(v[0], &[0, 2, 1, 2])
    });
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random(5, 4, &mut rng);
    let labels = [3, 0, 1, 1, 2];
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone()).unwrap();
    let ce = tape_ce(&mut tape, l, &labels);
    let got = tape.value(ce).item();
    let mut expected = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        expected += lse - row[y];
    }
    expected /= labels.len() as f64;
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

fn tape_ce(tape: &mut Tape<'_>, l: Var, labels: &[usize]) -> Var {
    tape.cross_entropy(l, labels).unwrap()
}

#[test]
fn sqrt_at_zero_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(1, 1), true).unwrap();
    let y = tape.sqrt(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().item(), 0.0);
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
    let b = tape.constant(Tensor::zeros(2, 3)).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    let neg = tape.constant(Tensor::full(1, 1, -1.0)).unwrap();
    assert!(tape.sqrt(neg).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    let big = tape.constant(Tensor::full(1, 1, 1e300)).unwrap();
    assert!(matches!(tape.mul(big, big), Err(Error::NonFinite { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0));
        let s = mulgt::tape::softmax_rows(&x);
        for i in 0..rows {
            let total: f64 = s.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn matmul_matches_scalar_loop(
        n in 1usize..5, k in 1usize..5, m in 1usize..5, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Sprinkle exact zeros to exercise the sparse skip.
        let mut a = random(n, k, &mut rng);
        for v in a.data_mut().iter_mut() {
            if rng.random_bool(0.3) { *v = 0.0; }
        }
        let b = random(k, m, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.get(i, l) * b.get(l, j);
                }
                prop_assert!((c.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }
}
