use mulgt::optim::{Adam, AdamConfig};
use mulgt::{Error, ParamStore, Tensor};

fn store(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("x", Tensor::new(1, values.len(), values.to_vec()).unwrap())
        .unwrap();
    s
}

#[test]
fn constant_gradient_moves_by_lr_against_its_sign() {
    let mut s = store(&[0.0, 0.0]);
    let cfg = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(cfg, &s).unwrap();
    let g = vec![Tensor::new(1, 2, vec![3.0, -0.2]).unwrap()];
    let mut prev = s.by_name("x").unwrap().clone();
    for _ in 0..50 {
        adam.step(&mut s, &g).unwrap();
        let now = s.by_name("x").unwrap().clone();
        let d0 = now.get(0, 0) - prev.get(0, 0);
        let d1 = now.get(0, 1) - prev.get(0, 1);
        // Bias correction makes every step exactly lr in size for a
        // constant gradient, up to eps.
        assert!((d0 + 0.01).abs() < 1e-9, "{d0}");
        assert!((d1 - 0.01).abs() < 1e-9, "{d1}");
        prev = now;
    }
}

#[test]
fn zero_gradient_leaves_parameters_and_decays_moments() {
    let mut s = store(&[0.5]);
    let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
    adam.step(&mut s, &[Tensor::full(1, 1, 1.0)]).unwrap();
    let x = s.by_name("x").unwrap().item();
    let (m, v) = (
        adam.first_moments()[0].item(),
        adam.second_moments()[0].item(),
    );
    adam.step(&mut s, &[Tensor::zeros(1, 1)]).unwrap();
    assert_eq!(adam.first_moments()[0].item(), 0.9 * m);
    assert_eq!(adam.second_moments()[0].item(), 0.999 * v);
    // The decayed first moment still moves x; with no history it would not.
    assert!(s.by_name("x").unwrap().item() < x);

    let mut fresh = store(&[0.5]);
    let mut adam = Adam::new(AdamConfig::default(), &fresh).unwrap();
    adam.step(&mut fresh, &[Tensor::zeros(1, 1)]).unwrap();
    assert_eq!(fresh.by_name("x").unwrap().item(), 0.5);
}

#[test]
fn quadratic_bowl_converges() {
    let mut s = store(&[1.0]);
    let mut adam = Adam::new(
        AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        },
        &s,
    )
    .unwrap();
    let mut reached = None;
    for step in 1..=200 {
        let x = s.by_name("x").unwrap().item();
        adam.step(&mut s, &[Tensor::full(1, 1, 2.0 * x)]).unwrap();
        if s.by_name("x").unwrap().item().abs() < 1e-3 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some());
}

#[test]
fn matches_scalar_recurrence() {
    let cfg = AdamConfig {
        lr: 0.03,
        beta1: 0.8,
        beta2: 0.99,
        eps: 1e-6,
    };
    let mut s = store(&[0.7]);
    let mut adam = Adam::new(cfg, &s).unwrap();
    let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    for t in 1..=30 {
        let g = (x * 3.0).sin();
        adam.step(&mut s, &[Tensor::full(1, 1, g)]).unwrap();
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        assert_eq!(s.by_name("x").unwrap().item(), x);
    }
}

#[test]
fn nan_gradient_names_the_parameter() {
    let mut s = store(&[1.0]);
    s.insert("w.bias", Tensor::zeros(1, 1)).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
    let err = adam
        .step(&mut s, &[Tensor::zeros(1, 1), Tensor::full(1, 1, f64::NAN)])
        .unwrap_err();
    match err {
        Error::Diverged(msg) => assert!(msg.contains("w.bias"), "{msg}"),
        other => panic!("{other:?}"),
    }
    // Nothing was applied.
    assert_eq!(s.by_name("x").unwrap().item(), 1.0);
    assert_eq!(adam.steps(), 0);
}

#[test]
fn invalid_hyperparameters() {
    let s = store(&[0.0]);
    for cfg in [
        AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        },
        AdamConfig {
            eps: -1.0,
            ..AdamConfig::default()
        },
    ] {
        assert!(matches!(Adam::new(cfg, &s), Err(Error::Config(_))));
    }
}
