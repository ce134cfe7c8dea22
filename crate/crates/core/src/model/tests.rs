use super::*;
use crate::data::{Dataset, Task};
use crate::linalg::{norm, sym_eig};
use proptest::prelude::{prop, prop_assert_eq, proptest};

fn reg_ds(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> Dataset {
    Dataset::new("t", Task::Regression, xs, ys, None).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(1e-8)
}

fn fd_grad(theta: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-4;
    (0..theta.len())
        .map(|j| {
            let mut p = theta.to_vec();
            p[j] += h;
            let up = f(&p);
            p[j] -= 2.0 * h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect()
}

fn random_state(arch: &Arch, seed: u64) -> ModelState {
    let mut s = ModelState::init(arch.clone(), Init::Normal { scale: 1.0 }, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    for p in &mut s.params {
        *p += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    s
}

fn random_example(arch: &Arch, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let x: Vec<f64> = (0..arch.input_dim).map(|_| rng.sample(StandardNormal)).collect();
    let y = match arch.head {
        Head::Regression => rng.sample(StandardNormal),
        Head::Classification { classes } => rng.random_range(0..classes) as f64,
    };
    (x, y)
}

fn architectures() -> Vec<Arch> {
    vec![
        Arch::linear(3, Head::Regression, true),
        Arch::mlp(3, vec![5], Head::Regression).with_l2(0.01),
        Arch::mlp(4, vec![6, 3], Head::Classification { classes: 3 }),
        Arch::mlp(2, vec![4], Head::Classification { classes: 2 }),
    ]
}

#[test]
fn linear_loss_examples() {
    let s = ModelState::new(Arch::linear(2, Head::Regression, false), vec![0.0, 0.0]).unwrap();
    let z = Example { x: &[1.0, 2.0], y: 0.0 };
    assert_eq!(s.loss(&z).unwrap(), 0.0);
    assert_eq!(s.grad_loss(&z).unwrap(), vec![0.0, 0.0]);

    let s = ModelState::new(Arch::linear(1, Head::Regression, false), vec![0.0]).unwrap();
    let z = Example { x: &[1.0], y: 1.0 };
    assert_eq!(s.loss(&z).unwrap(), 0.5);
    assert_eq!(s.grad_loss(&z).unwrap(), vec![-1.0]);
}

#[test]
fn measurement_examples() {
    let arch = Arch::linear(2, Head::Classification { classes: 2 }, true);
    let s = ModelState::new(arch.clone(), vec![0.0; arch.param_count()]).unwrap();
    let z = Example { x: &[0.3, -1.0], y: 1.0 };
    assert_eq!(s.measure(Measurement::Margin, &z).unwrap(), 0.0);
    assert!(s.measure(Measurement::AbsoluteError, &z).is_err());

    let s = ModelState::new(Arch::linear(1, Head::Regression, false), vec![2.0]).unwrap();
    let z = Example { x: &[1.0], y: 0.5 };
    assert_eq!(s.measure(Measurement::AbsoluteError, &z).unwrap(), 1.5);
    assert!(s.measure(Measurement::Margin, &z).is_err());
}

#[test]
fn margin_is_log_odds_and_clamps() {
    let arch = Arch::linear(1, Head::Classification { classes: 2 }, false);
    let s = ModelState::new(arch.clone(), vec![-0.5, 0.7]).unwrap();
    let z = Example { x: &[1.0], y: 1.0 };
    let p = 1.0 / (1.0 + (-(0.7f64 + 0.5)).exp());
    let want = p.ln() - (1.0 - p).ln();
    assert!((s.measure(Measurement::Margin, &z).unwrap() - want).abs() < 1e-12);

    let s = ModelState::new(arch, vec![-40.0, 40.0]).unwrap();
    let m = s.measure_detail(Measurement::Margin, &z).unwrap();
    assert!(m.saturated);
    assert_eq!(m.value, MARGIN_CLAMP);
    assert!(s.grad_measure(Measurement::Margin, &z).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn gradients_match_finite_differences() {
    for (a, arch) in architectures().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(a as u64);
        let measures: Vec<Measurement> = match arch.head {
            Head::Regression => vec![Measurement::Loss, Measurement::AbsoluteError],
            Head::Classification { .. } => vec![Measurement::Loss, Measurement::Margin],
        };
        for draw in 0..100 {
            let s = random_state(&arch, 1000 * a as u64 + draw);
            let (x, y) = random_example(&arch, &mut rng);
            let z = Example { x: &x, y };
            let with = |p: &[f64]| s.with_params(p.to_vec()).unwrap();
            let fd = fd_grad(&s.params, |p| with(p).loss(&z).unwrap());
            let g = s.grad_loss(&z).unwrap();
            assert!(rel_err(&g, &fd) < 1e-5, "arch {a} draw {draw}: loss grad");
            for &m in &measures {
                let fd = fd_grad(&s.params, |p| with(p).measure(m, &z).unwrap());
                let g = s.grad_measure(m, &z).unwrap();
                assert!(rel_err(&g, &fd) < 1e-5, "arch {a} draw {draw}: {m:?}");
            }
        }
    }
}

#[test]
fn hvp_matches_gradient_differences() {
    for (a, arch) in architectures().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + a as u64);
        for draw in 0..10 {
            let s = random_state(&arch, draw);
            let (x, y) = random_example(&arch, &mut rng);
            let z = Example { x: &x, y };
            let v: Vec<f64> = (0..s.dim()).map(|_| rng.sample(StandardNormal)).collect();
            let h = 1e-5;
            let shifted = |t: f64| {
                let p: Vec<f64> = s.params.iter().zip(&v).map(|(a, b)| a + t * b).collect();
                s.with_params(p).unwrap().grad_loss(&z).unwrap()
            };
            let (gp, gm) = (shifted(h), shifted(-h));
            let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            assert!(rel_err(&s.hvp(&z, &v).unwrap(), &fd) < 1e-5, "arch {a}");
        }
    }
}

#[test]
fn gnh_examples() {
    let s = ModelState::new(Arch::linear(1, Head::Regression, false), vec![0.3]).unwrap();
    let ds = reg_ds(vec![vec![2.0]], vec![1.0]);
    assert_eq!(gnh(&s, &ds, &[0]).unwrap().as_mat().as_slice(), &[4.0]);

    let s = ModelState::new(Arch::linear(2, Head::Regression, false), vec![0.0; 2]).unwrap();
    let ds = reg_ds(vec![vec![1.0, 2.0]], vec![0.0]);
    assert_eq!(gnh(&s, &ds, &[0]).unwrap().as_mat().as_slice(), &[1.0, 2.0, 2.0, 4.0]);
    let zero = gnh_weighted(&s, &ds, &[0], Some(&[0.0])).unwrap();
    assert_eq!(zero.as_mat().max_abs(), 0.0);
}

#[test]
fn gnh_equals_hessian_for_linear_regression() {
    let arch = Arch::linear(3, Head::Regression, true).with_l2(0.1);
    let s = random_state(&arch, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<Vec<f64>> = (0..20).map(|_| random_example(&arch, &mut rng).0).collect();
    let ds = reg_ds(xs, vec![0.0; 20]);
    let idx: Vec<usize> = (0..20).collect();
    let g = gnh(&s, &ds, &idx).unwrap();
    let h = hessian(&s, &ds, &idx).unwrap();
    assert!(g.as_mat().sub(h.as_mat()).unwrap().max_abs() < 1e-12);
}

#[test]
fn gnh_is_psd_and_guarded() {
    let arch = Arch::mlp(4, vec![6, 3], Head::Classification { classes: 3 });
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..5 {
        let s = random_state(&arch, seed);
        let rows: Vec<(Vec<f64>, f64)> = (0..15).map(|_| random_example(&arch, &mut rng)).collect();
        let ds = Dataset::new(
            "c",
            Task::Classification { classes: 3 },
            rows.iter().map(|r| r.0.clone()).collect(),
            rows.iter().map(|r| r.1).collect(),
            None,
        )
        .unwrap();
        let idx: Vec<usize> = (0..15).collect();
        let e = sym_eig(&gnh(&s, &ds, &idx).unwrap()).unwrap();
        assert!(e.min_value() >= -1e-8);
    }
    let big = Arch::mlp(100, vec![60], Head::Regression);
    let s = ModelState::init(big, Init::Zeros, 0).unwrap();
    let ds = reg_ds(vec![vec![0.0; 100]], vec![0.0]);
    assert!(matches!(gnh(&s, &ds, &[0]), Err(TdaError::Capacity { .. })));
}

#[test]
fn activation_captures() {
    let arch = Arch::linear(2, Head::Classification { classes: 2 }, false);
    let s = ModelState::new(arch, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(s.output(&[0.3, -2.0]), vec![0.3, -2.0]);

    let arch = Arch::mlp(3, vec![4, 2], Head::Regression);
    let s = random_state(&arch, 12);
    let x = [0.5, -1.0, 2.0];
    let cap = s.activations(&x);
    for (sh, (a, pre)) in arch.layer_shapes().iter().zip(&cap.layers) {
        let w = &s.params[sh.range()];
        for o in 0..sh.out {
            let row = &w[o * sh.cols()..(o + 1) * sh.cols()];
            let mut v = row[sh.input];
            for i in 0..sh.input {
                v += row[i] * a[i];
            }
            assert!((v - pre[o]).abs() < 1e-10);
        }
    }
    assert_eq!(cap.last_hidden, cap.layers[2].0);

    let s = ModelState::init(arch, Init::Normal { scale: 1.0 }, 1).unwrap();
    let cap = s.activations(&[0.0; 3]);
    assert!(cap.layers.iter().all(|(a, p)| a.iter().chain(p).all(|&v| v == 0.0)));
}

#[test]
fn sampled_pseudo_grads_average_to_expected() {
    let arch = Arch::mlp(2, vec![3], Head::Classification { classes: 3 });
    let s = random_state(&arch, 2);
    let z = Example { x: &[0.4, -0.3], y: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let outer = |terms: Vec<(f64, Vec<f64>)>| {
        let mut m = Mat::zeros(s.dim(), s.dim());
        for (w, g) in terms {
            m.add_outer(w, &g, &g);
        }
        m
    };
    let exact = outer(s.pseudo_grads(&z, PseudoGrad::Expected, &mut rng).unwrap());
    let sampled = outer(s.pseudo_grads(&z, PseudoGrad::Sampled { samples: 20_000 }, &mut rng).unwrap());
    assert!(sampled.sub(&exact).unwrap().frobenius() / exact.frobenius() < 0.05);
}

proptest! {
    #[test]
    fn param_count_matches_layers(input in 1usize..6, hidden in prop::collection::vec(1usize..6, 0..3), bias: bool) {
        let mut arch = Arch::mlp(input, hidden.clone(), Head::Regression);
        arch.bias = bias;
        let mut widths = vec![input];
        widths.extend(&hidden);
        widths.push(1);
        let want: usize = widths.windows(2).map(|w| w[1] * (w[0] + usize::from(bias))).sum();
        prop_assert_eq!(arch.param_count(), want);
    }
}
