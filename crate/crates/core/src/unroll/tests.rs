use super::*;
use crate::data::{synth, SynthKind, Task};
use crate::linalg::{sym_eig, Mat, SymMatrix};
use crate::model::{gnh, Head, Init};
use crate::train::{Length, Sampling};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn quadratic() -> (Arch, Dataset) {
    let ds = Dataset::new("quad", Task::Regression, vec![vec![1.0], vec![1.0]], vec![1.0, -1.0], None).unwrap();
    (Arch::linear(1, Head::Regression, false), ds)
}

fn recorded(mut cfg: TrainConfig) -> TrainConfig {
    cfg.record_params = true;
    cfg
}

#[test]
fn quadratic_fixture_value() {
    let (arch, ds) = quadratic();
    let cfg = recorded(TrainConfig::sgd(Length::Steps(2), 2, 0.1, Sampling::FullBatch, 0));
    let traj = run(&arch, &ds, &cfg).unwrap();
    let td = total_derivative(&traj, &ds, 0).unwrap();
    assert!((td.vector[0] - 0.095).abs() < 1e-15);
    assert_eq!(td.contributing_steps, vec![0, 1]);
    assert!((contract(&traj, &ds, 0, &[1.0]).unwrap() - 0.095).abs() < 1e-15);
    let rep = fd_validate(&traj, &ds, 0, 1e-3).unwrap();
    assert!(rep.max_rel_error < 1e-6);
}

#[test]
fn single_step_chain_rule() {
    let ds = synth(SynthKind::TwoGaussians, 6, 0).unwrap();
    let arch = Arch::mlp(2, vec![3], Head::Classification { classes: 2 });
    let mut cfg = recorded(TrainConfig::sgd(Length::Steps(1), 1, 0.2, Sampling::WithReplacement, 4));
    cfg.init = Init::Normal { scale: 1.0 };
    let traj = run(&arch, &ds, &cfg).unwrap();
    let m = traj.batch_log[0][0] as usize;
    let g = traj.state_from(&traj.initial_params).grad_loss(&ds.example(m)).unwrap();
    let td = total_derivative(&traj, &ds, m).unwrap().vector;
    for (a, b) in td.iter().zip(&g) {
        assert_eq!(*a, -0.2 * b);
    }
}

#[test]
fn absent_example_gives_zero() {
    let ds = synth(SynthKind::TwoGaussians, 30, 0).unwrap();
    let arch = Arch::mlp(2, vec![3], Head::Classification { classes: 2 });
    let mut cfg = recorded(TrainConfig::sgd(Length::Steps(3), 2, 0.2, Sampling::WithReplacement, 4));
    cfg.init = Init::Normal { scale: 1.0 };
    let traj = run(&arch, &ds, &cfg).unwrap();
    let used: Vec<u32> = traj.batch_log.concat();
    let m = (0..30).find(|i| !used.contains(&(*i as u32))).unwrap();
    let td = total_derivative(&traj, &ds, m).unwrap();
    assert!(td.vector.iter().all(|&x| x == 0.0) && td.contributing_steps.is_empty());
    let rep = fd_validate(&traj, &ds, m, 1e-3).unwrap();
    assert_eq!(rep.max_rel_error, 0.0);
    assert!(rep.numeric.iter().all(|&x| x == 0.0));
}

#[test]
fn mlp_matches_finite_differences_and_adjoint() {
    let ds = synth(SynthKind::TwoGaussians, 40, 2).unwrap();
    let arch = Arch::mlp(2, vec![8], Head::Classification { classes: 2 });
    assert!(arch.param_count() <= 50);
    let mut cfg = recorded(TrainConfig::sgd(Length::Steps(20), 4, 0.3, Sampling::WithReplacement, 7));
    cfg.init = Init::Normal { scale: 1.0 };
    let traj = run(&arch, &ds, &cfg).unwrap();
    let m = traj.batch_log[0][0] as usize;
    let rep = fd_validate(&traj, &ds, m, 1e-3).unwrap();
    assert!(rep.max_rel_error <= 1e-3, "{}", rep.max_rel_error);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w: Vec<f64> = (0..arch.param_count()).map(|_| rng.sample(StandardNormal)).collect();
    let fwd = dot(&w, &rep.analytic);
    let rev = contract(&traj, &ds, m, &w).unwrap();
    assert!((fwd - rev).abs() <= 1e-10 * fwd.abs().max(1.0));
}

#[test]
fn doubled_example_loss_doubles_first_step() {
    // ½(√2θ − √2)² = 2·½(θ − 1)²
    let (arch, ds) = quadratic();
    let r2 = 2f64.sqrt();
    let scaled = Dataset::new("q2", Task::Regression, vec![vec![r2], vec![1.0]], vec![r2, -1.0], None).unwrap();
    let cfg = recorded(TrainConfig::sgd(Length::Steps(1), 2, 0.1, Sampling::FullBatch, 0));
    let base = total_derivative(&run(&arch, &ds, &cfg).unwrap(), &ds, 0).unwrap().vector[0];
    let twice = total_derivative(&run(&arch, &scaled, &cfg).unwrap(), &scaled, 0).unwrap().vector[0];
    assert!((twice - 2.0 * base).abs() < 1e-15);
}

#[test]
fn quadratic_closed_form_at_stationary_point() {
    // targets orthogonal to the feature columns keep θ = 0 stationary, so g_k is constant
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 12;
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let x = Mat::from_rows(&xs);
    let xtx = SymMatrix::new(x.transpose().matmul(&x).unwrap()).unwrap();
    let y0: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let coef = sym_eig(&xtx).unwrap().apply_fn(&|s| 1.0 / s, &x.t_matvec(&y0)).unwrap();
    let fit = x.matvec(&coef);
    let y: Vec<f64> = y0.iter().zip(&fit).map(|(a, b)| a - b).collect();
    let ds = Dataset::new("orth", Task::Regression, xs, y, None).unwrap();
    let arch = Arch::linear(3, Head::Regression, false);
    let (eta, t) = (0.05, 40);
    let cfg = recorded(TrainConfig::sgd(Length::Steps(t), n, eta, Sampling::FullBatch, 0));
    let traj = run(&arch, &ds, &cfg).unwrap();
    let m = 5;
    let td = total_derivative(&traj, &ds, m).unwrap().vector;

    let state = traj.final_state();
    let h = gnh(&state, &ds, &(0..n).collect::<Vec<_>>()).unwrap();
    let g = state.grad_loss(&ds.example(m)).unwrap();
    let closed = sym_eig(&h)
        .unwrap()
        .apply_fn(&|s| -(1.0 - (1.0 - eta * s).powi(t as i32)) / s / n as f64, &g)
        .unwrap();
    for (a, b) in td.iter().zip(&closed) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn expected_derivative() {
    let (arch, ds) = quadratic();
    let det = TrainConfig::sgd(Length::Steps(2), 2, 0.1, Sampling::FullBatch, 0);
    let e = expected_total_derivative(&arch, &ds, &det, 0, 4).unwrap();
    assert!((e.mean[0] - 0.095).abs() < 1e-15 && e.std_err[0] == 0.0);
    let one = expected_total_derivative(&arch, &ds, &det, 0, 1).unwrap();
    assert_eq!(one.mean[0], 0.095);

    // B = 1 with replacement from two points with unit curvature: θ_k is random
    // but H ≡ 1, so E[dθ_T/dε] = −(1/N)(1 − (1−η)^T) · E[g] with g depending on θ.
    // Use c = {1, 1} so θ_k is deterministic and only the batch draw is random.
    let same = Dataset::new("s", Task::Regression, vec![vec![1.0], vec![1.0]], vec![1.0, 1.0], None).unwrap();
    let (eta, t) = (0.1, 10);
    let cfg = TrainConfig::sgd(Length::Steps(t), 1, eta, Sampling::WithReplacement, 11);
    let e = expected_total_derivative(&arch, &same, &cfg, 0, 20_000).unwrap();
    // θ_k = 1 − 0.9^k, g_k = θ_k − 1 = −0.9^k, J = 0.9
    let analytic: f64 = (0..t).map(|k| 0.5 * eta * 0.9f64.powi((t - 1 - k) as i32) * 0.9f64.powi(k as i32)).sum();
    assert!((e.mean[0] - analytic).abs() < 3.0 * e.std_err[0], "{} vs {analytic} ± {}", e.mean[0], e.std_err[0]);
}

#[test]
fn momentum_is_rejected() {
    let (arch, ds) = quadratic();
    let mut cfg = recorded(TrainConfig::sgd(Length::Steps(2), 2, 0.1, Sampling::FullBatch, 0));
    cfg.momentum = 0.5;
    let traj = run(&arch, &ds, &cfg).unwrap();
    assert!(matches!(total_derivative(&traj, &ds, 0), Err(TdaError::Unsupported(_))));
}
