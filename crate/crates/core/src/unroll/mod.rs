//! Exact derivative of the final parameters with respect to the weight of one
//! training example, obtained by differentiating through every recorded step.
//!
//! With `θ_{k+1} = θ_k − (η_k/B_k) P_k Σ_i (1 + δ_ki ε) ∇ℒ(z_i, θ_k)` the tangent
//! `d_k = dθ_k/dε` obeys `d_{k+1} = (I − η_k P_k H_k) d_k − (η_k/B_k) δ_k P_k g_k`
//! where `H_k` is the mean batch Hessian and `g_k = ∇ℒ(z_m, θ_k)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, TdaError};
use crate::linalg::{axpy, dot};
use crate::model::{mean_hvp, Arch};
use crate::train::{perturbed_run, run, TrainConfig, TrainingTrajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalDerivative {
    pub vector: Vec<f64>,
    /// Steps whose batch contains the example.
    pub contributing_steps: Vec<usize>,
}

fn multiplicity(batch: &[u32], m: usize) -> usize {
    batch.iter().filter(|&&i| i as usize == m).count()
}

fn check<'a>(traj: &'a TrainingTrajectory, union: &Dataset, m: usize) -> Result<&'a [Vec<f64>]> {
    if traj.momentum != 0.0 {
        return Err(TdaError::Unsupported("unrolling through momentum"));
    }
    if m >= union.len() {
        return Err(TdaError::invalid(format!("example {m} out of range")));
    }
    traj.full_param_log
        .as_deref()
        .ok_or_else(|| TdaError::invalid("trajectory has no full_param_log; train with record_params"))
}

fn precondition(traj: &TrainingTrajectory, k: usize, v: &mut [f64]) {
    if let Some(p) = &traj.precond_log {
        v.iter_mut().zip(&p[k]).for_each(|(x, pi)| *x *= pi);
    }
}

fn batch_indices(traj: &TrainingTrajectory, k: usize) -> Vec<usize> {
    traj.batch_log[k].iter().map(|&i| i as usize).collect()
}

/// `dθ_T/dε` by forward tangent propagation: one batch HVP per step.
pub fn total_derivative(traj: &TrainingTrajectory, union: &Dataset, m: usize) -> Result<TotalDerivative> {
    let params = check(traj, union, m)?;
    let d = traj.final_params.len();
    let contributing: Vec<usize> = (0..traj.steps())
        .filter(|&k| multiplicity(&traj.batch_log[k], m) > 0)
        .collect();
    let mut tangent = vec![0.0; d];
    let Some(&first) = contributing.first() else {
        return Ok(TotalDerivative {
            vector: tangent,
            contributing_steps: contributing,
        });
    };
    for k in first..traj.steps() {
        let state = traj.state_from(&params[k]);
        let idx = batch_indices(traj, k);
        let eta = traj.lr_log[k];
        let mut step = if tangent.iter().any(|&x| x != 0.0) {
            mean_hvp(&state, union, &idx, &tangent)?
        } else {
            vec![0.0; d]
        };
        let delta = multiplicity(&traj.batch_log[k], m);
        if delta > 0 {
            let g = state.grad_loss(&union.example(m))?;
            axpy(delta as f64 / idx.len() as f64, &g, &mut step);
        }
        precondition(traj, k, &mut step);
        axpy(-eta, &step, &mut tangent);
    }
    Ok(TotalDerivative {
        vector: tangent,
        contributing_steps: contributing,
    })
}

/// `wᵀ dθ_T/dε` by reverse (adjoint) accumulation, never forming the tangent.
pub fn contract(traj: &TrainingTrajectory, union: &Dataset, m: usize, w: &[f64]) -> Result<f64> {
    let params = check(traj, union, m)?;
    if w.len() != traj.final_params.len() {
        return Err(TdaError::Dimension {
            context: "unroll contraction",
            expected: traj.final_params.len(),
            got: w.len(),
        });
    }
    let Some(first) = (0..traj.steps()).find(|&k| multiplicity(&traj.batch_log[k], m) > 0) else {
        return Ok(0.0);
    };
    let mut adj = w.to_vec();
    let mut total = 0.0;
    for k in (first..traj.steps()).rev() {
        let state = traj.state_from(&params[k]);
        let idx = batch_indices(traj, k);
        let eta = traj.lr_log[k];
        // adj currently holds J_{k+1:T}ᵀ w
        let mut pa = adj.clone();
        precondition(traj, k, &mut pa);
        let delta = multiplicity(&traj.batch_log[k], m);
        if delta > 0 {
            let g = state.grad_loss(&union.example(m))?;
            total -= eta * delta as f64 / idx.len() as f64 * dot(&pa, &g);
        }
        if k > first {
            let hpa = mean_hvp(&state, union, &idx, &pa)?;
            axpy(-eta, &hpa, &mut adj);
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedDerivative {
    pub mean: Vec<f64>,
    /// Per-coordinate standard error of the mean (zero when `trials == 1`).
    pub std_err: Vec<f64>,
    pub trials: usize,
}

/// Monte-Carlo mean of [`total_derivative`] over runs seeded `seed, seed+1, …`.
pub fn expected_total_derivative(
    arch: &Arch,
    ds: &Dataset,
    cfg: &TrainConfig,
    m: usize,
    trials: usize,
) -> Result<ExpectedDerivative> {
    if trials == 0 {
        return Err(TdaError::invalid("trials must be >= 1"));
    }
    let samples: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(t as u64),
                init_seed: Some(cfg.init_seed.unwrap_or(cfg.seed)),
                record_params: true,
                ..cfg.clone()
            };
            let traj = run(arch, ds, &cfg)?;
            Ok(total_derivative(&traj, ds, m)?.vector)
        })
        .collect::<Result<_>>()?;
    let d = samples[0].len();
    let n = trials as f64;
    let mut mean = vec![0.0; d];
    for s in &samples {
        axpy(1.0 / n, s, &mut mean);
    }
    let std_err = (0..d)
        .map(|j| {
            if trials < 2 {
                return 0.0;
            }
            let var = samples.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        })
        .collect();
    Ok(ExpectedDerivative { mean, std_err, trials })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |a_i − n_i| / max(|a_i|, |n_i|, FD_FLOOR·‖n‖_∞)`; zero when both sides vanish.
    pub max_rel_error: f64,
}

/// Coordinates smaller than this fraction of the largest are compared against that floor.
pub const FD_FLOOR: f64 = 1e-2;

/// Compares [`total_derivative`] with central differences of [`perturbed_run`]
/// under common random numbers.
pub fn fd_validate(traj: &TrainingTrajectory, union: &Dataset, m: usize, step: f64) -> Result<FdReport> {
    let analytic = total_derivative(traj, union, m)?.vector;
    let up = perturbed_run(traj, union, m, step)?;
    let down = perturbed_run(traj, union, m, -step)?;
    let numeric: Vec<f64> = up
        .params
        .iter()
        .zip(&down.params)
        .map(|(a, b)| (a - b) / (2.0 * step))
        .collect();
    Ok(FdReport {
        max_rel_error: max_rel_error(&analytic, &numeric),
        analytic,
        numeric,
    })
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs())) * FD_FLOOR;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let den = a.abs().max(n.abs()).max(scale);
            if den == 0.0 {
                0.0
            } else {
                (a - n).abs() / den
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests;
