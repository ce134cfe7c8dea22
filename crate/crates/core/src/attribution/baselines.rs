use log::warn;
use rayon::prelude::*;

use super::{query_grads, train_grads, AttributionMatrix};
use crate::curvature::CurvatureEstimate;
use crate::data::{Dataset, Example, SubsetMask};
use crate::error::{Result, TdaError};
use crate::linalg::{axpy, dot, norm, Mat};
use crate::model::{Measurement, ModelState};
use crate::train::TrainingTrajectory;

fn matrix_from(method: &str, gq: &[Vec<f64>], gm: &[Vec<f64>]) -> AttributionMatrix {
    AttributionMatrix::new(method, Mat::from_fn(gq.len(), gm.len(), |q, m| dot(&gq[q], &gm[m])))
}

/// `∇f(z_q)ᵀ (H + λI)⁻¹ ∇ℒ(z_m)` at `state`, without the `1/N` factor.
pub fn if_score(state: &ModelState, h: &CurvatureEstimate, lambda: f64, f: Measurement, query: &Example, train: &Example) -> Result<f64> {
    let w = h.apply_fn(&|s| 1.0 / (s + lambda), &state.grad_measure(f, query)?)?;
    Ok(dot(&w, &state.grad_loss(train)?))
}

pub fn if_scores(state: &ModelState, h: &CurvatureEstimate, lambda: f64, union: &Dataset, queries: &Dataset, f: Measurement) -> Result<AttributionMatrix> {
    let gq = query_grads(state, queries, f)?
        .par_iter()
        .map(|g| h.apply_fn(&|s| 1.0 / (s + lambda), g))
        .collect::<Result<Vec<_>>>()?;
    Ok(matrix_from("if", &gq, &train_grads(state, union)?))
}

/// `Σ_c η_c ∇f(z_q; θ_c)·∇ℒ(z_m; θ_c)` over saved checkpoints.
pub fn tracin_scores(traj: &TrainingTrajectory, union: &Dataset, queries: &Dataset, f: Measurement) -> Result<AttributionMatrix> {
    let t = traj.steps();
    let mut total = Mat::zeros(queries.len(), union.len());
    for c in &traj.checkpoints {
        let eta = traj.lr_log[c.step.min(t - 1)];
        let state = traj.state_from(&c.params);
        let part = matrix_from("", &query_grads(&state, queries, f)?, &train_grads(&state, union)?);
        for (a, b) in total.as_mut_slice().iter_mut().zip(part.scores.as_slice()) {
            *a += eta * b;
        }
    }
    Ok(AttributionMatrix::new("tracin", total))
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let d = norm(a) * norm(b);
    (d > 0.0).then(|| dot(a, b) / d)
}

/// Cosine similarity of final hidden representations, oriented to removal.
/// A zero-norm representation yields 0 with a warning.
pub fn repsim_scores(state: &ModelState, union: &Dataset, queries: &Dataset, f: Measurement) -> Result<AttributionMatrix> {
    f.check_head(state.arch.head)?;
    let hidden = |ds: &Dataset| -> Vec<Vec<f64>> { (0..ds.len()).map(|i| state.activations(ds.example(i).x).last_hidden).collect() };
    let (hq, hm) = (hidden(queries), hidden(union));
    let sign = f.removal_orientation();
    let mut zero = 0usize;
    let scores = Mat::from_fn(hq.len(), hm.len(), |q, m| match cosine(&hq[q], &hm[m]) {
        Some(c) => sign * c,
        None => {
            zero += 1;
            0.0
        }
    });
    if zero > 0 {
        warn!("repsim: {zero} pairs with a zero-norm representation scored as 0");
    }
    Ok(AttributionMatrix::new("repsim", scores))
}

/// `Σ_k η_k c_k(m) ∇f(z_q; θ_T)·∇ℒ(z_m; θ_k)` with `c_k(m)` the multiplicity of
/// `z_m` in batch `k`. Needs the full parameter log.
pub fn hydra_scores(traj: &TrainingTrajectory, union: &Dataset, queries: &Dataset, f: Measurement) -> Result<AttributionMatrix> {
    let log = traj
        .full_param_log
        .as_ref()
        .ok_or_else(|| TdaError::invalid("hydra needs the full parameter log"))?;
    let d = traj.initial_params.len();
    let n = union.len();
    let per_row: Vec<Vec<(usize, f64)>> = {
        let mut v = vec![Vec::new(); n];
        for (k, batch) in traj.batch_log.iter().enumerate() {
            for &i in batch {
                v[i as usize].push((k, traj.lr_log[k]));
            }
        }
        v
    };
    let hm = (0..n)
        .into_par_iter()
        .map(|m| {
            let z = union.example(m);
            let mut acc = vec![0.0; d];
            for &(k, eta) in &per_row[m] {
                axpy(eta, &traj.state_from(&log[k]).grad_loss(&z)?, &mut acc);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let gq = query_grads(&traj.final_state(), queries, f)?;
    Ok(matrix_from("hydra", &gq, &hm))
}

/// `mean{f_j : m ∉ S_j} − mean{f_j : m ∈ S_j}` for each training index.
pub fn empirical_influence(measurements: &[f64], masks: &[SubsetMask]) -> Result<Vec<f64>> {
    if measurements.len() != masks.len() || masks.is_empty() {
        return Err(TdaError::Dimension {
            context: "empirical influence subsets",
            expected: masks.len(),
            got: measurements.len(),
        });
    }
    let n = masks[0].len();
    (0..n)
        .map(|m| {
            let (mut s_in, mut c_in, mut s_out, mut c_out) = (0.0, 0usize, 0.0, 0usize);
            for (f, mask) in measurements.iter().zip(masks) {
                if mask.contains(m) {
                    s_in += f;
                    c_in += 1;
                } else {
                    s_out += f;
                    c_out += 1;
                }
            }
            if c_in == 0 || c_out == 0 {
                return Err(TdaError::Undefined(format!("index {m} is in all or none of the subsets")));
            }
            Ok(s_out / c_out as f64 - s_in / c_in as f64)
        })
        .collect()
}
