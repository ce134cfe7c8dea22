//! Attribution scores in the removal convention: a positive `τ(z_q, z_m)`
//! means removing `z_m` from training raises the measurement `f(z_q)`.

mod baselines;
mod functions;
mod source;
mod trak;


use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baselines::{empirical_influence, hydra_scores, if_score, if_scores, repsim_scores, tracin_scores};
pub use functions::{exp_propagator, f_inv, f_r, finite_series_propagator, finite_series_response, Variant};
pub use source::{
    Boundaries, GradMode, Propagation, SegmentSummary, Source, SourceOptions, FINITE_SERIES_WARN, PINV_RTOL,
};
pub use trak::{trak_from_features, trak_scores, Projection, QWeight, TrakOptions};

use crate::data::Dataset;
use crate::error::{Result, TdaError};
use crate::linalg::Mat;
use crate::model::{Measurement, ModelState};

/// Scores with one row per query and one column per training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub scores: Mat,
    pub method: String,
    pub config_digest: String,
    pub ensemble_size: usize,
}

impl AttributionMatrix {
    pub fn new(method: impl Into<String>, scores: Mat) -> Self {
        Self {
            scores,
            method: method.into(),
            config_digest: String::new(),
            ensemble_size: 1,
        }
    }

    pub(crate) fn from_rows(method: &str, rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self::new(method, Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }

    pub fn queries(&self) -> usize {
        self.scores.rows()
    }

    pub fn train_len(&self) -> usize {
        self.scores.cols()
    }

    pub fn row(&self, q: usize) -> &[f64] {
        self.scores.row(q)
    }

    pub fn with_digest(mut self, digest: impl Into<String>) -> Self {
        self.config_digest = digest.into();
        self
    }
}

/// Elementwise mean of score matrices from independent runs.
pub fn ensemble(items: &[AttributionMatrix]) -> Result<AttributionMatrix> {
    let first = items.first().ok_or_else(|| TdaError::invalid("ensemble of zero score matrices"))?;
    let (r, c) = (first.queries(), first.train_len());
    let mut acc = Mat::zeros(r, c);
    for m in items {
        if m.queries() != r || m.train_len() != c {
            return Err(TdaError::Dimension {
                context: "ensemble members",
                expected: r * c,
                got: m.queries() * m.train_len(),
            });
        }
        for (a, b) in acc.as_mut_slice().iter_mut().zip(m.scores.as_slice()) {
            *a += b;
        }
    }
    let n = items.len() as f64;
    acc.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    Ok(AttributionMatrix {
        scores: acc,
        method: first.method.clone(),
        config_digest: first.config_digest.clone(),
        ensemble_size: items.iter().map(|m| m.ensemble_size).sum(),
    })
}

/// `∇f(z_q)` at `state` for every query row.
pub(crate) fn query_grads(state: &ModelState, queries: &Dataset, f: Measurement) -> Result<Vec<Vec<f64>>> {
    f.check_head(state.arch.head)?;
    (0..queries.len())
        .into_par_iter()
        .map(|q| state.grad_measure(f, &queries.example(q)))
        .collect()
}

/// `∇ℒ(z_m)` at `state` for every training row.
pub(crate) fn train_grads(state: &ModelState, union: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..union.len())
        .into_par_iter()
        .map(|m| state.grad_loss(&union.example(m)))
        .collect()
}
