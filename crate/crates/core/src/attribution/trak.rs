use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ensemble, query_grads, AttributionMatrix};
use crate::data::Dataset;
use crate::error::{Result, TdaError};
use crate::linalg::{dot, sym_eig, Mat, SymMatrix};
use crate::model::{Measurement, ModelState};

/// Relative cutoff for the pseudo-inverse of `ΦᵀΦ`.
const TRAK_PINV_RTOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Entries drawn i.i.d. from `N(0, 1)`.
    Gaussian,
    /// The first `k` coordinates; requires `k ≤ D`.
    Identity,
}

/// Diagonal weighting `Q` applied to the training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QWeight {
    Identity,
    /// `Q_ii = ∂ℒ/∂f` at `z_i`; scores are then already removal-oriented.
    LossDerivative,
    Custom(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrakOptions {
    pub proj_dim: usize,
    pub seed: u64,
    pub projection: Projection,
    pub q: QWeight,
}

impl Default for TrakOptions {
    fn default() -> Self {
        Self {
            proj_dim: 256,
            seed: 0,
            projection: Projection::Gaussian,
            q: QWeight::Identity,
        }
    }
}

/// `τ_q = φ_qᵀ (ΦᵀΦ)⁺ Φᵀ Q` for each query feature row.
pub fn trak_from_features(phi_q: &[Vec<f64>], phi: &Mat, q: &[f64]) -> Result<Mat> {
    let (n, k) = (phi.rows(), phi.cols());
    if q.len() != n {
        return Err(TdaError::Dimension {
            context: "TRAK weights",
            expected: n,
            got: q.len(),
        });
    }
    let mut gram = Mat::zeros(k, k);
    for i in 0..n {
        gram.add_outer_upper(1.0, phi.row(i));
    }
    gram.mirror_upper();
    let eig = sym_eig(&SymMatrix::new(gram)?)?;
    let cut = TRAK_PINV_RTOL * eig.max_value().abs();
    let mut out = Mat::zeros(phi_q.len(), n);
    for (r, pq) in phi_q.iter().enumerate() {
        let w = eig.apply_fn(&|s| if s > cut { 1.0 / s } else { 0.0 }, pq)?;
        for i in 0..n {
            out[(r, i)] = dot(&w, phi.row(i)) * q[i];
        }
    }
    Ok(out)
}

fn projector(d: usize, opts: &TrakOptions, member: u64) -> Result<Mat> {
    let k = opts.proj_dim;
    match opts.projection {
        Projection::Identity => {
            if k > d {
                return Err(TdaError::invalid(format!("identity projection to {k} dims exceeds parameter dimension {d}")));
            }
            Ok(Mat::from_fn(d, k, |i, j| f64::from(u8::from(i == j))))
        }
        Projection::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(member));
            Ok(Mat::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng)))
        }
    }
}

fn loss_derivative(state: &ModelState, f: Measurement, ds: &Dataset, i: usize) -> Result<f64> {
    let v = state.measure(f, &ds.example(i))?;
    Ok(match f {
        Measurement::Loss => 1.0,
        // ℒ = softplus(−margin)
        Measurement::Margin => -1.0 / (1.0 + v.exp()),
        // ℒ = ½ r², f = |r|
        Measurement::AbsoluteError => v,
    })
}

/// Ensemble-averaged TRAK over independently trained `states`.
pub fn trak_scores(states: &[ModelState], union: &Dataset, queries: &Dataset, f: Measurement, opts: &TrakOptions) -> Result<AttributionMatrix> {
    if opts.proj_dim == 0 {
        return Err(TdaError::invalid("TRAK projection dimension must be positive"));
    }
    let members = states
        .iter()
        .enumerate()
        .map(|(s, state)| {
            let p = projector(state.dim(), opts, s as u64)?;
            let phi_q: Vec<Vec<f64>> = query_grads(state, queries, f)?.iter().map(|g| p.t_matvec(g)).collect();
            let rows: Vec<Vec<f64>> = query_grads(state, union, f)?.iter().map(|g| p.t_matvec(g)).collect();
            let (q, sign) = match &opts.q {
                QWeight::Identity => (vec![1.0; union.len()], f.removal_orientation()),
                QWeight::Custom(w) => (w.clone(), f.removal_orientation()),
                QWeight::LossDerivative => (
                    (0..union.len()).map(|i| loss_derivative(state, f, union, i)).collect::<Result<_>>()?,
                    1.0,
                ),
            };
            let scores = trak_from_features(&phi_q, &Mat::from_rows(&rows), &q)?.scale(sign);
            Ok(AttributionMatrix::new("trak", scores))
        })
        .collect::<Result<Vec<_>>>()?;
    ensemble(&members)
}
