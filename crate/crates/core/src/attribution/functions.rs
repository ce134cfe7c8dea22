//! Scalar spectral functions applied to segment curvature eigenvalues.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `S̄ = exp(−η̄Kσ)`, `r̄ = F_r(σ) ḡ` with `F_r(σ) = (1 − exp(−η̄Kσ))/σ`.
    Exp,
    /// `S̄ = (1 − η̄σ)^K`, `r̄ = Σ_{i<K} η̄(1 − η̄σ)^i ḡ`: exact for constant curvature.
    FiniteSeries,
    /// Exponential propagator with the damped-inverse response `1/(σ + λ)`, `λ = 1/(η̄K)`.
    DampedInverse,
}

impl std::str::FromStr for Variant {
    type Err = crate::error::TdaError;
    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "exp" => Ok(Self::Exp),
            "finite_series" => Ok(Self::FiniteSeries),
            "damped_inverse" => Ok(Self::DampedInverse),
            other => Err(crate::error::TdaError::invalid(format!("unknown SOURCE variant '{other}'"))),
        }
    }
}

/// `ln((1 − η̄σ)^K)`, or `None` when `1 − η̄σ ≤ 0`.
fn log_power(sigma: f64, eta: f64, k: usize) -> Option<f64> {
    let x = eta * sigma;
    (x < 1.0).then(|| k as f64 * (-x).ln_1p())
}

/// `(1 − η̄σ)^K`.
pub fn finite_series_propagator(sigma: f64, eta: f64, k: usize) -> f64 {
    match log_power(sigma, eta, k) {
        Some(l) => l.exp(),
        None => (1.0 - eta * sigma).powi(k as i32),
    }
}

/// `Σ_{i<K} η̄(1 − η̄σ)^i = (1 − (1 − η̄σ)^K)/σ`, equal to `η̄K` at `σ = 0`.
pub fn finite_series_response(sigma: f64, eta: f64, k: usize) -> f64 {
    if sigma == 0.0 {
        return eta * k as f64;
    }
    match log_power(sigma, eta, k) {
        Some(l) => -l.exp_m1() / sigma,
        None => (1.0 - (1.0 - eta * sigma).powi(k as i32)) / sigma,
    }
}

/// `exp(−η̄Kσ)`.
pub fn exp_propagator(sigma: f64, eta: f64, k: usize) -> f64 {
    (-eta * k as f64 * sigma).exp()
}

/// `F_r(σ) = (1 − exp(−η̄Kσ))/σ` with the limit `η̄K` at `σ = 0`.
pub fn f_r(sigma: f64, eta: f64, k: usize) -> f64 {
    let t = eta * k as f64;
    if sigma == 0.0 {
        t
    } else {
        -(-t * sigma).exp_m1() / sigma
    }
}

/// `F_inv(σ) = 1/(σ + λ)`.
pub fn f_inv(sigma: f64, lambda: f64) -> f64 {
    1.0 / (sigma + lambda)
}

impl Variant {
    pub fn propagator(self, sigma: f64, eta: f64, k: usize) -> f64 {
        match self {
            Variant::FiniteSeries => finite_series_propagator(sigma, eta, k),
            Variant::Exp | Variant::DampedInverse => exp_propagator(sigma, eta, k),
        }
    }

    pub fn response(self, sigma: f64, eta: f64, k: usize) -> f64 {
        match self {
            Variant::Exp => f_r(sigma, eta, k),
            Variant::FiniteSeries => finite_series_response(sigma, eta, k),
            Variant::DampedInverse => {
                if k == 0 {
                    0.0
                } else {
                    f_inv(sigma, 1.0 / (eta * k as f64))
                }
            }
        }
    }
}
