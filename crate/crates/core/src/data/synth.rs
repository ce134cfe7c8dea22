use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Task};
use crate::error::{Result, TdaError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Two isotropic Gaussian classes with means `±separation/2` along the diagonal.
    TwoGaussians,
    /// Two Gaussian classes whose first two coordinates are rotated by
    /// 0, 15, 30, 45 or 60 degrees; the angle index is the domain tag.
    RotatedDomains,
    /// Polynomial features `(u, u², …)` of a scalar `u ~ N(0, 1)` with a linear target.
    QuadraticRegression,
}

impl std::str::FromStr for SynthKind {
    type Err = TdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_gaussians" => Ok(Self::TwoGaussians),
            "rotated_domains" => Ok(Self::RotatedDomains),
            "quadratic_regression" => Ok(Self::QuadraticRegression),
            other => Err(TdaError::invalid(format!(
                "unknown synthetic dataset '{other}' (expected two_gaussians, rotated_domains or quadratic_regression)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub dim: usize,
    /// Standard deviation of the class noise, or of the target noise for regression.
    pub noise: f64,
    /// Distance between class means.
    pub separation: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            dim: 2,
            noise: 1.0,
            separation: 2.0,
        }
    }
}

pub const ROTATION_DEGREES: [f64; 5] = [0.0, 15.0, 30.0, 45.0, 60.0];

pub fn synth(kind: SynthKind, n: usize, seed: u64) -> Result<Dataset> {
    let opts = match kind {
        SynthKind::QuadraticRegression => SynthOptions {
            dim: 3,
            noise: 0.1,
            ..SynthOptions::default()
        },
        _ => SynthOptions::default(),
    };
    synth_with(kind, n, seed, &opts)
}

pub fn synth_with(kind: SynthKind, n: usize, seed: u64, opts: &SynthOptions) -> Result<Dataset> {
    if n < 2 {
        return Err(TdaError::invalid("synthetic datasets need n >= 2"));
    }
    if opts.dim == 0 || (kind == SynthKind::RotatedDomains && opts.dim < 2) {
        return Err(TdaError::invalid(format!("dimension {} too small for {kind:?}", opts.dim)));
    }
    if !(opts.noise >= 0.0) {
        return Err(TdaError::invalid("noise must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = opts.dim;
    match kind {
        SynthKind::TwoGaussians => {
            let shift = 0.5 * opts.separation / (d as f64).sqrt();
            let mut xs = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            for i in 0..n {
                let y = (i % 2) as f64;
                let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
                xs.push(
                    (0..d)
                        .map(|_| sign * shift + opts.noise * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                );
                ys.push(y);
            }
            Dataset::new("two_gaussians", Task::Classification { classes: 2 }, xs, ys, None)
        }
        SynthKind::RotatedDomains => {
            let half = 0.5 * opts.separation;
            let mut xs = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            let mut tags = Vec::with_capacity(n);
            for i in 0..n {
                let label = (i / ROTATION_DEGREES.len()) % 2;
                let domain = i % ROTATION_DEGREES.len();
                let mut x: Vec<f64> = (0..d)
                    .map(|_| opts.noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                x[0] += if label == 0 { -half } else { half };
                let (s, c) = ROTATION_DEGREES[domain].to_radians().sin_cos();
                let (a, b) = (x[0], x[1]);
                x[0] = c * a - s * b;
                x[1] = s * a + c * b;
                xs.push(x);
                ys.push(label as f64);
                tags.push(domain as u32);
            }
            Dataset::new(
                "rotated_domains",
                Task::Classification { classes: 2 },
                xs,
                ys,
                Some(tags),
            )
        }
        SynthKind::QuadraticRegression => {
            let w = quadratic_weights(d);
            let mut xs = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let u: f64 = rng.sample(StandardNormal);
                let x: Vec<f64> = (1..=d as i32).map(|p| u.powi(p)).collect();
                let eps: f64 = rng.sample(StandardNormal);
                ys.push(x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + opts.noise * eps);
                xs.push(x);
            }
            Dataset::new("quadratic_regression", Task::Regression, xs, ys, None)
        }
    }
}

/// Ground-truth coefficients of `quadratic_regression`: `w_j = (-1)^j / (j+1)`.
pub fn quadratic_weights(dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| if j % 2 == 0 { 1.0 } else { -1.0 } / (j + 1) as f64)
        .collect()
}
