//! Segment-wise stationary approximation of the unrolled training derivative.
//!
//! Training steps are partitioned into segments `(T_{ℓ−1}, T_ℓ]`. Inside a
//! segment the Hessian and the training gradient are replaced by their means
//! `H̄_ℓ`, `ḡ_ℓ`, so the unrolled sum collapses to a propagator
//! `S̄_ℓ = f_S(H̄_ℓ)` and a response `r̄_ℓ = f_R(H̄_ℓ) ḡ_ℓ`. The score is
//! `τ = ∇fᵀ Σ_ℓ (S̄_L ⋯ S̄_{ℓ+1}) r̄_ℓ / N_ℓ`, summed over segments whose stage
//! dataset contains the training point.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::functions::Variant;
use super::{query_grads, AttributionMatrix};
use crate::curvature::{self, diagonal_fit, Backend, CurvatureEstimate, FitOptions};
use crate::data::Dataset;
use crate::error::{Result, TdaError};
use crate::linalg::{axpy, dot, mean_vec, Mat, SymMatrix};
use crate::model::{Measurement, ModelState};
use crate::train::TrainingTrajectory;

/// Relative eigenvalue cutoff for the pseudo-inverse used by the split form.
pub const PINV_RTOL: f64 = 1e-10;

/// Finite-series propagators with `η̄σ_max` above this oscillate and grow.
pub const FINITE_SERIES_WARN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundaries {
    /// `T_ℓ = round(ℓT/L)`.
    Equal(usize),
    /// One segment per training stage.
    Stages,
    /// Segment end steps, strictly increasing and ending at `T`.
    Explicit(Vec<usize>),
}

/// Source of the parameter states at which `ḡ_ℓ` and `H̄_ℓ` are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Saved checkpoints inside the segment.
    Checkpoints,
    /// Every iterate `θ_k` of the segment; needs the full parameter log.
    PerStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceOptions {
    pub boundaries: Boundaries,
    pub variant: Variant,
    pub backend: Backend,
    pub grad_mode: GradMode,
    /// Evaluate gradient and curvature once, at the mean parameters of each segment.
    pub fast: bool,
    pub fit: FitOptions,
    /// Subsample the stage rows used for curvature fits.
    pub max_fit_rows: Option<usize>,
}

impl Default for SourceOptions {
    fn default() -> Self {
        Self {
            boundaries: Boundaries::Equal(3),
            variant: Variant::Exp,
            backend: Backend::Ekfac,
            grad_mode: GradMode::Checkpoints,
            fast: false,
            fit: FitOptions::default(),
            max_fit_rows: None,
        }
    }
}

/// How `S̄` and `r̄` are formed from the segment curvature.
#[derive(Clone, Debug, PartialEq)]
pub enum Propagation {
    /// Functions of `H̄` itself.
    Plain(CurvatureEstimate),
    /// Functions of `M = P̄^{1/2} H̄ P̄^{1/2}`:
    /// `S̄ = P̄^{1/2} f_S(M) P̄^{−1/2}`, `r̄ = P̄^{1/2} f_R(M) P̄^{1/2} ḡ`.
    Preconditioned { sqrt_p: Vec<f64>, m: CurvatureEstimate },
    /// Diagonal `P̄ H̄` inside the propagator and a pseudo-inverse of `H̄` for the
    /// response: `r̄ = (I − S̄) H̄⁺ ḡ`.
    Split { decay: Vec<f64>, solve: CurvatureEstimate },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSummary {
    /// First step of the segment (`T_{ℓ−1}`).
    pub start: usize,
    /// One past the last step (`T_ℓ`).
    pub end: usize,
    /// Step count `K`, normally `end − start`.
    pub steps: usize,
    /// Mean learning rate, divided by `1 − β` under momentum.
    pub eta: f64,
    pub stage: usize,
    pub stage_range: (usize, usize),
    pub variant: Variant,
    /// Parameters at which `ḡ_ℓ` is averaged.
    pub grad_params: Vec<Vec<f64>>,
    pub propagation: Propagation,
}

fn pinv(sigma_max: f64) -> impl Fn(f64) -> f64 {
    let cut = PINV_RTOL * sigma_max.abs();
    move |s| if s > cut { 1.0 / s } else { 0.0 }
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn quotient(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x / y).collect()
}

impl SegmentSummary {
    pub fn stage_size(&self) -> usize {
        self.stage_range.1 - self.stage_range.0
    }

    pub fn contains(&self, m: usize) -> bool {
        (self.stage_range.0..self.stage_range.1).contains(&m)
    }

    /// Copy with the step count overridden; `K = 0` gives `S̄ = I`, `r̄ = 0`.
    pub fn with_steps(&self, k: usize) -> Self {
        Self {
            steps: k,
            ..self.clone()
        }
    }

    fn fs(&self) -> impl Fn(f64) -> f64 + '_ {
        move |s| self.variant.propagator(s, self.eta, self.steps)
    }

    fn fr(&self) -> impl Fn(f64) -> f64 + '_ {
        move |s| self.variant.response(s, self.eta, self.steps)
    }

    /// `S̄ v`.
    pub fn propagate(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.propagation {
            Propagation::Plain(h) => h.apply_fn(&self.fs(), v),
            Propagation::Preconditioned { sqrt_p, m } => Ok(hadamard(sqrt_p, &m.apply_fn(&self.fs(), &quotient(v, sqrt_p))?)),
            Propagation::Split { decay, .. } => Ok(decay.iter().zip(v).map(|(&d, &x)| self.fs()(d) * x).collect()),
        }
    }

    /// `S̄ᵀ u`.
    pub fn propagate_t(&self, u: &[f64]) -> Result<Vec<f64>> {
        match &self.propagation {
            Propagation::Preconditioned { sqrt_p, m } => Ok(quotient(&m.apply_fn(&self.fs(), &hadamard(sqrt_p, u))?, sqrt_p)),
            _ => self.propagate(u),
        }
    }

    /// `r̄ = R ḡ`.
    pub fn response(&self, g: &[f64]) -> Result<Vec<f64>> {
        match &self.propagation {
            Propagation::Plain(h) => h.apply_fn(&self.fr(), g),
            Propagation::Preconditioned { sqrt_p, m } => Ok(hadamard(sqrt_p, &m.apply_fn(&self.fr(), &hadamard(sqrt_p, g))?)),
            Propagation::Split { decay, solve } => {
                let x = solve.apply_fn(&pinv(solve.spectrum_bounds().1), g)?;
                Ok(decay.iter().zip(&x).map(|(&d, &xi)| (1.0 - self.fs()(d)) * xi).collect())
            }
        }
    }

    /// `Rᵀ u`.
    pub fn response_t(&self, u: &[f64]) -> Result<Vec<f64>> {
        match &self.propagation {
            Propagation::Split { decay, solve } => {
                let y: Vec<f64> = decay.iter().zip(u).map(|(&d, &ui)| (1.0 - self.fs()(d)) * ui).collect();
                solve.apply_fn(&pinv(solve.spectrum_bounds().1), &y)
            }
            _ => self.response(u),
        }
    }

    /// `ḡ_ℓ(z_m)`: the training-loss gradient averaged over the segment's states.
    pub fn mean_grad(&self, state: &ModelState, union: &Dataset, m: usize) -> Result<Vec<f64>> {
        let z = union.example(m);
        let mut acc = vec![0.0; state.dim()];
        for p in &self.grad_params {
            let g = state.with_params(p.clone())?.grad_loss(&z)?;
            axpy(1.0, &g, &mut acc);
        }
        let n = self.grad_params.len() as f64;
        Ok(acc.into_iter().map(|v| v / n).collect())
    }

    /// Largest `η̄σ` over the propagator's spectrum.
    pub fn max_step_curvature(&self) -> f64 {
        let hi = match &self.propagation {
            Propagation::Plain(h) => h.spectrum_bounds().1,
            Propagation::Preconditioned { m, .. } => m.spectrum_bounds().1,
            Propagation::Split { decay, .. } => decay.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        self.eta * hi
    }
}

/// A fitted multi-segment plan over one training trajectory.
#[derive(Clone, Debug)]
pub struct Source {
    pub segments: Vec<SegmentSummary>,
    pub final_state: ModelState,
}

fn segment_ends(traj: &TrainingTrajectory, b: &Boundaries) -> Result<Vec<usize>> {
    let t = traj.steps();
    let ends = match b {
        Boundaries::Equal(l) => {
            if *l == 0 || *l > t {
                return Err(TdaError::InvalidPlan(format!("{l} segments over {t} steps")));
            }
            (1..=*l).map(|i| ((i * t) as f64 / *l as f64).round() as usize).collect()
        }
        Boundaries::Stages => traj.stage_ends(),
        Boundaries::Explicit(v) => v.clone(),
    };
    if ends.is_empty() || ends.last() != Some(&t) {
        return Err(TdaError::InvalidPlan(format!("segment ends {ends:?} must finish at T = {t}")));
    }
    if ends[0] == 0 || ends.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TdaError::InvalidPlan(format!("segment ends {ends:?} must be strictly increasing and positive")));
    }
    Ok(ends)
}

fn fit_rows(range: (usize, usize), cap: Option<usize>, seed: u64) -> Vec<usize> {
    let all: Vec<usize> = (range.0..range.1).collect();
    match cap {
        Some(c) if c < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pick: Vec<usize> = rand::seq::index::sample(&mut rng, all.len(), c).into_iter().map(|i| all[i]).collect();
            pick.sort_unstable();
            pick
        }
        _ => all,
    }
}

fn precondition(p: &[f64], h: CurvatureEstimate) -> Result<CurvatureEstimate> {
    let sqrt_p: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
    match h {
        CurvatureEstimate::Exact { matrix, .. } => {
            let d = matrix.dim();
            let m = Mat::from_fn(d, d, |i, j| sqrt_p[i] * matrix[(i, j)] * sqrt_p[j]);
            CurvatureEstimate::exact(SymMatrix::new(m)?)
        }
        CurvatureEstimate::Diagonal { values } => Ok(CurvatureEstimate::Diagonal {
            values: hadamard(&values, p),
        }),
        CurvatureEstimate::Ekfac(_) => Err(TdaError::Unsupported("EK-FAC curvature inside a preconditioned propagator")),
    }
}

impl Source {
    /// Partitions the trajectory and fits one summary per segment.
    pub fn plan(traj: &TrainingTrajectory, union: &Dataset, opts: &SourceOptions) -> Result<Self> {
        let ends = segment_ends(traj, &opts.boundaries)?;
        if opts.grad_mode == GradMode::PerStep && traj.full_param_log.is_none() {
            return Err(TdaError::invalid("per-step gradient averaging needs the full parameter log"));
        }
        let beta = traj.momentum;
        let mut segments = Vec::with_capacity(ends.len());
        let mut start = 0;
        for (l, &end) in ends.iter().enumerate() {
            let stage = traj.stage_log[start] as usize;
            if traj.stage_log[start..end].iter().any(|&s| s as usize != stage) {
                return Err(TdaError::InvalidPlan(format!("segment ({start}, {end}] crosses a stage boundary")));
            }
            let ckpts: Vec<&Vec<f64>> = traj
                .checkpoints
                .iter()
                .filter(|c| (c.step > start && c.step <= end) || (l == 0 && c.step == 0))
                .map(|c| &c.params)
                .collect();
            if ckpts.is_empty() {
                return Err(TdaError::InvalidPlan(format!("segment ({start}, {end}] holds no checkpoint")));
            }
            let mut params: Vec<Vec<f64>> = match opts.grad_mode {
                GradMode::Checkpoints => ckpts.into_iter().cloned().collect(),
                GradMode::PerStep => traj.full_param_log.as_ref().map(|log| log[start..end].to_vec()).unwrap_or_default(),
            };
            if opts.fast {
                params = vec![mean_vec(&params)];
            }
            let states: Vec<ModelState> = params.iter().map(|p| traj.state_from(p)).collect();
            let stage_range = traj.stage_ranges[stage];
            let rows = fit_rows(stage_range, opts.max_fit_rows, opts.fit.seed.wrapping_add(l as u64));
            let h = curvature::fit(opts.backend, &states, union, &rows, opts.fit)?;

            let mean_lr = traj.lr_log[start..end].iter().sum::<f64>() / (end - start) as f64;
            let eta = mean_lr / (1.0 - beta);
            let precond = traj.precond_log.as_ref().map(|log| mean_vec(&log[start..end]));
            let propagation = match (precond, opts.backend) {
                (None, _) => Propagation::Plain(h),
                (Some(p), Backend::Ekfac) => {
                    if opts.variant == Variant::DampedInverse {
                        return Err(TdaError::Unsupported("damped-inverse response with the split preconditioned form"));
                    }
                    let diag = diagonal_fit(&states, union, &rows, opts.fit)?;
                    Propagation::Split {
                        decay: hadamard(&p, &diag),
                        solve: h,
                    }
                }
                (Some(p), _) => Propagation::Preconditioned {
                    sqrt_p: p.iter().map(|v| v.sqrt()).collect(),
                    m: precondition(&p, h)?,
                },
            };
            let seg = SegmentSummary {
                start,
                end,
                steps: end - start,
                eta,
                stage,
                stage_range,
                variant: opts.variant,
                grad_params: params,
                propagation,
            };
            if opts.variant == Variant::FiniteSeries && seg.max_step_curvature() > FINITE_SERIES_WARN {
                warn!(
                    "segment ({start}, {end}]: eta*sigma_max = {:.3} > {FINITE_SERIES_WARN}; finite-series propagator is unstable",
                    seg.max_step_curvature()
                );
            }
            segments.push(seg);
            start = end;
        }
        Ok(Self {
            segments,
            final_state: traj.final_state(),
        })
    }

    /// Estimate of `dθ_T/dε` for upweighting `z_m`: `−Σ_ℓ (Π S̄) r̄_ℓ / N_ℓ`.
    pub fn total_derivative(&self, union: &Dataset, m: usize) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.final_state.dim()];
        for seg in &self.segments {
            acc = seg.propagate(&acc)?;
            if seg.contains(m) {
                let r = seg.response(&seg.mean_grad(&self.final_state, union, m)?)?;
                axpy(1.0 / seg.stage_size() as f64, &r, &mut acc);
            }
        }
        Ok(acc.into_iter().map(|v| -v).collect())
    }

    /// `τ(z_q, z_m) = −∇f(z_q)ᵀ dθ_T/dε`.
    pub fn score(&self, union: &Dataset, f: Measurement, query: &crate::data::Example, m: usize) -> Result<f64> {
        let gf = self.final_state.grad_measure(f, query)?;
        Ok(-dot(&gf, &self.total_derivative(union, m)?))
    }

    /// Score through the first segment only: `∇fᵀ S̄_L ⋯ S̄_2 r̄_1 / N_1`.
    pub fn first_segment_score(&self, union: &Dataset, f: Measurement, query: &crate::data::Example, m: usize) -> Result<f64> {
        let first = &self.segments[0];
        if !first.contains(m) {
            return Err(TdaError::invalid(format!("training index {m} is not in the first stage")));
        }
        let mut acc = first.response(&first.mean_grad(&self.final_state, union, m)?)?;
        for seg in &self.segments[1..] {
            acc = seg.propagate(&acc)?;
        }
        let gf = self.final_state.grad_measure(f, query)?;
        Ok(dot(&gf, &acc) / first.stage_size() as f64)
    }

    /// `w_ℓ = R_ℓᵀ S̄_{ℓ+1}ᵀ ⋯ S̄_Lᵀ ∇f`, so that `τ = Σ_ℓ w_ℓ · ḡ_ℓ / N_ℓ`.
    pub fn query_weights(&self, grad_f: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut u = grad_f.to_vec();
        let mut w = vec![Vec::new(); self.segments.len()];
        for (l, seg) in self.segments.iter().enumerate().rev() {
            w[l] = seg.response_t(&u)?;
            u = seg.propagate_t(&u)?;
        }
        Ok(w)
    }

    /// Scores of every query against every union row, via the transposed route.
    pub fn score_matrix(&self, union: &Dataset, queries: &Dataset, f: Measurement) -> Result<AttributionMatrix> {
        let n = union.len();
        let grads: Vec<Vec<Vec<f64>>> = self
            .segments
            .iter()
            .map(|seg| {
                (0..n)
                    .into_par_iter()
                    .map(|m| {
                        if seg.contains(m) {
                            seg.mean_grad(&self.final_state, union, m)
                        } else {
                            Ok(Vec::new())
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let gq = query_grads(&self.final_state, queries, f)?;
        let rows = gq
            .par_iter()
            .map(|g| {
                let w = self.query_weights(g)?;
                Ok((0..n)
                    .map(|m| {
                        self.segments
                            .iter()
                            .enumerate()
                            .filter(|(_, seg)| seg.contains(m))
                            .map(|(l, seg)| dot(&w[l], &grads[l][m]) / seg.stage_size() as f64)
                            .sum()
                    })
                    .collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AttributionMatrix::from_rows("source", &rows))
    }
}
