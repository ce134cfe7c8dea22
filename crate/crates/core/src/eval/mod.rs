//! Counterfactual evaluation: linear datamodeling score (LDS), subset-removal
//! curves and expected leave-one-out.
//!
//! Every retraining goes through a [`Retrainer`]; seeds are derived from a
//! base seed and the job coordinates, so results do not depend on thread count.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMatrix;
use crate::data::{sample_subsets, Dataset, SubsetMask};
use crate::error::{Result, TdaError};
use crate::linalg::Mat;
use crate::model::{Measurement, ModelState};
use crate::train::Retrainer;


pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Seed for job `(a, b)` under `base`.
pub fn job_seed(base: u64, a: usize, b: usize) -> u64 {
    base.wrapping_add((a as u64).wrapping_mul(1_000_003)).wrapping_add(b as u64)
}

/// `Σ_{z ∈ S} τ(z_q, z)`.
pub fn group_attribution(row: &[f64], mask: &SubsetMask) -> f64 {
    row.iter().zip(&mask.kept).filter(|(_, &k)| k).map(|(v, _)| v).sum()
}

/// `Σ_{z ∉ S} τ(z_q, z)`: the predicted change `f(θ(S)) − f(θ(D))` under
/// removal-convention scores.
pub fn removed_group_attribution(row: &[f64], mask: &SubsetMask) -> f64 {
    row.iter().zip(&mask.kept).filter(|(_, &k)| !k).map(|(v, _)| v).sum()
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(TdaError::Dimension {
            context: "spearman inputs",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(TdaError::invalid("spearman needs at least two points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(TdaError::Overflow("spearman inputs"));
    }
    pearson(&average_ranks(x), &average_ranks(y)).ok_or_else(|| TdaError::Undefined("spearman of a constant vector".into()))
}

/// Measured `f(z_q)` after retraining on each of `M` random subsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdsGroundTruth {
    pub masks: Vec<SubsetMask>,
    /// `M × Q`: mean over retrainings of the measurement on subset `j`, query `q`.
    pub truth: Mat,
    pub alpha: f64,
    /// Retrainings actually averaged per subset.
    pub retrainings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdsReport {
    pub method: String,
    /// `None` where the correlation is undefined (constant predictions or truth).
    pub per_query: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
    pub mean: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    pub subsets: usize,
    pub retrainings: usize,
}

fn measure_all(state: &ModelState, queries: &Dataset, f: Measurement) -> Result<Vec<f64>> {
    (0..queries.len()).map(|q| state.measure(f, &queries.example(q))).collect()
}

/// Retrains on `M` subsets of fraction `alpha`, `R` times each (once when the
/// retrainer is deterministic), and records the mean measurement per query.
pub fn lds_ground_truth(
    retrainer: &dyn Retrainer,
    queries: &Dataset,
    f: Measurement,
    alpha: f64,
    m: usize,
    r: usize,
    seed: u64,
) -> Result<LdsGroundTruth> {
    if r == 0 {
        return Err(TdaError::invalid("R must be at least 1"));
    }
    let r = if retrainer.deterministic() { 1 } else { r };
    let masks = sample_subsets(retrainer.dataset().len(), alpha, m, seed)?;
    let jobs: Vec<(usize, usize)> = (0..m).flat_map(|j| (0..r).map(move |k| (j, k))).collect();
    let values = jobs
        .par_iter()
        .map(|&(j, k)| {
            let state = retrainer.retrain(&masks[j], job_seed(seed, j, k))?;
            measure_all(&state, queries, f)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut truth = Mat::zeros(m, queries.len());
    for ((j, _), v) in jobs.iter().zip(&values) {
        for (q, x) in v.iter().enumerate() {
            truth[(*j, q)] += x / r as f64;
        }
    }
    Ok(LdsGroundTruth {
        masks,
        truth,
        alpha,
        retrainings: r,
    })
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut c) = (0.0, 0usize);
    for v in vals.flatten() {
        s += v;
        c += 1;
    }
    (c > 0).then(|| s / c as f64)
}

/// LDS of `scores` against a ground truth, with a bootstrap CI over subsets.
pub fn lds(gt: &LdsGroundTruth, scores: &AttributionMatrix, resamples: usize, seed: u64) -> Result<LdsReport> {
    let (m, nq) = (gt.truth.rows(), gt.truth.cols());
    if scores.queries() != nq {
        return Err(TdaError::Dimension {
            context: "LDS queries",
            expected: nq,
            got: scores.queries(),
        });
    }
    let preds: Vec<Vec<f64>> = (0..nq)
        .map(|q| gt.masks.iter().map(|mask| removed_group_attribution(scores.row(q), mask)).collect())
        .collect();
    let truths: Vec<Vec<f64>> = (0..nq).map(|q| gt.truth.column(q)).collect();
    let rho = |q: usize, idx: Option<&[usize]>| -> Option<f64> {
        let r = match idx {
            None => spearman(&preds[q], &truths[q]),
            Some(ix) => {
                let p: Vec<f64> = ix.iter().map(|&j| preds[q][j]).collect();
                let t: Vec<f64> = ix.iter().map(|&j| truths[q][j]).collect();
                spearman(&p, &t)
            }
        };
        r.ok()
    };
    let per_query: Vec<Option<f64>> = (0..nq).map(|q| rho(q, None)).collect();
    let excluded: Vec<usize> = (0..nq).filter(|&q| per_query[q].is_none()).collect();
    if !excluded.is_empty() {
        warn!("{}: {} queries excluded from LDS (constant predictions or measurements)", scores.method, excluded.len());
    }
    let mean = mean_defined(per_query.iter().copied()).ok_or_else(|| TdaError::Undefined("LDS undefined for every query".into()))?;
    let mut boots: Vec<f64> = (0..resamples)
        .into_par_iter()
        .filter_map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(job_seed(seed, b, 0));
            let idx: Vec<usize> = (0..m).map(|_| rand::Rng::random_range(&mut rng, 0..m)).collect();
            mean_defined((0..nq).map(|q| rho(q, Some(&idx))))
        })
        .collect();
    boots.sort_by(f64::total_cmp);
    let ci = if boots.is_empty() {
        (mean, mean)
    } else {
        (percentile(&boots, 0.025), percentile(&boots, 0.975))
    };
    Ok(LdsReport {
        method: scores.method.clone(),
        per_query,
        excluded,
        mean,
        ci,
        alpha: gt.alpha,
        subsets: m,
        retrainings: gt.retrainings,
    })
}

/// Which training points are removed for a given test point.
#[derive(Clone, Copy, Debug)]
pub enum RemovalRule<'a> {
    /// Top-`k` by helpfulness `orientation · τ`; the matrix has one row per test point.
    Scores(&'a AttributionMatrix, Measurement),
    /// `k` random training points of the test point's class.
    RandomSameClass { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualOptions {
    pub k_grid: Vec<usize>,
    pub screening_seeds: usize,
    pub seeds: usize,
    pub max_tests: usize,
    pub seed: u64,
}

impl Default for CounterfactualOptions {
    fn default() -> Self {
        Self {
            k_grid: vec![0, 5, 10, 20, 40],
            screening_seeds: 5,
            seeds: 3,
            max_tests: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualCurve {
    pub k_grid: Vec<usize>,
    /// Fraction of tested points flipped at or before each `k`.
    pub fraction: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Test indices that passed screening.
    pub tested: Vec<usize>,
}

/// Test points classified correctly by every screening retraining, in a
/// seed-shuffled order, capped at `max_tests`.
pub fn screen(retrainer: &dyn Retrainer, test: &Dataset, opts: &CounterfactualOptions) -> Result<Vec<usize>> {
    let n = retrainer.dataset().len();
    let runs = if retrainer.deterministic() { 1 } else { opts.screening_seeds.max(1) };
    let states = (0..runs)
        .into_par_iter()
        .map(|s| retrainer.retrain(&SubsetMask::all(n), job_seed(opts.seed, s, 0)))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    Ok(order
        .into_iter()
        .filter(|&t| states.iter().all(|s| s.is_correct(&test.example(t))))
        .take(opts.max_tests)
        .collect())
}

fn removal_order(rule: &RemovalRule, train: &Dataset, test: &Dataset, t: usize) -> Vec<usize> {
    match rule {
        RemovalRule::Scores(mat, f) => {
            let o = f.removal_orientation();
            let row = mat.row(t);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| (o * row[b]).total_cmp(&(o * row[a])).then(a.cmp(&b)));
            idx
        }
        RemovalRule::RandomSameClass { seed } => {
            let c = test.example(t).class();
            let mut idx: Vec<usize> = (0..train.len()).filter(|&i| train.example(i).class() == c).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(job_seed(*seed, t, 0)));
            idx
        }
    }
}

/// Fraction of screened test points misclassified after removing their top-`k`
/// helpful training points, over an ascending `k` grid.
pub fn counterfactual(retrainer: &dyn Retrainer, test: &Dataset, rule: RemovalRule, opts: &CounterfactualOptions) -> Result<CounterfactualCurve> {
    let train = retrainer.dataset();
    if !train.task.is_classification() {
        return Err(TdaError::invalid("counterfactual evaluation needs a classification task"));
    }
    if opts.k_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TdaError::invalid("counterfactual k grid must be strictly ascending"));
    }
    if let RemovalRule::Scores(mat, _) = &rule {
        if mat.queries() != test.len() || mat.train_len() != train.len() {
            return Err(TdaError::Dimension {
                context: "counterfactual score matrix",
                expected: test.len() * train.len(),
                got: mat.queries() * mat.train_len(),
            });
        }
    }
    let tested = screen(retrainer, test, opts)?;
    let seeds: Vec<u64> = (0..if retrainer.deterministic() { 1 } else { opts.seeds.max(1) })
        .map(|s| job_seed(opts.seed, 1000 + s, 1))
        .collect();
    info!("counterfactual: {} test points passed screening", tested.len());
    let flip_at = tested
        .par_iter()
        .map(|&t| -> Result<Option<usize>> {
            let order = removal_order(&rule, train, test, t);
            let z = test.example(t);
            for (gi, &k) in opts.k_grid.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                if k >= train.len() || k > order.len() {
                    break;
                }
                let mask = SubsetMask::without(train.len(), &order[..k]);
                let mut wrong = 0;
                for &s in &seeds {
                    if !retrainer.retrain(&mask, s)?.is_correct(&z) {
                        wrong += 1;
                    }
                }
                if 2 * wrong > seeds.len() {
                    return Ok(Some(gi));
                }
            }
            Ok(None)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = tested.len().max(1) as f64;
    let fraction = (0..opts.k_grid.len())
        .map(|gi| flip_at.iter().filter(|f| f.is_some_and(|x| x <= gi)).count() as f64 / n)
        .collect();
    Ok(CounterfactualCurve {
        k_grid: opts.k_grid.clone(),
        fraction,
        seeds,
        tested,
    })
}

/// Expected leave-one-out: mean `f(z_q)` over `R` retrainings without `z_m`
/// minus the mean over `R` retrainings with it.
pub fn eloo(retrainer: &dyn Retrainer, m: usize, query: &crate::data::Example, f: Measurement, r: usize, seed: u64) -> Result<f64> {
    if r == 0 {
        return Err(TdaError::invalid("R must be at least 1"));
    }
    let n = retrainer.dataset().len();
    let r = if retrainer.deterministic() { 1 } else { r };
    let without = SubsetMask::without(n, &[m]);
    let all = SubsetMask::all(n);
    let vals = (0..r)
        .into_par_iter()
        .map(|k| {
            let a = retrainer.retrain(&without, job_seed(seed, k, 1))?.measure(f, query)?;
            let b = retrainer.retrain(&all, job_seed(seed, k, 2))?.measure(f, query)?;
            Ok((a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sa, sb) = vals.iter().fold((0.0, 0.0), |(x, y), (a, b)| (x + a, y + b));
    Ok((sa - sb) / r as f64)
}
