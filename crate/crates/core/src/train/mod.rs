//! SGD engine that records everything needed to replay or differentiate a run:
//! batch composition, learning rates, preconditioners and, on request, every
//! intermediate parameter vector.

mod retrain;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, TdaError};
use crate::linalg::norm;
use crate::model::{grad_sum, Arch, Init, ModelState};

pub use retrain::{retrain_without, Retrainer, RidgeTrainer, SgdTrainer};

/// Parameter norm above which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// `B` indices drawn uniformly with replacement every step.
    WithReplacement,
    /// A fresh permutation each epoch, cut into batches of `B` (last may be short).
    EpochShuffle,
    /// Every step uses the whole dataset in index order; `batch_size` is ignored.
    FullBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `values[i]` applies while `step < boundaries[i]`; the last value applies afterwards.
    Piecewise { boundaries: Vec<usize>, values: Vec<f64> },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::Piecewise { boundaries, values } => {
                let i = boundaries.iter().take_while(|&&b| step >= b).count();
                values[i]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        match self {
            LrSchedule::Constant { lr } if ok(*lr) => Ok(()),
            LrSchedule::Constant { lr } => Err(TdaError::invalid(format!("learning rate {lr} must be > 0"))),
            LrSchedule::Piecewise { boundaries, values } => {
                if values.len() != boundaries.len() + 1 {
                    return Err(TdaError::invalid(
                        "piecewise schedule needs one more value than boundaries",
                    ));
                }
                if boundaries.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(TdaError::invalid("schedule boundaries must increase strictly"));
                }
                if !values.iter().all(|&v| ok(v)) {
                    return Err(TdaError::invalid("schedule learning rates must be > 0"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Length {
    Steps(usize),
    Epochs(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoints {
    /// Explicit steps in `[0, T]`; `s` stores the parameters before step `s`.
    Steps(Vec<usize>),
    /// `n` checkpoints at `round(i·T/n)`, `i = 1..=n`.
    Evenly(usize),
    /// One checkpoint at the end of every epoch.
    EveryEpoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Preconditioner {
    None,
    /// Bias-corrected second-moment accumulator, `P = 1/(√v̂ + eps)`.
    DiagonalAdaptive { beta2: f64, eps: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub length: Length,
    /// Per-stage lengths for multi-stage runs; `length` is used for every stage when absent.
    #[serde(default)]
    pub stage_lengths: Option<Vec<Length>>,
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "no_precond")]
    pub preconditioner: Preconditioner,
    pub sampling: Sampling,
    pub seed: u64,
    pub init: Init,
    /// Seed for the parameter initialisation; the batch seed is used when absent.
    #[serde(default)]
    pub init_seed: Option<u64>,
    pub checkpoints: Checkpoints,
    /// Keep `θ_k` for every step (needed by the unrolling oracle and Hydra).
    #[serde(default)]
    pub record_params: bool,
}

fn no_precond() -> Preconditioner {
    Preconditioner::None
}

impl TrainConfig {
    /// Plain SGD with constant rate, zero init and no checkpoints beyond the end.
    pub fn sgd(length: Length, batch_size: usize, lr: f64, sampling: Sampling, seed: u64) -> Self {
        Self {
            length,
            stage_lengths: None,
            batch_size,
            lr: LrSchedule::Constant { lr },
            momentum: 0.0,
            preconditioner: Preconditioner::None,
            sampling,
            seed,
            init: Init::Zeros,
            init_seed: None,
            checkpoints: Checkpoints::Evenly(1),
            record_params: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TdaError::invalid("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TdaError::invalid(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        for len in std::iter::once(&self.length).chain(self.stage_lengths.iter().flatten()) {
            if matches!(len, Length::Steps(0) | Length::Epochs(0)) {
                return Err(TdaError::invalid("training length must be >= 1"));
            }
        }
        if let Preconditioner::DiagonalAdaptive { beta2, eps } = self.preconditioner {
            if !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(TdaError::invalid("preconditioner needs beta2 in [0,1) and eps > 0"));
            }
        }
        if let Checkpoints::Evenly(0) = self.checkpoints {
            return Err(TdaError::invalid("need at least one checkpoint"));
        }
        self.lr.validate()
    }

    fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrajectory {
    pub arch: Arch,
    pub initial_params: Vec<f64>,
    pub final_params: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    /// Dataset indices (into the stage union) used at each step, with multiplicity.
    pub batch_log: Vec<Vec<u32>>,
    pub lr_log: Vec<f64>,
    pub precond_log: Option<Vec<Vec<f64>>>,
    /// `θ_k` before step `k`, for `k = 0..T`.
    pub full_param_log: Option<Vec<Vec<f64>>>,
    pub stage_log: Vec<u16>,
    /// Half-open index range of each stage's rows in the union dataset.
    pub stage_ranges: Vec<(usize, usize)>,
    pub momentum: f64,
    pub sampling: Sampling,
}

impl TrainingTrajectory {
    pub fn steps(&self) -> usize {
        self.batch_log.len()
    }

    pub fn final_state(&self) -> ModelState {
        ModelState {
            arch: self.arch.clone(),
            params: self.final_params.clone(),
        }
    }

    pub fn state_from(&self, params: &[f64]) -> ModelState {
        ModelState {
            arch: self.arch.clone(),
            params: params.to_vec(),
        }
    }

    pub fn checkpoint_state(&self, i: usize) -> ModelState {
        self.state_from(&self.checkpoints[i].params)
    }

    pub fn checkpoint_steps(&self) -> Vec<usize> {
        self.checkpoints.iter().map(|c| c.step).collect()
    }

    /// Step indices at which each stage ends (cumulative, last equals `T`).
    pub fn stage_ends(&self) -> Vec<usize> {
        let mut ends = Vec::new();
        for k in 1..=self.stage_log.len() {
            if k == self.stage_log.len() || self.stage_log[k] != self.stage_log[k - 1] {
                ends.push(k);
            }
        }
        ends
    }

    /// Stage whose rows contain union index `i`.
    pub fn stage_of(&self, i: usize) -> Option<usize> {
        self.stage_ranges.iter().position(|&(a, b)| (a..b).contains(&i))
    }

    /// Recomputes `θ_T` from `θ_0` and the logs.
    pub fn replay(&self, union: &Dataset) -> Result<Vec<f64>> {
        let run = execute(
            &self.arch,
            union,
            self.initial_params.clone(),
            &self.batch_log,
            &self.lr_log,
            &Replay {
                momentum: self.momentum,
                precond: PrecondSource::Logged(self.precond_log.as_deref()),
            },
            &|_| 1.0,
            &[],
            false,
        )?;
        Ok(run.final_params)
    }
}

struct Schedule {
    batches: Vec<Vec<u32>>,
    lrs: Vec<f64>,
    stage_log: Vec<u16>,
}

enum PrecondSource<'a> {
    Fresh(Preconditioner),
    Logged(Option<&'a [Vec<f64>]>),
}

struct Replay<'a> {
    momentum: f64,
    precond: PrecondSource<'a>,
}

struct RunOutput {
    final_params: Vec<f64>,
    checkpoints: Vec<Checkpoint>,
    precond_log: Option<Vec<Vec<f64>>>,
    full_param_log: Option<Vec<Vec<f64>>>,
}

/// Batches and learning rates for every step; depends only on sizes and the seed.
fn plan(stage_sizes: &[usize], cfg: &TrainConfig) -> Result<(Schedule, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batches = Vec::new();
    let mut stage_log = Vec::new();
    let mut epoch_ends = Vec::new();
    let mut offset = 0;
    for (s, &n) in stage_sizes.iter().enumerate() {
        let len = cfg
            .stage_lengths
            .as_ref()
            .map_or(cfg.length, |l| l[s]);
        let b = cfg.batch_size.min(n);
        let per_epoch = match cfg.sampling {
            Sampling::FullBatch => 1,
            _ => n.div_ceil(b),
        };
        let steps = match len {
            Length::Steps(t) => t,
            Length::Epochs(e) => e * per_epoch,
        };
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut cursor = n;
        for k in 0..steps {
            let batch: Vec<u32> = match cfg.sampling {
                Sampling::FullBatch => (0..n as u32).collect(),
                Sampling::WithReplacement => (0..b).map(|_| rng.random_range(0..n as u32)).collect(),
                Sampling::EpochShuffle => {
                    if cursor >= n {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    let end = (cursor + b).min(n);
                    let out = order[cursor..end].to_vec();
                    cursor = end;
                    out
                }
            };
            batches.push(batch.into_iter().map(|i| i + offset as u32).collect());
            stage_log.push(s as u16);
            if (k + 1) % per_epoch == 0 {
                epoch_ends.push(batches.len());
            }
        }
        offset += n;
    }
    let lrs = (0..batches.len()).map(|k| cfg.lr.at(k)).collect();
    Ok((
        Schedule {
            batches,
            lrs,
            stage_log,
        },
        epoch_ends,
    ))
}

#[allow(clippy::too_many_arguments)]
fn execute(
    arch: &Arch,
    ds: &Dataset,
    theta0: Vec<f64>,
    batches: &[Vec<u32>],
    lrs: &[f64],
    replay: &Replay,
    weight: &dyn Fn(usize) -> f64,
    checkpoint_steps: &[usize],
    record_params: bool,
) -> Result<RunOutput> {
    let d = theta0.len();
    let mut state = ModelState::new(arch.clone(), theta0)?;
    let mut velocity = vec![0.0; d];
    let mut second = vec![0.0; d];
    let mut precond_log = match replay.precond {
        PrecondSource::Fresh(Preconditioner::DiagonalAdaptive { .. }) => Some(Vec::new()),
        _ => None,
    };
    let mut full = record_params.then(Vec::new);
    let mut checkpoints = Vec::new();
    let mut next_ck = 0;
    let t_total = batches.len();
    let mut weights = Vec::new();
    let mut idx = Vec::new();
    for k in 0..=t_total {
        while next_ck < checkpoint_steps.len() && checkpoint_steps[next_ck] == k {
            checkpoints.push(Checkpoint {
                step: k,
                params: state.params.clone(),
            });
            next_ck += 1;
        }
        if k == t_total {
            break;
        }
        if let Some(f) = full.as_mut() {
            f.push(state.params.clone());
        }
        let batch = &batches[k];
        idx.clear();
        idx.extend(batch.iter().map(|&i| i as usize));
        weights.clear();
        weights.extend(idx.iter().map(|&i| weight(i)));
        let mut g = grad_sum(&state, ds, &idx, Some(&weights))?;
        let inv_b = 1.0 / batch.len() as f64;
        g.iter_mut().for_each(|x| *x *= inv_b);

        match &replay.precond {
            PrecondSource::Fresh(Preconditioner::DiagonalAdaptive { beta2, eps }) => {
                let bias = 1.0 - beta2.powi(k as i32 + 1);
                let p: Vec<f64> = second
                    .iter_mut()
                    .zip(&g)
                    .map(|(v, gi)| {
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        1.0 / ((*v / bias).sqrt() + eps)
                    })
                    .collect();
                g.iter_mut().zip(&p).for_each(|(gi, pi)| *gi *= pi);
                precond_log.as_mut().expect("allocated above").push(p);
            }
            PrecondSource::Logged(Some(log)) => {
                g.iter_mut().zip(&log[k]).for_each(|(gi, pi)| *gi *= pi);
            }
            _ => {}
        }

        let lr = lrs[k];
        if replay.momentum > 0.0 {
            for (v, gi) in velocity.iter_mut().zip(&g) {
                *v = replay.momentum * *v + gi;
            }
            for (p, v) in state.params.iter_mut().zip(&velocity) {
                *p -= lr * v;
            }
        } else {
            for (p, gi) in state.params.iter_mut().zip(&g) {
                *p -= lr * gi;
            }
        }
        let nrm = norm(&state.params);
        if !(nrm <= DIVERGENCE_NORM) {
            return Err(TdaError::Divergence { step: k, norm: nrm });
        }
    }
    Ok(RunOutput {
        final_params: state.params,
        checkpoints,
        precond_log,
        full_param_log: full,
    })
}

fn resolve_checkpoints(spec: &Checkpoints, t: usize, epoch_ends: &[usize]) -> Result<Vec<usize>> {
    let mut steps = match spec {
        Checkpoints::Steps(s) => {
            if let Some(&bad) = s.iter().find(|&&s| s > t) {
                return Err(TdaError::invalid(format!("checkpoint step {bad} beyond T = {t}")));
            }
            s.clone()
        }
        Checkpoints::Evenly(n) => (1..=*n)
            .map(|i| ((i * t) as f64 / *n as f64).round() as usize)
            .collect(),
        Checkpoints::EveryEpoch => epoch_ends.to_vec(),
    };
    steps.sort_unstable();
    steps.dedup();
    Ok(steps)
}

/// Trains on one dataset.
pub fn run(arch: &Arch, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainingTrajectory> {
    run_stages(arch, std::slice::from_ref(ds), cfg)
}

/// Trains sequentially on each dataset; stage `s` draws only from `stages[s]`.
/// Batch indices refer to the concatenation of all stages.
pub fn run_stages(arch: &Arch, stages: &[Dataset], cfg: &TrainConfig) -> Result<TrainingTrajectory> {
    cfg.validate()?;
    arch.validate()?;
    if stages.is_empty() {
        return Err(TdaError::invalid("no training stages"));
    }
    if let Some(l) = &cfg.stage_lengths {
        if l.len() != stages.len() {
            return Err(TdaError::invalid(format!(
                "{} stage lengths for {} stages",
                l.len(),
                stages.len()
            )));
        }
    }
    for ds in stages {
        arch.check_dataset(ds)?;
    }
    let union = union_of(stages)?;
    let sizes: Vec<usize> = stages.iter().map(Dataset::len).collect();
    let (sched, epoch_ends) = plan(&sizes, cfg)?;
    let ck = resolve_checkpoints(&cfg.checkpoints, sched.batches.len(), &epoch_ends)?;
    let theta0 = ModelState::init(arch.clone(), cfg.init, cfg.init_seed())?.params;
    let out = execute(
        arch,
        &union,
        theta0.clone(),
        &sched.batches,
        &sched.lrs,
        &Replay {
            momentum: cfg.momentum,
            precond: PrecondSource::Fresh(cfg.preconditioner),
        },
        &|_| 1.0,
        &ck,
        cfg.record_params,
    )?;
    let mut ranges = Vec::new();
    let mut start = 0;
    for n in sizes {
        ranges.push((start, start + n));
        start += n;
    }
    Ok(TrainingTrajectory {
        arch: arch.clone(),
        initial_params: theta0,
        final_params: out.final_params,
        checkpoints: out.checkpoints,
        batch_log: sched.batches,
        lr_log: sched.lrs,
        precond_log: out.precond_log,
        full_param_log: out.full_param_log,
        stage_log: sched.stage_log,
        stage_ranges: ranges,
        momentum: cfg.momentum,
        sampling: cfg.sampling,
    })
}

/// Concatenation of stage datasets in order.
pub fn union_of(stages: &[Dataset]) -> Result<Dataset> {
    let mut union = stages[0].clone();
    for s in &stages[1..] {
        union = union.concat(s)?;
    }
    Ok(union)
}

/// Final parameters after reweighting example `m` by `1 + ε` at every step it
/// is drawn, replaying the reference run's batches and preconditioners.
pub fn perturbed_run(traj: &TrainingTrajectory, union: &Dataset, m: usize, epsilon: f64) -> Result<ModelState> {
    if !(-1.0..=1.0).contains(&epsilon) {
        return Err(TdaError::invalid(format!("epsilon {epsilon} not in [-1, 1]")));
    }
    if m >= union.len() {
        return Err(TdaError::invalid(format!("example {m} out of range")));
    }
    let w = 1.0 + epsilon;
    let out = execute(
        &traj.arch,
        union,
        traj.initial_params.clone(),
        &traj.batch_log,
        &traj.lr_log,
        &Replay {
            momentum: traj.momentum,
            precond: PrecondSource::Logged(traj.precond_log.as_deref()),
        },
        &|i| if i == m { w } else { 1.0 },
        &[],
        false,
    )?;
    Ok(traj.state_from(&out.final_params))
}
