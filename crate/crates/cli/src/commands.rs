//! Subcommand implementations. Output layout under the run directory:
//! `manifest.json`, `trajectory/`, `scores/<id>.{csv,tdac}`, `reports/`, `plots/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use tda_core::attribution::{hydra_scores, if_scores, repsim_scores, tracin_scores, trak_scores, AttributionMatrix, Source};
use tda_core::curvature::{self, FitOptions};
use tda_core::data::SubsetMask;
use tda_core::eval::{counterfactual, job_seed, lds, lds_ground_truth, CounterfactualCurve, CounterfactualOptions, LdsReport, RemovalRule};
use tda_core::persist::{load_scores, load_trajectory, save_scores, save_trajectory, write_scores_csv};
use tda_core::train::{run, run_stages, Retrainer, RidgeTrainer, SgdTrainer, TrainingTrajectory};
use tda_core::unroll::{fd_validate, max_rel_error};
use tda_core::TdaError;

use crate::config::{Data, ExperimentConfig, MethodSpec, RetrainerKind, Usage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    /// Digest of the fields that determine the trajectory.
    pub train_digest: String,
    pub steps: usize,
    pub checkpoints: Vec<String>,
    pub stage_rows: Vec<usize>,
    pub query_rows: usize,
    pub config: ExperimentConfig,
}

pub fn trajectory_dir(out: &Path) -> PathBuf {
    out.join("trajectory")
}

pub fn score_paths(out: &Path, id: &str) -> (PathBuf, PathBuf) {
    let dir = out.join("scores");
    (dir.join(format!("{id}.csv")), dir.join(format!("{id}.tdac")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e)).with_context(|| hint.to_string())?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn io_error(path: &Path, source: std::io::Error) -> TdaError {
    TdaError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Trains and persists the trajectory. All validation happens before the first write.
pub fn train(cfg: &ExperimentConfig) -> anyhow::Result<Manifest> {
    cfg.validate()?;
    let data = cfg.data()?;
    let arch = cfg.arch(data.union.dim());
    arch.validate()?;
    let out = cfg.out_dir()?;
    let t0 = Instant::now();
    let traj = if data.stages.len() == 1 {
        run(&arch, &data.union, &cfg.train)?
    } else {
        run_stages(&arch, &data.stages, &cfg.train)?
    };
    info!("trained {} steps in {:.2}s", traj.steps(), t0.elapsed().as_secs_f64());

    let digest = cfg.digest()?;
    save_trajectory(&trajectory_dir(out), &traj, &digest)?;
    let manifest = Manifest {
        config_digest: digest,
        train_digest: cfg.train_digest()?,
        steps: traj.steps(),
        checkpoints: traj.checkpoints.iter().map(|c| format!("trajectory/ckpt_{:06}.tdac", c.step)).collect(),
        stage_rows: data.stages.iter().map(|s| s.len()).collect(),
        query_rows: data.queries.len(),
        config: cfg.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Loads the trajectory written by [`train`], refusing one produced by a different training setup.
pub fn load_run(cfg: &ExperimentConfig) -> anyhow::Result<(TrainingTrajectory, Data)> {
    let out = cfg.out_dir()?;
    let manifest: Manifest = read_json(&out.join("manifest.json"), "no trajectory found; run `tda train` first")?;
    if manifest.train_digest != cfg.train_digest()? {
        bail!(Usage(format!(
            "trajectory in {} was trained under a different dataset/model/train setup; rerun `tda train`",
            out.display()
        )));
    }
    let (traj, _) = load_trajectory(&trajectory_dir(out))?;
    Ok((traj, cfg.data()?))
}

fn single_stage(data: &Data, what: &'static str) -> anyhow::Result<()> {
    if data.stages.len() > 1 {
        return Err(TdaError::Unsupported(what).into());
    }
    Ok(())
}

/// Scores for one configured method, stamped with the config digest.
pub fn scores_for(cfg: &ExperimentConfig, id: &str, spec: &MethodSpec, traj: &TrainingTrajectory, data: &Data) -> anyhow::Result<AttributionMatrix> {
    let f = cfg.measurement();
    let (union, queries) = (&data.union, &data.queries);
    let state = traj.final_state();
    let m = match spec {
        MethodSpec::Source { .. } => {
            let opts = spec.source_options(cfg.seed).expect("source spec");
            Source::plan(traj, union, &opts)?.score_matrix(union, queries, f)?
        }
        MethodSpec::If { damping, backend } => {
            let idx: Vec<usize> = (0..union.len()).collect();
            let opts = FitOptions {
                seed: cfg.seed,
                ..FitOptions::default()
            };
            let h = curvature::fit(*backend, std::slice::from_ref(&state), union, &idx, opts)?;
            if_scores(&state, &h, *damping, union, queries, f)?
        }
        MethodSpec::Tracin {} => tracin_scores(traj, union, queries, f)?,
        MethodSpec::Repsim {} => repsim_scores(&state, union, queries, f)?,
        MethodSpec::Hydra {} => hydra_scores(traj, union, queries, f)?,
        MethodSpec::Trak { .. } => {
            let (opts, models) = spec.trak_options(cfg.seed).expect("trak spec");
            let mut states = vec![state];
            if models > 1 {
                single_stage(data, "TRAK ensembles over multi-stage runs")?;
                let trainer = SgdTrainer::new(traj.arch.clone(), union.clone(), cfg.train.clone());
                for s in 1..models {
                    states.push(trainer.retrain(&SubsetMask::all(union.len()), job_seed(cfg.seed, 0, s))?);
                }
            }
            trak_scores(&states, union, queries, f, &opts)?
        }
    };
    let mut m = m.with_digest(cfg.digest()?);
    m.method = id.to_string();
    Ok(m)
}

/// Writes `scores/<id>.csv` and `scores/<id>.tdac` for every selected method.
pub fn attribute(cfg: &ExperimentConfig, methods: Option<&[String]>) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    let selected = cfg.select_methods(methods)?;
    let (traj, data) = load_run(cfg)?;
    let out = cfg.out_dir()?;
    fs::create_dir_all(out.join("scores")).map_err(|e| io_error(out, e))?;
    let mut written = Vec::new();
    for (id, spec) in &selected {
        let t0 = Instant::now();
        let m = scores_for(cfg, id, spec, &traj, &data).with_context(|| format!("method {id}"))?;
        let (csv, bin) = score_paths(out, id);
        write_scores_csv(&csv, &m)?;
        save_scores(&bin, &m)?;
        info!("{id}: {}x{} scores in {:.2}s", m.queries(), m.train_len(), t0.elapsed().as_secs_f64());
        written.push(csv);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdsEntry {
    #[serde(flatten)]
    pub report: LdsReport,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub alpha: f64,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualEntry {
    pub method: String,
    pub curve: CounterfactualCurve,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_digest: String,
    pub measurement: tda_core::model::Measurement,
    pub ground_truth: Vec<GroundTruthEntry>,
    pub lds: Vec<LdsEntry>,
    pub counterfactual: Vec<CounterfactualEntry>,
}

fn retrainer(cfg: &ExperimentConfig, traj: &TrainingTrajectory, data: &Data) -> anyhow::Result<Box<dyn Retrainer>> {
    single_stage(data, "retraining-based evaluation of multi-stage runs")?;
    Ok(match cfg.evaluation.retrainer {
        RetrainerKind::Sgd => Box::new(SgdTrainer::new(traj.arch.clone(), data.union.clone(), cfg.train.clone())),
        RetrainerKind::Ridge => {
            if !cfg.model.hidden.is_empty() {
                bail!(Usage("the ridge retrainer needs a linear model (model.hidden = [])".into()));
            }
            Box::new(RidgeTrainer::new(data.union.clone(), cfg.model.l2, cfg.model.bias)?)
        }
    })
}

/// Loads saved scores, warning when they came from a different config.
pub fn load_method_scores(cfg: &ExperimentConfig, id: &str) -> anyhow::Result<AttributionMatrix> {
    let out = cfg.out_dir()?;
    let (_, bin) = score_paths(out, id);
    let m = load_scores(&bin).with_context(|| format!("no scores for method {id}; run `tda attribute` first"))?;
    if m.config_digest != cfg.digest()? {
        warn!("scores for {id} were produced under config {}", m.config_digest);
    }
    Ok(m)
}

/// LDS for every alpha and method, plus counterfactual curves when `k_grid` is set.
pub fn evaluate(cfg: &ExperimentConfig, methods: Option<&[String]>) -> anyhow::Result<EvaluationReport> {
    cfg.validate()?;
    let selected = cfg.select_methods(methods)?;
    let (traj, data) = load_run(cfg)?;
    let scores = selected
        .iter()
        .map(|(id, _)| load_method_scores(cfg, id))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let retrainer = retrainer(cfg, &traj, &data)?;
    let (e, f) = (&cfg.evaluation, cfg.measurement());

    let mut report = EvaluationReport {
        config_digest: cfg.digest()?,
        measurement: f,
        ground_truth: Vec::new(),
        lds: Vec::new(),
        counterfactual: Vec::new(),
    };
    for (a, &alpha) in e.alphas.iter().enumerate() {
        let t0 = Instant::now();
        let gt = lds_ground_truth(retrainer.as_ref(), &data.queries, f, alpha, e.subsets, e.retrainings, job_seed(cfg.seed, a, 0))?;
        report.ground_truth.push(GroundTruthEntry {
            alpha,
            runtime_s: t0.elapsed().as_secs_f64(),
        });
        for m in &scores {
            let t0 = Instant::now();
            let r = lds(&gt, m, e.bootstrap, cfg.seed)?;
            info!("LDS {} alpha={alpha}: {:.4} [{:.4}, {:.4}]", r.method, r.mean, r.ci.0, r.ci.1);
            report.lds.push(LdsEntry {
                report: r,
                runtime_s: t0.elapsed().as_secs_f64(),
            });
        }
    }

    if !e.k_grid.is_empty() {
        let opts = CounterfactualOptions {
            k_grid: e.k_grid.clone(),
            screening_seeds: e.screening_seeds,
            seeds: e.counterfactual_seeds,
            max_tests: e.max_tests,
            seed: cfg.seed,
        };
        let rules = scores
            .iter()
            .map(|m| (m.method.clone(), RemovalRule::Scores(m, f)))
            .chain(std::iter::once(("random_same_class".to_string(), RemovalRule::RandomSameClass { seed: cfg.seed })));
        for (method, rule) in rules {
            let t0 = Instant::now();
            let curve = counterfactual(retrainer.as_ref(), &data.queries, rule, &opts)?;
            report.counterfactual.push(CounterfactualEntry {
                method,
                curve,
                runtime_s: t0.elapsed().as_secs_f64(),
            });
        }
    }

    let out = cfg.out_dir()?;
    write_json(&out.join("reports/evaluation.json"), &report)?;
    write_report_csvs(out, &report)?;
    Ok(report)
}

fn write_report_csvs(out: &Path, r: &EvaluationReport) -> anyhow::Result<()> {
    let mut lds_csv = format!("# config_digest={}\nmethod,alpha,lds,ci_low,ci_high,excluded,runtime_s\n", r.config_digest);
    for e in &r.lds {
        let l = &e.report;
        lds_csv += &format!("{},{},{},{},{},{},{:.3}\n", l.method, l.alpha, l.mean, l.ci.0, l.ci.1, l.excluded.len(), e.runtime_s);
    }
    let path = out.join("reports/lds.csv");
    fs::write(&path, lds_csv).map_err(|e| io_error(&path, e))?;
    if !r.counterfactual.is_empty() {
        let mut cf = format!("# config_digest={}\nmethod,k,fraction,tested\n", r.config_digest);
        for e in &r.counterfactual {
            for (k, frac) in e.curve.k_grid.iter().zip(&e.curve.fraction) {
                cf += &format!("{},{k},{frac},{}\n", e.method, e.curve.tested.len());
            }
        }
        let path = out.join("reports/counterfactual.csv");
        fs::write(&path, cf).map_err(|e| io_error(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceCheck {
    pub method: String,
    /// Max relative error of the method's total derivative against the unrolled one.
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePoint {
    pub train_index: usize,
    /// Unrolled total derivative against central finite differences.
    pub fd_rel_error: f64,
    pub source: Vec<SourceCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub config_digest: String,
    pub fd_step: f64,
    pub points: Vec<OraclePoint>,
    pub max_fd_rel_error: f64,
}

/// Checks the unrolled derivative against finite differences, and every
/// configured SOURCE method against the unrolled derivative.
pub fn oracle_check(cfg: &ExperimentConfig) -> anyhow::Result<OracleReport> {
    cfg.validate()?;
    let (traj, data) = load_run(cfg)?;
    let union = &data.union;
    let plans = cfg
        .methods
        .iter()
        .filter_map(|(id, spec)| spec.source_options(cfg.seed).map(|o| (id, o)))
        .map(|(id, o)| Ok((id.clone(), Source::plan(&traj, union, &o)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut points = Vec::new();
    for &m in &cfg.evaluation.oracle_points {
        if m >= union.len() {
            bail!(Usage(format!("oracle point {m} is outside the {} training rows", union.len())));
        }
        let fd = fd_validate(&traj, union, m, cfg.evaluation.fd_step)?;
        let source = plans
            .iter()
            .map(|(id, plan)| {
                Ok(SourceCheck {
                    method: id.clone(),
                    rel_error: max_rel_error(&plan.total_derivative(union, m)?, &fd.analytic),
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        points.push(OraclePoint {
            train_index: m,
            fd_rel_error: fd.max_rel_error,
            source,
        });
    }
    let report = OracleReport {
        config_digest: cfg.digest()?,
        fd_step: cfg.evaluation.fd_step,
        max_fd_rel_error: points.iter().map(|p| p.fd_rel_error).fold(0.0, f64::max),
        points,
    };
    write_json(&cfg.out_dir()?.join("reports/oracle_check.json"), &report)?;
    Ok(report)
}

pub fn load_evaluation(out: &Path) -> anyhow::Result<EvaluationReport> {
    read_json(&out.join("reports/evaluation.json"), "no evaluation report; run `tda evaluate` first")
}
