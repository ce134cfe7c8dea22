//! TOML experiment configuration.
//!
//! The global `seed` drives data generation, the training run (`train.seed`
//! is filled in from it) and every evaluation sweep. Methods are keyed by id;
//! a table whose key is a method name may omit `method`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tda_core::attribution::{Boundaries, GradMode, Projection, QWeight, SourceOptions, TrakOptions, Variant};
use tda_core::curvature::{Backend, FitOptions};
use tda_core::data::{load_csv, synth, synth_with, CsvSchema, Dataset, SynthKind, SynthOptions, Task};
use tda_core::model::{Arch, Head, Measurement};
use tda_core::persist::config_digest;
use tda_core::train::{union_of, TrainConfig};

/// Method names accepted in `[methods.*]`.
pub const METHODS: [&str; 6] = ["source", "if", "tracin", "repsim", "trak", "hydra"];

/// Raised for malformed invocations; maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; not part of the digest.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    /// Defaults to margin for classification and absolute error for regression.
    #[serde(default)]
    pub measurement: Option<Measurement>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub methods: BTreeMap<String, MethodSpec>,
    #[serde(default)]
    pub evaluation: EvalSpec,
    /// Directory relative dataset paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        generator: SynthKind,
        n: usize,
        #[serde(default)]
        options: Option<SynthOptions>,
        /// Standardize features, and the target for regression, before splitting.
        #[serde(default)]
        standardize: bool,
        /// Rows held out as queries; the training set doubles as the query set when 0.
        #[serde(default)]
        test: usize,
        /// Domain tags per training stage, for `rotated_domains`.
        #[serde(default)]
        stages: Option<Vec<Vec<u32>>>,
    },
    Csv {
        path: PathBuf,
        features: Vec<String>,
        target: String,
        task: Task,
        #[serde(default)]
        standardize: bool,
        #[serde(default)]
        test: usize,
    },
    Inline {
        task: Task,
        features: Vec<Vec<f64>>,
        targets: Vec<f64>,
        #[serde(default)]
        query_features: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        query_targets: Option<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub bias: bool,
    pub l2: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            bias: true,
            l2: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Source {
        /// Equal-length segments; ignored when `boundaries` or `by_stage` is set.
        #[serde(default = "three")]
        segments: usize,
        #[serde(default)]
        boundaries: Option<Vec<usize>>,
        #[serde(default)]
        by_stage: bool,
        #[serde(default = "exp")]
        variant: Variant,
        #[serde(default = "ekfac")]
        backend: Backend,
        #[serde(default = "checkpoints")]
        grad_mode: GradMode,
        #[serde(default)]
        fast: bool,
        #[serde(default)]
        max_fit_rows: Option<usize>,
    },
    If {
        damping: f64,
        #[serde(default = "ekfac")]
        backend: Backend,
    },
    Tracin {},
    Repsim {},
    Hydra {},
    Trak {
        #[serde(default = "proj_dim")]
        proj_dim: usize,
        #[serde(default = "gaussian")]
        projection: Projection,
        #[serde(default = "identity_q")]
        q: QWeight,
        /// Ensemble size; members after the first are retrained with derived seeds.
        #[serde(default = "one")]
        models: usize,
    },
}

fn three() -> usize {
    3
}
fn one() -> usize {
    1
}
fn proj_dim() -> usize {
    256
}
fn exp() -> Variant {
    Variant::Exp
}
fn ekfac() -> Backend {
    Backend::Ekfac
}
fn checkpoints() -> GradMode {
    GradMode::Checkpoints
}
fn gaussian() -> Projection {
    Projection::Gaussian
}
fn identity_q() -> QWeight {
    QWeight::Identity
}

impl MethodSpec {
    pub fn source_options(&self, seed: u64) -> Option<SourceOptions> {
        let MethodSpec::Source {
            segments,
            boundaries,
            by_stage,
            variant,
            backend,
            grad_mode,
            fast,
            max_fit_rows,
        } = self
        else {
            return None;
        };
        let boundaries = match (boundaries, by_stage) {
            (_, true) => Boundaries::Stages,
            (Some(ends), false) => Boundaries::Explicit(ends.clone()),
            (None, false) => Boundaries::Equal(*segments),
        };
        Some(SourceOptions {
            boundaries,
            variant: *variant,
            backend: *backend,
            grad_mode: *grad_mode,
            fast: *fast,
            fit: FitOptions {
                seed,
                ..FitOptions::default()
            },
            max_fit_rows: *max_fit_rows,
        })
    }

    pub fn trak_options(&self, seed: u64) -> Option<(TrakOptions, usize)> {
        match self {
            MethodSpec::Trak {
                proj_dim,
                projection,
                q,
                models,
            } => Some((
                TrakOptions {
                    proj_dim: *proj_dim,
                    seed,
                    projection: *projection,
                    q: q.clone(),
                },
                *models,
            )),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainerKind {
    /// Rerun the configured SGD training.
    Sgd,
    /// Closed-form ridge regression; linear regression models only.
    Ridge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub alphas: Vec<f64>,
    pub subsets: usize,
    pub retrainings: usize,
    pub bootstrap: usize,
    /// Cap on the number of query rows attributed and evaluated.
    pub queries: usize,
    /// Counterfactual removal sizes; the counterfactual test is skipped when empty.
    pub k_grid: Vec<usize>,
    pub screening_seeds: usize,
    pub counterfactual_seeds: usize,
    pub max_tests: usize,
    pub retrainer: RetrainerKind,
    /// Training indices checked by `oracle-check`.
    pub oracle_points: Vec<usize>,
    pub fd_step: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            alphas: vec![0.5],
            subsets: 50,
            retrainings: 10,
            bootstrap: tda_core::eval::BOOTSTRAP_RESAMPLES,
            queries: 200,
            k_grid: Vec::new(),
            screening_seeds: 5,
            counterfactual_seeds: 3,
            max_tests: 100,
            retrainer: RetrainerKind::Sgd,
            oracle_points: vec![0],
            fd_step: 1e-4,
        }
    }
}

/// Training stages, their union (row order of every score column) and the query rows.
#[derive(Clone, Debug)]
pub struct Data {
    pub stages: Vec<Dataset>,
    pub union: Dataset,
    pub queries: Dataset,
}

/// Fields that determine the training trajectory.
#[derive(Serialize)]
struct TrainKey<'a> {
    seed: u64,
    dataset: &'a DatasetSpec,
    model: &'a ModelSpec,
    train: &'a TrainConfig,
}

impl ExperimentConfig {
    /// Parses a config file; `seed` replaces the file's global seed.
    pub fn load(path: &Path, seed: Option<u64>) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, seed, base).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str, seed: Option<u64>, base_dir: PathBuf) -> anyhow::Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Usage(e.to_string()))?;
        if let Some(s) = seed {
            table.insert("seed".into(), toml::Value::Integer(s as i64));
        }
        let global = match table.get("seed") {
            None => 0,
            Some(toml::Value::Integer(s)) if *s >= 0 => *s,
            Some(other) => bail!(Usage(format!("seed must be a nonnegative integer, got {other}"))),
        };
        if let Some(toml::Value::Table(train)) = table.get_mut("train") {
            if train.contains_key("seed") {
                bail!(Usage("train.seed is taken from the global seed; remove it".into()));
            }
            train.insert("seed".into(), toml::Value::Integer(global));
        }
        if let Some(toml::Value::Table(methods)) = table.get_mut("methods") {
            for (id, spec) in methods.iter_mut() {
                if let toml::Value::Table(t) = spec {
                    if !t.contains_key("method") && METHODS.contains(&id.as_str()) {
                        t.insert("method".into(), toml::Value::String(id.clone()));
                    }
                }
            }
        }
        let mut cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Usage(e.to_string()))?;
        cfg.base_dir = base_dir;
        Ok(cfg)
    }

    /// SHA-256 over the canonical JSON form; independent of key order and of `out`.
    pub fn digest(&self) -> anyhow::Result<String> {
        Ok(config_digest(self)?)
    }

    pub fn train_digest(&self) -> anyhow::Result<String> {
        Ok(config_digest(&TrainKey {
            seed: self.seed,
            dataset: &self.dataset,
            model: &self.model,
            train: &self.train,
        })?)
    }

    pub fn out_dir(&self) -> anyhow::Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Usage("no output directory: set `out` in the config or pass --out".into()).into())
    }

    pub fn task(&self) -> Task {
        match &self.dataset {
            DatasetSpec::Synthetic { generator, .. } => match generator {
                SynthKind::QuadraticRegression => Task::Regression,
                SynthKind::TwoGaussians | SynthKind::RotatedDomains => Task::Classification { classes: 2 },
            },
            DatasetSpec::Csv { task, .. } | DatasetSpec::Inline { task, .. } => *task,
        }
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement.unwrap_or_else(|| Measurement::default_for(self.task()))
    }

    pub fn arch(&self, input_dim: usize) -> Arch {
        Arch {
            input_dim,
            hidden: self.model.hidden.clone(),
            head: Head::for_task(self.task()),
            bias: self.model.bias,
            l2: self.model.l2,
        }
    }

    /// Checks everything that can be checked without touching data or disk.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        self.measurement().check_head(Head::for_task(self.task()))?;
        let e = &self.evaluation;
        if let Some(a) = e.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            bail!(Usage(format!("evaluation.alphas must lie in (0, 1), got {a}")));
        }
        if e.queries == 0 {
            bail!(Usage("evaluation.queries must be >= 1".into()));
        }
        for (id, spec) in &self.methods {
            match spec {
                MethodSpec::If { damping, .. } if !(*damping > 0.0) => {
                    bail!(Usage(format!("methods.{id}: damping must be > 0")))
                }
                MethodSpec::Trak { models: 0, .. } => bail!(Usage(format!("methods.{id}: models must be >= 1"))),
                _ => {}
            }
        }
        Ok(())
    }

    /// Resolves `--method` against the configured ids; `None` selects all of them.
    pub fn select_methods(&self, names: Option<&[String]>) -> anyhow::Result<Vec<(String, MethodSpec)>> {
        let configured = || {
            let ids: Vec<&str> = self.methods.keys().map(String::as_str).collect();
            format!("configured: [{}]; method names: {}", ids.join(", "), METHODS.join(", "))
        };
        let chosen: Vec<(String, MethodSpec)> = match names {
            None => self.methods.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            Some(names) => names
                .iter()
                .map(|n| {
                    self.methods
                        .get(n)
                        .map(|spec| (n.clone(), spec.clone()))
                        .ok_or_else(|| Usage(format!("unknown method '{n}' ({})", configured())))
                })
                .collect::<Result<_, _>>()?,
        };
        if chosen.is_empty() {
            bail!(Usage(format!("no methods selected ({})", configured())));
        }
        Ok(chosen)
    }

    pub fn data(&self) -> anyhow::Result<Data> {
        let cap = self.evaluation.queries;
        let (stages, queries) = match &self.dataset {
            DatasetSpec::Synthetic {
                generator,
                n,
                options,
                standardize,
                test,
                stages,
            } => {
                let mut all = match options {
                    Some(o) => synth_with(*generator, n + test, self.seed, o)?,
                    None => synth(*generator, n + test, self.seed)?,
                };
                if *standardize {
                    all.standardize(!all.task.is_classification());
                }
                let (train, queries) = split(all, *test, self.seed)?;
                let stages = match stages {
                    None => vec![train],
                    Some(tags) => tags.iter().map(|t| train.filter_domains(t)).collect::<tda_core::Result<_>>()?,
                };
                (stages, queries)
            }
            DatasetSpec::Csv {
                path,
                features,
                target,
                task,
                standardize,
                test,
            } => {
                let schema = CsvSchema {
                    features: features.clone(),
                    target: target.clone(),
                    task: *task,
                    standardize: *standardize,
                };
                let (train, queries) = split(load_csv(self.base_dir.join(path), &schema)?, *test, self.seed)?;
                (vec![train], queries)
            }
            DatasetSpec::Inline {
                task,
                features,
                targets,
                query_features,
                query_targets,
            } => {
                let train = Dataset::new("inline", *task, features.clone(), targets.clone(), None)?;
                let queries = match (query_features, query_targets) {
                    (Some(x), Some(y)) => Dataset::new("inline_queries", *task, x.clone(), y.clone(), None)?,
                    (None, None) => train.clone(),
                    _ => bail!(Usage("query_features and query_targets must be given together".into())),
                };
                (vec![train], queries)
            }
        };
        let queries = if queries.len() > cap {
            queries.select(&(0..cap).collect::<Vec<_>>())?
        } else {
            queries
        };
        let union = union_of(&stages)?;
        Ok(Data { stages, union, queries })
    }
}

fn split(all: Dataset, test: usize, seed: u64) -> anyhow::Result<(Dataset, Dataset)> {
    if test == 0 {
        return Ok((all.clone(), all));
    }
    Ok(all.split(test, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        seed = 3
        [dataset]
        kind = "synthetic"
        generator = "quadratic_regression"
        n = 20
        [train]
        length = { steps = 4 }
        batch_size = 5
        lr = { type = "constant", lr = 0.05 }
        sampling = "epoch_shuffle"
        init = { type = "zeros" }
        checkpoints = { evenly = 2 }
        [methods.source]
        segments = 1
        [methods.damped]
        method = "source"
        variant = "damped_inverse"
    "#;

    #[test]
    fn parses_and_fills_seeds_and_method_names() {
        let cfg = ExperimentConfig::parse(BASE, None, PathBuf::new()).unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert!(matches!(cfg.methods["source"], MethodSpec::Source { segments: 1, .. }));
        assert!(matches!(cfg.methods["damped"], MethodSpec::Source { variant: Variant::DampedInverse, .. }));
        let over = ExperimentConfig::parse(BASE, Some(9), PathBuf::new()).unwrap();
        assert_eq!((over.seed, over.train.seed), (9, 9));
    }

    #[test]
    fn digest_ignores_key_order_and_output_dir() {
        let a = ExperimentConfig::parse(BASE, None, PathBuf::new()).unwrap();
        let moved = BASE.replace(
            "kind = \"synthetic\"\n        generator = \"quadratic_regression\"",
            "generator = \"quadratic_regression\"\n        kind = \"synthetic\"",
        );
        assert_ne!(moved, BASE);
        let mut b = ExperimentConfig::parse(&moved, None, PathBuf::new()).unwrap();
        b.out = Some("elsewhere".into());
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert_ne!(a.digest().unwrap(), ExperimentConfig::parse(BASE, Some(4), PathBuf::new()).unwrap().digest().unwrap());
    }

    #[test]
    fn unknown_keys_and_methods_are_usage_errors() {
        let typo = BASE.replace("batch_size", "batchsize");
        let err = ExperimentConfig::parse(&typo, None, PathBuf::new()).unwrap_err();
        assert!(err.downcast_ref::<Usage>().is_some());
        let cfg = ExperimentConfig::parse(BASE, None, PathBuf::new()).unwrap();
        let err = cfg.select_methods(Some(&["lissa".to_string()])).unwrap_err().to_string();
        assert!(err.contains("lissa") && err.contains("tracin"), "{err}");
        let seeded = BASE.replace("batch_size = 5", "batch_size = 5\n        seed = 1");
        assert!(ExperimentConfig::parse(&seeded, None, PathBuf::new()).is_err());
    }
}
