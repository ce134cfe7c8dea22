//! Datasets: synthesis, CSV ingestion, label corruption and LDS subset masks.

mod csv_load;
mod synth;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdaError};

pub use csv_load::{load_csv, CsvSchema};
pub use synth::{synth, synth_with, SynthKind, SynthOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

impl Task {
    pub fn classes(&self) -> Option<usize> {
        match self {
            Task::Regression => None,
            Task::Classification { classes } => Some(*classes),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Task::Classification { .. })
    }
}

/// A borrowed training or query example.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub x: &'a [f64],
    /// Regression target, or class index stored as an integer-valued float.
    pub y: f64,
}

impl Example<'_> {
    pub fn class(&self) -> usize {
        self.y as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
    domain_tags: Option<Vec<u32>>,
}

impl Dataset {
    /// Validates that the set is nonempty, rectangular and that labels are in range.
    pub fn new(
        name: impl Into<String>,
        task: Task,
        features: Vec<Vec<f64>>,
        targets: Vec<f64>,
        domain_tags: Option<Vec<u32>>,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(TdaError::invalid("dataset must be nonempty"));
        }
        if features.len() != targets.len() {
            return Err(TdaError::Dimension {
                context: "Dataset targets",
                expected: features.len(),
                got: targets.len(),
            });
        }
        let dim = features[0].len();
        if let Some(bad) = features.iter().position(|f| f.len() != dim) {
            return Err(TdaError::Dimension {
                context: "Dataset feature width",
                expected: dim,
                got: features[bad].len(),
            });
        }
        if let Some(tags) = &domain_tags {
            if tags.len() != features.len() {
                return Err(TdaError::Dimension {
                    context: "Dataset domain tags",
                    expected: features.len(),
                    got: tags.len(),
                });
            }
        }
        if features.iter().flatten().chain(&targets).any(|v| !v.is_finite()) {
            return Err(TdaError::invalid("dataset contains non-finite values"));
        }
        if let Task::Classification { classes } = task {
            if classes < 2 {
                return Err(TdaError::invalid("classification needs at least 2 classes"));
            }
            if let Some(y) = targets
                .iter()
                .find(|&&y| y < 0.0 || y.fract() != 0.0 || y >= classes as f64)
            {
                return Err(TdaError::invalid(format!(
                    "class label {y} outside [0, {classes})"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            task,
            features,
            targets,
            domain_tags,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        Example {
            x: &self.features[i],
            y: self.targets[i],
        }
    }

    pub fn examples(&self) -> impl Iterator<Item = Example<'_>> {
        (0..self.len()).map(|i| self.example(i))
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn domain_tags(&self) -> Option<&[u32]> {
        self.domain_tags.as_deref()
    }

    /// New dataset made of the given rows, in order (duplicates allowed).
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(TdaError::invalid(format!(
                "index {bad} out of range for dataset of {}",
                self.len()
            )));
        }
        Self::new(
            self.name.clone(),
            self.task,
            idx.iter().map(|&i| self.features[i].clone()).collect(),
            idx.iter().map(|&i| self.targets[i]).collect(),
            self.domain_tags
                .as_ref()
                .map(|t| idx.iter().map(|&i| t[i]).collect()),
        )
    }

    /// Rows whose domain tag is in `tags`.
    pub fn filter_domains(&self, tags: &[u32]) -> Result<Self> {
        let dt = self
            .domain_tags
            .as_ref()
            .ok_or_else(|| TdaError::invalid("dataset has no domain tags"))?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| tags.contains(&dt[i])).collect();
        self.select(&idx)
    }

    /// Deterministic split into (train, test) with `n_test` held-out rows.
    pub fn split(&self, n_test: usize, seed: u64) -> Result<(Self, Self)> {
        if n_test == 0 || n_test >= self.len() {
            return Err(TdaError::invalid(format!(
                "test size {n_test} must be in [1, {})",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm = index::sample(&mut rng, self.len(), self.len()).into_vec();
        let test = perm.split_off(self.len() - n_test);
        perm.sort_unstable();
        let mut test = test;
        test.sort_unstable();
        Ok((self.select(&perm)?, self.select(&test)?))
    }

    /// Concatenation of two datasets with matching task and width.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.task != other.task {
            return Err(TdaError::invalid("cannot concatenate datasets with different tasks"));
        }
        if self.dim() != other.dim() {
            return Err(TdaError::Dimension {
                context: "Dataset::concat",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let tags = match (&self.domain_tags, &other.domain_tags) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Self::new(
            format!("{}+{}", self.name, other.name),
            self.task,
            self.features.iter().chain(&other.features).cloned().collect(),
            self.targets.iter().chain(&other.targets).copied().collect(),
            tags,
        )
    }

    /// Standardizes features (and regression targets if `target`) to zero mean
    /// and unit population variance. Constant columns are only centered.
    pub fn standardize(&mut self, target: bool) {
        let n = self.len() as f64;
        for j in 0..self.dim() {
            let (mean, sd) = mean_sd(self.features.iter().map(|r| r[j]), n);
            for row in &mut self.features {
                row[j] = (row[j] - mean) / sd;
            }
        }
        if target && !self.task.is_classification() {
            let (mean, sd) = mean_sd(self.targets.iter().copied(), n);
            for y in &mut self.targets {
                *y = (*y - mean) / sd;
            }
        }
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone, n: f64) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

/// `⌈x⌉` tolerant of round-off just above an integer.
pub(crate) fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Replaces `⌈fraction·N⌉` targets: regression targets are redrawn from a
/// standard normal, class labels are moved uniformly to a different class.
/// Returns the altered indices in ascending order.
pub fn corrupt(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(TdaError::invalid(format!("corruption fraction {fraction} not in [0, 1]")));
    }
    let n = ds.len();
    let k = ceil_count(fraction * n as f64).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut altered = index::sample(&mut rng, n, k).into_vec();
    altered.sort_unstable();
    let mut out = ds.clone();
    for &i in &altered {
        out.targets[i] = match ds.task {
            Task::Regression => rng.sample(StandardNormal),
            Task::Classification { classes } => {
                let old = ds.targets[i] as usize;
                let shift = rng.random_range(1..classes);
                ((old + shift) % classes) as f64
            }
        };
    }
    Ok((out, altered))
}

/// Membership mask over the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMask {
    pub kept: Vec<bool>,
    pub alpha: f64,
}

impl SubsetMask {
    pub fn all(n: usize) -> Self {
        Self {
            kept: vec![true; n],
            alpha: 1.0,
        }
    }

    /// Mask keeping every index except those listed.
    pub fn without(n: usize, removed: &[usize]) -> Self {
        let mut kept = vec![true; n];
        for &i in removed {
            kept[i] = false;
        }
        let alpha = kept.iter().filter(|&&k| k).count() as f64 / n as f64;
        Self {
            kept,
            alpha,
        }
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.kept[i]
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.kept[i]).collect()
    }

    pub fn removed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.kept[i]).collect()
    }
}

/// `m` independent uniform subsets of size `⌈αN⌉`.
pub fn sample_subsets(n: usize, alpha: f64, m: usize, seed: u64) -> Result<Vec<SubsetMask>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(TdaError::invalid(format!("alpha {alpha} not in (0, 1)")));
    }
    if m == 0 {
        return Err(TdaError::invalid("number of subsets must be >= 1"));
    }
    let size = ceil_count(alpha * n as f64);
    if size == 0 {
        return Err(TdaError::invalid(format!(
            "alpha {alpha} keeps no points of {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..m)
        .map(|_| {
            let mut kept = vec![false; n];
            for i in index::sample(&mut rng, n, size) {
                kept[i] = true;
            }
            SubsetMask {
                kept,
                alpha,
            }
        })
        .collect())
}
