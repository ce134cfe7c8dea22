use super::{run, Init, Sampling, TrainConfig};
use crate::data::{Dataset, SubsetMask, Task};
use crate::error::{Result, TdaError};
use crate::linalg::{sym_eig, Mat, SymMatrix};
use crate::model::{Arch, Head, ModelState};

/// Produces a trained model from a subset of the training set.
pub trait Retrainer: Sync {
    fn dataset(&self) -> &Dataset;

    /// Trains on the rows kept by `mask`; `seed` drives every source of randomness.
    fn retrain(&self, mask: &SubsetMask, seed: u64) -> Result<ModelState>;

    /// True when the result does not depend on `seed`.
    fn deterministic(&self) -> bool;
}

fn kept_subset(ds: &Dataset, mask: &SubsetMask) -> Result<Dataset> {
    if mask.len() != ds.len() {
        return Err(TdaError::Dimension {
            context: "subset mask",
            expected: ds.len(),
            got: mask.len(),
        });
    }
    let idx = mask.kept_indices();
    if idx.is_empty() {
        return Err(TdaError::invalid("subset keeps no training examples"));
    }
    ds.select(&idx)
}

/// Retraining with the SGD engine; the seed replaces both the batch and init seeds.
#[derive(Clone, Debug)]
pub struct SgdTrainer {
    pub arch: Arch,
    pub ds: Dataset,
    pub cfg: TrainConfig,
}

impl SgdTrainer {
    pub fn new(arch: Arch, ds: Dataset, cfg: TrainConfig) -> Self {
        let cfg = TrainConfig {
            record_params: false,
            checkpoints: super::Checkpoints::Steps(Vec::new()),
            ..cfg
        };
        Self { arch, ds, cfg }
    }
}

impl Retrainer for SgdTrainer {
    fn dataset(&self) -> &Dataset {
        &self.ds
    }

    fn retrain(&self, mask: &SubsetMask, seed: u64) -> Result<ModelState> {
        let sub = kept_subset(&self.ds, mask)?;
        let cfg = TrainConfig {
            seed,
            init_seed: None,
            ..self.cfg.clone()
        };
        Ok(run(&self.arch, &sub, &cfg)?.final_state())
    }

    fn deterministic(&self) -> bool {
        self.cfg.sampling == Sampling::FullBatch && self.cfg.init == Init::Zeros
    }
}

/// Trains on the kept rows with the configuration's own seeds.
pub fn retrain_without(arch: &Arch, ds: &Dataset, cfg: &TrainConfig, mask: &SubsetMask) -> Result<ModelState> {
    let sub = kept_subset(ds, mask)?;
    Ok(run(arch, &sub, cfg)?.final_state())
}

/// Ridge regression solved exactly: the minimiser of the mean squared-error
/// loss plus `(l2/2)‖θ‖²`, matching a linear [`Arch`] with the same `l2`.
#[derive(Clone, Debug)]
pub struct RidgeTrainer {
    pub ds: Dataset,
    pub arch: Arch,
}

impl RidgeTrainer {
    pub fn new(ds: Dataset, l2: f64, bias: bool) -> Result<Self> {
        if ds.task != Task::Regression {
            return Err(TdaError::invalid("ridge regression needs a regression dataset"));
        }
        if !(l2 > 0.0) {
            return Err(TdaError::invalid("ridge needs l2 > 0"));
        }
        let arch = Arch::linear(ds.dim(), Head::Regression, bias).with_l2(l2);
        Ok(Self { ds, arch })
    }

    pub fn solve(&self, rows: &Dataset) -> Result<ModelState> {
        let d = self.arch.param_count();
        let n = rows.len() as f64;
        let mut xtx = Mat::zeros(d, d);
        let mut xty = vec![0.0; d];
        let mut xt = vec![1.0; d];
        for z in rows.examples() {
            xt[..z.x.len()].copy_from_slice(z.x);
            xtx.add_outer_upper(1.0 / n, &xt);
            crate::linalg::axpy(z.y / n, &xt, &mut xty);
        }
        xtx.mirror_upper();
        let h = SymMatrix::new(xtx)?.add_diag(self.arch.l2);
        let params = sym_eig(&h)?.apply_fn(&|s| 1.0 / s, &xty)?;
        ModelState::new(self.arch.clone(), params)
    }
}

impl Retrainer for RidgeTrainer {
    fn dataset(&self) -> &Dataset {
        &self.ds
    }

    fn retrain(&self, mask: &SubsetMask, _seed: u64) -> Result<ModelState> {
        self.solve(&kept_subset(&self.ds, mask)?)
    }

    fn deterministic(&self) -> bool {
        true
    }
}
