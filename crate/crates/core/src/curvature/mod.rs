//! Curvature backends: dense exact matrices, eigenvalue-corrected
//! Kronecker factors (EK-FAC) and a diagonal approximation.
//!
//! Layer weights are stored `out × (in + bias)` row-major, so a layer's
//! gradient block is `Ds ãᵀ` with `ã = [a; 1]` and its curvature block is
//! approximated by `S ⊗ A` with eigenbasis `Q_S ⊗ Q_A`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, TdaError};
use crate::linalg::{kron, sym_eig, EigenPair, Mat, SymMatrix};
use crate::model::{gnh, hessian, LayerShape, ModelState, PseudoGrad};

/// Largest layer block (`out · (in + bias)`) that EK-FAC will factor.
pub const LAYER_CAP: usize = 1_000_000;

const FIT_CHUNKS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Dense Gauss-Newton Hessian.
    ExactGnh,
    /// Dense Hessian from exact Hessian-vector products.
    ExactHessian,
    Ekfac,
    Diagonal,
}

impl std::str::FromStr for Backend {
    type Err = TdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_gnh" | "exact" => Ok(Self::ExactGnh),
            "exact_hessian" => Ok(Self::ExactHessian),
            "ekfac" => Ok(Self::Ekfac),
            "diagonal" => Ok(Self::Diagonal),
            other => Err(TdaError::invalid(format!("unknown curvature backend '{other}'"))),
        }
    }
}

/// Options shared by the sampled curvature fits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub pseudo_grad: PseudoGrad,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            pseudo_grad: PseudoGrad::Expected,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFactors {
    pub out: usize,
    pub cols: usize,
    pub offset: usize,
    /// Activation covariance `E[ã ãᵀ]`.
    pub a: SymMatrix,
    /// Pre-activation pseudo-gradient covariance `E[Ds Dsᵀ]`.
    pub s: SymMatrix,
    pub qa: EigenPair,
    pub qs: EigenPair,
    /// Corrected eigenvalues, index `p·cols + q` for basis vector `Q_S[:,p] ⊗ Q_A[:,q]`.
    pub corrected: Vec<f64>,
    pub sample_count: usize,
}

impl LayerFactors {
    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.out * self.cols
    }

    /// `Q_S diag(f(Λ)) Q_Aᵀ`-style application to a flat block.
    fn apply(&self, values: &[f64], v: &[f64]) -> Vec<f64> {
        let block = Mat::from_vec(self.out, self.cols, v.to_vec()).expect("block size");
        let qs = &self.qs.basis;
        let qa = &self.qa.basis;
        let mut rot = qs.transpose().matmul(&block).and_then(|m| m.matmul(qa)).expect("conformable");
        for (r, &f) in rot.as_mut_slice().iter_mut().zip(values) {
            *r *= f;
        }
        qs.matmul(&rot)
            .and_then(|m| m.matmul(&qa.transpose()))
            .expect("conformable")
            .into_vec()
    }

    /// Dense `(Q_S ⊗ Q_A) diag(values) (Q_S ⊗ Q_A)ᵀ`.
    fn dense_with(&self, values: &[f64]) -> Result<Mat> {
        let q = kron(&self.qs.basis, &self.qa.basis)?;
        let n = q.rows();
        let mut out = Mat::zeros(n, n);
        for (k, &lam) in values.iter().enumerate() {
            if lam != 0.0 {
                out.add_outer_upper(lam, &q.column(k));
            }
        }
        out.mirror_upper();
        Ok(out)
    }

    /// Eigenvalues of the plain Kronecker product `S ⊗ A`.
    pub fn kfac_values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.out * self.cols);
        for &s in &self.qs.values {
            for &a in &self.qa.values {
                v.push(s * a);
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KroneckerFactors {
    pub layers: Vec<LayerFactors>,
    /// Weight decay added to every eigenvalue.
    pub l2: f64,
    pub dim: usize,
}

impl KroneckerFactors {
    pub fn apply_fn(&self, f: &dyn Fn(f64) -> f64, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim, v)?;
        let mut out = vec![0.0; self.dim];
        for layer in &self.layers {
            let values = layer
                .corrected
                .iter()
                .map(|&c| {
                    let s = c + self.l2;
                    let y = f(s);
                    if y.is_finite() {
                        Ok(y)
                    } else {
                        Err(TdaError::Singular { eigenvalue: s })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let r = layer.range();
            out[r.clone()].copy_from_slice(&layer.apply(&values, &v[r]));
        }
        Ok(out)
    }

    /// Dense block-diagonal EK-FAC matrix.
    pub fn dense(&self) -> Result<Mat> {
        self.dense_from(|l| l.corrected.clone())
    }

    /// Dense block-diagonal K-FAC matrix `⊕_l S_l ⊗ A_l + l2·I`.
    pub fn dense_kfac(&self) -> Result<Mat> {
        self.dense_from(LayerFactors::kfac_values)
    }

    fn dense_from(&self, values: impl Fn(&LayerFactors) -> Vec<f64>) -> Result<Mat> {
        let mut m = Mat::zeros(self.dim, self.dim);
        for layer in &self.layers {
            let block = layer.dense_with(&values(layer))?;
            let r = layer.range();
            for (bi, i) in r.clone().enumerate() {
                for (bj, j) in r.clone().enumerate() {
                    m[(i, j)] = block[(bi, bj)];
                }
            }
        }
        for i in 0..self.dim {
            m[(i, i)] += self.l2;
        }
        Ok(m)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.corrected.iter())
            .fold(f64::INFINITY, |m, &c| m.min(c + self.l2))
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.corrected.iter())
            .fold(f64::NEG_INFINITY, |m, &c| m.max(c + self.l2))
    }
}

/// A fitted curvature estimate, immutable after construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "backend")]
pub enum CurvatureEstimate {
    Exact { matrix: SymMatrix, eig: EigenPair },
    Ekfac(KroneckerFactors),
    Diagonal { values: Vec<f64> },
}

fn check_len(d: usize, v: &[f64]) -> Result<()> {
    if v.len() != d {
        return Err(TdaError::Dimension {
            context: "curvature vector",
            expected: d,
            got: v.len(),
        });
    }
    Ok(())
}

impl CurvatureEstimate {
    pub fn exact(matrix: SymMatrix) -> Result<Self> {
        let eig = sym_eig(&matrix)?;
        Ok(Self::Exact { matrix, eig })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Exact { matrix, .. } => matrix.dim(),
            Self::Ekfac(k) => k.dim,
            Self::Diagonal { values } => values.len(),
        }
    }

    pub fn backend(&self) -> Backend {
        match self {
            Self::Exact { .. } => Backend::ExactGnh,
            Self::Ekfac(_) => Backend::Ekfac,
            Self::Diagonal { .. } => Backend::Diagonal,
        }
    }

    /// `f(H) v` in the backend's eigenbasis.
    pub fn apply_fn(&self, f: &dyn Fn(f64) -> f64, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), v)?;
        match self {
            Self::Exact { eig, .. } => eig.apply_fn(f, v),
            Self::Ekfac(k) => k.apply_fn(f, v),
            Self::Diagonal { values } => values
                .iter()
                .zip(v)
                .map(|(&s, &x)| {
                    let y = f(s);
                    if y.is_finite() {
                        Ok(y * x)
                    } else {
                        Err(TdaError::Singular { eigenvalue: s })
                    }
                })
                .collect(),
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Exact { matrix, .. } => {
                check_len(matrix.dim(), v)?;
                Ok(matrix.matvec(v))
            }
            _ => self.apply_fn(&|s| s, v),
        }
    }

    /// Spectrum bounds `(σ_min, σ_max)`.
    pub fn spectrum_bounds(&self) -> (f64, f64) {
        match self {
            Self::Exact { eig, .. } => (eig.min_value(), eig.max_value()),
            Self::Ekfac(k) => (k.min_eigenvalue(), k.max_eigenvalue()),
            Self::Diagonal { values } => values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        }
    }

    /// Diagonal of the represented matrix.
    pub fn diagonal(&self) -> Result<Vec<f64>> {
        match self {
            Self::Exact { matrix, .. } => Ok(matrix.as_mat().diag()),
            Self::Diagonal { values } => Ok(values.clone()),
            Self::Ekfac(k) => Ok(k.dense()?.diag()),
        }
    }
}

/// Fits one estimate from the mean over `states` (a segment's checkpoints).
pub fn fit(backend: Backend, states: &[ModelState], ds: &Dataset, idx: &[usize], opts: FitOptions) -> Result<CurvatureEstimate> {
    if states.is_empty() {
        return Err(TdaError::invalid("curvature fit needs at least one parameter state"));
    }
    match backend {
        Backend::ExactGnh | Backend::ExactHessian => {
            let mats = states
                .iter()
                .map(|s| match backend {
                    Backend::ExactGnh => gnh(s, ds, idx),
                    _ => hessian(s, ds, idx),
                })
                .collect::<Result<Vec<_>>>()?;
            CurvatureEstimate::exact(SymMatrix::mean(&mats)?)
        }
        Backend::Ekfac => Ok(CurvatureEstimate::Ekfac(average_ekfac(states, ds, idx, opts)?)),
        Backend::Diagonal => Ok(CurvatureEstimate::Diagonal {
            values: diagonal_fit(states, ds, idx, opts)?,
        }),
    }
}

fn example_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn chunked<T: Send>(
    idx: &[usize],
    init: impl Fn() -> T + Sync,
    body: impl Fn(&mut T, usize) -> Result<()> + Sync,
    merge: impl Fn(&mut T, T),
) -> Result<T> {
    let chunk = idx.len().div_ceil(FIT_CHUNKS).max(1);
    let parts: Vec<Result<T>> = idx
        .par_chunks(chunk)
        .map(|rows| {
            let mut acc = init();
            for &i in rows {
                body(&mut acc, i)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = init();
    for p in parts {
        merge(&mut total, p?);
    }
    Ok(total)
}

fn extended(a: &[f64], bias: bool) -> Vec<f64> {
    let mut v = a.to_vec();
    if bias {
        v.push(1.0);
    }
    v
}

fn check_caps(shapes: &[LayerShape]) -> Result<()> {
    for sh in shapes {
        if sh.len() > LAYER_CAP {
            return Err(TdaError::Capacity {
                what: "EK-FAC layer block",
                requested: sh.len(),
                limit: LAYER_CAP,
                hint: "; reduce layer width",
            });
        }
    }
    Ok(())
}

/// Activation and pseudo-gradient covariances `(A_l, S_l)` at one state.
fn covariances(state: &ModelState, ds: &Dataset, idx: &[usize], opts: FitOptions) -> Result<Vec<(Mat, Mat)>> {
    let shapes = state.arch.layer_shapes();
    let init = || {
        shapes
            .iter()
            .map(|sh| (Mat::zeros(sh.cols(), sh.cols()), Mat::zeros(sh.out, sh.out)))
            .collect::<Vec<_>>()
    };
    let mut acc = chunked(
        idx,
        init,
        |acc, i| {
            let mut rng = example_rng(opts.seed, i);
            let pg = state.layer_pseudo_grads(&ds.example(i), opts.pseudo_grad, &mut rng)?;
            for (l, sh) in shapes.iter().enumerate() {
                let a = extended(&pg.inputs[l], sh.bias);
                acc[l].0.add_outer_upper(1.0, &a);
                for (w, ds_l) in &pg.terms {
                    acc[l].1.add_outer_upper(*w, &ds_l[l]);
                }
            }
            Ok(())
        },
        |total, part| {
            for (t, p) in total.iter_mut().zip(part) {
                t.0 = t.0.add(&p.0).expect("same shape");
                t.1 = t.1.add(&p.1).expect("same shape");
            }
        },
    )?;
    let inv = 1.0 / idx.len() as f64;
    for (a, s) in &mut acc {
        a.mirror_upper();
        s.mirror_upper();
        *a = a.scale(inv);
        *s = s.scale(inv);
    }
    Ok(acc)
}

/// `E[((Q_S ⊗ Q_A)ᵀ vec DW)²]` per layer at one state, in a fixed basis.
fn corrected_values(
    state: &ModelState,
    ds: &Dataset,
    idx: &[usize],
    opts: FitOptions,
    bases: &[(EigenPair, EigenPair)],
) -> Result<Vec<Vec<f64>>> {
    let shapes = state.arch.layer_shapes();
    let init = || shapes.iter().map(|sh| vec![0.0; sh.len()]).collect::<Vec<_>>();
    let mut acc = chunked(
        idx,
        init,
        |acc, i| {
            let mut rng = example_rng(opts.seed, i);
            let pg = state.layer_pseudo_grads(&ds.example(i), opts.pseudo_grad, &mut rng)?;
            for (l, sh) in shapes.iter().enumerate() {
                let (qa, qs) = &bases[l];
                let a_rot = qa.basis.t_matvec(&extended(&pg.inputs[l], sh.bias));
                let a_sq: Vec<f64> = a_rot.iter().map(|x| x * x).collect();
                for (w, ds_l) in &pg.terms {
                    let s_rot = qs.basis.t_matvec(&ds_l[l]);
                    for (p, sp) in s_rot.iter().enumerate() {
                        let c = w * sp * sp;
                        if c == 0.0 {
                            continue;
                        }
                        let row = &mut acc[l][p * sh.cols()..(p + 1) * sh.cols()];
                        for (r, aq) in row.iter_mut().zip(&a_sq) {
                            *r += c * aq;
                        }
                    }
                }
            }
            Ok(())
        },
        |total, part| {
            for (t, p) in total.iter_mut().zip(part) {
                t.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
        },
    )?;
    let inv = 1.0 / idx.len() as f64;
    for v in &mut acc {
        v.iter_mut().for_each(|x| *x = (*x * inv).max(0.0));
    }
    Ok(acc)
}

/// EK-FAC at a single state.
pub fn ekfac_fit(state: &ModelState, ds: &Dataset, idx: &[usize], opts: FitOptions) -> Result<KroneckerFactors> {
    average_ekfac(std::slice::from_ref(state), ds, idx, opts)
}

/// EK-FAC averaged over states: the covariances are averaged and
/// eigendecomposed once, then the corrected eigenvalues of every state are
/// computed in that shared basis and averaged.
pub fn average_ekfac(states: &[ModelState], ds: &Dataset, idx: &[usize], opts: FitOptions) -> Result<KroneckerFactors> {
    let first = states
        .first()
        .ok_or_else(|| TdaError::invalid("EK-FAC averaging over an empty segment"))?;
    if idx.is_empty() {
        return Err(TdaError::invalid("EK-FAC fit over an empty batch"));
    }
    let shapes = first.arch.layer_shapes();
    check_caps(&shapes)?;
    let per_state = states
        .iter()
        .map(|s| covariances(s, ds, idx, opts))
        .collect::<Result<Vec<_>>>()?;
    let n = states.len() as f64;
    let mut layers = Vec::with_capacity(shapes.len());
    let mut bases = Vec::with_capacity(shapes.len());
    for (l, sh) in shapes.iter().enumerate() {
        let mut a = Mat::zeros(sh.cols(), sh.cols());
        let mut s = Mat::zeros(sh.out, sh.out);
        for cov in &per_state {
            a = a.add(&cov[l].0)?;
            s = s.add(&cov[l].1)?;
        }
        let a = SymMatrix::new(a.scale(1.0 / n))?;
        let s = SymMatrix::new(s.scale(1.0 / n))?;
        bases.push((sym_eig(&a)?, sym_eig(&s)?));
        layers.push((sh, a, s));
    }
    let mut corrected: Vec<Vec<f64>> = shapes.iter().map(|sh| vec![0.0; sh.len()]).collect();
    for st in states {
        let c = corrected_values(st, ds, idx, opts, &bases)?;
        for (acc, v) in corrected.iter_mut().zip(c) {
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b / n);
        }
    }
    let layers = layers
        .into_iter()
        .zip(bases)
        .zip(corrected)
        .map(|(((sh, a, s), (qa, qs)), corrected)| LayerFactors {
            out: sh.out,
            cols: sh.cols(),
            offset: sh.offset,
            a,
            s,
            qa,
            qs,
            corrected,
            sample_count: idx.len() * states.len(),
        })
        .collect();
    Ok(KroneckerFactors {
        layers,
        l2: first.arch.l2,
        dim: first.dim(),
    })
}

/// Mean over states of `E[Σ_c w_c g_c²] + l2`: the Gauss-Newton diagonal.
pub fn diagonal_fit(states: &[ModelState], ds: &Dataset, idx: &[usize], opts: FitOptions) -> Result<Vec<f64>> {
    let first = states
        .first()
        .ok_or_else(|| TdaError::invalid("diagonal fit over an empty segment"))?;
    let d = first.dim();
    let mut total = vec![0.0; d];
    for st in states {
        let acc = chunked(
            idx,
            || vec![0.0; d],
            |acc, i| {
                let mut rng = example_rng(opts.seed, i);
                for (w, g) in st.pseudo_grads(&ds.example(i), opts.pseudo_grad, &mut rng)? {
                    acc.iter_mut().zip(&g).for_each(|(a, x)| *a += w * x * x);
                }
                Ok(())
            },
            |t, p| t.iter_mut().zip(p).for_each(|(a, b)| *a += b),
        )?;
        let scale = 1.0 / (idx.len() as f64 * states.len() as f64);
        total.iter_mut().zip(acc).for_each(|(t, a)| *t += a * scale);
    }
    total.iter_mut().for_each(|t| *t += first.arch.l2);
    Ok(total)
}

/// Frobenius distances of K-FAC and EK-FAC to the exact Gauss-Newton Hessian.
pub fn kfac_vs_ekfac_error(state: &ModelState, ds: &Dataset, idx: &[usize]) -> Result<(f64, f64)> {
    let exact = gnh(state, ds, idx)?;
    let factors = ekfac_fit(state, ds, idx, FitOptions::default())?;
    let kfac = factors.dense_kfac()?.sub(exact.as_mat())?.frobenius();
    let ekfac = factors.dense()?.sub(exact.as_mat())?.frobenius();
    Ok((kfac, ekfac))
}
