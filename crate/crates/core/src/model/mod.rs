//! Small differentiable models: linear and ReLU MLPs with squared-error or
//! softmax cross-entropy heads.
//!
//! The per-example loss is `ℒ(z, θ) = data_loss(z, θ) + (l2/2)‖θ‖²`, so
//! gradients, Hessian-vector products and the Gauss-Newton Hessian all carry
//! the weight-decay term. Measurements never include it.

mod dual;
mod net;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Task};
use crate::error::{Result, TdaError};
use crate::linalg::{axpy, Mat, SymMatrix};

pub use dual::{Dual, Real};
pub use net::LayerShape;

/// Dense curvature matrices are refused above this many parameters.
pub const DENSE_PARAM_LIMIT: usize = 5000;

/// `logit(1 − 1e-12)`: margins are clamped to this magnitude.
pub const MARGIN_CLAMP: f64 = 27.631021115871036;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Head {
    Regression,
    Classification { classes: usize },
}

impl Head {
    pub fn output_dim(&self) -> usize {
        match self {
            Head::Regression => 1,
            Head::Classification { classes } => *classes,
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => Head::Regression,
            Task::Classification { classes } => Head::Classification { classes },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub input_dim: usize,
    /// Widths of the ReLU hidden layers; empty for a linear model.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub head: Head,
    #[serde(default = "default_true")]
    pub bias: bool,
    /// Weight-decay coefficient inside the per-example loss.
    #[serde(default)]
    pub l2: f64,
}

fn default_true() -> bool {
    true
}

impl Arch {
    pub fn linear(input_dim: usize, head: Head, bias: bool) -> Self {
        Self {
            input_dim,
            hidden: Vec::new(),
            head,
            bias,
            l2: 0.0,
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, head: Head) -> Self {
        Self {
            input_dim,
            hidden,
            head,
            bias: true,
            l2: 0.0,
        }
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.output_dim());
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let sh = LayerShape {
                    out: w[1],
                    input: w[0],
                    bias: self.bias,
                    offset,
                };
                offset += sh.len();
                sh
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(TdaError::invalid("layer widths must be positive"));
        }
        if let Head::Classification { classes } = self.head {
            if classes < 2 {
                return Err(TdaError::invalid("classification head needs >= 2 classes"));
            }
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(TdaError::invalid("l2 must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.dim() != self.input_dim {
            return Err(TdaError::Dimension {
                context: "model input width",
                expected: self.input_dim,
                got: ds.dim(),
            });
        }
        if Head::for_task(ds.task) != self.head {
            return Err(TdaError::invalid(format!(
                "model head {:?} does not match dataset task {:?}",
                self.head, ds.task
            )));
        }
        Ok(())
    }
}

/// Parameter initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Init {
    Zeros,
    /// Weights `~ N(0, scale² / fan_in)`, biases zero.
    Normal { scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: Arch,
    pub params: Vec<f64>,
}

/// Measurement value plus whether the margin clamp was hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measured {
    pub value: f64,
    pub saturated: bool,
}

/// Per-layer capture of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    /// `(a_{l-1}, s_l)` for each layer, without the bias coordinate.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    /// Activation feeding the output layer (the input itself for linear models).
    pub last_hidden: Vec<f64>,
}

/// How output-space pseudo-gradients for curvature are generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum PseudoGrad {
    /// Exact expectation over the predictive distribution.
    Expected,
    /// `samples` targets drawn from the predictive distribution per example.
    Sampled { samples: usize },
}

impl Default for PseudoGrad {
    fn default() -> Self {
        PseudoGrad::Expected
    }
}

/// One pseudo-gradient: its weight, the capture inputs and `∂/∂s_l` per layer.
pub struct LayerPseudoGrads {
    pub inputs: Vec<Vec<f64>>,
    pub terms: Vec<(f64, Vec<Vec<f64>>)>,
}

impl ModelState {
    pub fn new(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(TdaError::Dimension {
                context: "ModelState params",
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(TdaError::Overflow("model parameters"));
        }
        Ok(Self { arch, params })
    }

    pub fn init(arch: Arch, init: Init, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.param_count()];
        if let Init::Normal { scale } = init {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for sh in arch.layer_shapes() {
                let std = scale / (sh.input as f64).sqrt();
                let block = &mut params[sh.range()];
                for o in 0..sh.out {
                    for i in 0..sh.input {
                        block[o * sh.cols() + i] = std * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        Self::new(arch, params)
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.arch.clone(), params)
    }

    fn check_example(&self, z: &Example) -> Result<()> {
        if z.x.len() != self.arch.input_dim {
            return Err(TdaError::Dimension {
                context: "example width",
                expected: self.arch.input_dim,
                got: z.x.len(),
            });
        }
        if let Head::Classification { classes } = self.arch.head {
            if z.y < 0.0 || z.y >= classes as f64 || z.y.fract() != 0.0 {
                return Err(TdaError::invalid(format!("label {} outside [0, {classes})", z.y)));
            }
        }
        Ok(())
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        net::forward(&self.arch, &self.params, x).output().to_vec()
    }

    pub fn predicted_class(&self, x: &[f64]) -> usize {
        let out = self.output(x);
        let mut best = 0;
        for (c, &v) in out.iter().enumerate() {
            if v > out[best] {
                best = c;
            }
        }
        best
    }

    pub fn is_correct(&self, z: &Example) -> bool {
        self.predicted_class(z.x) == z.class()
    }

    fn l2_term(&self) -> f64 {
        if self.arch.l2 == 0.0 {
            0.0
        } else {
            0.5 * self.arch.l2 * self.params.iter().map(|p| p * p).sum::<f64>()
        }
    }

    /// `ℒ(z, θ)` including the weight-decay term.
    pub fn loss(&self, z: &Example) -> Result<f64> {
        self.check_example(z)?;
        let tape = net::forward(&self.arch, &self.params, z.x);
        let (l, _) = net::loss_head(self.arch.head, tape.output(), z.y);
        finite(l + self.l2_term(), "loss")
    }

    /// `∇_θ ℒ(z, θ)` including the weight-decay term.
    pub fn grad_loss(&self, z: &Example) -> Result<Vec<f64>> {
        self.check_example(z)?;
        let tape = net::forward(&self.arch, &self.params, z.x);
        let (_, dout) = net::loss_head(self.arch.head, tape.output(), z.y);
        let mut g = self.backprop(&tape, dout);
        if self.arch.l2 != 0.0 {
            axpy(self.arch.l2, &self.params, &mut g);
        }
        finite_vec(g, "loss gradient")
    }

    fn backprop(&self, tape: &net::Tape<f64>, dout: Vec<f64>) -> Vec<f64> {
        let ds = net::backward(&self.arch, &self.params, tape, dout);
        net::assemble(&self.arch, tape, &ds)
    }

    /// `∇²_θ ℒ(z, θ) v`, exact, by forward-mode differentiation of the gradient.
    pub fn hvp(&self, z: &Example, v: &[f64]) -> Result<Vec<f64>> {
        self.check_example(z)?;
        if v.len() != self.dim() {
            return Err(TdaError::Dimension {
                context: "hvp direction",
                expected: self.dim(),
                got: v.len(),
            });
        }
        let p: Vec<Dual> = self
            .params
            .iter()
            .zip(v)
            .map(|(&a, &b)| Dual::new(a, b))
            .collect();
        let tape = net::forward(&self.arch, &p, z.x);
        let (_, dout) = net::loss_head(self.arch.head, tape.output(), z.y);
        let ds = net::backward(&self.arch, &p, &tape, dout);
        let g = net::assemble(&self.arch, &tape, &ds);
        let mut hv: Vec<f64> = g.iter().map(|d| d.du).collect();
        if self.arch.l2 != 0.0 {
            axpy(self.arch.l2, v, &mut hv);
        }
        finite_vec(hv, "Hessian-vector product")
    }

    pub fn measure(&self, f: Measurement, z: &Example) -> Result<f64> {
        let m = self.measure_detail(f, z)?;
        if m.saturated {
            log::warn!("margin saturated at |{}|; clamped", MARGIN_CLAMP);
        }
        Ok(m.value)
    }

    pub fn measure_detail(&self, f: Measurement, z: &Example) -> Result<Measured> {
        Ok(self.measure_with_grad(f, z, false)?.0)
    }

    pub fn grad_measure(&self, f: Measurement, z: &Example) -> Result<Vec<f64>> {
        Ok(self.measure_with_grad(f, z, true)?.1)
    }

    fn measure_with_grad(&self, f: Measurement, z: &Example, want_grad: bool) -> Result<(Measured, Vec<f64>)> {
        self.check_example(z)?;
        f.check_head(self.arch.head)?;
        let tape = net::forward(&self.arch, &self.params, z.x);
        let out = tape.output();
        let (value, dout, saturated) = match f {
            Measurement::Loss => {
                let (l, d) = net::loss_head(self.arch.head, out, z.y);
                (l, d, false)
            }
            Measurement::AbsoluteError => {
                let r = out[0] - z.y;
                let s = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (r.abs(), vec![s], false)
            }
            Measurement::Margin => {
                let c = z.class();
                let others: Vec<f64> = (0..out.len()).filter(|&k| k != c).map(|k| out[k]).collect();
                let (lse, p) = net::log_softmax_parts(&others);
                let m = out[c] - lse;
                if m.abs() > MARGIN_CLAMP {
                    (MARGIN_CLAMP.copysign(m), vec![0.0; out.len()], true)
                } else {
                    let mut d = vec![0.0; out.len()];
                    d[c] = 1.0;
                    let mut it = p.into_iter();
                    for (k, dk) in d.iter_mut().enumerate() {
                        if k != c {
                            *dk = -it.next().expect("softmax over others");
                        }
                    }
                    (m, d, false)
                }
            }
        };
        let value = finite(value, "measurement")?;
        let grad = if want_grad {
            finite_vec(self.backprop(&tape, dout), "measurement gradient")?
        } else {
            Vec::new()
        };
        Ok((Measured { value, saturated }, grad))
    }

    pub fn activations(&self, x: &[f64]) -> Capture {
        let tape = net::forward(&self.arch, &self.params, x);
        let last_hidden = tape.inputs.last().cloned().unwrap_or_default();
        Capture {
            layers: tape.inputs.into_iter().zip(tape.pre).collect(),
            last_hidden,
        }
    }

    /// Output-space factorization of the loss Hessian, `Σ_c w_c u_c u_cᵀ`.
    fn output_factors(&self, out: &[f64], mode: PseudoGrad, rng: &mut ChaCha8Rng) -> Vec<(f64, Vec<f64>)> {
        match (self.arch.head, mode) {
            (Head::Regression, PseudoGrad::Expected) => vec![(1.0, vec![1.0])],
            (Head::Regression, PseudoGrad::Sampled { samples }) => {
                let w = 1.0 / samples as f64;
                (0..samples)
                    .map(|_| (w, vec![rng.sample::<f64, _>(StandardNormal)]))
                    .collect()
            }
            (Head::Classification { .. }, PseudoGrad::Expected) => {
                let (_, p) = net::log_softmax_parts(out);
                (0..p.len())
                    .filter(|&c| p[c] > 0.0)
                    .map(|c| {
                        let mut u: Vec<f64> = p.iter().map(|&q| -q).collect();
                        u[c] += 1.0;
                        (p[c], u)
                    })
                    .collect()
            }
            (Head::Classification { .. }, PseudoGrad::Sampled { samples }) => {
                let (_, p) = net::log_softmax_parts(out);
                let w = 1.0 / samples as f64;
                (0..samples)
                    .map(|_| {
                        let c = sample_categorical(&p, rng);
                        let mut u = p.clone();
                        u[c] -= 1.0;
                        (w, u)
                    })
                    .collect()
            }
        }
    }

    /// Layerwise pseudo-gradients `∂/∂s_l` of the Gauss-Newton factorization.
    pub fn layer_pseudo_grads(&self, z: &Example, mode: PseudoGrad, rng: &mut ChaCha8Rng) -> Result<LayerPseudoGrads> {
        self.check_example(z)?;
        let tape = net::forward(&self.arch, &self.params, z.x);
        let factors = self.output_factors(tape.output(), mode, rng);
        let terms = factors
            .into_iter()
            .map(|(w, u)| (w, net::backward(&self.arch, &self.params, &tape, u)))
            .collect();
        Ok(LayerPseudoGrads {
            inputs: tape.inputs,
            terms,
        })
    }

    /// Flat pseudo-gradient vectors `(w_c, Jᵀu_c)` with `G_z = Σ_c w_c g_c g_cᵀ`.
    pub fn pseudo_grads(&self, z: &Example, mode: PseudoGrad, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, Vec<f64>)>> {
        self.check_example(z)?;
        let tape = net::forward(&self.arch, &self.params, z.x);
        let factors = self.output_factors(tape.output(), mode, rng);
        Ok(factors
            .into_iter()
            .map(|(w, u)| (w, self.backprop(&tape, u)))
            .collect())
    }
}

fn sample_categorical(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return c;
        }
    }
    p.len() - 1
}

fn finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TdaError::Overflow(what))
    }
}

fn finite_vec(v: Vec<f64>, what: &'static str) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(TdaError::Overflow(what))
    }
}

/// Scalar behaviour `f(z, θ)` being attributed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measurement {
    Loss,
    /// Log-odds of the correct class, `z_y − logsumexp(z_{c≠y})`.
    Margin,
    AbsoluteError,
}

impl Measurement {
    pub fn check_head(self, head: Head) -> Result<()> {
        match (self, head) {
            (Measurement::Margin, Head::Regression) => {
                Err(TdaError::invalid("margin measurement requires a classification head"))
            }
            (Measurement::AbsoluteError, Head::Classification { .. }) => {
                Err(TdaError::invalid("absolute_error measurement requires a regression head"))
            }
            _ => Ok(()),
        }
    }

    /// Sign turning "similar to the query" into "removal raises f": `+1` for
    /// error-like measurements, `−1` for the margin.
    pub fn removal_orientation(self) -> f64 {
        match self {
            Measurement::Loss | Measurement::AbsoluteError => 1.0,
            Measurement::Margin => -1.0,
        }
    }

    /// Natural measurement for a task: margin for classification, absolute error for regression.
    pub fn default_for(task: Task) -> Self {
        if task.is_classification() {
            Measurement::Margin
        } else {
            Measurement::AbsoluteError
        }
    }
}

impl std::str::FromStr for Measurement {
    type Err = TdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Self::Loss),
            "margin" => Ok(Self::Margin),
            "absolute_error" => Ok(Self::AbsoluteError),
            other => Err(TdaError::invalid(format!("unknown measurement '{other}'"))),
        }
    }
}

/// `Σ_i w_i ∇ℒ(z_i, θ)` over the listed rows (`w_i = 1` when `weights` is `None`).
pub fn grad_sum(state: &ModelState, ds: &Dataset, idx: &[usize], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; state.dim()];
    for (k, &i) in idx.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]);
        if w == 0.0 {
            continue;
        }
        let g = state.grad_loss(&ds.example(i))?;
        axpy(w, &g, &mut acc);
    }
    Ok(acc)
}

/// Mean Hessian-vector product over the listed rows.
pub fn mean_hvp(state: &ModelState, ds: &Dataset, idx: &[usize], v: &[f64]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; state.dim()];
    for &i in idx {
        let hv = state.hvp(&ds.example(i), v)?;
        axpy(1.0, &hv, &mut acc);
    }
    let inv = 1.0 / idx.len().max(1) as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

fn dense_guard(d: usize) -> Result<()> {
    if d > DENSE_PARAM_LIMIT {
        return Err(TdaError::Capacity {
            what: "dense curvature matrix",
            requested: d,
            limit: DENSE_PARAM_LIMIT,
            hint: "; use the ekfac backend",
        });
    }
    Ok(())
}

const GNH_CHUNKS: usize = 8;

/// Mean Gauss-Newton Hessian `(1/n) Σ_i w_i G_i + l2·I` over the listed rows,
/// using the expected output Hessian.
pub fn gnh_weighted(state: &ModelState, ds: &Dataset, idx: &[usize], weights: Option<&[f64]>) -> Result<SymMatrix> {
    let d = state.dim();
    dense_guard(d)?;
    if idx.is_empty() {
        return Err(TdaError::invalid("GNH of an empty batch"));
    }
    let chunk = idx.len().div_ceil(GNH_CHUNKS);
    // fixed chunking keeps the summation order independent of the thread count
    let partials: Vec<Result<Mat>> = idx
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, rows)| {
            let mut m = Mat::zeros(d, d);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for (k, &i) in rows.iter().enumerate() {
                let w = weights.map_or(1.0, |w| w[ci * chunk + k]);
                if w == 0.0 {
                    continue;
                }
                for (wc, g) in state.pseudo_grads(&ds.example(i), PseudoGrad::Expected, &mut rng)? {
                    m.add_outer_upper(w * wc, &g);
                }
            }
            Ok(m)
        })
        .collect();
    let mut total = Mat::zeros(d, d);
    for p in partials {
        total = total.add(&p?)?;
    }
    total.mirror_upper();
    let mut total = total.scale(1.0 / idx.len() as f64);
    for i in 0..d {
        total[(i, i)] += state.arch.l2;
    }
    SymMatrix::new(total)
}

pub fn gnh(state: &ModelState, ds: &Dataset, idx: &[usize]) -> Result<SymMatrix> {
    gnh_weighted(state, ds, idx, None)
}

/// Exact mean Hessian over the listed rows, assembled column by column from
/// Hessian-vector products.
pub fn hessian(state: &ModelState, ds: &Dataset, idx: &[usize]) -> Result<SymMatrix> {
    let d = state.dim();
    dense_guard(d)?;
    let cols: Vec<Result<Vec<f64>>> = (0..d)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            mean_hvp(state, ds, idx, &e)
        })
        .collect();
    let mut m = Mat::zeros(d, d);
    for (j, c) in cols.into_iter().enumerate() {
        for (i, v) in c?.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    // symmetrize round-off before validation
    let sym = m.add(&m.transpose())?.scale(0.5);
    SymMatrix::new(sym)
}

#[cfg(test)]
mod tests;
