//! Generic forward and backward passes. Layer `l` stores an `out × (in + bias)`
//! row-major weight block with the bias as its last column.

use super::{Arch, Head, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub out: usize,
    pub input: usize,
    pub bias: bool,
    pub offset: usize,
}

impl LayerShape {
    /// Columns of the weight block including the bias column.
    pub fn cols(&self) -> usize {
        self.input + usize::from(self.bias)
    }

    pub fn len(&self) -> usize {
        self.out * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

pub(crate) struct Tape<T> {
    /// Input activation of each layer (no bias entry).
    pub inputs: Vec<Vec<T>>,
    /// Pre-activation output of each layer; the last one is the model output.
    pub pre: Vec<Vec<T>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &[T] {
        self.pre.last().expect("at least one layer")
    }
}

fn relu<T: Real>(s: T) -> T {
    if s.re() > 0.0 {
        s
    } else {
        T::cst(0.0)
    }
}

pub(crate) fn forward<T: Real>(arch: &Arch, params: &[T], x: &[f64]) -> Tape<T> {
    let shapes = arch.layer_shapes();
    let mut inputs = Vec::with_capacity(shapes.len());
    let mut pre = Vec::with_capacity(shapes.len());
    let mut a: Vec<T> = x.iter().map(|&v| T::cst(v)).collect();
    for (l, sh) in shapes.iter().enumerate() {
        let w = &params[sh.range()];
        let cols = sh.cols();
        let s: Vec<T> = (0..sh.out)
            .map(|o| {
                let row = &w[o * cols..(o + 1) * cols];
                let mut acc = if sh.bias { row[sh.input] } else { T::cst(0.0) };
                for (wi, ai) in row[..sh.input].iter().zip(&a) {
                    acc += *wi * *ai;
                }
                acc
            })
            .collect();
        let next = if l + 1 < shapes.len() {
            s.iter().map(|&v| relu(v)).collect()
        } else {
            Vec::new()
        };
        inputs.push(std::mem::replace(&mut a, next));
        pre.push(s);
    }
    Tape { inputs, pre }
}

/// Pre-activation gradients `∂/∂s_l` for every layer given `∂/∂output`.
pub(crate) fn backward<T: Real>(arch: &Arch, params: &[T], tape: &Tape<T>, dout: Vec<T>) -> Vec<Vec<T>> {
    let shapes = arch.layer_shapes();
    let mut ds: Vec<Vec<T>> = vec![Vec::new(); shapes.len()];
    let mut cur = dout;
    for l in (0..shapes.len()).rev() {
        let sh = &shapes[l];
        if l > 0 {
            let w = &params[sh.range()];
            let cols = sh.cols();
            let mut da = vec![T::cst(0.0); sh.input];
            for (o, &g) in cur.iter().enumerate() {
                let row = &w[o * cols..o * cols + sh.input];
                for (d, &wi) in da.iter_mut().zip(row) {
                    *d += wi * g;
                }
            }
            let prev = &tape.pre[l - 1];
            for (d, s) in da.iter_mut().zip(prev) {
                if s.re() <= 0.0 {
                    *d = T::cst(0.0);
                }
            }
            ds[l] = std::mem::replace(&mut cur, da);
        } else {
            ds[0] = std::mem::take(&mut cur);
        }
    }
    ds
}

/// Flat parameter gradient from pre-activation gradients: block `l` is `ds_l ⊗ [a; 1]`.
pub(crate) fn assemble<T: Real>(arch: &Arch, tape: &Tape<T>, ds: &[Vec<T>]) -> Vec<T> {
    let shapes = arch.layer_shapes();
    let mut g = vec![T::cst(0.0); arch.param_count()];
    for (l, sh) in shapes.iter().enumerate() {
        let block = &mut g[sh.range()];
        let cols = sh.cols();
        let a = &tape.inputs[l];
        for (o, &d) in ds[l].iter().enumerate() {
            let row = &mut block[o * cols..(o + 1) * cols];
            for (r, &ai) in row.iter_mut().zip(a) {
                *r = d * ai;
            }
            if sh.bias {
                row[sh.input] = d;
            }
        }
    }
    g
}

/// Data loss and its gradient with respect to the model output.
pub(crate) fn loss_head<T: Real>(head: Head, out: &[T], y: f64) -> (T, Vec<T>) {
    match head {
        Head::Regression => {
            let r = out[0] - T::cst(y);
            (T::cst(0.5) * r * r, vec![r])
        }
        Head::Classification { .. } => {
            let (lse, p) = log_softmax_parts(out);
            let c = y as usize;
            let mut d = p;
            d[c] = d[c] - T::cst(1.0);
            (lse - out[c], d)
        }
    }
}

/// `(logsumexp(z), softmax(z))`, shifted by the largest real part.
pub(crate) fn log_softmax_parts<T: Real>(z: &[T]) -> (T, Vec<T>) {
    let m = z.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<T> = z.iter().map(|&v| (v - T::cst(m)).exp()).collect();
    let mut sum = T::cst(0.0);
    for &v in &e {
        sum += v;
    }
    let p = e.into_iter().map(|v| v / sum).collect();
    (T::cst(m) + sum.ln(), p)
}
