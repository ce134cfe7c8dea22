//! Symmetric eigendecomposition by Householder tridiagonalization followed by
//! the implicit QL iteration (the classic `tred2`/`tql2` pair).

use serde::{Deserialize, Serialize};

use super::{dot, Mat, SymMatrix};
use crate::error::{Result, TdaError};

/// Eigenvalues with magnitude below this are snapped to exactly zero.
pub const EIG_CLAMP: f64 = 1e-12;

const MAX_QL_SWEEPS: usize = 60;

/// Orthogonal eigenbasis (columns of `basis`) and eigenvalues in descending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub basis: Mat,
    pub values: Vec<f64>,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `Q diag(Λ) Qᵀ`
    pub fn reconstruct(&self) -> Mat {
        self.reconstruct_with(&self.values)
    }

    fn reconstruct_with(&self, vals: &[f64]) -> Mat {
        let n = self.dim();
        let q = &self.basis;
        let mut out = Mat::zeros(n, n);
        for (k, &lam) in vals.iter().enumerate() {
            if lam == 0.0 {
                continue;
            }
            let col = q.column(k);
            out.add_outer_upper(lam, &col);
        }
        out.mirror_upper();
        out
    }

    /// Evaluates `f` on every eigenvalue, failing on the first non-finite result.
    pub fn spectrum_map(&self, f: &dyn Fn(f64) -> f64) -> Result<Vec<f64>> {
        self.values
            .iter()
            .map(|&s| {
                let v = f(s);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(TdaError::Singular { eigenvalue: s })
                }
            })
            .collect()
    }

    /// `Q f(Λ) Qᵀ v` without forming the matrix.
    pub fn apply_fn(&self, f: &dyn Fn(f64) -> f64, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(TdaError::Dimension {
                context: "EigenPair::apply_fn",
                expected: self.dim(),
                got: v.len(),
            });
        }
        let fv = self.spectrum_map(f)?;
        let mut coeffs = self.basis.t_matvec(v);
        for (c, s) in coeffs.iter_mut().zip(&fv) {
            *c *= s;
        }
        Ok(self.basis.matvec(&coeffs))
    }

    pub fn matrix_fn(&self, f: &dyn Fn(f64) -> f64) -> Result<SymMatrix> {
        let fv = self.spectrum_map(f)?;
        Ok(SymMatrix(self.reconstruct_with(&fv)))
    }

    pub fn min_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    pub fn max_value(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues come back in descending order (ties keep the solver's order),
/// values with `|σ| < 1e-12` are set to zero and each eigenvector is signed
/// so that its largest-magnitude component is positive.
pub fn sym_eig(m: &SymMatrix) -> Result<EigenPair> {
    let n = m.dim();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| m.as_mat().row(i).to_vec()).collect();
    if v.iter().flatten().any(|x| !x.is_finite()) {
        return Err(TdaError::Overflow("sym_eig input"));
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    if n == 1 {
        d[0] = v[0][0];
        v[0][0] = 1.0;
    } else {
        tred2(&mut v, &mut d, &mut e);
        tql2(&mut v, &mut d, &mut e)?;
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort: equal eigenvalues keep their relative order
    order.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).unwrap_or(std::cmp::Ordering::Equal));

    let mut basis = Mat::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (new_col, &old) in order.iter().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|r| v[r][old]).collect();
        let nrm = dot(&col, &col).sqrt();
        if nrm > 0.0 {
            col.iter_mut().for_each(|x| *x /= nrm);
        }
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (r, x) in col.into_iter().enumerate() {
            basis[(r, new_col)] = x;
        }
        let s = d[old];
        values.push(if s.abs() < EIG_CLAMP { 0.0 } else { s });
    }
    Ok(EigenPair { basis, values })
}

/// `Q f(Λ) Qᵀ` for symmetric `m`.
pub fn matrix_fn(m: &SymMatrix, f: &dyn Fn(f64) -> f64) -> Result<SymMatrix> {
    sym_eig(m)?.matrix_fn(f)
}

fn tred2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[n - 1][j];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in j + 1..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for row in v.iter_mut().take(i + 1) {
            row[i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

fn tql2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut sweeps = 0;
            loop {
                sweeps += 1;
                if sweeps > MAX_QL_SWEEPS {
                    return Err(TdaError::Overflow("symmetric QL iteration did not converge"));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        let hk = row[i + 1];
                        row[i + 1] = s * row[i] + c * hk;
                        row[i] = c * row[i] - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}
