use super::Mat;
use crate::error::{Result, TdaError};

/// Largest Kronecker product (in entries) that will be materialized.
pub const KRON_LIMIT: usize = 100_000_000;

/// `a ⊗ b` in the standard block layout: block `(i, j)` is `a[i][j] · b`.
pub fn kron(a: &Mat, b: &Mat) -> Result<Mat> {
    let rows = a.rows().checked_mul(b.rows());
    let cols = a.cols().checked_mul(b.cols());
    let entries = rows.zip(cols).and_then(|(r, c)| r.checked_mul(c));
    let Some(entries) = entries.filter(|&e| e <= KRON_LIMIT) else {
        return Err(TdaError::Capacity {
            what: "kronecker product",
            requested: entries.unwrap_or(usize::MAX),
            limit: KRON_LIMIT,
            hint: "; apply the factors separately instead",
        });
    };
    debug_assert!(entries <= KRON_LIMIT);
    let (br, bc) = (b.rows(), b.cols());
    Ok(Mat::from_fn(a.rows() * br, a.cols() * bc, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    }))
}
