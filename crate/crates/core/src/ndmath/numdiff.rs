//! Central-difference derivative estimates, used as test oracles.

use nalgebra::DMatrix;

use super::DenseArray;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient of a scalar function by central differences; same shape as `x`.
pub fn finite_diff_grad<F>(f: F, x: &DenseArray, h: f64) -> Result<DenseArray>
where
    F: Fn(&DenseArray) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Argument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = DenseArray::zeros(x.shape());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = f(&probe);
        probe.data_mut()[i] = x0 - h;
        let fm = f(&probe);
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("function is non-finite near coordinate {i}")));
        }
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}

/// Jacobian `J[i][j] = d f_i / d x_j` as an `out x in` matrix.
pub fn numeric_jacobian<F>(f: F, x: &DenseArray, h: f64) -> Result<DenseArray>
where
    F: Fn(&DenseArray) -> DenseArray,
{
    if h <= 0.0 {
        return Err(Error::Argument(format!("step must be positive, got {h}")));
    }
    let n_in = x.len();
    let mut probe = x.clone();
    let mut cols = Vec::with_capacity(n_in);
    for j in 0..n_in {
        let x0 = x.data()[j];
        probe.data_mut()[j] = x0 + h;
        let fp = f(&probe);
        probe.data_mut()[j] = x0 - h;
        let fm = f(&probe);
        probe.data_mut()[j] = x0;
        if !fp.all_finite() || !fm.all_finite() {
            return Err(Error::Numeric(format!("function is non-finite near coordinate {j}")));
        }
        cols.push(
            fp.data()
                .iter()
                .zip(fm.data())
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let n_out = cols.first().map_or(0, Vec::len);
    let mut jac = DenseArray::zeros(&[n_out, n_in]);
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            jac.set(i, j, *v);
        }
    }
    Ok(jac)
}

/// `ln |det M|` of a square matrix via LU decomposition.
pub fn log_abs_det(m: &DenseArray) -> Result<f64> {
    let (r, c) = (m.rows(), m.cols());
    if r != c {
        return Err(Error::Shape(format!("determinant of a {r}x{c} matrix")));
    }
    let mat = DMatrix::from_row_slice(r, c, m.data());
    Ok(mat.lu().determinant().abs().ln())
}
