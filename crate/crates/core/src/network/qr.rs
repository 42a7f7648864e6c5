//! Tokens for the encoder-only baseline with QR preprocessing.
//!
//! With the thin factorisation `H = Q R` (R upper triangular with a
//! non-negative diagonal) the projected observation `y' = Q^T y` satisfies
//! `y' = R x + Q^T n`. Row `i` becomes the token `(y'_i, R_i, s_i)` where
//! `s_i = sum_j Q_ji^2 sigma_j^2` is the projected noise variance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[2 N_t, 2 N_t + 2]` QR tokens. Requires at least as many receive rows as columns.
pub fn qr_tokens(y: &DVector<f64>, h: &DMatrix<f64>, sigma2: &DVector<f64>) -> Result<Tensor> {
    let (rows, cols) = h.shape();
    if rows < cols {
        return Err(Error::Config(format!(
            "QR preprocessing needs at least as many receive rows as transmit dimensions, got {rows}x{cols}"
        )));
    }
    let qr = h.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..cols {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }
    let projected = q.transpose() * y;
    Ok(Tensor::from_fn(cols, cols + 2, |i, c| match c {
        0 => projected[i],
        c if c == cols + 1 => (0..rows).map(|j| q[(j, i)] * q[(j, i)] * sigma2[j]).sum(),
        c => r[(i, c - 1)],
    }))
}
