use nalgebra::{DMatrix, DVector};

use super::{DetectorMeta, DetectorOutput};
use crate::channel::{Constellation, MimoInstance};
use crate::error::{Error, Result};
use crate::tokenizer::{clamp_llr, hard_bits_from_llr};

/// Linear MMSE estimate `x = (H^T S^-1 H + I / E_s)^-1 H^T S^-1 y` with
/// `S = diag(sigma2)` and `E_s` the per-axis symbol energy.
///
/// Soft output treats each estimate as the equivalent scalar channel
/// `x_i = mu_i s_i + e_i` with `mu_i = 1 - C_ii / E_s` (`C` the error
/// covariance), so `r_i = x_i / mu_i` sees noise variance `(1 - mu_i) E_s / mu_i`.
pub fn lmmse_detect(inst: &MimoInstance) -> Result<DetectorOutput> {
    let c = Constellation::from_bits_per_axis(inst.bits_per_axis())?;
    let es = c.axis_energy();
    let (x, cov) = lmmse_estimate(&inst.h, &inst.y, &inst.sigma2, es)?;
    let n = x.len();
    let nb = c.bits_per_axis();
    let mut llrs = DMatrix::zeros(n, nb);
    for i in 0..n {
        let mu = (1.0 - cov[(i, i)] / es).clamp(1e-12, 1.0);
        let tau2 = ((1.0 - mu) * es / mu).max(1e-300);
        let post = c.axis_posterior(x[i] / mu, tau2);
        for (k, l) in post.llrs.iter().enumerate() {
            llrs[(i, k)] = clamp_llr(*l);
        }
    }
    Ok(DetectorOutput {
        bits: hard_bits_from_llr(&llrs),
        llrs: Some(llrs),
        meta: DetectorMeta {
            iterations: 1,
            ..DetectorMeta::default()
        },
    })
}

/// Estimate and error covariance `(H^T S^-1 H + I / es)^-1` of the regularised linear inverse.
pub fn lmmse_estimate(
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma2: &DVector<f64>,
    es: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let inv_noise = sigma2.map(|s| 1.0 / s);
    let weighted = DMatrix::from_fn(h.nrows(), h.ncols(), |r, c| h[(r, c)] * inv_noise[r]);
    let mut gram = h.transpose() * &weighted;
    for i in 0..gram.nrows() {
        gram[(i, i)] += 1.0 / es;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Config("regularised normal matrix is not positive definite".into()))?;
    let x = chol.solve(&(weighted.transpose() * y));
    Ok((x, chol.inverse()))
}
