//! Orthogonal AMP with a de-correlated linear estimator and a
//! divergence-free constellation denoiser.
//!
//! Per iteration, with current estimate `x`, prior variance `v2` and
//! `N = 2 N_t`:
//!
//! ```text
//! W_hat = (H^T S^-1 H + I / v2)^-1 H^T S^-1         (= v2 H^T (v2 H H^T + S)^-1)
//! W     = N / tr(W_hat H) * W_hat                   (de-correlated: tr(W H) = N)
//! r     = x + W (y - H x)
//! tau2  = (tr(B B^T) v2 + tr(W S W^T)) / N,  B = I - W H
//! (m_i, p_i) = posterior mean/variance of axis i given r_i, tau2
//! v_post = mean(p_i)
//! v_ext  = 1 / (1 / v_post - 1 / tau2)
//! x      = v_ext (m / v_post - r / tau2),  v2 = v_ext
//! ```
//!
//! Starts from `x = 0`, `v2 = E_s`. LLRs come from the final denoiser. If
//! `tau2` rises three iterations in a row the run stops and the iterate with
//! the smallest `tau2` is returned with `diverged` set.

use nalgebra::{DMatrix, DVector};

use super::{DetectorMeta, DetectorOutput};
use crate::channel::{Constellation, MimoInstance};
use crate::error::{Error, Result};
use crate::tokenizer::{clamp_llr, hard_bits_from_llr};

pub const DEFAULT_OAMP_ITERATIONS: usize = 10;

const RISING_LIMIT: usize = 3;

pub fn oamp_detect(inst: &MimoInstance, iterations: usize) -> Result<DetectorOutput> {
    if iterations == 0 {
        return Err(Error::Config("OAMP needs at least one iteration".into()));
    }
    let c = Constellation::from_bits_per_axis(inst.bits_per_axis())?;
    let es = c.axis_energy();
    let (h, y, s) = (&inst.h, &inst.y, &inst.sigma2);
    let n = h.ncols();
    let nb = c.bits_per_axis();
    let ht_sinv = DMatrix::from_fn(n, h.nrows(), |i, j| h[(j, i)] / s[j]);
    let gram = &ht_sinv * h;

    let mut x = DVector::zeros(n);
    let mut v2 = es;
    let mut taus = Vec::with_capacity(iterations);
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    let mut last = DMatrix::zeros(n, nb);
    let mut rising = 0;
    let mut diverged = false;
    for _ in 0..iterations {
        let mut a = gram.clone();
        for i in 0..n {
            a[(i, i)] += 1.0 / v2;
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Config("OAMP normal matrix is not positive definite".into()))?;
        let w_hat = chol.solve(&ht_sinv);
        let w = &w_hat * (n as f64 / (&w_hat * h).trace());
        let r = &x + &w * (y - h * &x);
        let b = DMatrix::identity(n, n) - &w * h;
        let noise_part: f64 = (0..h.nrows())
            .map(|j| s[j] * w.column(j).norm_squared())
            .sum();
        let tau2 = ((b.norm_squared() * v2 + noise_part) / n as f64).max(1e-300);

        let mut mean = DVector::zeros(n);
        let mut var_sum = 0.0;
        for i in 0..n {
            let post = c.axis_posterior(r[i], tau2);
            mean[i] = post.mean;
            var_sum += post.variance;
            for (k, l) in post.llrs.iter().enumerate() {
                last[(i, k)] = clamp_llr(*l);
            }
        }
        if let Some(&prev) = taus.last() {
            rising = if tau2 > prev { rising + 1 } else { 0 };
        }
        taus.push(tau2);
        if best.as_ref().map_or(true, |(t, _)| tau2 < *t) {
            best = Some((tau2, last.clone()));
        }
        if rising >= RISING_LIMIT {
            diverged = true;
            break;
        }
        let v_post = var_sum / n as f64;
        if v_post < 1e-300 {
            break;
        }
        let v_ext = 1.0 / (1.0 / v_post - 1.0 / tau2);
        if v_ext.is_finite() && v_ext > 0.0 {
            x = (&mean / v_post - &r / tau2) * v_ext;
            v2 = v_ext.min(es);
        } else {
            x = mean;
            v2 = v_post.max(1e-300);
        }
    }
    let llrs = if diverged {
        best.map(|(_, l)| l).unwrap_or(last)
    } else {
        last
    };
    Ok(DetectorOutput {
        bits: hard_bits_from_llr(&llrs),
        llrs: Some(llrs),
        meta: DetectorMeta {
            iterations: taus.len(),
            residual_norms: taus,
            diverged,
        },
    })
}
