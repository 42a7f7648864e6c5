//! Graph-aware tokenization of a detection instance.
//!
//! Each receive row `j` becomes a linear-constraint token `(y_j, h_j, sigma_j^2)`
//! of width `2 N_t + 2`; each real transmit dimension becomes a symbol-prior
//! token holding its `N_bits / 2` soft bits as probabilities.
//!
//! Probabilities are always `P(bit = 0)` so that they agree with the LLR
//! convention `LLR = log P(bit=0) / P(bit=1)`; `p = sigmoid(LLR)`.

use nalgebra::{DMatrix, DVector};

use crate::channel::MimoInstance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magnitude limit applied to every LLR leaving or entering the detector.
pub const LLR_MAX: f64 = 30.0;

/// Probability used for uninformative priors.
pub const UNINFORMATIVE_PRIOR: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    /// `[2 N_r, 2 N_t + 2]`: `y_j`, then row `j` of `H`, then `sigma_j^2`.
    pub lin: Tensor,
    /// `[2 N_t, N_bits / 2]` soft-bit priors in probability domain.
    pub sym: Tensor,
}

impl TokenSet {
    /// Recovers `(y, H, sigma2)` from the constraint tokens.
    pub fn reconstruct(&self) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let (rows, width) = (self.lin.rows(), self.lin.cols());
        let tx = width - 2;
        let y = DVector::from_fn(rows, |j, _| self.lin.get(j, 0));
        let h = DMatrix::from_fn(rows, tx, |j, c| self.lin.get(j, c + 1));
        let s = DVector::from_fn(rows, |j, _| self.lin.get(j, width - 1));
        (y, h, s)
    }
}

/// Builds the two token families. Without priors every symbol token is 0.5.
pub fn tokenize(inst: &MimoInstance, priors: Option<&DMatrix<f64>>) -> Result<TokenSet> {
    let (rx, tx) = (inst.h.nrows(), inst.h.ncols());
    let nb = inst.bits_per_axis();
    let width = tx + 2;
    let lin = Tensor::from_fn(rx, width, |j, c| match c {
        0 => inst.y[j],
        c if c == width - 1 => inst.sigma2[j],
        c => inst.h[(j, c - 1)],
    });
    let sym = match priors {
        None => Tensor::filled(&[tx, nb], UNINFORMATIVE_PRIOR),
        Some(p) => {
            if p.shape() != (tx, nb) {
                return Err(Error::Shape {
                    what: "prior matrix",
                    expected: (tx, nb),
                    actual: p.shape(),
                });
            }
            for r in 0..tx {
                for c in 0..nb {
                    let v = p[(r, c)];
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::PriorOutOfRange {
                            row: r,
                            col: c,
                            value: v,
                        });
                    }
                }
            }
            Tensor::from_fn(tx, nb, |r, c| p[(r, c)])
        }
    };
    Ok(TokenSet { lin, sym })
}

pub fn clamp_llr(llr: f64) -> f64 {
    if llr.is_nan() {
        0.0
    } else {
        llr.clamp(-LLR_MAX, LLR_MAX)
    }
}

/// `P(bit = 0)` from an LLR, after clamping to `±LLR_MAX`.
pub fn llr_to_prob_scalar(llr: f64) -> f64 {
    let l = clamp_llr(llr);
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// LLR from `P(bit = 0)`, clamped to `±LLR_MAX`.
pub fn prob_to_llr_scalar(p: f64) -> f64 {
    clamp_llr(p.ln() - (-p).ln_1p())
}

pub fn llr_to_prob(llr: &DMatrix<f64>) -> DMatrix<f64> {
    llr.map(llr_to_prob_scalar)
}

pub fn prob_to_llr(prob: &DMatrix<f64>) -> DMatrix<f64> {
    prob.map(prob_to_llr_scalar)
}

/// Hard decisions from `P(bit = 0)` probabilities (ties go to bit 0).
pub fn hard_bits_from_prob(prob: &DMatrix<f64>) -> DMatrix<u8> {
    prob.map(|p| u8::from(p < 0.5))
}

/// Hard decisions from LLRs (ties go to bit 0).
pub fn hard_bits_from_llr(llr: &DMatrix<f64>) -> DMatrix<u8> {
    llr.map(|l| u8::from(l < 0.0))
}
