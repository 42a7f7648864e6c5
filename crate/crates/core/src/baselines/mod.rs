//! Reference detectors: exhaustive maximum likelihood, LMMSE and OAMP.
//!
//! All detectors work on the real-valued system `y = H x + n` with per-row
//! noise variances `sigma2`, and report LLRs as `log P(b=0) / P(b=1)`.

mod linear;
mod ml;
mod oamp;

use nalgebra::DMatrix;

pub use linear::{lmmse_detect, lmmse_estimate};
pub use ml::{ml_detect, ml_detect_exhaustive, ml_detect_soft, ML_CANDIDATE_LIMIT};
pub use oamp::{oamp_detect, DEFAULT_OAMP_ITERATIONS};

use crate::channel::MimoInstance;
use crate::error::Result;

/// Per-run diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectorMeta {
    /// Iterations run, or candidates visited for enumeration.
    pub iterations: usize,
    /// Per-iteration error variance (OAMP) or the optimal weighted residual (ML).
    pub residual_norms: Vec<f64>,
    /// Set when an iterative detector stopped on a rising error variance.
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    /// `[2 N_t, nb]` hard decisions in `{0, 1}`.
    pub bits: DMatrix<u8>,
    /// `[2 N_t, nb]` posterior LLRs when the detector is soft.
    pub llrs: Option<DMatrix<f64>>,
    pub meta: DetectorMeta,
}

/// A detector usable by the Monte-Carlo harness.
pub trait Detector: Sync {
    fn name(&self) -> String;

    fn detect(&self, inst: &MimoInstance) -> Result<DetectorOutput>;

    fn detect_batch(&self, insts: &[MimoInstance]) -> Result<Vec<DetectorOutput>> {
        insts.iter().map(|i| self.detect(i)).collect()
    }
}

/// Exhaustive search; `soft` adds max-log LLRs.
#[derive(Debug, Clone, Copy, Default)]
pub struct MlDetector {
    pub soft: bool,
}

impl Detector for MlDetector {
    fn name(&self) -> String {
        "ml".into()
    }

    fn detect(&self, inst: &MimoInstance) -> Result<DetectorOutput> {
        if self.soft {
            ml_detect_soft(inst)
        } else {
            ml_detect(inst)
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LmmseDetector;

impl Detector for LmmseDetector {
    fn name(&self) -> String {
        "lmmse".into()
    }

    fn detect(&self, inst: &MimoInstance) -> Result<DetectorOutput> {
        lmmse_detect(inst)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OampDetector {
    pub iterations: usize,
}

impl Default for OampDetector {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_OAMP_ITERATIONS,
        }
    }
}

impl Detector for OampDetector {
    fn name(&self) -> String {
        "oamp".into()
    }

    fn detect(&self, inst: &MimoInstance) -> Result<DetectorOutput> {
        oamp_detect(inst, self.iterations)
    }
}
