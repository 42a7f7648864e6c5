//! Monte-Carlo bit error rate estimation.
//!
//! Trial `t` at SNR `s` uses an instance drawn from the stream
//! `derive_seed(seed, s.to_bits(), t)`, so estimates do not depend on the
//! SNR grid, the chunking or the worker count.

use serde::{Deserialize, Serialize};

use super::stats::{wilson_interval, Z_95_TWO_SIDED};
use crate::baselines::Detector;
use crate::channel::{sample_instance, Constellation, MimoInstance, SystemDims};
use crate::error::{Error, Result};
use crate::rng::derived_rng;

/// Environment variable holding the worker thread count for evaluation.
pub const WORKERS_ENV: &str = "SGT_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Stop once this many bit errors are collected (and `min_bits` reached).
    pub min_errors: u64,
    /// Never stop before this many bits.
    #[serde(default)]
    pub min_bits: u64,
    /// Hard cap on trials per SNR point.
    pub max_trials: u64,
    /// Trials per detection call.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

fn default_chunk() -> usize {
    512
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_errors: 100,
            min_bits: 0,
            max_trials: 100_000,
            chunk: default_chunk(),
        }
    }
}

impl EvalConfig {
    /// Exactly `trials` trials regardless of the error count.
    pub fn fixed(trials: u64) -> Self {
        Self {
            min_errors: u64::MAX,
            min_bits: 0,
            max_trials: trials,
            chunk: default_chunk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerRecord {
    pub detector: String,
    pub snr_db: f64,
    pub errors: u64,
    pub bits: u64,
    pub trials: u64,
    pub ber: f64,
    /// Wilson 95% interval.
    pub ci_low: f64,
    pub ci_high: f64,
    /// The trial cap stopped the run before `min_errors` was reached.
    pub capped: bool,
}

impl BerRecord {
    pub fn new(detector: String, snr_db: f64, errors: u64, bits: u64, trials: u64, capped: bool) -> Self {
        let (ci_low, ci_high) = wilson_interval(errors, bits, Z_95_TWO_SIDED);
        Self {
            detector,
            snr_db,
            errors,
            bits,
            trials,
            ber: if bits == 0 { 0.0 } else { errors as f64 / bits as f64 },
            ci_low,
            ci_high,
            capped,
        }
    }
}

/// Worker count from [`WORKERS_ENV`], defaulting to the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// The instance used for trial `trial` at `snr_db`.
pub fn trial_instance(dims: SystemDims, c: &Constellation, snr_db: f64, seed: u64, trial: u64) -> MimoInstance {
    sample_instance(dims, c, snr_db, &mut derived_rng(seed, snr_db.to_bits(), trial))
}

pub fn count_bit_errors(detected: &nalgebra::DMatrix<u8>, truth: &nalgebra::DMatrix<u8>) -> u64 {
    detected.iter().zip(truth.iter()).filter(|(a, b)| a != b).count() as u64
}

/// BER of `detector` at each SNR point.
pub fn evaluate_ber(
    detector: &dyn Detector,
    dims: SystemDims,
    constellation: &Constellation,
    snrs: &[f64],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<BerRecord>> {
    if cfg.chunk == 0 || cfg.max_trials == 0 {
        return Err(Error::Config("evaluation needs positive chunk and max_trials".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let bits_per_trial = (dims.real_tx() * constellation.bits_per_axis()) as u64;
    let mut out = Vec::with_capacity(snrs.len());
    for &snr in snrs {
        let (mut errors, mut trials) = (0u64, 0u64);
        loop {
            let enough = errors >= cfg.min_errors && trials * bits_per_trial >= cfg.min_bits;
            if enough || trials >= cfg.max_trials {
                break;
            }
            let count = (cfg.chunk as u64).min(cfg.max_trials - trials);
            errors += pool.install(|| chunk_errors(detector, dims, constellation, snr, seed, trials, count))?;
            trials += count;
        }
        let capped = errors < cfg.min_errors && trials >= cfg.max_trials;
        out.push(BerRecord::new(
            detector.name(),
            snr,
            errors,
            trials * bits_per_trial,
            trials,
            capped,
        ));
    }
    Ok(out)
}

fn chunk_errors(
    detector: &dyn Detector,
    dims: SystemDims,
    c: &Constellation,
    snr: f64,
    seed: u64,
    start: u64,
    count: u64,
) -> Result<u64> {
    use rayon::prelude::*;
    let workers = rayon::current_num_threads() as u64;
    let per = count.div_ceil(workers).max(1);
    let parts: Vec<(u64, u64)> = (0..count)
        .step_by(per as usize)
        .map(|s| (start + s, per.min(count - s)))
        .collect();
    let totals = parts
        .into_par_iter()
        .map(|(from, len)| -> Result<u64> {
            let insts: Vec<_> = (from..from + len)
                .map(|t| trial_instance(dims, c, snr, seed, t))
                .collect();
            let outs = detector.detect_batch(&insts)?;
            Ok(outs
                .iter()
                .zip(&insts)
                .map(|(o, i)| count_bit_errors(&o.bits, &i.bits))
                .sum())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(totals.into_iter().sum())
}
