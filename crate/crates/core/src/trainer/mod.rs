//! Training on freshly simulated channel instances.
//!
//! Every step draws a new batch: Rayleigh channel, uniform bits, and an SNR
//! drawn uniformly from the configured range per instance. A fraction of the
//! instances get informative priors that mimic decoder feedback: for each
//! bit the prior LLR is `mu * s + sqrt(2 mu) * n` with `s = +1` for bit 0 and
//! `-1` for bit 1, `n ~ N(0, 1)` and `mu ~ U[0, prior_reliability_max]`.
//! The rest see uninformative 0.5 priors. The loss is the mean bitwise
//! binary cross-entropy against `P(bit = 0)` targets; parameters follow Adam
//! with a linear warm-up and cosine decay.

mod eval;
pub mod stats;

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use eval::{
    count_bit_errors, evaluate_ber, trial_instance, worker_count, BerRecord, EvalConfig, WORKERS_ENV,
};

use crate::channel::{sample_instance, MimoInstance};
use crate::error::{Error, Result};
use crate::network::{bit_targets, SgtModel};
use crate::rng::derived_rng;
use crate::tokenizer::TokenSet;
use crate::tensor::{Tensor, BCE_CLAMP};
use crate::tokenizer::llr_to_prob_scalar;

const TRAIN_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_final_lr_fraction() -> f64 {
    0.05
}
fn default_prior_reliability_max() -> f64 {
    12.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub snrs: Vec<f64>,
    pub trials: u64,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Cosine decay ends at `learning_rate * final_lr_fraction`.
    #[serde(default = "default_final_lr_fraction")]
    pub final_lr_fraction: f64,
    /// Inclusive SNR range in dB, sampled uniformly per instance.
    pub snr_range: (f64, f64),
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Steps between parameter snapshots (restored on a non-finite loss).
    pub checkpoint_every: usize,
    /// Fraction of training instances given informative priors.
    #[serde(default)]
    pub informative_fraction: f64,
    #[serde(default = "default_prior_reliability_max")]
    pub prior_reliability_max: f64,
    #[serde(default)]
    pub validation: Option<ValidationConfig>,
}

impl TrainConfig {
    /// Desk-scale defaults: batch 128, 20k steps, lr 1e-3, SNR in [0, 15] dB.
    pub fn new(seed: u64) -> Self {
        Self {
            batch_size: 128,
            steps: 20_000,
            learning_rate: 1e-3,
            warmup_steps: 500,
            final_lr_fraction: default_final_lr_fraction(),
            snr_range: (0.0, 15.0),
            seed,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip: Some(1.0),
            checkpoint_every: 500,
            informative_fraction: 0.0,
            prior_reliability_max: default_prior_reliability_max(),
            validation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.snr_range.0 < self.snr_range.1) {
            return bad("snr_range must be a non-degenerate interval");
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("learning rate must be positive and final_lr_fraction in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.informative_fraction) || !(self.prior_reliability_max >= 0.0) {
            return bad("informative_fraction must be in [0, 1] and prior_reliability_max non-negative");
        }
        if let Some(v) = &self.validation {
            if v.every == 0 || v.trials == 0 || v.snrs.is_empty() {
                return bad("validation needs snrs, trials and every");
            }
        }
        Ok(())
    }

    /// Learning rate used at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps.min(self.steps)).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = base * self.final_lr_fraction;
        floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Mean bitwise binary cross-entropy of `P(bit = 0)` predictions against hard bits.
pub fn loss(pred: &Tensor, bits: &DMatrix<u8>) -> Result<f64> {
    if (pred.rows(), pred.cols()) != bits.shape() {
        return Err(Error::Shape {
            what: "loss prediction",
            expected: bits.shape(),
            actual: (pred.rows(), pred.cols()),
        });
    }
    let total: f64 = (0..pred.rows())
        .flat_map(|r| (0..pred.cols()).map(move |c| (r, c)))
        .map(|(r, c)| {
            let p = pred.get(r, c).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if bits[(r, c)] == 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Adam state for every tensor of a parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: i32,
}

impl Adam {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Where training instances come from.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// A new batch is simulated every step.
    Fresh,
    /// Cycles through a fixed set in order.
    Fixed(&'a [MimoInstance]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub snr_db: f64,
    pub ber: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
    /// Excluded from equality and from the CSV so logs are reproducible.
    pub wall_clock_secs: f64,
}

impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps && self.validation == other.validation
    }
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Trailing moving average of the loss over `window` steps (shorter at the start).
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let mut out = Vec::with_capacity(self.steps.len());
        let mut acc = 0.0;
        for (i, s) in self.steps.iter().enumerate() {
            acc += s.loss;
            if i >= window {
                acc -= self.steps[i - window].loss;
            }
            out.push(acc / (i + 1).min(window) as f64);
        }
        out
    }

    /// Mean loss over the last `window` steps.
    pub fn final_window_loss(&self, window: usize) -> Option<f64> {
        let n = self.steps.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        Some(self.steps[n - w..].iter().map(|s| s.loss).sum::<f64>() / w as f64)
    }

    /// First step count whose trailing `window` average is at or below `target`.
    pub fn steps_to_reach(&self, target: f64, window: usize) -> Option<usize> {
        let window = window.max(1);
        self.smoothed(window)
            .iter()
            .enumerate()
            .skip(window - 1)
            .find(|(_, &l)| l <= target)
            .map(|(i, _)| i + 1)
    }

    /// CSV with columns `step,loss,lr,val_ber@<snr>...`; validation cells are
    /// empty on steps without a validation pass.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut snrs: Vec<f64> = Vec::new();
        for v in &self.validation {
            if !snrs.contains(&v.snr_db) {
                snrs.push(v.snr_db);
            }
        }
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "loss".into(), "lr".into()];
        header.extend(snrs.iter().map(|s| format!("val_ber@{s}")));
        wtr.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![s.step.to_string(), s.loss.to_string(), s.lr.to_string()];
            for snr in &snrs {
                let cell = self
                    .validation
                    .iter()
                    .find(|v| v.step == s.step && v.snr_db == *snr)
                    .map(|v| v.ber.to_string())
                    .unwrap_or_default();
                row.push(cell);
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Optional side effects of [`train_with`].
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Written at every snapshot.
    pub checkpoint_path: Option<PathBuf>,
    /// Print a progress line every this many steps.
    pub progress_every: Option<usize>,
}

/// Priors for one instance: `None` (uninformative) or `P(bit = 0)` per bit.
pub fn sample_priors<R: Rng + ?Sized>(
    bits: &DMatrix<u8>,
    informative_fraction: f64,
    reliability_max: f64,
    rng: &mut R,
) -> Option<DMatrix<f64>> {
    if informative_fraction <= 0.0 || rng.gen::<f64>() >= informative_fraction {
        return None;
    }
    let mu = rng.gen::<f64>() * reliability_max;
    Some(bits.map(|b| {
        let sign = if b == 0 { 1.0 } else { -1.0 };
        let n: f64 = rng.sample(StandardNormal);
        llr_to_prob_scalar(mu * sign + (2.0 * mu).sqrt() * n)
    }))
}

fn training_batch(
    model: &SgtModel,
    cfg: &TrainConfig,
    source: DataSource,
    step: usize,
) -> Result<(Vec<TokenSet>, Vec<DMatrix<u8>>)> {
    let mut tokens = Vec::with_capacity(cfg.batch_size);
    let mut bits = Vec::with_capacity(cfg.batch_size);
    for i in 0..cfg.batch_size {
        let index = (step * cfg.batch_size + i) as u64;
        let mut rng = derived_rng(cfg.seed, TRAIN_STREAM, index);
        let inst = match source {
            DataSource::Fresh => {
                let snr = rng.gen_range(cfg.snr_range.0..=cfg.snr_range.1);
                sample_instance(model.dims(), model.constellation(), snr, &mut rng)
            }
            DataSource::Fixed(data) => data[index as usize % data.len()].clone(),
        };
        let priors = sample_priors(&inst.bits, cfg.informative_fraction, cfg.prior_reliability_max, &mut rng);
        tokens.push(model.tokens(&inst, priors.as_ref())?);
        bits.push(inst.bits);
    }
    Ok((tokens, bits))
}

/// Validation instances, shared by every validation pass.
fn validation_set(model: &SgtModel, cfg: &TrainConfig, v: &ValidationConfig) -> Vec<(f64, Vec<MimoInstance>)> {
    v.snrs
        .iter()
        .map(|&snr| {
            let insts = (0..v.trials)
                .map(|t| {
                    let mut rng = derived_rng(cfg.seed ^ snr.to_bits(), VALIDATION_STREAM, t);
                    sample_instance(model.dims(), model.constellation(), snr, &mut rng)
                })
                .collect();
            (snr, insts)
        })
        .collect()
}

fn validation_ber(model: &SgtModel, insts: &[MimoInstance]) -> Result<f64> {
    use crate::baselines::Detector;
    let outs = model.detect_batch(insts)?;
    let errors: u64 = outs.iter().zip(insts).map(|(o, i)| count_bit_errors(&o.bits, &i.bits)).sum();
    let bits: usize = insts.iter().map(|i| i.bits.len()).sum();
    Ok(errors as f64 / bits as f64)
}

/// [`train_with`] on fresh data without side effects.
pub fn train(model: &mut SgtModel, cfg: &TrainConfig) -> Result<TrainLog> {
    train_with(model, cfg, DataSource::Fresh, &TrainOptions::default())
}

/// Runs `cfg.steps` optimiser steps. On a non-finite loss or activation the
/// parameters are restored from the last snapshot and the error is returned.
pub fn train_with(
    model: &mut SgtModel,
    cfg: &TrainConfig,
    source: DataSource,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    cfg.validate()?;
    if let DataSource::Fixed(data) = source {
        if data.is_empty() {
            return Err(Error::Dataset("fixed training set is empty".into()));
        }
    }
    let started = Instant::now();
    let mut adam = Adam::new(model.params().values(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut snapshot = model.params().clone();
    let validation = cfg.validation.as_ref().map(|v| (v, validation_set(model, cfg, v)));
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        let outcome = training_batch(model, cfg, source, step)
            .and_then(|(tokens, bits)| {
                let targets = bit_targets(&bits.iter().collect::<Vec<_>>());
                model.loss_and_gradients(&model.batch(&tokens)?, &targets)
            });
        let (loss, mut grads) = match outcome {
            Ok((loss, grads)) if loss.is_finite() && grads.iter().all(Tensor::all_finite) => (loss, grads),
            Ok(_) => {
                *model.params_mut() = snapshot;
                return Err(Error::NonFiniteLoss { step });
            }
            Err(e) => {
                *model.params_mut() = snapshot;
                return Err(e);
            }
        };
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > clip {
                let scale = clip / norm;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        adam.step(model.params_mut().values_mut(), &grads, lr);
        log.steps.push(StepRecord { step: step + 1, loss, lr });

        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            if !model.params().all_finite() {
                *model.params_mut() = snapshot;
                return Err(Error::NonFiniteLoss { step });
            }
            snapshot = model.params().clone();
            if let Some(path) = &opts.checkpoint_path {
                model.save_path(path)?;
            }
        }
        if let Some((v, sets)) = &validation {
            if done % v.every == 0 || done == cfg.steps {
                for (snr, insts) in sets {
                    log.validation.push(ValidationRecord {
                        step: done,
                        snr_db: *snr,
                        ber: validation_ber(model, insts)?,
                    });
                }
            }
        }
        if let Some(every) = opts.progress_every {
            if done % every == 0 {
                let mut line = format!("step {done} loss {:.5} lr {lr:.2e}", log.smoothed(every).last().unwrap());
                for r in log.validation.iter().filter(|r| r.step == done) {
                    let _ = write!(line, " ber@{}={:.4}", r.snr_db, r.ber);
                }
                eprintln!("{line}");
            }
        }
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_reference_values() {
        let bits = DMatrix::from_row_slice(2, 1, &[0u8, 1]);
        let half = Tensor::filled(&[2, 1], 0.5);
        assert!((loss(&half, &bits).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let exact = Tensor::from_fn(2, 1, |r, _| if r == 0 { 1.0 } else { 0.0 });
        assert!(loss(&exact, &bits).unwrap() < 1e-11);
        assert!(loss(&Tensor::zeros(&[1, 2]), &bits).is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let mut cfg = TrainConfig::new(0);
        cfg.steps = 1000;
        cfg.warmup_steps = 100;
        assert!((cfg.lr_at(0) - 1e-5).abs() < 1e-18);
        assert!((cfg.lr_at(99) - 1e-3).abs() < 1e-18);
        assert!((cfg.lr_at(100) - 1e-3).abs() < 1e-18);
        assert!((cfg.lr_at(550) - 0.525e-3).abs() < 1e-12);
        assert!((cfg.lr_at(1000) - 0.05e-3).abs() < 1e-15);
        assert!(cfg.lr_at(700) < cfg.lr_at(600));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(0);
        assert!(cfg.validate().is_ok());
        cfg.snr_range = (5.0, 5.0);
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(0);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap()];
        let g = vec![Tensor::from_rows(&[vec![0.3, -4.0]]).unwrap()];
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &g, 0.1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-7);
        assert!((p[0].data()[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn informative_priors_lean_towards_the_truth() {
        let bits = DMatrix::from_fn(400, 1, |r, _| (r % 2) as u8);
        let mut rng = derived_rng(1, 2, 3);
        assert!(sample_priors(&bits, 0.0, 12.0, &mut rng).is_none());
        let mut agree = 0;
        for _ in 0..20 {
            let p = sample_priors(&bits, 1.0, 12.0, &mut rng).unwrap();
            agree += p.iter().zip(bits.iter()).filter(|(p, b)| (**p > 0.5) == (**b == 0)).count();
        }
        assert!(agree as f64 / 8000.0 > 0.75);
    }

    #[test]
    fn smoothing_and_reach() {
        let log = TrainLog {
            steps: (1..=10).map(|s| StepRecord { step: s, loss: 11.0 - s as f64, lr: 0.0 }).collect(),
            ..TrainLog::default()
        };
        assert_eq!(log.smoothed(2)[3], 7.5);
        assert_eq!(log.final_window_loss(3), Some(2.0));
        assert_eq!(log.steps_to_reach(5.5, 2), Some(6));
        assert_eq!(log.steps_to_reach(0.0, 2), None);
    }
}
