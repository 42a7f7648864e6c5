//! The four subcommands as library functions. Each writes its CSVs into the
//! output directory and returns what it wrote so callers can inspect it.

use std::fs;
use std::path::{Path, PathBuf};

use sgt_core::baselines::{Detector, LmmseDetector, MlDetector, OampDetector};
use sgt_core::complexity::{scaling_report, write_csv as write_mac_csv, ScalingReport};
use sgt_core::network::{SgtModel, Variant};
use sgt_core::trainer::{evaluate_ber, train_with, BerRecord, DataSource, TrainLog, TrainOptions};

use crate::config::ExperimentConfig;
use crate::error::{BenchError, Result};

pub const BER_FILE: &str = "ber.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const COMPLEXITY_FILE: &str = "complexity.csv";
pub const COMPLEXITY_SUMMARY_FILE: &str = "complexity_summary.csv";

pub fn checkpoint_file(variant: Variant) -> String {
    format!("{variant}.ckpt")
}

pub fn train_log_file(variant: Variant) -> String {
    format!("{variant}_train_log.csv")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes `body` behind the provenance comment line.
fn write_with_provenance(cfg: &ExperimentConfig, path: &Path, body: &[u8]) -> Result<()> {
    let mut bytes = cfg.provenance_line().into_bytes();
    bytes.extend_from_slice(body);
    fs::write(path, bytes).map_err(io_err(path))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SgtModel,
    pub log: TrainLog,
    pub checkpoint: PathBuf,
    pub log_csv: PathBuf,
}

fn fresh_model(cfg: &ExperimentConfig) -> Result<SgtModel> {
    Ok(SgtModel::new(cfg.model.clone(), cfg.dims(), cfg.constellation()?, cfg.seed)?)
}

fn train_into(cfg: &ExperimentConfig, checkpoint: PathBuf, log_csv: PathBuf, progress: Option<usize>) -> Result<TrainOutcome> {
    let mut model = fresh_model(cfg)?;
    let opts = TrainOptions {
        checkpoint_path: Some(checkpoint.clone()),
        progress_every: progress,
    };
    let log = train_with(&mut model, &cfg.train, DataSource::Fresh, &opts)?;
    model.save_path(&checkpoint)?;
    let body = csv_bytes(|b| Ok(log.write_csv(b)?))?;
    write_with_provenance(cfg, &log_csv, &body)?;
    Ok(TrainOutcome {
        model,
        log,
        checkpoint,
        log_csv,
    })
}

/// Trains the configured variant into `{out}/{variant}.ckpt` and
/// `{out}/{variant}_train_log.csv`.
pub fn train(cfg: &ExperimentConfig, out: &Path, progress: Option<usize>) -> Result<TrainOutcome> {
    ensure_dir(out)?;
    let v = cfg.model.variant;
    train_into(cfg, out.join(checkpoint_file(v)), out.join(train_log_file(v)), progress)
}

/// Loads a checkpoint and checks it against the configured system.
pub fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<SgtModel> {
    let model = SgtModel::load_path(path)?;
    let expected = cfg.constellation()?;
    let (found, want) = (model.dims(), cfg.dims());
    if found != want || model.constellation() != &expected {
        return Err(BenchError::DimensionMismatch {
            path: path.to_path_buf(),
            found: format!("{}x{} {}", found.n_t, found.n_r, model.constellation().name()),
            expected: format!("{}x{} {}", want.n_t, want.n_r, expected.name()),
        });
    }
    Ok(model)
}

fn write_ber_csv(cfg: &ExperimentConfig, path: &Path, records: &[BerRecord]) -> Result<()> {
    let body = csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["detector", "snr_db", "ber", "errors", "bits", "trials", "ci_low", "ci_high", "capped"])?;
        for r in records {
            w.write_record([
                r.detector.clone(),
                r.snr_db.to_string(),
                r.ber.to_string(),
                r.errors.to_string(),
                r.bits.to_string(),
                r.trials.to_string(),
                r.ci_low.to_string(),
                r.ci_high.to_string(),
                r.capped.to_string(),
            ])?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    })?;
    write_with_provenance(cfg, path, &body)
}

/// BER of every configured detector on the SNR grid, written to `{out}/ber.csv`.
///
/// `sgt` evaluates each checkpoint in `checkpoints`, or `{out}/{variant}.ckpt`
/// when none is given.
pub fn ber(cfg: &ExperimentConfig, checkpoints: &[PathBuf], out: &Path) -> Result<Vec<BerRecord>> {
    ensure_dir(out)?;
    let constellation = cfg.constellation()?;
    let mut detectors: Vec<Box<dyn Detector>> = Vec::new();
    for name in &cfg.eval.detectors {
        match name.as_str() {
            "ml" => detectors.push(Box::new(MlDetector::default())),
            "lmmse" => detectors.push(Box::new(LmmseDetector)),
            "oamp" => detectors.push(Box::new(OampDetector {
                iterations: cfg.eval.oamp_iterations,
            })),
            _ => {
                let default = [out.join(checkpoint_file(cfg.model.variant))];
                let paths = if checkpoints.is_empty() { &default[..] } else { checkpoints };
                for p in paths {
                    detectors.push(Box::new(load_checkpoint(cfg, p)?));
                }
            }
        }
    }
    let eval = cfg.eval.eval_config();
    let mut records = Vec::new();
    for d in &detectors {
        records.extend(evaluate_ber(d.as_ref(), cfg.dims(), &constellation, &cfg.eval.snrs, &eval, cfg.seed)?);
    }
    write_ber_csv(cfg, &out.join(BER_FILE), &records)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub final_loss: f64,
    /// Mean loss over the last `loss_window` steps.
    pub window_loss: f64,
    /// Worst window loss over all variants.
    pub target_loss: f64,
    /// First step whose trailing average reaches `target_loss`.
    pub steps_to_target: Option<usize>,
    pub ber: Vec<BerRecord>,
}

/// Trains every variant under the same budget and seed, then evaluates each
/// on the SNR grid. Writes per-variant checkpoints and logs and `{out}/ablation.csv`.
pub fn ablate(cfg: &ExperimentConfig, out: &Path, progress: Option<usize>) -> Result<Vec<AblationRow>> {
    ensure_dir(out)?;
    let window = cfg.ablate.loss_window.min(cfg.train.steps);
    let constellation = cfg.constellation()?;
    let eval = cfg.eval.eval_config();
    let mut runs = Vec::new();
    for variant in Variant::ALL {
        let mut vcfg = cfg.clone();
        vcfg.override_variant(variant)?;
        let run = train_into(
            &vcfg,
            out.join(format!("ablation_{}", checkpoint_file(variant))),
            out.join(format!("ablation_{}", train_log_file(variant))),
            progress,
        )?;
        let ber = evaluate_ber(&run.model, cfg.dims(), &constellation, &cfg.eval.snrs, &eval, cfg.seed)?;
        runs.push((variant, run.log, ber));
    }
    let target = runs
        .iter()
        .filter_map(|(_, log, _)| log.final_window_loss(window))
        .fold(f64::NEG_INFINITY, f64::max);
    let rows: Vec<AblationRow> = runs
        .into_iter()
        .map(|(variant, log, ber)| AblationRow {
            variant,
            final_loss: log.final_loss().unwrap_or(f64::NAN),
            window_loss: log.final_window_loss(window).unwrap_or(f64::NAN),
            target_loss: target,
            steps_to_target: log.steps_to_reach(target, window),
            ber,
        })
        .collect();

    let path = out.join(ABLATION_FILE);
    let body = csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        let mut header: Vec<String> = ["variant", "steps", "final_loss", "window_loss", "target_loss", "steps_to_target"]
            .map(String::from)
            .to_vec();
        header.extend(cfg.eval.snrs.iter().map(|s| format!("ber@{s}")));
        w.write_record(&header)?;
        for r in &rows {
            let mut rec = vec![
                r.variant.to_string(),
                cfg.train.steps.to_string(),
                r.final_loss.to_string(),
                r.window_loss.to_string(),
                r.target_loss.to_string(),
                r.steps_to_target.map(|s| s.to_string()).unwrap_or_default(),
            ];
            rec.extend(r.ber.iter().map(|b| b.ber.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(io_err(&path))?;
        Ok(())
    })?;
    write_with_provenance(cfg, &path, &body)?;
    Ok(rows)
}

/// MAC counts for `N_t = N_r = N` over the configured sizes, plus fitted slopes.
pub fn complexity(cfg: &ExperimentConfig, out: &Path) -> Result<ScalingReport> {
    ensure_dir(out)?;
    let report = scaling_report(&cfg.model, &cfg.complexity.sizes, &cfg.constellation()?)?;
    let body = csv_bytes(|b| Ok(write_mac_csv(b, &report.counts)?))?;
    write_with_provenance(cfg, &out.join(COMPLEXITY_FILE), &body)?;

    let path = out.join(COMPLEXITY_SUMMARY_FILE);
    let body = csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["quantity", "value"])?;
        for (name, v) in [
            ("attention_score_slope", report.attention_score_slope),
            ("attention_slope", report.attention_slope),
            ("projection_slope", report.projection_slope),
            ("total_slope", report.total_slope),
        ] {
            w.write_record([name.to_string(), v.to_string()])?;
        }
        w.write_record(["symbolic_agrees".to_string(), report.symbolic_agrees.to_string()])?;
        w.flush().map_err(io_err(&path))?;
        Ok(())
    })?;
    write_with_provenance(cfg, &path, &body)?;
    Ok(report)
}
