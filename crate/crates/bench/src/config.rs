//! Declarative experiment description, read from TOML.
//!
//! ```toml
//! seed = 7
//! out_dir = "out"
//!
//! [system]
//! n_t = 4
//! n_r = 4
//! constellation = "qpsk"
//!
//! [model]      # network configuration
//! [train]      # optimiser, schedule, SNR range
//! [eval]       # detectors, SNR grid, stopping rule
//! [ablate]     # optional, convergence window
//! [complexity] # optional, sizes for the MAC sweep
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sgt_core::baselines::DEFAULT_OAMP_ITERATIONS;
use sgt_core::channel::{Constellation, SystemDims};
use sgt_core::network::{SgtConfig, Variant};
use sgt_core::trainer::{EvalConfig, TrainConfig};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n_t: usize,
    pub n_r: usize,
    pub constellation: String,
}

fn default_oamp_iterations() -> usize {
    DEFAULT_OAMP_ITERATIONS
}

fn default_chunk() -> usize {
    EvalConfig::default().chunk
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Any of `ml`, `lmmse`, `oamp`, `sgt`.
    pub detectors: Vec<String>,
    pub snrs: Vec<f64>,
    pub min_errors: u64,
    pub max_trials: u64,
    #[serde(default)]
    pub min_bits: u64,
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    #[serde(default = "default_oamp_iterations")]
    pub oamp_iterations: usize,
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            min_errors: self.min_errors,
            min_bits: self.min_bits,
            max_trials: self.max_trials,
            chunk: self.chunk,
        }
    }
}

fn default_window() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Moving-average window for final loss and steps-to-target.
    #[serde(default = "default_window")]
    pub loss_window: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            loss_window: default_window(),
        }
    }
}

fn default_sizes() -> Vec<usize> {
    vec![4, 8, 16, 32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexitySection {
    /// `N` with `N_t = N_r = N`.
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
}

impl Default for ComplexitySection {
    fn default() -> Self {
        Self { sizes: default_sizes() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub system: SystemSection,
    pub model: SgtConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub complexity: ComplexitySection,
}

pub const DETECTORS: [&str; 4] = ["ml", "lmmse", "oamp", "sgt"];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| BenchError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.system.n_t == 0 || self.system.n_r == 0 {
            return Err(BenchError::Config("system.n_t and system.n_r must be positive".into()));
        }
        self.constellation()?;
        self.model.validate()?;
        self.train.validate()?;
        if let Some(bad) = self.eval.detectors.iter().find(|d| !DETECTORS.contains(&d.as_str())) {
            return Err(BenchError::Config(format!(
                "eval.detectors: unknown detector `{bad}` (expected one of {})",
                DETECTORS.join(", ")
            )));
        }
        if self.eval.oamp_iterations == 0 {
            return Err(BenchError::Config("eval.oamp_iterations must be at least 1".into()));
        }
        if self.complexity.sizes.iter().any(|&n| n == 0) {
            return Err(BenchError::Config("complexity.sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> SystemDims {
        SystemDims::new(self.system.n_t, self.system.n_r)
    }

    pub fn constellation(&self) -> Result<Constellation> {
        Ok(Constellation::from_name(&self.system.constellation)?)
    }

    /// Sets the root seed and the training seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn override_variant(&mut self, variant: Variant) -> Result<()> {
        self.model.variant = variant;
        self.validate()
    }

    /// SHA-256 of the effective configuration in canonical TOML form. The
    /// output directory is left out so relocated runs hash the same.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let hash = Sha256::digest(canonical.to_toml().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First line of every CSV this configuration produces.
    pub fn provenance_line(&self) -> String {
        format!("# sgt config_sha256={} seed={}\n", self.digest(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3
out_dir = "out"

[system]
n_t = 2
n_r = 2
constellation = "qpsk"

[model]
d_model = 16
n_layers = 1
n_heads = 1
ffn_hidden = 32
variant = "full-sgt"

[train]
batch_size = 4
steps = 3
learning_rate = 0.001
snr_range = [0.0, 15.0]
seed = 3
checkpoint_every = 10
grad_clip = 1.0

[eval]
detectors = ["ml", "lmmse"]
snrs = [0.0, 10.0]
min_errors = 10
max_trials = 100
"#;

    #[test]
    fn toml_round_trip_is_lossless() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_toml(), again.to_toml());
        assert_eq!(cfg.eval.oamp_iterations, DEFAULT_OAMP_ITERATIONS);
        assert_eq!(cfg.complexity.sizes, vec![4, 8, 16, 32]);
    }

    #[test]
    fn missing_field_is_named() {
        let text = SAMPLE.replace("n_r = 2\n", "");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("n_r"), "{err}");
    }

    #[test]
    fn unknown_field_and_detector_are_rejected() {
        let text = SAMPLE.replace("seed = 3\nout_dir", "seed = 3\nsed = 4\nout_dir");
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().to_string().contains("sed"));
        let text = SAMPLE.replace("[\"ml\", \"lmmse\"]", "[\"ml\", \"zf\"]");
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().to_string().contains("zf"));
    }

    #[test]
    fn digest_tracks_overrides() {
        let mut cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let before = cfg.digest();
        assert_eq!(before.len(), 64);
        cfg.override_seed(9);
        assert_eq!(cfg.train.seed, 9);
        assert_ne!(cfg.digest(), before);
        assert!(cfg.provenance_line().ends_with("seed=9\n"));
        let digest = cfg.digest();
        cfg.out_dir = "elsewhere".into();
        assert_eq!(cfg.digest(), digest);
    }
}
