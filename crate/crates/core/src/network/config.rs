use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which sublayers the network stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Self-attention on both token families plus symbol-from-constraint cross-attention.
    FullSgt,
    /// Encoder over constraint tokens only; a learned map compresses `2 N_r` tokens to `2 N_t`.
    NoCrossAttention,
    /// Encoder-only transformer over QR-preprocessed tokens.
    QrBaseline,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::FullSgt, Variant::NoCrossAttention, Variant::QrBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FullSgt => "full-sgt",
            Variant::NoCrossAttention => "no-cross-attention",
            Variant::QrBaseline => "qr-baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

fn enabled() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgtConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub variant: Variant,
    /// One set of layer weights reused by every layer.
    #[serde(default)]
    pub weight_sharing: bool,
    /// Also update the constraint stream from the symbol stream.
    #[serde(default)]
    pub bidirectional_cross: bool,
    #[serde(default = "enabled")]
    pub positional_encoding: bool,
}

impl SgtConfig {
    /// Full model with 16-wide heads and a `2 d_model` FFN.
    pub fn new(d_model: usize, n_layers: usize) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads: (d_model / 16).max(1),
            ffn_hidden: 2 * d_model,
            variant: Variant::FullSgt,
            weight_sharing: false,
            bidirectional_cross: false,
            positional_encoding: true,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config(
                "d_model, n_layers, n_heads and ffn_hidden must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.bidirectional_cross && self.variant != Variant::FullSgt {
            return Err(Error::Config(format!(
                "bidirectional_cross needs cross-attention, variant is {}",
                self.variant
            )));
        }
        Ok(())
    }

    /// Number of distinct layer weight sets.
    pub fn stored_layers(&self) -> usize {
        if self.weight_sharing {
            1
        } else {
            self.n_layers
        }
    }
}
