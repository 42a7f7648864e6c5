use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square QAM built from two Gray-labelled PAM axes.
///
/// Each real axis carries `bits_per_axis` bits. Labels are read MSB first;
/// the label with leading bit 0 maps to the positive half of the axis. The
/// complex symbol energy is normalised to one, so each axis has energy 1/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    name: String,
    bits_per_axis: usize,
    /// Axis level indexed by bit label.
    levels: Vec<f64>,
}

impl Constellation {
    pub fn qpsk() -> Self {
        Self::square_qam(1)
    }

    pub fn qam16() -> Self {
        Self::square_qam(2)
    }

    pub fn qam64() -> Self {
        Self::square_qam(3)
    }

    fn square_qam(bits_per_axis: usize) -> Self {
        let count = 1usize << bits_per_axis;
        // mean of (L-1-2p)^2 over p is (L^2-1)/3; scale to axis energy 1/2
        let scale = (1.5 / ((count * count - 1) as f64)).sqrt();
        let mut levels = vec![0.0; count];
        for pos in 0..count {
            let label = pos ^ (pos >> 1);
            levels[label] = (count as f64 - 1.0 - 2.0 * pos as f64) * scale;
        }
        let name = match bits_per_axis {
            1 => "qpsk".to_string(),
            b => format!("qam{}", 1usize << (2 * b)),
        };
        Self {
            name,
            bits_per_axis,
            levels,
        }
    }

    pub fn from_bits_per_axis(bits_per_axis: usize) -> Result<Self> {
        match bits_per_axis {
            1..=3 => Ok(Self::square_qam(bits_per_axis)),
            b => Err(Error::UnknownConstellation(format!("{b} bits per axis"))),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "qpsk" | "qam4" => Ok(Self::qpsk()),
            "qam16" | "16qam" => Ok(Self::qam16()),
            "qam64" | "64qam" => Ok(Self::qam64()),
            _ => Err(Error::UnknownConstellation(name.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Bits per real axis (`N_bits / 2`).
    pub fn bits_per_axis(&self) -> usize {
        self.bits_per_axis
    }

    /// Bits per complex symbol (`N_bits`).
    pub fn bits_per_symbol(&self) -> usize {
        2 * self.bits_per_axis
    }

    /// Number of points per axis.
    pub fn axis_size(&self) -> usize {
        self.levels.len()
    }

    /// Average complex symbol energy.
    pub fn symbol_energy(&self) -> f64 {
        1.0
    }

    /// Average energy per real axis.
    pub fn axis_energy(&self) -> f64 {
        0.5
    }

    pub fn level(&self, label: usize) -> f64 {
        self.levels[label]
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Maps the bits of one axis (MSB first) to its level.
    pub fn map_axis(&self, bits: &[u8]) -> f64 {
        debug_assert_eq!(bits.len(), self.bits_per_axis);
        let label = bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
        self.levels[label]
    }

    /// Label of the level closest to `x`.
    pub fn nearest_label(&self, x: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (label, &l) in self.levels.iter().enumerate() {
            let d = (x - l).abs();
            if d < best_d {
                best = label;
                best_d = d;
            }
        }
        best
    }

    /// Bit `k` (MSB first) of an axis label.
    pub fn label_bit(&self, label: usize, k: usize) -> u8 {
        ((label >> (self.bits_per_axis - 1 - k)) & 1) as u8
    }

    /// Posterior of one axis observed as `r = x + e`, `e ~ N(0, tau2)`, uniform prior.
    ///
    /// Returns posterior mean, posterior variance, and exact per-bit LLRs
    /// `log P(b=0|r) / P(b=1|r)`.
    pub fn axis_posterior(&self, r: f64, tau2: f64) -> AxisPosterior {
        let logits: Vec<f64> = self
            .levels
            .iter()
            .map(|&l| -(r - l) * (r - l) / (2.0 * tau2))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let mean = w.iter().zip(&self.levels).map(|(p, l)| p * l).sum::<f64>() / total;
        let second = w.iter().zip(&self.levels).map(|(p, l)| p * l * l).sum::<f64>() / total;
        let llrs = (0..self.bits_per_axis)
            .map(|k| {
                let (mut zero, mut one) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for (label, &lg) in logits.iter().enumerate() {
                    if self.label_bit(label, k) == 0 {
                        zero = log_add(zero, lg);
                    } else {
                        one = log_add(one, lg);
                    }
                }
                zero - one
            })
            .collect();
        AxisPosterior {
            mean,
            variance: (second - mean * mean).max(0.0),
            llrs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AxisPosterior {
    pub mean: f64,
    pub variance: f64,
    pub llrs: Vec<f64>,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
