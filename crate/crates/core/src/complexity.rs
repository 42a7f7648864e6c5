//! Multiply-accumulate accounting for one forward pass.
//!
//! [`count_forward`] runs the network on one instance and reads the tape's
//! meter; [`symbolic_count`] evaluates the closed form for the same layer
//! stack. With `T = 2 N_t`, `R = 2 N_r`, width `d`, FFN width `f`, `nb` bits
//! per axis and `w = T + 2`:
//!
//! | sublayer | projection / ffn | score = mix |
//! |---|---|---|
//! | self-attention over `N` tokens | `4 N d^2` | `N^2 d` |
//! | cross-attention, `Q` queries over `K` keys | `2 (Q + K) d^2` | `Q K d` |
//! | FFN block over `N` tokens | `2 N d f` | |
//! | symbol embedding | `T nb d + T d^2` | |
//! | constraint embedding over `N` tokens | `N w d + N d^2` | |
//! | head | `T d^2 + T d nb` | |
//! | token compression | `T R d` | |

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::channel::{sample_instance, Constellation, SystemDims};
use crate::error::Result;
use crate::network::{SgtConfig, SgtModel, Variant};
use crate::rng::rng_from_seed;
use crate::tensor::MacKind;
use crate::tokenizer::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OpCount {
    pub n_t: usize,
    pub n_r: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub by_sublayer: BTreeMap<(String, MacKind), u64>,
}

impl OpCount {
    fn new(config: &SgtConfig, dims: SystemDims) -> Self {
        Self {
            n_t: dims.n_t,
            n_r: dims.n_r,
            d_model: config.d_model,
            n_layers: config.n_layers,
            by_sublayer: BTreeMap::new(),
        }
    }

    fn add(&mut self, label: &str, kind: MacKind, macs: usize) {
        if macs > 0 {
            *self.by_sublayer.entry((label.to_string(), kind)).or_insert(0) += macs as u64;
        }
    }

    pub fn total(&self) -> u64 {
        self.by_sublayer.values().sum()
    }

    pub fn total_of(&self, kind: MacKind) -> u64 {
        self.by_sublayer
            .iter()
            .filter(|((_, k), _)| *k == kind)
            .map(|(_, v)| v)
            .sum()
    }

    /// Query-key products plus value mixing.
    pub fn attention(&self) -> u64 {
        self.total_of(MacKind::AttentionScore) + self.total_of(MacKind::ValueMix)
    }

    pub fn by_kind(&self) -> BTreeMap<MacKind, u64> {
        let mut out = BTreeMap::new();
        for ((_, k), v) in &self.by_sublayer {
            *out.entry(*k).or_insert(0) += v;
        }
        out
    }
}

/// Instrumented count from an actual forward pass.
pub fn count_forward(config: &SgtConfig, dims: SystemDims, constellation: &Constellation) -> Result<OpCount> {
    let model = SgtModel::new(config.clone(), dims, constellation.clone(), 0)?;
    let inst = sample_instance(dims, constellation, 10.0, &mut rng_from_seed(0));
    let meter = model.count_macs(&tokenize(&inst, None)?)?;
    let mut count = OpCount::new(config, dims);
    count.by_sublayer = meter.counts().clone();
    Ok(count)
}

/// Closed-form count for the same layer stack as [`count_forward`].
pub fn symbolic_count(config: &SgtConfig, dims: SystemDims, bits_per_axis: usize) -> OpCount {
    let (t, r, nb) = (dims.real_tx(), dims.real_rx(), bits_per_axis);
    let (d, f) = (config.d_model, config.ffn_hidden);
    let w = t + 2;
    let mut c = OpCount::new(config, dims);
    let self_attn = |c: &mut OpCount, label: &str, n: usize| {
        c.add(label, MacKind::Projection, 4 * n * d * d);
        c.add(label, MacKind::AttentionScore, n * n * d);
        c.add(label, MacKind::ValueMix, n * n * d);
    };
    let cross = |c: &mut OpCount, label: &str, q: usize, k: usize| {
        c.add(label, MacKind::Projection, 2 * (q + k) * d * d);
        c.add(label, MacKind::AttentionScore, q * k * d);
        c.add(label, MacKind::ValueMix, q * k * d);
    };
    let ffn = |c: &mut OpCount, label: &str, n: usize| c.add(label, MacKind::Ffn, 2 * n * d * f);

    let lin_tokens = if config.variant == Variant::QrBaseline { t } else { r };
    c.add("embed.sym", MacKind::Embedding, t * nb * d + t * d * d);
    c.add("embed.lin", MacKind::Embedding, lin_tokens * w * d + lin_tokens * d * d);
    for l in 0..config.n_layers {
        match config.variant {
            Variant::FullSgt => {
                self_attn(&mut c, &format!("layer{l}.sym_self"), t);
                self_attn(&mut c, &format!("layer{l}.lin_self"), r);
                cross(&mut c, &format!("layer{l}.cross"), t, r);
                if config.bidirectional_cross {
                    cross(&mut c, &format!("layer{l}.cross_back"), r, t);
                }
                ffn(&mut c, &format!("layer{l}.sym_ffn"), t);
                ffn(&mut c, &format!("layer{l}.lin_ffn"), r);
            }
            Variant::NoCrossAttention | Variant::QrBaseline => {
                self_attn(&mut c, &format!("layer{l}.self"), lin_tokens);
                ffn(&mut c, &format!("layer{l}.ffn"), lin_tokens);
            }
        }
    }
    if config.variant == Variant::NoCrossAttention {
        c.add("compress", MacKind::Compression, t * r * d);
    }
    c.add("head", MacKind::Head, t * d * d + t * d * nb);
    c
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Fitted growth exponents for square systems `N x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub sizes: Vec<usize>,
    pub counts: Vec<OpCount>,
    pub attention_score_slope: f64,
    pub attention_slope: f64,
    pub projection_slope: f64,
    pub total_slope: f64,
    /// Instrumented and symbolic counts agree for every size.
    pub symbolic_agrees: bool,
}

pub fn scaling_report(config: &SgtConfig, sizes: &[usize], constellation: &Constellation) -> Result<ScalingReport> {
    let mut counts = Vec::with_capacity(sizes.len());
    let mut agrees = true;
    for &n in sizes {
        let dims = SystemDims::new(n, n);
        let measured = count_forward(config, dims, constellation)?;
        agrees &= measured == symbolic_count(config, dims, constellation.bits_per_axis());
        counts.push(measured);
    }
    let slope = |f: &dyn Fn(&OpCount) -> u64| {
        let pts: Vec<_> = sizes.iter().zip(&counts).map(|(&n, c)| (n as f64, f(c) as f64)).collect();
        log_log_slope(&pts)
    };
    Ok(ScalingReport {
        sizes: sizes.to_vec(),
        attention_score_slope: slope(&|c| c.total_of(MacKind::AttentionScore)),
        attention_slope: slope(&|c| c.attention()),
        projection_slope: slope(&|c| c.total_of(MacKind::Projection)),
        total_slope: slope(&|c| c.total()),
        counts,
        symbolic_agrees: agrees,
    })
}

/// One row per `(dims, sublayer, kind)`: `n_t,n_r,d_model,n_layers,sublayer,kind,macs`.
pub fn write_csv<W: Write>(out: W, counts: &[OpCount]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["n_t", "n_r", "d_model", "n_layers", "sublayer", "kind", "macs"])?;
    for c in counts {
        for ((label, kind), macs) in &c.by_sublayer {
            wtr.write_record([
                c.n_t.to_string(),
                c.n_r.to_string(),
                c.d_model.to_string(),
                c.n_layers.to_string(),
                label.clone(),
                kind.as_str().to_string(),
                macs.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_powers() {
        let pts: Vec<_> = [4.0, 8.0, 16.0, 32.0].iter().map(|&n: &f64| (n, 3.0 * n * n)).collect();
        assert!((log_log_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn attention_split_is_symmetric() {
        let c = symbolic_count(&SgtConfig::new(32, 2), SystemDims::new(3, 5), 1);
        assert_eq!(c.total_of(MacKind::AttentionScore), c.total_of(MacKind::ValueMix));
        assert_eq!(c.total(), c.by_kind().values().sum::<u64>());
    }
}
