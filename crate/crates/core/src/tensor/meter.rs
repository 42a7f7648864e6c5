use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// What a multiply-accumulate was spent on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MacKind {
    /// Input token embeddings.
    Embedding,
    /// Q/K/V/output projections of an attention sublayer.
    Projection,
    /// Query-key dot products.
    AttentionScore,
    /// Weighted sum of value vectors.
    ValueMix,
    /// Position-wise feed-forward blocks.
    Ffn,
    /// Token-axis compression (encoder-only ablation).
    Compression,
    /// Soft output head.
    Head,
}

impl MacKind {
    pub const ALL: [MacKind; 7] = [
        MacKind::Embedding,
        MacKind::Projection,
        MacKind::AttentionScore,
        MacKind::ValueMix,
        MacKind::Ffn,
        MacKind::Compression,
        MacKind::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MacKind::Embedding => "embedding",
            MacKind::Projection => "projection",
            MacKind::AttentionScore => "attention_score",
            MacKind::ValueMix => "value_mix",
            MacKind::Ffn => "ffn",
            MacKind::Compression => "compression",
            MacKind::Head => "head",
        }
    }
}

impl fmt::Display for MacKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Multiply-accumulate counter keyed by `(sublayer label, kind)`.
///
/// Only products are counted (matmul, attention scores, value mixing);
/// elementwise work is free.
#[derive(Debug, Clone, Default)]
pub struct MacMeter {
    scope: (String, Option<MacKind>),
    counts: BTreeMap<(String, MacKind), u64>,
}

impl MacMeter {
    pub fn set_scope(&mut self, label: &str, kind: MacKind) {
        self.scope.0.clear();
        self.scope.0.push_str(label);
        self.scope.1 = Some(kind);
    }

    pub fn scope_label(&self) -> &str {
        &self.scope.0
    }

    pub fn clear_scope(&mut self) {
        self.scope.0.clear();
        self.scope.1 = None;
    }

    /// Charges `macs` to the current scope under its own kind.
    pub(crate) fn charge(&mut self, macs: u64) {
        if let Some(kind) = self.scope.1 {
            self.charge_kind(kind, macs);
        }
    }

    /// Charges `macs` to the current label under an explicit kind (no-op outside a scope).
    pub(crate) fn charge_kind(&mut self, kind: MacKind, macs: u64) {
        if macs == 0 || self.scope.1.is_none() {
            return;
        }
        let key = (self.scope.0.clone(), kind);
        *self.counts.entry(key).or_insert(0) += macs;
    }

    pub fn counts(&self) -> &BTreeMap<(String, MacKind), u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn total_of(&self, kind: MacKind) -> u64 {
        self.counts
            .iter()
            .filter(|((_, k), _)| *k == kind)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn reset(&mut self) {
        self.counts.clear();
    }
}
