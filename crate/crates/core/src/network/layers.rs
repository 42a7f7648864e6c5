//! Graph-level building blocks shared by every model variant.
//!
//! Each function takes already-bound parameter handles, so the same code
//! serves training (trainable leaves) and inference (constant leaves).

use crate::tensor::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    /// `[in, out]`.
    pub weight: Var,
    /// `[1, out]`.
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub output: LinearVars,
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub up: LinearVars,
    pub down: LinearVars,
}

pub fn linear(g: &mut Graph, x: Var, l: LinearVars) -> Result<Var> {
    let y = g.matmul(x, l.weight)?;
    g.add_row_bias(y, l.bias)
}

pub fn ffn(g: &mut Graph, x: Var, f: FfnVars) -> Result<Var> {
    let h = linear(g, x, f.up)?;
    let h = g.gelu(h)?;
    linear(g, h, f.down)
}

pub fn norm(g: &mut Graph, x: Var, n: NormVars) -> Result<Var> {
    g.layer_norm(x, n.gain, n.bias)
}

/// Projected multi-head attention without residual: `W_O · attn(W_Q q, W_K kv, W_V kv)`.
pub fn attend(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    w: &AttentionVars,
    groups: usize,
    heads: usize,
) -> Result<Var> {
    let q = linear(g, queries, w.query)?;
    let k = linear(g, keys_values, w.key)?;
    let v = linear(g, keys_values, w.value)?;
    let mixed = g.attention(q, k, v, groups, heads)?;
    linear(g, mixed, w.output)
}

/// Pre-norm residual self-attention: `t + attend(LN(t), LN(t))`.
pub fn self_attention(
    g: &mut Graph,
    t: Var,
    n: NormVars,
    w: &AttentionVars,
    groups: usize,
    heads: usize,
) -> Result<Var> {
    let normed = norm(g, t, n)?;
    let update = attend(g, normed, normed, w, groups, heads)?;
    g.add(t, update)
}

/// Pre-norm residual cross-attention updating `queries` from `keys_values`.
/// The key/value stream is only read.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    query_norm: NormVars,
    kv_norm: NormVars,
    w: &AttentionVars,
    groups: usize,
    heads: usize,
) -> Result<Var> {
    let q = norm(g, queries, query_norm)?;
    let kv = norm(g, keys_values, kv_norm)?;
    let update = attend(g, q, kv, w, groups, heads)?;
    g.add(queries, update)
}

/// Pre-norm residual feed-forward block.
pub fn ffn_block(g: &mut Graph, t: Var, n: NormVars, f: FfnVars) -> Result<Var> {
    let normed = norm(g, t, n)?;
    let update = ffn(g, normed, f)?;
    g.add(t, update)
}

/// Fixed sinusoidal table `[len, width]`: even columns `sin(pos / 10000^(2i/width))`,
/// odd columns the matching cosine.
pub fn sinusoidal_table(len: usize, width: usize) -> Tensor {
    Tensor::from_fn(len, width, |pos, c| {
        let pair = (c / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Repeats a `[n, d]` table `groups` times along the rows.
pub(crate) fn tile_rows(t: &Tensor, groups: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.len() * groups);
    for _ in 0..groups {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![t.rows() * groups, t.cols()], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_table_first_rows() {
        let pe = sinusoidal_table(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(1, 3) - (0.01f64).cos()).abs() < 1e-15);
    }
}
