//! The soft graph transformer detector.
//!
//! Two token families are embedded separately: symbol-prior tokens
//! `[2 N_t, nb]` and linear-constraint tokens `[2 N_r, 2 N_t + 2]`. Each layer
//! runs pre-norm residual self-attention over symbols, self-attention over
//! constraints, cross-attention updating symbols from constraints, and a
//! feed-forward block on both streams. A head maps the symbol stream to
//! `P(bit = 0)` per soft bit.
//!
//! Instances are processed in batches: `G` token sets are stacked along the
//! rows and attention never mixes groups.

mod checkpoint;
mod config;
pub mod layers;
mod params;
mod qr;

use nalgebra::DMatrix;
use rand::Rng;

pub use config::{SgtConfig, Variant};
pub use params::{ParamId, ParamStore};
pub use qr::qr_tokens;

use crate::baselines::{Detector, DetectorMeta, DetectorOutput};
use crate::channel::{Constellation, MimoInstance, SystemDims};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{AttentionProbe, Graph, MacKind, MacMeter, Tensor, TensorError, Var};
use crate::tokenizer::{hard_bits_from_llr, prob_to_llr_scalar, tokenize, TokenSet};
use layers::{AttentionVars, FfnVars, LinearVars, NormVars};
use params::{Binder, Init};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SelfBlock {
    norm: Norm,
    attn: Attention,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CrossBlock {
    query_norm: Norm,
    kv_norm: Norm,
    attn: Attention,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FfnBlock {
    norm: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Graph {
        sym_self: SelfBlock,
        lin_self: SelfBlock,
        cross: CrossBlock,
        cross_back: Option<CrossBlock>,
        sym_ffn: FfnBlock,
        lin_ffn: FfnBlock,
    },
    Encoder {
        self_attn: SelfBlock,
        ffn: FfnBlock,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    sym_embed: Ffn,
    lin_embed: Ffn,
    layers: Vec<Layer>,
    /// Token-axis compression `[2 N_t, 2 N_r]` and its pre-norm.
    compress: Option<(Norm, ParamId)>,
    head_norm: Norm,
    head: Ffn,
}

struct Builder<'a, R: Rng> {
    init: Init<'a, R>,
}

impl<R: Rng> Builder<'_, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.init.weight(format!("{name}.weight"), fan_in, fan_out),
            bias: self.init.constant(format!("{name}.bias"), &[1, fan_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gain: self.init.constant(format!("{name}.gain"), &[1, width], 1.0),
            bias: self.init.constant(format!("{name}.bias"), &[1, width], 0.0),
        }
    }

    fn ffn(&mut self, name: &str, input: usize, hidden: usize, output: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), input, hidden),
            down: self.linear(&format!("{name}.down"), hidden, output),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            query: self.linear(&format!("{name}.query"), d, d),
            key: self.linear(&format!("{name}.key"), d, d),
            value: self.linear(&format!("{name}.value"), d, d),
            output: self.linear(&format!("{name}.output"), d, d),
        }
    }

    fn self_block(&mut self, name: &str, d: usize) -> SelfBlock {
        SelfBlock {
            norm: self.norm(&format!("{name}.norm"), d),
            attn: self.attention(&format!("{name}.attn"), d),
        }
    }

    fn cross_block(&mut self, name: &str, d: usize) -> CrossBlock {
        CrossBlock {
            query_norm: self.norm(&format!("{name}.query_norm"), d),
            kv_norm: self.norm(&format!("{name}.kv_norm"), d),
            attn: self.attention(&format!("{name}.attn"), d),
        }
    }

    fn ffn_block(&mut self, name: &str, d: usize, hidden: usize) -> FfnBlock {
        FfnBlock {
            norm: self.norm(&format!("{name}.norm"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, hidden, d),
        }
    }
}

/// Stacked token sets ready for one batched pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// `[groups * n_lin, 2 N_t + 2]`; QR tokens for the QR baseline.
    pub lin: Tensor,
    /// `[groups * 2 N_t, nb]`.
    pub sym: Tensor,
    pub groups: usize,
}

fn at(label: &str) -> impl Fn(TensorError) -> Error + '_ {
    move |e| match e {
        TensorError::NonFinite { .. } => Error::NonFiniteActivation {
            layer: label.to_string(),
            source: e,
        },
        other => Error::Tensor(other),
    }
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let rows = parts.iter().map(|t| t.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for t in parts {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn split_rows(t: &Tensor, groups: usize) -> Vec<Tensor> {
    let rows = t.rows() / groups;
    t.data()
        .chunks(rows * t.cols())
        .map(|c| Tensor::new(vec![rows, t.cols()], c.to_vec()).unwrap())
        .collect()
}

/// Trainable detector for one system size and constellation.
#[derive(Debug, Clone, PartialEq)]
pub struct SgtModel {
    config: SgtConfig,
    dims: SystemDims,
    constellation: Constellation,
    store: ParamStore,
    layout: Layout,
    sym_pe: Tensor,
    lin_pe: Tensor,
}

impl SgtModel {
    /// Freshly initialised model. Weights are `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// biases zero, norm gains one.
    pub fn new(config: SgtConfig, dims: SystemDims, constellation: Constellation, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.variant == Variant::QrBaseline && dims.n_r < dims.n_t {
            return Err(Error::Config(format!(
                "qr-baseline needs n_r >= n_t, got {}x{}",
                dims.n_r, dims.n_t
            )));
        }
        let (tx, rx, nb) = (dims.real_tx(), dims.real_rx(), constellation.bits_per_axis());
        let d = config.d_model;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::default();
        let mut b = Builder {
            init: Init {
                store: &mut store,
                rng: &mut rng,
            },
        };
        let sym_embed = b.ffn("embed.sym", nb, d, d);
        let lin_embed = b.ffn("embed.lin", tx + 2, d, d);
        let layers = (0..config.stored_layers())
            .map(|l| match config.variant {
                Variant::FullSgt => Layer::Graph {
                    sym_self: b.self_block(&format!("layer{l}.sym_self"), d),
                    lin_self: b.self_block(&format!("layer{l}.lin_self"), d),
                    cross: b.cross_block(&format!("layer{l}.cross"), d),
                    cross_back: config
                        .bidirectional_cross
                        .then(|| b.cross_block(&format!("layer{l}.cross_back"), d)),
                    sym_ffn: b.ffn_block(&format!("layer{l}.sym_ffn"), d, config.ffn_hidden),
                    lin_ffn: b.ffn_block(&format!("layer{l}.lin_ffn"), d, config.ffn_hidden),
                },
                _ => Layer::Encoder {
                    self_attn: b.self_block(&format!("layer{l}.self"), d),
                    ffn: b.ffn_block(&format!("layer{l}.ffn"), d, config.ffn_hidden),
                },
            })
            .collect();
        let compress = (config.variant == Variant::NoCrossAttention).then(|| {
            let norm = b.norm("compress.norm", d);
            (norm, b.init.matrix("compress.weight".into(), tx, rx, rx))
        });
        let head_norm = b.norm("head.norm", d);
        let head = b.ffn("head", d, d, nb);
        let layout = Layout {
            sym_embed,
            lin_embed,
            layers,
            compress,
            head_norm,
            head,
        };
        let lin_len = if config.variant == Variant::QrBaseline { tx } else { rx };
        let (sym_pe, lin_pe) = if config.positional_encoding {
            (layers::sinusoidal_table(tx, d), layers::sinusoidal_table(lin_len, d))
        } else {
            (Tensor::zeros(&[tx, d]), Tensor::zeros(&[lin_len, d]))
        };
        Ok(Self {
            config,
            dims,
            constellation,
            store,
            layout,
            sym_pe,
            lin_pe,
        })
    }

    pub fn config(&self) -> &SgtConfig {
        &self.config
    }

    pub fn dims(&self) -> SystemDims {
        self.dims
    }

    pub fn constellation(&self) -> &Constellation {
        &self.constellation
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.total_elements()
    }

    /// Positional tables `(symbol, constraint)`; zero when disabled.
    pub fn positional_tables(&self) -> (&Tensor, &Tensor) {
        (&self.sym_pe, &self.lin_pe)
    }

    fn check_tokens(&self, tokens: &TokenSet) -> Result<()> {
        let (tx, rx, nb) = (
            self.dims.real_tx(),
            self.dims.real_rx(),
            self.constellation.bits_per_axis(),
        );
        let got = |t: &Tensor| (t.rows(), t.cols());
        if got(&tokens.lin) != (rx, tx + 2) {
            return Err(Error::Shape {
                what: "constraint tokens",
                expected: (rx, tx + 2),
                actual: got(&tokens.lin),
            });
        }
        if got(&tokens.sym) != (tx, nb) {
            return Err(Error::Shape {
                what: "symbol tokens",
                expected: (tx, nb),
                actual: got(&tokens.sym),
            });
        }
        Ok(())
    }

    /// Stacks token sets, converting constraint tokens to QR tokens when the variant needs them.
    pub fn batch(&self, tokens: &[TokenSet]) -> Result<TokenBatch> {
        if tokens.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut lins = Vec::with_capacity(tokens.len());
        for t in tokens {
            self.check_tokens(t)?;
            if self.config.variant == Variant::QrBaseline {
                let (y, h, s) = t.reconstruct();
                lins.push(qr_tokens(&y, &h, &s)?);
            } else {
                lins.push(t.lin.clone());
            }
        }
        let lin = stack(&lins.iter().collect::<Vec<_>>());
        let sym = stack(&tokens.iter().map(|t| &t.sym).collect::<Vec<_>>());
        Ok(TokenBatch {
            lin,
            sym,
            groups: tokens.len(),
        })
    }

    pub fn tokens(&self, inst: &MimoInstance, priors: Option<&DMatrix<f64>>) -> Result<TokenSet> {
        let t = tokenize(inst, priors)?;
        self.check_tokens(&t)?;
        Ok(t)
    }

    fn layer(&self, l: usize) -> &Layer {
        &self.layout.layers[if self.config.weight_sharing { 0 } else { l }]
    }

    fn embed_vars(&self, g: &mut Graph, b: &mut Binder, batch: &TokenBatch) -> Result<(Var, Var)> {
        let groups = batch.groups;
        let sym_in = g.constant(batch.sym.clone());
        let lin_in = g.constant(batch.lin.clone());
        let label = "embed.sym";
        g.meter_mut().set_scope(label, MacKind::Embedding);
        let f = bind_ffn(g, b, &self.layout.sym_embed);
        let sym = layers::ffn(g, sym_in, f).map_err(at(label))?;
        let label = "embed.lin";
        g.meter_mut().set_scope(label, MacKind::Embedding);
        let f = bind_ffn(g, b, &self.layout.lin_embed);
        let lin = layers::ffn(g, lin_in, f).map_err(at(label))?;
        g.meter_mut().clear_scope();
        let sym_pe = g.constant(layers::tile_rows(&self.sym_pe, groups));
        let lin_pe = g.constant(layers::tile_rows(&self.lin_pe, groups));
        let sym = g.add(sym, sym_pe).map_err(at("embed.sym"))?;
        let lin = g.add(lin, lin_pe).map_err(at("embed.lin"))?;
        Ok((sym, lin))
    }

    /// Records the full forward pass; returns `P(bit = 0)` as `[groups * 2 N_t, nb]`.
    fn build(&self, g: &mut Graph, b: &mut Binder, batch: &TokenBatch) -> Result<Var> {
        let groups = batch.groups;
        let heads = self.config.n_heads;
        let (sym, lin) = self.embed_vars(g, b, batch)?;
        let stream = match self.config.variant {
            Variant::FullSgt => {
                let (mut s, mut c) = (sym, lin);
                for l in 0..self.config.n_layers {
                    let Layer::Graph {
                        sym_self,
                        lin_self,
                        cross,
                        cross_back,
                        sym_ffn,
                        lin_ffn,
                    } = *self.layer(l)
                    else {
                        unreachable!("graph layers for the full variant")
                    };
                    s = self_block(g, b, &format!("layer{l}.sym_self"), s, &sym_self, groups, heads)?;
                    c = self_block(g, b, &format!("layer{l}.lin_self"), c, &lin_self, groups, heads)?;
                    let s_next = cross_block(g, b, &format!("layer{l}.cross"), s, c, &cross, groups, heads)?;
                    if let Some(back) = cross_back {
                        c = cross_block(g, b, &format!("layer{l}.cross_back"), c, s, &back, groups, heads)?;
                    }
                    s = ffn_block(g, b, &format!("layer{l}.sym_ffn"), s_next, &sym_ffn)?;
                    c = ffn_block(g, b, &format!("layer{l}.lin_ffn"), c, &lin_ffn)?;
                }
                s
            }
            Variant::NoCrossAttention => {
                let c = self.encoder(g, b, lin, groups)?;
                let label = "compress";
                g.meter_mut().set_scope(label, MacKind::Compression);
                let (norm, weight) = self.layout.compress.expect("compression for this variant");
                let n = bind_norm(g, b, &norm);
                let w = b.var(g, weight);
                let normed = layers::norm(g, c, n).map_err(at(label))?;
                let squeezed = g.group_left_matmul(w, normed, groups).map_err(at(label))?;
                g.add(squeezed, sym).map_err(at(label))?
            }
            Variant::QrBaseline => {
                let label = "embed.merge";
                let merged = g.add(lin, sym).map_err(at(label))?;
                self.encoder(g, b, merged, groups)?
            }
        };
        let label = "head";
        g.meter_mut().set_scope(label, MacKind::Head);
        let n = bind_norm(g, b, &self.layout.head_norm);
        let f = bind_ffn(g, b, &self.layout.head);
        let normed = layers::norm(g, stream, n).map_err(at(label))?;
        let logits = layers::ffn(g, normed, f).map_err(at(label))?;
        let out = g.sigmoid(logits).map_err(at(label))?;
        g.meter_mut().clear_scope();
        Ok(out)
    }

    fn encoder(&self, g: &mut Graph, b: &mut Binder, mut t: Var, groups: usize) -> Result<Var> {
        let heads = self.config.n_heads;
        for l in 0..self.config.n_layers {
            let Layer::Encoder { self_attn, ffn } = *self.layer(l) else {
                unreachable!("encoder layers for encoder-only variants")
            };
            t = self_block(g, b, &format!("layer{l}.self"), t, &self_attn, groups, heads)?;
            t = ffn_block(g, b, &format!("layer{l}.ffn"), t, &ffn)?;
        }
        Ok(t)
    }

    fn run(&self, batch: &TokenBatch, probe: bool) -> Result<(Tensor, Graph)> {
        let mut g = Graph::new();
        if probe {
            g.enable_attention_probe();
        }
        let mut b = Binder::new(&self.store, false);
        let out = self.build(&mut g, &mut b, batch)?;
        Ok((g.value(out).clone(), g))
    }

    /// Embeddings `(sym [2 N_t, d], lin [n_lin, d])` with positional encodings added.
    pub fn embed(&self, tokens: &TokenSet) -> Result<(Tensor, Tensor)> {
        let batch = self.batch(std::slice::from_ref(tokens))?;
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store, false);
        let (s, l) = self.embed_vars(&mut g, &mut b, &batch)?;
        Ok((g.value(s).clone(), g.value(l).clone()))
    }

    /// `P(bit = 0)` as `[2 N_t, nb]`.
    pub fn forward(&self, tokens: &TokenSet) -> Result<Tensor> {
        let batch = self.batch(std::slice::from_ref(tokens))?;
        Ok(self.run(&batch, false)?.0)
    }

    /// One batched pass over many token sets.
    pub fn forward_batch(&self, tokens: &[TokenSet]) -> Result<Vec<Tensor>> {
        let batch = self.batch(tokens)?;
        let (out, _) = self.run(&batch, false)?;
        Ok(split_rows(&out, tokens.len()))
    }

    pub fn forward_instance(&self, inst: &MimoInstance, priors: Option<&DMatrix<f64>>) -> Result<Tensor> {
        self.forward(&self.tokens(inst, priors)?)
    }

    /// Forward pass that also returns every attention weight matrix.
    pub fn forward_probed(&self, tokens: &TokenSet) -> Result<(Tensor, Vec<AttentionProbe>)> {
        let batch = self.batch(std::slice::from_ref(tokens))?;
        let (out, g) = self.run(&batch, true)?;
        Ok((out, g.attention_probes().to_vec()))
    }

    /// Multiply-accumulate counts of one forward pass, by sublayer and kind.
    pub fn count_macs(&self, tokens: &TokenSet) -> Result<MacMeter> {
        let batch = self.batch(std::slice::from_ref(tokens))?;
        let (_, g) = self.run(&batch, false)?;
        Ok(g.meter().clone())
    }

    /// Posterior LLRs `[2 N_t, nb]`, each within `±LLR_MAX`.
    pub fn detect_soft(&self, inst: &MimoInstance, priors: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        Ok(probs_to_llr(&self.forward_instance(inst, priors)?))
    }

    /// Mean binary cross-entropy against `targets` (`P(bit = 0)`, i.e. `1 - bit`)
    /// and its gradient for every parameter, in store order.
    pub fn loss_and_gradients(&self, batch: &TokenBatch, targets: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store, true);
        let out = self.build(&mut g, &mut b, batch)?;
        let loss = g.bce(out, targets)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        let per_param = self
            .store
            .ids()
            .zip(b.bound())
            .map(|(id, v)| match v {
                Some(v) => grads.get(*v),
                None => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect();
        Ok((value, per_param))
    }

    /// Loss alone, for finite-difference checks.
    pub fn loss(&self, batch: &TokenBatch, targets: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store, false);
        let out = self.build(&mut g, &mut b, batch)?;
        let loss = g.bce(out, targets)?;
        Ok(g.value(loss).data()[0])
    }
}

/// Instances per batched pass in [`Detector::detect_batch`].
const DETECT_CHUNK: usize = 256;

impl Detector for SgtModel {
    fn name(&self) -> String {
        match self.config.variant {
            Variant::FullSgt => "sgt".into(),
            v => format!("sgt-{v}"),
        }
    }

    fn detect(&self, inst: &MimoInstance) -> Result<DetectorOutput> {
        Ok(soft_output(probs_to_llr(&self.forward_instance(inst, None)?)))
    }

    fn detect_batch(&self, insts: &[MimoInstance]) -> Result<Vec<DetectorOutput>> {
        let mut out = Vec::with_capacity(insts.len());
        for chunk in insts.chunks(DETECT_CHUNK) {
            let tokens = chunk
                .iter()
                .map(|i| self.tokens(i, None))
                .collect::<Result<Vec<_>>>()?;
            for p in self.forward_batch(&tokens)? {
                out.push(soft_output(probs_to_llr(&p)));
            }
        }
        Ok(out)
    }
}

fn soft_output(llrs: DMatrix<f64>) -> DetectorOutput {
    DetectorOutput {
        bits: hard_bits_from_llr(&llrs),
        llrs: Some(llrs),
        meta: DetectorMeta {
            iterations: 1,
            ..DetectorMeta::default()
        },
    }
}

/// `[2 N_t, nb]` probabilities to a clamped LLR matrix.
pub fn probs_to_llr(p: &Tensor) -> DMatrix<f64> {
    DMatrix::from_fn(p.rows(), p.cols(), |r, c| prob_to_llr_scalar(p.get(r, c)))
}

/// Loss targets `1 - bit` stacked for a batch.
pub fn bit_targets(bits: &[&DMatrix<u8>]) -> Tensor {
    let cols = bits[0].ncols();
    let rows: usize = bits.iter().map(|b| b.nrows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for b in bits {
        for r in 0..b.nrows() {
            data.extend((0..cols).map(|c| 1.0 - f64::from(b[(r, c)])));
        }
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn bind_linear(g: &mut Graph, b: &mut Binder, l: &Linear) -> LinearVars {
    LinearVars {
        weight: b.var(g, l.weight),
        bias: b.var(g, l.bias),
    }
}

fn bind_norm(g: &mut Graph, b: &mut Binder, n: &Norm) -> NormVars {
    NormVars {
        gain: b.var(g, n.gain),
        bias: b.var(g, n.bias),
    }
}

fn bind_ffn(g: &mut Graph, b: &mut Binder, f: &Ffn) -> FfnVars {
    FfnVars {
        up: bind_linear(g, b, &f.up),
        down: bind_linear(g, b, &f.down),
    }
}

fn bind_attention(g: &mut Graph, b: &mut Binder, a: &Attention) -> AttentionVars {
    AttentionVars {
        query: bind_linear(g, b, &a.query),
        key: bind_linear(g, b, &a.key),
        value: bind_linear(g, b, &a.value),
        output: bind_linear(g, b, &a.output),
    }
}

fn self_block(
    g: &mut Graph,
    b: &mut Binder,
    label: &str,
    t: Var,
    blk: &SelfBlock,
    groups: usize,
    heads: usize,
) -> Result<Var> {
    g.meter_mut().set_scope(label, MacKind::Projection);
    let n = bind_norm(g, b, &blk.norm);
    let w = bind_attention(g, b, &blk.attn);
    let out = layers::self_attention(g, t, n, &w, groups, heads).map_err(at(label))?;
    g.meter_mut().clear_scope();
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cross_block(
    g: &mut Graph,
    b: &mut Binder,
    label: &str,
    queries: Var,
    keys_values: Var,
    blk: &CrossBlock,
    groups: usize,
    heads: usize,
) -> Result<Var> {
    g.meter_mut().set_scope(label, MacKind::Projection);
    let qn = bind_norm(g, b, &blk.query_norm);
    let kn = bind_norm(g, b, &blk.kv_norm);
    let w = bind_attention(g, b, &blk.attn);
    let out = layers::cross_attention(g, queries, keys_values, qn, kn, &w, groups, heads).map_err(at(label))?;
    g.meter_mut().clear_scope();
    Ok(out)
}

fn ffn_block(g: &mut Graph, b: &mut Binder, label: &str, t: Var, blk: &FfnBlock) -> Result<Var> {
    g.meter_mut().set_scope(label, MacKind::Ffn);
    let n = bind_norm(g, b, &blk.norm);
    let f = bind_ffn(g, b, &blk.ffn);
    let out = layers::ffn_block(g, t, n, f).map_err(at(label))?;
    g.meter_mut().clear_scope();
    Ok(out)
}
