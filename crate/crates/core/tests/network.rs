use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use sgt_core::channel::{sample_instance, Constellation, MimoInstance, SystemDims};
use sgt_core::network::layers::{self, AttentionVars, LinearVars, NormVars};
use sgt_core::network::{bit_targets, SgtConfig, SgtModel, Variant};
use sgt_core::rng::rng_from_seed;
use sgt_core::tensor::gradcheck::{relative_error, DEFAULT_STEP};
use sgt_core::tensor::{Graph, Tensor};
use sgt_core::tokenizer::{tokenize, LLR_MAX};
use sgt_core::Error;

fn instance(n_t: usize, n_r: usize, c: &Constellation, snr: f64, seed: u64) -> MimoInstance {
    sample_instance(SystemDims::new(n_t, n_r), c, snr, &mut rng_from_seed(seed))
}

fn model(cfg: SgtConfig, n_t: usize, n_r: usize, c: Constellation, seed: u64) -> SgtModel {
    SgtModel::new(cfg, SystemDims::new(n_t, n_r), c, seed).unwrap()
}

fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

// Dense reference implementation on nalgebra matrices, written independently
// of the graph kernels.
struct DenseLinear {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

impl DenseLinear {
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.w;
        for mut row in y.row_iter_mut() {
            row += self.b.transpose();
        }
        y
    }
}

fn dense_norm(x: &DMatrix<f64>, gain: &DVector<f64>, bias: &DVector<f64>) -> DMatrix<f64> {
    let n = x.ncols() as f64;
    let mut out = x.clone();
    for (r, row) in x.row_iter().enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for c in 0..x.ncols() {
            out[(r, c)] = (x[(r, c)] - mean) / (var + 1e-5).sqrt() * gain[c] + bias[c];
        }
    }
    out
}

fn dense_attention(
    q_in: &DMatrix<f64>,
    kv_in: &DMatrix<f64>,
    lin: &[DenseLinear; 4],
    heads: usize,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let q = lin[0].apply(q_in);
    let k = lin[1].apply(kv_in);
    let v = lin[2].apply(kv_in);
    let d = q.ncols();
    let hd = d / heads;
    let mut mixed = DMatrix::zeros(q.nrows(), d);
    let mut weights = Vec::new();
    for h in 0..heads {
        let qh = q.columns(h * hd, hd);
        let kh = k.columns(h * hd, hd);
        let vh = v.columns(h * hd, hd);
        let mut s = qh * kh.transpose() / (hd as f64).sqrt();
        for mut row in s.row_iter_mut() {
            let m = row.max();
            row.apply(|x| *x = (*x - m).exp());
            let z = row.sum();
            row /= z;
        }
        mixed.columns_mut(h * hd, hd).copy_from(&(&s * vh));
        weights.push(s);
    }
    (lin[3].apply(&mixed), weights)
}

fn to_dense(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

struct AttnFixture {
    tensors: Vec<Tensor>,
}

impl AttnFixture {
    fn new(d: usize, rng: &mut impl Rng) -> Self {
        let mut tensors = Vec::new();
        for _ in 0..4 {
            tensors.push(random_tensor(d, d, rng));
            tensors.push(random_tensor(1, d, rng));
        }
        for _ in 0..2 {
            tensors.push(Tensor::from_fn(1, d, |_, _| 1.0 + 0.3 * rng.gen_range(-1.0..1.0)));
            tensors.push(random_tensor(1, d, rng));
        }
        Self { tensors }
    }

    fn bind(&self, g: &mut Graph) -> (AttentionVars, NormVars, NormVars) {
        let v: Vec<_> = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let lin = |i: usize| LinearVars {
            weight: v[2 * i],
            bias: v[2 * i + 1],
        };
        (
            AttentionVars {
                query: lin(0),
                key: lin(1),
                value: lin(2),
                output: lin(3),
            },
            NormVars { gain: v[8], bias: v[9] },
            NormVars { gain: v[10], bias: v[11] },
        )
    }

    fn dense(&self) -> ([DenseLinear; 4], [(DVector<f64>, DVector<f64>); 2]) {
        let vec = |t: &Tensor| DVector::from_column_slice(t.data());
        let lin = |i: usize| DenseLinear {
            w: to_dense(&self.tensors[2 * i]),
            b: vec(&self.tensors[2 * i + 1]),
        };
        (
            [lin(0), lin(1), lin(2), lin(3)],
            [
                (vec(&self.tensors[8]), vec(&self.tensors[9])),
                (vec(&self.tensors[10]), vec(&self.tensors[11])),
            ],
        )
    }
}

#[test]
fn self_attention_matches_dense_oracle() {
    let mut rng = rng_from_seed(11);
    for heads in [1, 2, 4] {
        let d = 8;
        let fx = AttnFixture::new(d, &mut rng);
        let t = random_tensor(4, d, &mut rng);
        let mut g = Graph::new();
        g.enable_attention_probe();
        let (w, n, _) = fx.bind(&mut g);
        let tv = g.constant(t.clone());
        let out = layers::self_attention(&mut g, tv, n, &w, 1, heads).unwrap();

        let (lin, norms) = fx.dense();
        let td = to_dense(&t);
        let normed = dense_norm(&td, &norms[0].0, &norms[0].1);
        let (update, weights) = dense_attention(&normed, &normed, &lin, heads);
        let expect = &td + update;
        let got = to_dense(g.value(out));
        assert!((got - expect).abs().max() < 1e-10);

        let probe = &g.attention_probes()[0];
        for (h, wd) in weights.iter().enumerate() {
            for i in 0..4 {
                let row = &probe.weights[(h * 4 + i) * 4..][..4];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..4 {
                    assert!((row[j] - wd[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn single_token_self_attention_is_value_path() {
    let mut rng = rng_from_seed(12);
    let d = 8;
    let fx = AttnFixture::new(d, &mut rng);
    let t = random_tensor(1, d, &mut rng);
    let mut g = Graph::new();
    g.enable_attention_probe();
    let (w, n, _) = fx.bind(&mut g);
    let tv = g.constant(t.clone());
    let out = layers::self_attention(&mut g, tv, n, &w, 1, 2).unwrap();
    assert!(g.attention_probes()[0].weights.iter().all(|&p| p == 1.0));

    let (lin, norms) = fx.dense();
    let normed = dense_norm(&to_dense(&t), &norms[0].0, &norms[0].1);
    let expect = to_dense(&t) + lin[3].apply(&lin[2].apply(&normed));
    assert!((to_dense(g.value(out)) - expect).abs().max() < 1e-12);
}

#[test]
fn identical_tokens_give_identical_outputs() {
    let mut rng = rng_from_seed(13);
    let fx = AttnFixture::new(8, &mut rng);
    let row = random_tensor(1, 8, &mut rng);
    let t = Tensor::from_fn(5, 8, |_, c| row.get(0, c));
    let mut g = Graph::new();
    let (w, n, _) = fx.bind(&mut g);
    let tv = g.constant(t);
    let out = layers::self_attention(&mut g, tv, n, &w, 1, 4).unwrap();
    let v = g.value(out);
    for r in 1..5 {
        assert_eq!(v.row(r), v.row(0));
    }
}

#[test]
fn cross_attention_matches_dense_oracle_and_shapes() {
    let mut rng = rng_from_seed(14);
    let d = 8;
    for n_lin in [1, 3, 6] {
        let fx = AttnFixture::new(d, &mut rng);
        let sym = random_tensor(4, d, &mut rng);
        let lin = random_tensor(n_lin, d, &mut rng);
        let mut g = Graph::new();
        g.enable_attention_probe();
        let (w, nq, nk) = fx.bind(&mut g);
        let (sv, lv) = (g.constant(sym.clone()), g.constant(lin.clone()));
        let out = layers::cross_attention(&mut g, sv, lv, nq, nk, &w, 1, 2).unwrap();
        assert_eq!(g.value(out).shape(), &[4, d]);
        if n_lin == 1 {
            assert!(g.attention_probes()[0].weights.iter().all(|&p| p == 1.0));
        }
        let (dl, norms) = fx.dense();
        let q = dense_norm(&to_dense(&sym), &norms[0].0, &norms[0].1);
        let kv = dense_norm(&to_dense(&lin), &norms[1].0, &norms[1].1);
        let expect = to_dense(&sym) + dense_attention(&q, &kv, &dl, 2).0;
        assert!((to_dense(g.value(out)) - expect).abs().max() < 1e-10);
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_fn(t.rows(), t.cols(), |r, c| t.get(perm[r], c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cross_attention_permutation_symmetries(seed in 0u64..10_000, shift in 1usize..5) {
        let mut rng = rng_from_seed(seed);
        let d = 8;
        let fx = AttnFixture::new(d, &mut rng);
        let sym = random_tensor(4, d, &mut rng);
        let lin = random_tensor(5, d, &mut rng);
        let run = |s: &Tensor, l: &Tensor| {
            let mut g = Graph::new();
            let (w, nq, nk) = fx.bind(&mut g);
            let (sv, lv) = (g.constant(s.clone()), g.constant(l.clone()));
            let out = layers::cross_attention(&mut g, sv, lv, nq, nk, &w, 1, 2).unwrap();
            g.value(out).clone()
        };
        let base = run(&sym, &lin);
        let lin_perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
        let invariant = run(&sym, &permute_rows(&lin, &lin_perm));
        prop_assert!(invariant.max_abs_diff(&base) < 1e-12);
        let sym_perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let equivariant = run(&permute_rows(&sym, &sym_perm), &lin);
        prop_assert!(equivariant.max_abs_diff(&permute_rows(&base, &sym_perm)) < 1e-12);
    }
}

#[test]
fn shape_contract_across_sizes_and_variants() {
    for (n_t, n_r) in [(2, 2), (4, 4), (8, 8), (8, 16)] {
        for c in [Constellation::qpsk(), Constellation::qam16()] {
            let nb = c.bits_per_axis();
            let inst = instance(n_t, n_r, &c, 10.0, 3);
            let tokens = tokenize(&inst, None).unwrap();
            for variant in Variant::ALL {
                let m = model(SgtConfig::new(16, 2).with_variant(variant), n_t, n_r, c.clone(), 4);
                let (s, l) = m.embed(&tokens).unwrap();
                assert_eq!(s.shape(), &[2 * n_t, 16]);
                let lin_rows = if variant == Variant::QrBaseline { 2 * n_t } else { 2 * n_r };
                assert_eq!(l.shape(), &[lin_rows, 16]);
                let p = m.forward(&tokens).unwrap();
                assert_eq!(p.shape(), &[2 * n_t, nb]);
                assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }
}

#[test]
fn wrong_token_shape_is_rejected() {
    let c = Constellation::qpsk();
    let m = model(SgtConfig::new(16, 1), 2, 2, c.clone(), 1);
    let tokens = tokenize(&instance(2, 3, &c, 5.0, 1), None).unwrap();
    assert!(matches!(m.forward(&tokens), Err(Error::Shape { .. })));
}

#[test]
fn zero_embedding_weights_leave_positional_encoding() {
    let c = Constellation::qpsk();
    let mut m = model(SgtConfig::new(16, 1), 4, 6, c.clone(), 2);
    for id in m.params().ids().collect::<Vec<_>>() {
        if m.params().name(id).starts_with("embed.") {
            m.params_mut().get_mut(id).data_mut().fill(0.0);
        }
    }
    let (s, l) = m.embed(&tokenize(&instance(4, 6, &c, 5.0, 2), None).unwrap()).unwrap();
    let (spe, lpe) = m.positional_tables();
    assert_eq!(&s, spe);
    assert_eq!(&l, lpe);
}

#[test]
fn positional_part_is_shared_between_instances() {
    let c = Constellation::qpsk();
    let with_pe = model(SgtConfig::new(16, 1), 2, 3, c.clone(), 5);
    let mut cfg = SgtConfig::new(16, 1);
    cfg.positional_encoding = false;
    let without = model(cfg, 2, 3, c.clone(), 5);
    for seed in 0..3 {
        let t = tokenize(&instance(2, 3, &c, 5.0, seed), None).unwrap();
        let (a, _) = with_pe.embed(&t).unwrap();
        let (b, _) = without.embed(&t).unwrap();
        let diff = Tensor::from_fn(4, 16, |r, col| a.get(r, col) - b.get(r, col));
        assert!(diff.max_abs_diff(with_pe.positional_tables().0) < 1e-12);
    }
}

#[test]
fn attention_rows_sum_to_one_at_every_layer() {
    let c = Constellation::qam16();
    let mut cfg = SgtConfig::new(32, 3);
    cfg.bidirectional_cross = true;
    let m = model(cfg, 3, 4, c.clone(), 6);
    let (_, probes) = m.forward_probed(&tokenize(&instance(3, 4, &c, 5.0, 6), None).unwrap()).unwrap();
    assert_eq!(probes.len(), 3 * 4);
    for p in &probes {
        for row in p.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{}", p.label);
        }
    }
    assert!(probes.iter().any(|p| p.label == "layer2.cross" && p.queries == 6 && p.keys == 8));
}

#[test]
fn no_pe_model_ignores_constraint_order() {
    let c = Constellation::qpsk();
    let mut cfg = SgtConfig::new(16, 2);
    cfg.positional_encoding = false;
    let m = model(cfg, 2, 4, c.clone(), 7);
    let inst = instance(2, 4, &c, 5.0, 7);
    let mut permuted = inst.clone();
    let perm = [3usize, 0, 6, 1, 7, 2, 5, 4];
    for (dst, &src) in perm.iter().enumerate() {
        permuted.y[dst] = inst.y[src];
        permuted.sigma2[dst] = inst.sigma2[src];
        for col in 0..4 {
            permuted.h[(dst, col)] = inst.h[(src, col)];
        }
    }
    let a = m.forward_instance(&inst, None).unwrap();
    let b = m.forward_instance(&permuted, None).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn batched_forward_matches_single_forward() {
    let c = Constellation::qpsk();
    for variant in Variant::ALL {
        let m = model(SgtConfig::new(16, 2).with_variant(variant), 2, 3, c.clone(), 8);
        let tokens: Vec<_> = (0..5)
            .map(|s| tokenize(&instance(2, 3, &c, 4.0, s), None).unwrap())
            .collect();
        let batched = m.forward_batch(&tokens).unwrap();
        for (t, b) in tokens.iter().zip(&batched) {
            assert!(m.forward(t).unwrap().max_abs_diff(b) < 1e-12);
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let c = Constellation::qpsk();
    let insts: Vec<_> = (0..2).map(|s| instance(2, 2, &c, 5.0, 20 + s)).collect();
    for variant in Variant::ALL {
        let mut cfg = SgtConfig::new(8, 2).with_variant(variant);
        cfg.ffn_hidden = 12;
        cfg.n_heads = 2;
        cfg.bidirectional_cross = variant == Variant::FullSgt;
        let mut m = model(cfg, 2, 2, c.clone(), 21);
        let tokens: Vec<_> = insts.iter().map(|i| m.tokens(i, None).unwrap()).collect();
        let batch = m.batch(&tokens).unwrap();
        let targets = bit_targets(&insts.iter().map(|i| &i.bits).collect::<Vec<_>>());
        let (_, grads) = m.loss_and_gradients(&batch, &targets).unwrap();
        let ids: Vec<_> = m.params().ids().collect();
        for (id, analytic) in ids.into_iter().zip(grads) {
            let mut numeric = Tensor::zeros(analytic.shape());
            for i in 0..analytic.len() {
                let orig = m.params().get(id).data()[i];
                m.params_mut().get_mut(id).data_mut()[i] = orig + DEFAULT_STEP;
                let up = m.loss(&batch, &targets).unwrap();
                m.params_mut().get_mut(id).data_mut()[i] = orig - DEFAULT_STEP;
                let down = m.loss(&batch, &targets).unwrap();
                m.params_mut().get_mut(id).data_mut()[i] = orig;
                numeric.data_mut()[i] = (up - down) / (2.0 * DEFAULT_STEP);
            }
            let name = m.params().name(id).to_string();
            // Some groups have an identically zero gradient (key biases shift
            // every score of a softmax row equally; the last constraint FFN
            // feeds nothing), where a ratio only measures rounding noise.
            if analytic.norm().max(numeric.norm()) < 1e-7 {
                assert!(analytic.max_abs_diff(&numeric) < 1e-8, "{variant} {name}");
            } else {
                let err = relative_error(&analytic, &numeric);
                assert!(err < 1e-3, "{variant} {name}: relative error {err}");
            }
        }
    }
}

#[test]
fn non_finite_activation_names_the_layer() {
    let c = Constellation::qpsk();
    let mut m = model(SgtConfig::new(16, 2), 2, 2, c.clone(), 9);
    for suffix in ["up.weight", "down.weight"] {
        let id = m.params().find(&format!("layer1.sym_ffn.ffn.{suffix}")).unwrap();
        m.params_mut().get_mut(id).data_mut().fill(1e300);
    }
    match m.forward_instance(&instance(2, 2, &c, 5.0, 9), None) {
        Err(Error::NonFiniteActivation { layer, .. }) => assert_eq!(layer, "layer1.sym_ffn"),
        other => panic!("expected a non-finite activation error, got {other:?}"),
    }
}

#[test]
fn soft_detection_interface() {
    let c = Constellation::qam16();
    let m = model(SgtConfig::new(16, 2), 2, 2, c.clone(), 10);
    let inst = instance(2, 2, &c, 0.0, 10);
    let none = m.detect_soft(&inst, None).unwrap();
    let flat = DMatrix::from_element(4, 2, 0.5);
    assert_eq!(m.detect_soft(&inst, Some(&flat)).unwrap(), none);
    assert_eq!(none.shape(), (4, 2));
    let mut sure = DMatrix::from_element(4, 2, 1.0);
    sure[(0, 0)] = 0.0;
    let llr = m.detect_soft(&inst, Some(&sure)).unwrap();
    assert!(llr.iter().chain(none.iter()).all(|l| l.abs() <= LLR_MAX));
}

#[test]
fn variant_parameter_layouts() {
    let c = Constellation::qpsk();
    let full = model(SgtConfig::new(16, 3), 2, 4, c.clone(), 1);
    let mut tied_cfg = SgtConfig::new(16, 3);
    tied_cfg.weight_sharing = true;
    let tied = model(tied_cfg, 2, 4, c.clone(), 1);
    assert!(tied.num_parameters() < full.num_parameters());
    assert!(tied.params().find("layer1.cross.attn.query.weight").is_none());
    assert!(full.params().find("layer2.cross.attn.query.weight").is_some());

    let nc = model(SgtConfig::new(16, 2).with_variant(Variant::NoCrossAttention), 2, 4, c.clone(), 1);
    let w = nc.params().find("compress.weight").unwrap();
    assert_eq!(nc.params().get(w).shape(), &[4, 8]);
    assert!(nc.params().find("layer0.cross.attn.query.weight").is_none());

    let qr = SgtModel::new(
        SgtConfig::new(16, 2).with_variant(Variant::QrBaseline),
        SystemDims::new(4, 2),
        c,
        1,
    );
    assert!(matches!(qr, Err(Error::Config(_))));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let c = Constellation::qpsk();
    let m = model(SgtConfig::new(16, 2), 2, 2, c.clone(), 3);
    m.save_path(&path).unwrap();
    let back = SgtModel::load_path(&path).unwrap();
    let inst = instance(2, 2, &c, 5.0, 3);
    assert_eq!(back.forward_instance(&inst, None).unwrap(), m.forward_instance(&inst, None).unwrap());
}
