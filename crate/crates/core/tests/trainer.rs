use nalgebra::DMatrix;
use rand::Rng;
use sgt_core::baselines::{ml_detect, Detector, DetectorMeta, DetectorOutput, LmmseDetector, MlDetector};
use sgt_core::channel::{sample_instance, sample_noiseless_instance, Constellation, MimoInstance, SystemDims};
use sgt_core::network::{SgtConfig, SgtModel};
use sgt_core::rng::rng_from_seed;
use sgt_core::trainer::stats::{wilson_interval, Z_95_TWO_SIDED};
use sgt_core::trainer::{
    evaluate_ber, train, train_with, DataSource, EvalConfig, TrainConfig, TrainOptions, ValidationConfig,
};
use sgt_core::Error;

/// Coin flips seeded from the observation, so runs replay exactly.
struct RandomGuess;

impl Detector for RandomGuess {
    fn name(&self) -> String {
        "guess".into()
    }

    fn detect(&self, inst: &MimoInstance) -> sgt_core::Result<DetectorOutput> {
        let mut rng = rng_from_seed(inst.y[0].to_bits());
        let bits = DMatrix::from_fn(inst.bits.nrows(), inst.bits.ncols(), |_, _| rng.gen_range(0..=1u8));
        Ok(DetectorOutput {
            bits,
            llrs: None,
            meta: DetectorMeta::default(),
        })
    }
}

fn tiny_model(seed: u64) -> SgtModel {
    let mut cfg = SgtConfig::new(16, 1);
    cfg.ffn_hidden = 32;
    SgtModel::new(cfg, SystemDims::new(2, 2), Constellation::qpsk(), seed).unwrap()
}

fn tiny_train(seed: u64, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(seed);
    cfg.batch_size = 16;
    cfg.steps = steps;
    cfg.warmup_steps = 5;
    cfg.checkpoint_every = 10;
    cfg.informative_fraction = 0.3;
    cfg
}

fn checkpoint_bytes(m: &SgtModel) -> Vec<u8> {
    let mut buf = Vec::new();
    m.save(&mut buf).unwrap();
    buf
}

#[test]
fn same_seed_gives_identical_log_and_parameters() {
    let run = || {
        let mut m = tiny_model(1);
        let mut cfg = tiny_train(9, 30);
        cfg.validation = Some(ValidationConfig {
            snrs: vec![5.0, 10.0],
            trials: 50,
            every: 10,
        });
        let log = train(&mut m, &cfg).unwrap();
        (log, checkpoint_bytes(&m))
    };
    let (la, ca) = run();
    let (lb, cb) = run();
    assert_eq!(la, lb);
    assert_eq!(ca, cb);
    assert_eq!(la.steps.len(), 30);
    assert_eq!(la.validation.len(), 6);
    assert!(la.steps.iter().all(|s| s.loss.is_finite()));
    let (mut csv_a, mut csv_b) = (Vec::new(), Vec::new());
    la.write_csv(&mut csv_a).unwrap();
    lb.write_csv(&mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
    assert!(String::from_utf8(csv_a).unwrap().starts_with("step,loss,lr,val_ber@5,val_ber@10\n"));
}

#[test]
fn different_seed_changes_the_run() {
    let mut a = tiny_model(1);
    let mut b = tiny_model(1);
    let la = train(&mut a, &tiny_train(1, 5)).unwrap();
    let lb = train(&mut b, &tiny_train(2, 5)).unwrap();
    assert_ne!(la, lb);
}

#[test]
fn training_reduces_loss_on_a_fixed_set() {
    let c = Constellation::qpsk();
    let mut rng = rng_from_seed(3);
    let data: Vec<_> = (0..8).map(|_| sample_instance(SystemDims::new(2, 2), &c, 20.0, &mut rng)).collect();
    let mut m = tiny_model(2);
    let mut cfg = tiny_train(4, 150);
    cfg.informative_fraction = 0.0;
    cfg.learning_rate = 3e-3;
    let log = train_with(&mut m, &cfg, DataSource::Fixed(&data), &TrainOptions::default()).unwrap();
    let first = log.steps[..10].iter().map(|s| s.loss).sum::<f64>() / 10.0;
    let last = log.final_window_loss(10).unwrap();
    assert!(last < 0.5 * first, "fixed-set loss {first} -> {last}");

    let mut again = tiny_model(2);
    let log2 = train_with(&mut again, &cfg, DataSource::Fixed(&data), &TrainOptions::default()).unwrap();
    assert_eq!(log, log2);

    let empty: Vec<MimoInstance> = Vec::new();
    assert!(train_with(&mut again, &cfg, DataSource::Fixed(&empty), &TrainOptions::default()).is_err());
}

#[test]
fn divergence_aborts_and_restores_the_last_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let mut m = tiny_model(5);
    let mut cfg = tiny_train(6, 40);
    cfg.checkpoint_every = 2;
    cfg.warmup_steps = 0;
    cfg.grad_clip = None;
    let opts = TrainOptions {
        checkpoint_path: Some(path.clone()),
        progress_every: None,
    };
    // Two sane steps produce a snapshot, then an absurd learning rate blows up.
    let warm = TrainConfig { steps: 2, ..cfg.clone() };
    train_with(&mut m, &warm, DataSource::Fresh, &opts).unwrap();
    let snapshot = checkpoint_bytes(&m);
    cfg.learning_rate = 1e200;
    cfg.checkpoint_every = 1000;
    let err = train_with(&mut m, &cfg, DataSource::Fresh, &opts).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { .. } | Error::NonFiniteActivation { .. }),
        "{err}"
    );
    assert!(m.params().all_finite());
    assert_eq!(checkpoint_bytes(&m), snapshot);
    let on_disk = SgtModel::load_path(&path).unwrap();
    assert_eq!(checkpoint_bytes(&on_disk), snapshot);
}

#[test]
fn invalid_config_is_rejected() {
    let mut m = tiny_model(1);
    let mut cfg = tiny_train(1, 3);
    cfg.batch_size = 0;
    assert!(matches!(train(&mut m, &cfg), Err(Error::Config(_))));
    let mut cfg = tiny_train(1, 3);
    cfg.snr_range = (5.0, 5.0);
    assert!(matches!(train(&mut m, &cfg), Err(Error::Config(_))));
}

#[test]
fn random_guessing_has_half_error_rate() {
    let dims = SystemDims::new(2, 2);
    let c = Constellation::qam16();
    let recs = evaluate_ber(&RandomGuess, dims, &c, &[0.0, 10.0], &EvalConfig::fixed(5000), 1).unwrap();
    for r in recs {
        assert_eq!(r.bits, 5000 * 8);
        assert!(r.ci_low <= 0.5 && 0.5 <= r.ci_high, "{r:?}");
    }
}

#[test]
fn ml_makes_no_errors_without_noise() {
    let c = Constellation::qpsk();
    let mut rng = rng_from_seed(8);
    for _ in 0..500 {
        let inst = sample_noiseless_instance(SystemDims::new(3, 4), &c, 5.0, &mut rng);
        assert_eq!(ml_detect(&inst).unwrap().bits, inst.bits);
    }
    let recs = evaluate_ber(&MlDetector::default(), SystemDims::new(2, 2), &c, &[200.0], &EvalConfig::fixed(2000), 2).unwrap();
    assert_eq!(recs[0].errors, 0);
    assert_eq!(recs[0].ber, 0.0);
}

#[test]
fn lmmse_estimates_agree_across_disjoint_seeds() {
    let dims = SystemDims::new(8, 8);
    let c = Constellation::qpsk();
    let cfg = EvalConfig::fixed(20_000);
    let a = &evaluate_ber(&LmmseDetector, dims, &c, &[10.0], &cfg, 11).unwrap()[0];
    let b = &evaluate_ber(&LmmseDetector, dims, &c, &[10.0], &cfg, 12).unwrap()[0];
    assert_ne!(a.errors, b.errors);
    assert!(a.ci_low <= b.ci_high && b.ci_low <= a.ci_high, "{a:?} vs {b:?}");
    assert!(a.ber > 0.0 && a.ber < 0.5);
}

#[test]
fn evaluation_replays_bit_for_bit() {
    let dims = SystemDims::new(2, 2);
    let c = Constellation::qpsk();
    let model = tiny_model(3);
    let mut fine = EvalConfig::fixed(1200);
    fine.chunk = 100;
    let coarse = EvalConfig::fixed(1200);
    let a = evaluate_ber(&model, dims, &c, &[0.0, 6.0], &coarse, 5).unwrap();
    let b = evaluate_ber(&model, dims, &c, &[0.0, 6.0], &coarse, 5).unwrap();
    let split = evaluate_ber(&model, dims, &c, &[6.0], &fine, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[1], split[0]);
}

#[test]
fn stopping_rule_and_cap() {
    let dims = SystemDims::new(2, 2);
    let c = Constellation::qpsk();
    let cfg = EvalConfig {
        min_errors: 50,
        min_bits: 0,
        max_trials: 100_000,
        chunk: 64,
    };
    let r = &evaluate_ber(&LmmseDetector, dims, &c, &[0.0], &cfg, 3).unwrap()[0];
    assert!(r.errors >= 50 && !r.capped);
    assert!(r.trials < 100_000 && r.trials % 64 == 0);
    let (lo, hi) = wilson_interval(r.errors, r.bits, Z_95_TWO_SIDED);
    assert_eq!((lo, hi), (r.ci_low, r.ci_high));

    let capped = EvalConfig {
        max_trials: 10,
        ..cfg
    };
    let r = &evaluate_ber(&MlDetector::default(), dims, &c, &[40.0], &capped, 3).unwrap()[0];
    assert!(r.capped);
    assert_eq!(r.trials, 10);
}
