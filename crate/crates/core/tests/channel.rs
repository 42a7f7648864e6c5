use nalgebra::{DMatrix, DVector};
use rand::Rng;
use sgt_core::channel::{
    hard_demap, lift_matrix, lift_to_real, lift_vector, modulate, sample_complex_system, sample_rayleigh, snr_to_sigma,
    Complex64, Constellation, SystemDims,
};
use sgt_core::rng::rng_from_seed;

fn complex_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<Complex64> {
    DMatrix::from_fn(rows, cols, |_, _| Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn lift_is_a_ring_homomorphism() {
    let mut rng = rng_from_seed(1);
    for _ in 0..1000 {
        let (n_r, n_t, k) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..5));
        let h = complex_matrix(n_r, n_t, &mut rng);
        let x = DVector::from_fn(n_t, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let direct = lift_vector(&(&h * &x));
        let lifted = lift_matrix(&h) * lift_vector(&x);
        assert!(inf_norm(&(direct - lifted)) < 1e-12);

        let b = complex_matrix(n_t, k, &mut rng);
        let diff = lift_matrix(&(&h * &b)) - lift_matrix(&h) * lift_matrix(&b);
        assert!(diff.amax() < 1e-12);
    }
}

#[test]
fn lifted_instances_satisfy_the_real_model() {
    let mut rng = rng_from_seed(2);
    for c in [Constellation::qpsk(), Constellation::qam16(), Constellation::qam64()] {
        for _ in 0..200 {
            let dims = SystemDims::new(rng.gen_range(1..6), rng.gen_range(1..9));
            let snr = rng.gen_range(-5.0..20.0);
            let (sys, bits) = sample_complex_system(dims, &c, snr, &mut rng);
            let inst = lift_to_real(&sys, &c);
            assert_eq!(inst.bits, bits);
            let noise = lift_vector(&sys.noise);
            assert!(inf_norm(&(&inst.y - (&inst.h * &inst.x + noise))) < 1e-12);
            assert!(inst.sigma2.iter().all(|&s| s == sys.sigma_c2 / 2.0));
            assert!((inst.snr_db - snr).abs() < 1e-9);
        }
    }
}

#[test]
fn rayleigh_entries_have_unit_power() {
    let mut rng = rng_from_seed(3);
    let mut total = 0.0;
    let mut re2 = 0.0;
    let draws = 100_000 / 16;
    for _ in 0..draws {
        let h = sample_rayleigh(4, 4, &mut rng);
        total += h.iter().map(|z| z.norm_sqr()).sum::<f64>();
        re2 += h.iter().map(|z| z.re * z.re).sum::<f64>();
    }
    let n = (draws * 16) as f64;
    assert!((total / n - 1.0).abs() < 0.02, "E|h|^2 = {}", total / n);
    assert!((re2 / n - 0.5).abs() < 0.01, "E[Re h]^2 = {}", re2 / n);
}

#[test]
fn column_energy_concentrates_at_receive_count() {
    // |h_col|^2 is a sum of N_r unit exponentials: mean N_r, variance N_r.
    let (n_r, n_t, draws) = (4usize, 4usize, 5000usize);
    let mut rng = rng_from_seed(4);
    let mut acc = 0.0;
    for _ in 0..draws {
        let h = sample_rayleigh(n_r, n_t, &mut rng);
        for c in 0..n_t {
            acc += h.column(c).iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
    }
    let count = (draws * n_t) as f64;
    let mean = acc / count;
    let sigma = (n_r as f64 / count).sqrt();
    assert!((mean - n_r as f64).abs() < 3.0 * sigma, "mean column energy {mean}");
}

#[test]
fn noise_variance_per_real_dimension() {
    let c = Constellation::qpsk();
    let snr = 4.0;
    let dims = SystemDims::new(1, 64);
    let expected = snr_to_sigma(snr, &c, 1) / 2.0;
    let mut rng = rng_from_seed(5);
    let (mut sum, mut sum_sq, mut n) = (0.0, 0.0, 0usize);
    while n < 1_000_000 {
        let (sys, _) = sample_complex_system(dims, &c, snr, &mut rng);
        for v in lift_vector(&sys.noise).iter() {
            sum += v;
            sum_sq += v * v;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    assert!((var / expected - 1.0).abs() < 0.01, "variance {var}, expected {expected}");
}

#[test]
fn modulation_round_trips_every_bit_pattern() {
    for c in [Constellation::qpsk(), Constellation::qam16(), Constellation::qam64()] {
        let nb = c.bits_per_axis();
        for n_t in 1..=4 {
            let rows = 2 * n_t;
            let width = rows * nb;
            if width > 16 {
                continue;
            }
            for pattern in 0u32..(1 << width) {
                let bits = DMatrix::from_fn(rows, nb, |r, k| ((pattern >> (r * nb + k)) & 1) as u8);
                let x = modulate(&bits, &c).unwrap();
                assert_eq!(hard_demap(&x, &c), bits);
            }
        }
    }
}

#[test]
fn constellations_have_unit_average_energy() {
    for c in [Constellation::qpsk(), Constellation::qam16(), Constellation::qam64()] {
        let levels = c.levels();
        let axis = levels.iter().map(|l| l * l).sum::<f64>() / levels.len() as f64;
        assert!((axis - 0.5).abs() < 1e-12, "{}", c.name());
        assert!((c.symbol_energy() - 1.0).abs() < 1e-12);
    }
    let q = Constellation::qpsk();
    let x = modulate(&DMatrix::from_row_slice(2, 1, &[0, 1]), &q).unwrap();
    assert_eq!(x.as_slice(), &[0.5f64.sqrt(), -(0.5f64.sqrt())]);
}
