//! MIMO channel instances.
//!
//! A complex system `y_c = H_c x_c + n_c` with i.i.d. `CN(0, 1)` channel
//! entries is drawn first and then rewritten as the equivalent real system
//!
//! ```text
//! [Re y]   [Re H  -Im H] [Re x]   [Re n]
//! [Im y] = [Im H   Re H] [Im x] + [Im n]
//! ```
//!
//! Real dimension `i < N_t` is the in-phase part of antenna `i` and
//! `i >= N_t` the quadrature part of antenna `i - N_t`. The noise variance
//! per real dimension is `sigma_c^2 / 2`.
//!
//! SNR convention: per receive antenna, `E[|Hx|^2] / (N_r sigma_c^2)`, which
//! for unit-energy symbols gives `sigma_c^2 = N_t E_s / 10^(snr_db / 10)`.

mod constellation;
pub mod dataset;

pub use constellation::{AxisPosterior, Constellation};

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Complex64 = Complex<f64>;

/// Transmit/receive antenna counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemDims {
    pub n_t: usize,
    pub n_r: usize,
}

impl SystemDims {
    pub fn new(n_t: usize, n_r: usize) -> Self {
        Self { n_t, n_r }
    }

    /// Number of real transmit dimensions, `2 N_t`.
    pub fn real_tx(&self) -> usize {
        2 * self.n_t
    }

    /// Number of real receive dimensions, `2 N_r`.
    pub fn real_rx(&self) -> usize {
        2 * self.n_r
    }
}

/// One complex-domain channel use.
#[derive(Debug, Clone)]
pub struct ComplexMimoSystem {
    pub h: DMatrix<Complex64>,
    pub x: DVector<Complex64>,
    pub noise: DVector<Complex64>,
    pub y: DVector<Complex64>,
    /// Noise variance per complex dimension.
    pub sigma_c2: f64,
}

/// Real-valued detection problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MimoInstance {
    /// `[2 N_r, 2 N_t]` with the block structure of the real lift.
    pub h: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x: DVector<f64>,
    /// Per-row noise variances, all positive.
    pub sigma2: DVector<f64>,
    /// Ground-truth bits, `[2 N_t, N_bits / 2]`.
    pub bits: DMatrix<u8>,
    pub snr_db: f64,
}

impl MimoInstance {
    pub fn dims(&self) -> SystemDims {
        SystemDims::new(self.h.ncols() / 2, self.h.nrows() / 2)
    }

    pub fn bits_per_axis(&self) -> usize {
        self.bits.ncols()
    }
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// `[n_r, n_t]` matrix of i.i.d. `CN(0, 1)` entries.
pub fn sample_rayleigh<R: Rng + ?Sized>(n_r: usize, n_t: usize, rng: &mut R) -> DMatrix<Complex64> {
    assert!(n_r >= 1 && n_t >= 1, "antenna counts must be positive");
    // column-major fill order is part of the replay contract
    DMatrix::from_fn(n_r, n_t, |_, _| complex_gaussian(rng, 1.0))
}

/// `sample_rayleigh` driven by a fresh generator seeded with `seed`.
pub fn sample_rayleigh_seeded(n_r: usize, n_t: usize, seed: u64) -> DMatrix<Complex64> {
    sample_rayleigh(n_r, n_t, &mut crate::rng::rng_from_seed(seed))
}

/// Complex noise variance for a given SNR under the per-receive-antenna convention.
pub fn snr_to_sigma(snr_db: f64, constellation: &Constellation, n_t: usize) -> f64 {
    n_t as f64 * constellation.symbol_energy() / 10f64.powf(snr_db / 10.0)
}

/// Inverse of [`snr_to_sigma`].
pub fn sigma_to_snr_db(sigma_c2: f64, constellation: &Constellation, n_t: usize) -> f64 {
    10.0 * (n_t as f64 * constellation.symbol_energy() / sigma_c2).log10()
}

/// Real-valued lift `[[Re, -Im], [Im, Re]]` of a complex matrix.
pub fn lift_matrix(h: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (r, c) = h.shape();
    DMatrix::from_fn(2 * r, 2 * c, |i, j| {
        let z = h[(i % r, j % c)];
        match (i < r, j < c) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

/// `[Re v; Im v]`.
pub fn lift_vector(v: &DVector<Complex64>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

/// Inverse of [`lift_vector`].
pub fn unlift_vector(v: &DVector<f64>) -> DVector<Complex64> {
    let n = v.len() / 2;
    DVector::from_fn(n, |i, _| Complex64::new(v[i], v[i + n]))
}

/// Rewrites a complex system as its equivalent real-valued instance.
///
/// Bits are recovered by hard-demapping `x`, which is exact whenever `x`
/// holds valid constellation points.
pub fn lift_to_real(sys: &ComplexMimoSystem, constellation: &Constellation) -> MimoInstance {
    let h = lift_matrix(&sys.h);
    let y = lift_vector(&sys.y);
    let x = lift_vector(&sys.x);
    let sigma2 = DVector::from_element(h.nrows(), sys.sigma_c2 / 2.0);
    let bits = hard_demap(&x, constellation);
    let snr_db = sigma_to_snr_db(sys.sigma_c2, constellation, sys.h.ncols());
    MimoInstance {
        h,
        y,
        x,
        sigma2,
        bits,
        snr_db,
    }
}

/// Maps a `[2 N_t, N_bits / 2]` bit matrix to real-axis levels.
pub fn modulate(bits: &DMatrix<u8>, constellation: &Constellation) -> Result<DVector<f64>> {
    let nb = constellation.bits_per_axis();
    if bits.ncols() != nb || bits.nrows() == 0 || bits.nrows() % 2 != 0 {
        return Err(Error::Shape {
            what: "bit matrix",
            expected: (bits.nrows().max(2) / 2 * 2, nb),
            actual: bits.shape(),
        });
    }
    let mut out = DVector::zeros(bits.nrows());
    let mut row_bits = vec![0u8; nb];
    for r in 0..bits.nrows() {
        for c in 0..nb {
            let b = bits[(r, c)];
            if b > 1 {
                return Err(Error::InvalidBit {
                    row: r,
                    col: c,
                    value: b,
                });
            }
            row_bits[c] = b;
        }
        out[r] = constellation.map_axis(&row_bits);
    }
    Ok(out)
}

/// Nearest-level bit decisions for each real dimension.
pub fn hard_demap(x: &DVector<f64>, constellation: &Constellation) -> DMatrix<u8> {
    let nb = constellation.bits_per_axis();
    DMatrix::from_fn(x.len(), nb, |r, c| {
        constellation.label_bit(constellation.nearest_label(x[r]), c)
    })
}

/// Uniform random bits for `n_t` antennas.
pub fn random_bits<R: Rng + ?Sized>(n_t: usize, constellation: &Constellation, rng: &mut R) -> DMatrix<u8> {
    DMatrix::from_fn(2 * n_t, constellation.bits_per_axis(), |_, _| rng.gen_range(0..=1u8))
}

/// Draws a complete complex system at the given SNR.
pub fn sample_complex_system<R: Rng + ?Sized>(
    dims: SystemDims,
    constellation: &Constellation,
    snr_db: f64,
    rng: &mut R,
) -> (ComplexMimoSystem, DMatrix<u8>) {
    let h = sample_rayleigh(dims.n_r, dims.n_t, rng);
    let bits = random_bits(dims.n_t, constellation, rng);
    let x = unlift_vector(&modulate(&bits, constellation).expect("generated bits are well formed"));
    let sigma_c2 = snr_to_sigma(snr_db, constellation, dims.n_t);
    let noise = DVector::from_fn(dims.n_r, |_, _| complex_gaussian(rng, sigma_c2));
    let y = &h * &x + &noise;
    (
        ComplexMimoSystem {
            h,
            x,
            noise,
            y,
            sigma_c2,
        },
        bits,
    )
}

/// Draws one real-valued detection instance at `snr_db`.
pub fn sample_instance<R: Rng + ?Sized>(
    dims: SystemDims,
    constellation: &Constellation,
    snr_db: f64,
    rng: &mut R,
) -> MimoInstance {
    let (sys, bits) = sample_complex_system(dims, constellation, snr_db, rng);
    let mut inst = lift_to_real(&sys, constellation);
    inst.bits = bits;
    inst.snr_db = snr_db;
    inst
}

/// Like [`sample_instance`] but with the noise term removed from `y`.
///
/// `sigma2` still reports the nominal variance for `snr_db`, so detectors
/// see a well-posed problem whose exact solution is the transmitted vector.
pub fn sample_noiseless_instance<R: Rng + ?Sized>(
    dims: SystemDims,
    constellation: &Constellation,
    snr_db: f64,
    rng: &mut R,
) -> MimoInstance {
    let mut inst = sample_instance(dims, constellation, snr_db, rng);
    inst.y = &inst.h * &inst.x;
    inst
}
