//! Binomial confidence intervals and proportion tests for BER estimates.

/// Two-sided 95% normal quantile.
pub const Z_95_TWO_SIDED: f64 = 1.959_963_984_540_054;
/// One-sided 95% normal quantile.
pub const Z_95_ONE_SIDED: f64 = 1.644_853_626_951_472_2;

/// Wilson score interval for `errors` successes out of `trials`.
pub fn wilson_interval(errors: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = errors as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Pooled two-proportion z statistic for `p_b - p_a`; positive when `b` has the higher rate.
pub fn two_proportion_z(errors_a: u64, n_a: u64, errors_b: u64, n_b: u64) -> f64 {
    let (na, nb) = (n_a as f64, n_b as f64);
    let (pa, pb) = (errors_a as f64 / na, errors_b as f64 / nb);
    let pooled = (errors_a + errors_b) as f64 / (na + nb);
    let se = (pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb)).sqrt();
    if se == 0.0 {
        return 0.0;
    }
    (pb - pa) / se
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_reference_values() {
        // 10 of 100, evaluated independently at 30 digits
        let (lo, hi) = wilson_interval(10, 100, Z_95_TWO_SIDED);
        assert!((lo - 0.055_229_137_060_675_09).abs() < 1e-12, "{lo}");
        assert!((hi - 0.174_365_661_504_913_45).abs() < 1e-12, "{hi}");
        let (lo, hi) = wilson_interval(0, 50, Z_95_TWO_SIDED);
        assert!(lo.abs() < 1e-15);
        assert!(hi > 0.0 && hi < 0.1);
    }

    #[test]
    fn z_statistic_sign_and_symmetry() {
        let z = two_proportion_z(100, 10_000, 200, 10_000);
        assert!(z > 5.0);
        assert_eq!(two_proportion_z(200, 10_000, 100, 10_000), -z);
        assert_eq!(two_proportion_z(0, 10, 0, 10), 0.0);
    }
}
