//! `--assert-ordering` expressions such as `ml<=sgt<=lmmse`.
//!
//! A link `a<=b` is violated at an SNR point when a one-sided two-proportion
//! z-test says `BER_a > BER_b` at 95% confidence.

use std::fmt;
use std::str::FromStr;

use sgt_core::trainer::stats::{two_proportion_z, Z_95_ONE_SIDED};
use sgt_core::trainer::BerRecord;

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderingExpr(Vec<String>);

impl OrderingExpr {
    pub fn detectors(&self) -> &[String] {
        &self.0
    }
}

impl FromStr for OrderingExpr {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let names: Vec<String> = s.split("<=").map(|n| n.trim().to_string()).collect();
        if names.len() < 2 || names.iter().any(|n| n.is_empty() || n.contains(['<', '>', '='])) {
            return Err(BenchError::OrderingExpr(s.to_string()));
        }
        Ok(Self(names))
    }
}

impl fmt::Display for OrderingExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("<="))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub lower: String,
    pub upper: String,
    pub snr_db: f64,
    pub ber_lower: f64,
    pub ber_upper: f64,
    pub z: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} <= {} violated at {} dB: {:.3e} > {:.3e} (z = {:.2})",
            self.lower, self.upper, self.snr_db, self.ber_lower, self.ber_upper, self.z
        )
    }
}

/// Checks every link of `expr` at each SNR point `>= min_snr` present for both
/// detectors.
pub fn check_ordering(records: &[BerRecord], expr: &OrderingExpr, min_snr: f64) -> Result<Vec<Violation>> {
    for name in expr.detectors() {
        if !records.iter().any(|r| &r.detector == name) {
            return Err(BenchError::OrderingDetector(name.clone()));
        }
    }
    let mut out = Vec::new();
    for pair in expr.detectors().windows(2) {
        let (lo, hi) = (&pair[0], &pair[1]);
        for a in records.iter().filter(|r| &r.detector == lo && r.snr_db >= min_snr) {
            let Some(b) = records.iter().find(|r| &r.detector == hi && r.snr_db == a.snr_db) else {
                continue;
            };
            let z = two_proportion_z(b.errors, b.bits, a.errors, a.bits);
            if z > Z_95_ONE_SIDED {
                out.push(Violation {
                    lower: lo.clone(),
                    upper: hi.clone(),
                    snr_db: a.snr_db,
                    ber_lower: a.ber,
                    ber_upper: b.ber,
                    z,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(name: &str, snr: f64, errors: u64) -> BerRecord {
        BerRecord::new(name.into(), snr, errors, 100_000, 25_000, false)
    }

    #[test]
    fn parses_chains() {
        let e: OrderingExpr = "ml<=sgt<=lmmse".parse().unwrap();
        assert_eq!(e.detectors(), ["ml", "sgt", "lmmse"]);
        assert_eq!(e.to_string(), "ml<=sgt<=lmmse");
        assert!("ml".parse::<OrderingExpr>().is_err());
        assert!("ml<=".parse::<OrderingExpr>().is_err());
        assert!("ml<sgt".parse::<OrderingExpr>().is_err());
    }

    #[test]
    fn only_significant_reversals_count() {
        let e: OrderingExpr = "ml<=sgt<=lmmse".parse().unwrap();
        let records = vec![
            rec("ml", 6.0, 1000),
            rec("ml", 10.0, 300),
            rec("sgt", 6.0, 1010),
            rec("sgt", 10.0, 600),
            rec("lmmse", 6.0, 3000),
            rec("lmmse", 10.0, 400),
        ];
        let v = check_ordering(&records, &e, 0.0).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].lower.as_str(), v[0].snr_db), ("sgt", 10.0));
        assert!(check_ordering(&records, &e, 11.0).unwrap().is_empty());
        let missing: OrderingExpr = "ml<=oamp".parse().unwrap();
        assert!(matches!(check_ordering(&records, &missing, 0.0), Err(BenchError::OrderingDetector(_))));
    }
}
