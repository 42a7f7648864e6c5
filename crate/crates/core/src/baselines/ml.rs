use nalgebra::{DMatrix, DVector};

use super::{DetectorMeta, DetectorOutput};
use crate::channel::{Constellation, MimoInstance};
use crate::error::{Error, Result};
use crate::tokenizer::clamp_llr;

/// Largest search space [`ml_detect`] accepts.
pub const ML_CANDIDATE_LIMIT: u64 = 1 << 24;

/// Minimises `sum_j (y_j - h_j x)^2 / sigma_j^2` over every constellation vector.
///
/// The candidate index is the bit matrix read row-major as one MSB-first
/// binary number; ties keep the lowest index.
///
/// When `H` has at least as many rows as columns the search runs depth first
/// over the whitened triangular factor and skips subtrees whose partial
/// metric already exceeds the incumbent. The result is the same as
/// [`ml_detect_exhaustive`].
pub fn ml_detect(inst: &MimoInstance) -> Result<DetectorOutput> {
    let c = Constellation::from_bits_per_axis(inst.bits_per_axis())?;
    guard(&c, inst.h.ncols())?;
    if inst.h.nrows() < inst.h.ncols() {
        return search(inst, false);
    }
    Ok(pruned(inst, &c))
}

/// Visits every candidate in index order.
pub fn ml_detect_exhaustive(inst: &MimoInstance) -> Result<DetectorOutput> {
    search(inst, false)
}

fn guard(c: &Constellation, n: usize) -> Result<()> {
    let candidates = (c.axis_size() as u128).pow(n as u32);
    if candidates > u128::from(ML_CANDIDATE_LIMIT) {
        return Err(Error::SearchSpaceTooLarge {
            candidates,
            limit: ML_CANDIDATE_LIMIT,
        });
    }
    Ok(())
}

fn weighted_residual(inst: &MimoInstance, x: &DVector<f64>) -> f64 {
    let r = &inst.y - &inst.h * x;
    r.iter().zip(inst.sigma2.iter()).map(|(v, s)| v * v / s).sum()
}

struct Tree<'a> {
    c: &'a Constellation,
    r: DMatrix<f64>,
    z: DVector<f64>,
    labels: Vec<usize>,
    x: Vec<f64>,
    best: (f64, u64),
    best_labels: Vec<usize>,
    leaves: usize,
}

impl Tree<'_> {
    /// Depth-first over axes `n-1, ..., 0`; `partial` covers rows `k+1..n`.
    fn descend(&mut self, k: usize, partial: f64) {
        let n = self.x.len();
        let m = self.c.axis_size();
        let tail: f64 = (k + 1..n).map(|j| self.r[(k, j)] * self.x[j]).sum();
        let rkk = self.r[(k, k)];
        let centre = if rkk != 0.0 { (self.z[k] - tail) / rkk } else { 0.0 };
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            let da = (self.c.level(a) - centre).abs();
            let db = (self.c.level(b) - centre).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        for label in order {
            let level = self.c.level(label);
            let e = self.z[k] - tail - rkk * level;
            let d = partial + e * e;
            // children are sorted by distance to the centre, so the rest are worse
            if d > self.best.0 {
                break;
            }
            self.labels[k] = label;
            self.x[k] = level;
            if k == 0 {
                self.leaves += 1;
                let index = self.labels.iter().fold(0u64, |acc, &l| acc * m as u64 + l as u64);
                if (d, index) < self.best {
                    self.best = (d, index);
                    self.best_labels.copy_from_slice(&self.labels);
                }
            } else {
                self.descend(k - 1, d);
            }
        }
    }
}

fn pruned(inst: &MimoInstance, c: &Constellation) -> DetectorOutput {
    let (rows, n) = inst.h.shape();
    let scale: Vec<f64> = inst.sigma2.iter().map(|s| 1.0 / s.sqrt()).collect();
    let hw = DMatrix::from_fn(rows, n, |j, i| inst.h[(j, i)] * scale[j]);
    let yw = DVector::from_fn(rows, |j, _| inst.y[j] * scale[j]);
    let qr = hw.qr();
    let z = qr.q().transpose() * &yw;
    let mut tree = Tree {
        c,
        r: qr.r(),
        z,
        labels: vec![0; n],
        x: vec![0.0; n],
        best: (f64::INFINITY, u64::MAX),
        best_labels: vec![0; n],
        leaves: 0,
    };
    tree.descend(n - 1, 0.0);
    let labels = tree.best_labels;
    let nb = c.bits_per_axis();
    let bits = DMatrix::from_fn(n, nb, |i, k| c.label_bit(labels[i], k));
    let x = DVector::from_iterator(n, labels.iter().map(|&l| c.level(l)));
    DetectorOutput {
        bits,
        llrs: None,
        meta: DetectorMeta {
            iterations: tree.leaves,
            residual_norms: vec![weighted_residual(inst, &x)],
            diverged: false,
        },
    }
}

/// [`ml_detect`] plus max-log LLRs `(min_{b=1} d - min_{b=0} d) / 2`.
pub fn ml_detect_soft(inst: &MimoInstance) -> Result<DetectorOutput> {
    search(inst, true)
}

fn search(inst: &MimoInstance, soft: bool) -> Result<DetectorOutput> {
    let c = Constellation::from_bits_per_axis(inst.bits_per_axis())?;
    let (rows, n) = inst.h.shape();
    let (m, nb) = (c.axis_size(), c.bits_per_axis());
    guard(&c, n)?;
    let weights: Vec<f64> = inst.sigma2.iter().map(|s| 1.0 / s).collect();
    let h = inst.h.as_slice();
    // res[k] holds y minus the contribution of axes 0..k
    let mut res = vec![0.0; (n + 1) * rows];
    res[..rows].copy_from_slice(inst.y.as_slice());
    let mut labels = vec![0usize; n];
    let fill = |res: &mut [f64], labels: &[usize], from: usize| {
        for k in from..n {
            let level = c.level(labels[k]);
            let col = &h[k * rows..(k + 1) * rows];
            let (done, rest) = res.split_at_mut((k + 1) * rows);
            let prev = &done[k * rows..];
            for ((dst, &p), &hc) in rest[..rows].iter_mut().zip(prev).zip(col) {
                *dst = p - hc * level;
            }
        }
    };
    fill(&mut res, &labels, 0);

    let mut best = f64::INFINITY;
    let mut best_labels = labels.clone();
    let mut min_d = vec![[f64::INFINITY; 2]; if soft { n * nb } else { 0 }];
    let mut visited = 0usize;
    loop {
        visited += 1;
        let r = &res[n * rows..];
        let d: f64 = r.iter().zip(&weights).map(|(v, w)| v * v * w).sum();
        if d < best {
            best = d;
            best_labels.copy_from_slice(&labels);
        }
        if soft {
            for (i, &label) in labels.iter().enumerate() {
                for k in 0..nb {
                    let slot = &mut min_d[i * nb + k][c.label_bit(label, k) as usize];
                    if d < *slot {
                        *slot = d;
                    }
                }
            }
        }
        let mut axis = n;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            labels[axis] += 1;
            if labels[axis] < m {
                break;
            }
            labels[axis] = 0;
        }
        if labels.iter().all(|&l| l == 0) {
            break;
        }
        fill(&mut res, &labels, axis);
    }

    let bits = DMatrix::from_fn(n, nb, |i, k| c.label_bit(best_labels[i], k));
    let llrs = soft.then(|| DMatrix::from_fn(n, nb, |i, k| {
        let [zero, one] = min_d[i * nb + k];
        clamp_llr((one - zero) / 2.0)
    }));
    Ok(DetectorOutput {
        bits,
        llrs,
        meta: DetectorMeta {
            iterations: visited,
            residual_norms: vec![best],
            diverged: false,
        },
    })
}
