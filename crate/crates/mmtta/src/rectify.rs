//! Per-sample detection of the distribution-shifted modality via symmetric
//! KL against the fused posterior, and the one-sided contrastive
//! rectification loss with stop-gradient on the reliable side.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fusion::BatchView;
use crate::math;

/// Default temperature for the one-sided contrastive loss.
pub const DEFAULT_TAU: f64 = 0.05;
/// Probability clamp used before any KL logarithm.
const KL_CLAMP: f64 = 1e-12;

/// Which samples are flagged as shifted in which modality, plus the raw
/// per-sample discrepancies that produced the split.
///
/// Sample i lands in `set_m1` iff its modality-2 discrepancy is strictly
/// smaller than its modality-1 discrepancy; ties go to `set_m2`. The two
/// sets are disjoint and cover the batch.
#[derive(Debug, Clone)]
pub struct ReliabilityPartition {
    pub set_m1: Vec<usize>,
    pub set_m2: Vec<usize>,
    /// Per sample: (modality-1 discrepancy, modality-2 discrepancy).
    pub discrepancies: Vec<(f64, f64)>,
}

impl ReliabilityPartition {
    pub fn batch_size(&self) -> usize {
        self.discrepancies.len()
    }

    /// True if sample `i` is flagged as shifted in modality 1.
    pub fn flags_m1(&self, i: usize) -> bool {
        let (d1, d2) = self.discrepancies[i];
        d2 < d1
    }
}

/// Symmetric KL divergence `(KL(p||q) + KL(q||p)) / 2`.
///
/// Entries are clamped to at least 1e-12 and renormalized before the logs, so
/// degenerate inputs stay finite.
pub fn symmetric_kl(p: &DVector<f64>, q: &DVector<f64>) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let clamp_norm = |v: &DVector<f64>| {
        let mut out = v.map(|x| x.max(KL_CLAMP));
        let sum: f64 = out.iter().sum();
        out /= sum;
        out
    };
    let p = clamp_norm(p);
    let q = clamp_norm(q);
    let mut kl_pq = 0.0;
    let mut kl_qp = 0.0;
    for i in 0..p.len() {
        kl_pq += p[i] * (p[i] / q[i]).ln();
        kl_qp += q[i] * (q[i] / p[i]).ln();
    }
    0.5 * (kl_pq + kl_qp)
}

/// Partition a batch by comparing each uni-modal posterior against the fused
/// posterior. The rows of the three matrices are per-sample distributions.
pub fn reliability_partition_from(
    posterior_m1: &DMatrix<f64>,
    posterior_m2: &DMatrix<f64>,
    posterior_fused: &DMatrix<f64>,
) -> ReliabilityPartition {
    let batch = posterior_fused.nrows();
    let mut set_m1 = Vec::new();
    let mut set_m2 = Vec::new();
    let mut discrepancies = Vec::with_capacity(batch);
    for i in 0..batch {
        let fused = posterior_fused.row(i).transpose();
        let d1 = symmetric_kl(&posterior_m1.row(i).transpose(), &fused);
        let d2 = symmetric_kl(&posterior_m2.row(i).transpose(), &fused);
        discrepancies.push((d1, d2));
        if d2 < d1 {
            set_m1.push(i);
        } else {
            set_m2.push(i);
        }
    }
    ReliabilityPartition {
        set_m1,
        set_m2,
        discrepancies,
    }
}

/// Partition using the batch's per-perspective discriminant posteriors.
pub fn reliability_partition(batch: &BatchView) -> ReliabilityPartition {
    reliability_partition_from(&batch.m1.posterior, &batch.m2.posterior, &batch.fused.posterior)
}

/// One-sided InfoNCE rectification.
///
/// For each sample flagged in modality m, the normalized feature of that
/// modality is the anchor; the other modality's normalized features over the
/// whole batch (its own positive included in the denominator) are fixed
/// references that receive no gradient. Returns the batch-averaged loss and
/// the gradients with respect to the raw anchor-side features; rows of
/// samples that anchor the other modality are exactly zero.
pub fn one_sided_infonce(
    features_m1: &DMatrix<f64>,
    features_m2: &DMatrix<f64>,
    partition: &ReliabilityPartition,
    tau: f64,
) -> Result<InfoNceOutput> {
    if tau <= 0.0 {
        return Err(Error::Config {
            message: format!("contrastive temperature must be positive, got {tau}"),
        });
    }
    let batch = features_m1.nrows();
    let dim = features_m1.ncols();
    debug_assert_eq!(features_m2.nrows(), batch);
    debug_assert_eq!(partition.batch_size(), batch);

    let normalize = |features: &DMatrix<f64>, side: &str| -> Result<(DMatrix<f64>, Vec<f64>)> {
        let mut unit = features.clone();
        let mut norms = Vec::with_capacity(batch);
        for i in 0..batch {
            let norm = features.row(i).norm();
            if norm == 0.0 {
                return Err(Error::RejectedSample {
                    index: i,
                    reason: if side == "m1" {
                        "zero-norm modality-1 feature cannot be normalized"
                    } else {
                        "zero-norm modality-2 feature cannot be normalized"
                    },
                });
            }
            let mut row = unit.row_mut(i);
            row /= norm;
            norms.push(norm);
        }
        Ok((unit, norms))
    };
    let (unit_m1, norms_m1) = normalize(features_m1, "m1")?;
    let (unit_m2, norms_m2) = normalize(features_m2, "m2")?;

    let mut loss = 0.0;
    let mut grad_m1 = DMatrix::zeros(batch, dim);
    let mut grad_m2 = DMatrix::zeros(batch, dim);

    let mut accumulate = |anchor_idx: usize,
                          anchors: &DMatrix<f64>,
                          anchor_norms: &[f64],
                          refs: &DMatrix<f64>,
                          grad: &mut DMatrix<f64>| {
        let u = anchors.row(anchor_idx).transpose();
        // logits_j = <u, r_j> / tau over the full batch of references.
        let logits: DVector<f64> = DVector::from_fn(batch, |j, _| refs.row(j).dot(&u.transpose()) / tau);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[anchor_idx];

        // dl/du = (sum_j sigma_j r_j - r_anchor) / tau, sigma = softmax(logits).
        let sigma = math::softmax(&logits);
        let mut dl_du = DVector::zeros(dim);
        for j in 0..batch {
            dl_du.axpy(sigma[j] / tau, &refs.row(j).transpose(), 1.0);
        }
        dl_du.axpy(-1.0 / tau, &refs.row(anchor_idx).transpose(), 1.0);
        // Through the normalization: dl/dz = (I - u u^T) dl/du / ||z||.
        let projected = &dl_du - &u * u.dot(&dl_du);
        grad.row_mut(anchor_idx)
            .copy_from(&(projected / anchor_norms[anchor_idx]).transpose());
    };

    for &i in &partition.set_m1 {
        accumulate(i, &unit_m1, &norms_m1, &unit_m2, &mut grad_m1);
    }
    for &i in &partition.set_m2 {
        accumulate(i, &unit_m2, &norms_m2, &unit_m1, &mut grad_m2);
    }

    let b = batch as f64;
    Ok(InfoNceOutput {
        loss: loss / b,
        grad_m1: grad_m1 / b,
        grad_m2: grad_m2 / b,
    })
}

/// Loss value and raw-feature gradients of the one-sided contrastive loss.
#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub loss: f64,
    /// Gradient with respect to the raw modality-1 features; nonzero only on
    /// rows anchored by modality 1.
    pub grad_m1: DMatrix<f64>,
    /// Gradient with respect to the raw modality-2 features; nonzero only on
    /// rows anchored by modality 2.
    pub grad_m2: DMatrix<f64>,
}
