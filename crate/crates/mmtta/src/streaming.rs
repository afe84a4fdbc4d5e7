//! Online maintenance of a [`PerspectiveBank`]: initialization from a linear
//! head, responsibility-weighted sufficient-statistic deltas, closed-form MLE
//! over the accumulated totals, and EMA blending into the installed
//! parameters.
//!
//! Both running accumulation and EMA smoothing are applied, in that order:
//! totals `N/S/Q` grow monotonically across batches, the MLE is recovered
//! from the totals, and the installed parameters are a convex blend of the
//! previous parameters and the fresh MLE.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{
    mle_from_stats, shrink_covariance, ClassGaussian, Perspective, PerspectiveBank,
    SufficientStats, PRIOR_FLOOR,
};
use crate::math;

/// Default EMA rate for parameter blending.
pub const DEFAULT_EMA_ALPHA: f64 = 0.9;
/// Minimum accumulated soft mass before a class's mean/prior MLE is trusted.
pub const MEAN_TRUST_MASS: f64 = 1e-3;
/// Minimum accumulated soft count before a class's covariance MLE is trusted
/// (a one-sample covariance is zero and pure shrinkage noise).
pub const COV_TRUST_COUNT: f64 = 2.0;

/// Weights and biases of a frozen linear classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// C x d matrix; row `c` is the template for class `c`.
    pub weights: DMatrix<f64>,
    /// Length-C bias vector.
    pub biases: DVector<f64>,
}

impl HeadParams {
    pub fn new(weights: DMatrix<f64>, biases: DVector<f64>) -> Result<Self> {
        if weights.nrows() != biases.len() {
            return Err(Error::DimensionMismatch {
                context: "head weights vs biases",
                expected: weights.nrows(),
                actual: biases.len(),
            });
        }
        if !math::all_finite_mat(&weights) || !math::all_finite_vec(&biases) {
            return Err(Error::NonFiniteInput {
                context: "head parameters",
            });
        }
        Ok(HeadParams { weights, biases })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Logits `W z + b` for a batch of row features.
    pub fn logits(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = features * self.weights.transpose();
        for mut row in out.row_iter_mut() {
            row += self.biases.transpose();
        }
        out
    }
}

/// Per-sample soft class assignments; every row is a distribution.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    matrix: DMatrix<f64>,
}

impl Responsibilities {
    /// Validates each row: nonnegative entries summing to 1 within 1e-9.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        for (i, row) in matrix.row_iter().enumerate() {
            let mut sum = 0.0;
            for &g in row.iter() {
                if !(g >= 0.0) {
                    return Err(Error::RejectedBatch {
                        reason: format!("responsibility row {i} has a negative or NaN entry"),
                    });
                }
                sum += g;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::RejectedBatch {
                    reason: format!("responsibility row {i} sums to {sum}, expected 1"),
                });
            }
        }
        Ok(Responsibilities { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn batch_size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.ncols()
    }
}

/// EMA blending state: the rate and the per-class blended triples.
///
/// The covariances held here are the raw (unshrunk) blend state; shrinkage is
/// applied only to the copy installed into the bank, so it never compounds
/// across steps.
#[derive(Debug, Clone)]
pub struct EmaState {
    alpha: f64,
    priors: DVector<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

impl EmaState {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn priors(&self) -> &DVector<f64> {
        &self.priors
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }
}

/// Per-class outcome of re-estimation, graded by how much accumulated mass
/// backs each parameter.
#[derive(Debug, Clone)]
pub enum ClassEstimate {
    /// Not enough mass for anything; the class keeps its previous parameters.
    Hold,
    /// Mean and prior are trusted; covariance is not yet.
    MeanOnly { prior: f64, mean: DVector<f64> },
    /// Full MLE triple.
    Full {
        prior: f64,
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
    },
}

/// Build a bank whose initial scores reproduce the source head exactly:
/// `mean = w_c`, `cov = I`, `log_prior = b_c + 1/2 ||w_c||^2` (the bias is
/// absorbed into an unnormalized log-prior). Also returns the EMA state
/// seeded with a normalized copy of those priors.
pub fn init_from_head(head: &HeadParams, alpha: f64) -> Result<(PerspectiveBank, EmaState)> {
    init_from_head_for(head, alpha, Perspective::Fused)
}

/// As [`init_from_head`], tagging the bank with a specific perspective.
pub fn init_from_head_for(
    head: &HeadParams,
    alpha: f64,
    perspective: Perspective,
) -> Result<(PerspectiveBank, EmaState)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config {
            message: format!("ema alpha must lie in [0, 1], got {alpha}"),
        });
    }
    let num_classes = head.num_classes();
    let dim = head.dim();
    let mut params = Vec::with_capacity(num_classes);
    let mut log_priors = DVector::zeros(num_classes);
    for c in 0..num_classes {
        let mean: DVector<f64> = head.weights.row(c).transpose();
        let log_prior = head.biases[c] + 0.5 * mean.norm_squared();
        log_priors[c] = log_prior;
        params.push(ClassGaussian::new(
            log_prior,
            mean,
            DMatrix::identity(dim, dim),
        )?);
    }
    let stats = vec![SufficientStats::zeros(dim); num_classes];
    let bank = PerspectiveBank::new(perspective, dim, stats, params);
    let ema = EmaState {
        alpha,
        priors: math::softmax(&log_priors),
        means: (0..num_classes)
            .map(|c| head.weights.row(c).transpose())
            .collect(),
        covariances: vec![DMatrix::identity(dim, dim); num_classes],
    };
    Ok((bank, ema))
}

/// Responsibility-weighted moment deltas for one batch:
/// `dN_c = sum_i gamma_ic`, `dS_c = sum_i gamma_ic z_i`,
/// `dQ_c = sum_i gamma_ic z_i z_i^T`.
pub fn batch_deltas(
    features: &DMatrix<f64>,
    resp: &Responsibilities,
) -> Result<Vec<SufficientStats>> {
    if features.nrows() != resp.batch_size() {
        return Err(Error::DimensionMismatch {
            context: "batch_deltas rows",
            expected: features.nrows(),
            actual: resp.batch_size(),
        });
    }
    let dim = features.ncols();
    let num_classes = resp.num_classes();
    let mut counts = vec![0.0; num_classes];
    let mut firsts = vec![DVector::zeros(dim); num_classes];
    let mut seconds = vec![DMatrix::zeros(dim, dim); num_classes];
    for i in 0..features.nrows() {
        let z = features.row(i).transpose();
        for c in 0..num_classes {
            let gamma = resp.matrix()[(i, c)];
            if gamma == 0.0 {
                continue;
            }
            counts[c] += gamma;
            firsts[c].axpy(gamma, &z, 1.0);
            seconds[c].ger(gamma, &z, &z, 1.0);
        }
    }
    Ok(counts
        .into_iter()
        .zip(firsts)
        .zip(seconds)
        .map(|((count, first), second)| SufficientStats::from_parts(count, first, second))
        .collect())
}

/// Fold a batch's deltas into the bank's running totals and recover per-class
/// estimates from the accumulated statistics. Classes below the trust
/// thresholds report graded holds instead of estimates.
pub fn absorb_and_reestimate(
    bank: &mut PerspectiveBank,
    deltas: &[SufficientStats],
) -> Result<Vec<ClassEstimate>> {
    if deltas.len() != bank.num_classes() {
        return Err(Error::DimensionMismatch {
            context: "absorb_and_reestimate classes",
            expected: bank.num_classes(),
            actual: deltas.len(),
        });
    }
    for (stats, delta) in bank.stats_mut().iter_mut().zip(deltas) {
        stats.accumulate(delta);
    }
    let total: f64 = bank.stats().iter().map(|s| s.count()).sum();
    let estimates = bank
        .stats()
        .iter()
        .map(|stats| {
            if stats.count() < MEAN_TRUST_MASS {
                return ClassEstimate::Hold;
            }
            let mle = mle_from_stats(stats, total).expect("count above threshold");
            if stats.count() < COV_TRUST_COUNT {
                ClassEstimate::MeanOnly {
                    prior: mle.prior,
                    mean: mle.mean,
                }
            } else {
                ClassEstimate::Full {
                    prior: mle.prior,
                    mean: mle.mean,
                    covariance: mle.covariance,
                }
            }
        })
        .collect();
    Ok(estimates)
}

/// Convex blend `alpha * previous + (1 - alpha) * fresh`.
#[inline]
pub fn blend(alpha: f64, previous: f64, fresh: f64) -> f64 {
    alpha * previous + (1.0 - alpha) * fresh
}

/// Blend fresh estimates into the EMA state and install the result into the
/// bank. Held classes are left untouched (bank and state); blended priors are
/// renormalized onto the probability mass not claimed by held classes, so a
/// class absent from every batch keeps its prior bit-exactly. Covariances are
/// shrunk only on the installed copy.
pub fn ema_blend(
    state: &mut EmaState,
    estimates: &[ClassEstimate],
    bank: &mut PerspectiveBank,
    epsilon_shrink: f64,
) -> Result<()> {
    let alpha = state.alpha;
    // alpha = 1 is the degenerate EMA: nothing changes, including shrinkage
    // side effects, so skip entirely.
    if alpha == 1.0 {
        return Ok(());
    }
    let num_classes = bank.num_classes();
    assert_eq!(estimates.len(), num_classes);

    let mut held_mass = 0.0;
    let mut blended_mass = 0.0;
    for (c, estimate) in estimates.iter().enumerate() {
        match estimate {
            ClassEstimate::Hold => held_mass += state.priors[c],
            ClassEstimate::MeanOnly { prior, mean } | ClassEstimate::Full { prior, mean, .. } => {
                state.priors[c] = blend(alpha, state.priors[c], *prior);
                blended_mass += state.priors[c];
                let blended_mean = alpha * &state.means[c] + (1.0 - alpha) * mean;
                state.means[c] = blended_mean;
                if let ClassEstimate::Full { covariance, .. } = estimate {
                    let mut blended_cov = alpha * &state.covariances[c] + (1.0 - alpha) * covariance;
                    math::symmetrize(&mut blended_cov);
                    state.covariances[c] = blended_cov;
                }
            }
        }
    }

    // Scale the blended classes onto the mass the held classes do not own.
    if blended_mass > 0.0 {
        let scale = (1.0 - held_mass) / blended_mass;
        for (c, estimate) in estimates.iter().enumerate() {
            if !matches!(estimate, ClassEstimate::Hold) {
                state.priors[c] *= scale;
            }
        }
    }
    // Floor only when some prior actually dropped below it, then renormalize;
    // the common path leaves priors untouched.
    if state.priors.iter().any(|&p| p < PRIOR_FLOOR) {
        for p in state.priors.iter_mut() {
            *p = p.max(PRIOR_FLOOR);
        }
        let sum: f64 = state.priors.iter().sum();
        state.priors /= sum;
    }

    for (c, estimate) in estimates.iter().enumerate() {
        match estimate {
            ClassEstimate::Hold => {}
            ClassEstimate::MeanOnly { .. } => {
                let prev = &bank.params()[c];
                let param = ClassGaussian::from_cached(
                    state.priors[c].ln(),
                    state.means[c].clone(),
                    prev.covariance().clone(),
                    prev.log_det(),
                    prev.chol_lower().clone(),
                );
                bank.set_param(c, param);
            }
            ClassEstimate::Full { .. } => {
                let (shrunk, factor) = shrink_covariance(&state.covariances[c], epsilon_shrink, c)?;
                let param = ClassGaussian::from_cached(
                    state.priors[c].ln(),
                    state.means[c].clone(),
                    shrunk,
                    factor.log_det,
                    factor.lower,
                );
                bank.set_param(c, param);
            }
        }
    }
    Ok(())
}
