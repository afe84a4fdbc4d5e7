//! Closed-form Gaussian machinery: quadratic discriminant scores, posteriors,
//! moment-based maximum-likelihood recovery, covariance shrinkage, and
//! covariance-deviation summaries.
//!
//! Scores are unnormalized log-posteriors with the class-independent
//! `-(d/2) log 2pi` dropped; the Mahalanobis term goes through a cached
//! Cholesky factor (one triangular solve), never an explicit inverse.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Default diagonal shrinkage added to estimated covariances.
pub const DEFAULT_EPSILON_SHRINK: f64 = 1e-4;
/// Floor applied to normalized priors so `log(prior)` stays finite.
pub const PRIOR_FLOOR: f64 = 1e-8;
/// Shrinkage retries (epsilon doubles each time) before giving up.
const SHRINK_MAX_RETRIES: usize = 8;

/// One of the three scored views of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Perspective {
    M1,
    M2,
    Fused,
}

impl Perspective {
    pub const ALL: [Perspective; 3] = [Perspective::M1, Perspective::M2, Perspective::Fused];

    pub fn tag(self) -> &'static str {
        match self {
            Perspective::M1 => "m1",
            Perspective::M2 => "m2",
            Perspective::Fused => "fused",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Perspective::M1 => 0,
            Perspective::M2 => 1,
            Perspective::Fused => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Perspective> {
        match code {
            0 => Some(Perspective::M1),
            1 => Some(Perspective::M2),
            2 => Some(Perspective::Fused),
            _ => None,
        }
    }
}

/// Streaming per-class moments: soft count, summed features, summed outer
/// products. Together they determine the Gaussian MLE without stored samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    count: f64,
    first_moment: DVector<f64>,
    second_moment: DMatrix<f64>,
}

impl SufficientStats {
    pub fn zeros(dim: usize) -> Self {
        SufficientStats {
            count: 0.0,
            first_moment: DVector::zeros(dim),
            second_moment: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_parts(count: f64, first_moment: DVector<f64>, second_moment: DMatrix<f64>) -> Self {
        let mut stats = SufficientStats {
            count,
            first_moment,
            second_moment,
        };
        math::symmetrize(&mut stats.second_moment);
        stats
    }

    pub fn dim(&self) -> usize {
        self.first_moment.len()
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn first_moment(&self) -> &DVector<f64> {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.second_moment
    }

    /// Accumulate another block of moments. Symmetry of the second moment is
    /// re-enforced after every accumulation.
    pub fn accumulate(&mut self, delta: &SufficientStats) {
        self.count += delta.count;
        self.first_moment += &delta.first_moment;
        self.second_moment += &delta.second_moment;
        math::symmetrize(&mut self.second_moment);
    }
}

/// Per-class Gaussian parameters with cached factorization.
///
/// The prior is stored in log form: at initialization the log-prior is
/// deliberately unnormalized (it absorbs the source head bias so that the
/// initial scores reproduce the source logits), while after the first blended
/// update it is the log of a normalized prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussian {
    log_prior: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    log_det: f64,
    chol_lower: DMatrix<f64>,
}

impl ClassGaussian {
    /// Build from a log-prior, mean, and SPD covariance. Fails if the
    /// covariance admits no Cholesky factorization.
    pub fn new(log_prior: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(covariance.clone()).ok_or_else(|| {
            Error::NumericalDegeneracy {
                class_index: usize::MAX,
                details: "covariance is not positive definite".to_string(),
            }
        })?;
        let chol_lower = chol.l();
        let log_det = 2.0 * chol_lower.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(ClassGaussian {
            log_prior,
            mean,
            covariance,
            log_det,
            chol_lower,
        })
    }

    /// Rebuild from fully cached parts (checkpoint loading); no refactorization.
    pub fn from_cached(
        log_prior: f64,
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        log_det: f64,
        chol_lower: DMatrix<f64>,
    ) -> Self {
        ClassGaussian {
            log_prior,
            mean,
            covariance,
            log_det,
            chol_lower,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prior(&self) -> f64 {
        self.log_prior
    }

    pub fn prior(&self) -> f64 {
        self.log_prior.exp()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_lower
    }
}

/// Prior, mean, covariance recovered from sufficient statistics.
#[derive(Debug, Clone)]
pub struct MleTriple {
    pub prior: f64,
    pub mean: DVector<f64>,
    /// Symmetrized but NOT shrunk; pass through [`shrink_covariance`] before
    /// installing into a bank.
    pub covariance: DMatrix<f64>,
}

/// Quadratic discriminant score
/// `g(z) = -1/2 (z-mu)^T Sigma^-1 (z-mu) - 1/2 log|Sigma| + log prior`,
/// with the class-independent 2pi constant dropped.
pub fn quad_score(z: &DVector<f64>, g: &ClassGaussian) -> Result<f64> {
    if z.len() != g.dim() {
        return Err(Error::DimensionMismatch {
            context: "quad_score",
            expected: g.dim(),
            actual: z.len(),
        });
    }
    if !math::all_finite_vec(z) {
        return Err(Error::NonFiniteInput {
            context: "quad_score",
        });
    }
    let centered = z - &g.mean;
    // Sigma = L L^T, so (z-mu)^T Sigma^-1 (z-mu) = ||L^-1 (z-mu)||^2.
    let solved = g
        .chol_lower
        .solve_lower_triangular(&centered)
        .expect("cholesky factor has positive diagonal");
    let mahalanobis = solved.norm_squared();
    Ok(-0.5 * mahalanobis - 0.5 * g.log_det + g.log_prior)
}

/// Closed-form MLE from accumulated moments:
/// `prior = count/total`, `mean = S/count`, `cov = Q/count - mean mean^T`.
/// Returns `None` when the class has zero mass (caller keeps previous
/// parameters).
pub fn mle_from_stats(stats: &SufficientStats, total_count: f64) -> Option<MleTriple> {
    if stats.count <= 0.0 {
        return None;
    }
    let prior = stats.count / total_count;
    let mean = &stats.first_moment / stats.count;
    let mut covariance = &stats.second_moment / stats.count;
    covariance.ger(-1.0, &mean, &mean, 1.0);
    math::symmetrize(&mut covariance);
    Some(MleTriple {
        prior,
        mean,
        covariance,
    })
}

/// Add `epsilon * I` to a symmetric matrix so a triangular factorization
/// exists. If factorization fails anyway, the epsilon is doubled and retried
/// a bounded number of times before reporting degeneracy.
pub fn shrink_covariance(
    covariance: &DMatrix<f64>,
    epsilon_shrink: f64,
    class_index: usize,
) -> Result<(DMatrix<f64>, ClassGaussianFactor)> {
    let dim = covariance.nrows();
    let mut eps = epsilon_shrink;
    for _ in 0..=SHRINK_MAX_RETRIES {
        let mut shrunk = covariance.clone();
        for i in 0..dim {
            shrunk[(i, i)] += eps;
        }
        if let Some(chol) = nalgebra::Cholesky::new(shrunk.clone()) {
            let lower = chol.l();
            let log_det = 2.0 * lower.diagonal().iter().map(|x| x.ln()).sum::<f64>();
            return Ok((shrunk, ClassGaussianFactor { lower, log_det }));
        }
        eps *= 2.0;
    }
    Err(Error::NumericalDegeneracy {
        class_index,
        details: format!(
            "covariance factorization failed after {} shrinkage retries (final epsilon {:.3e})",
            SHRINK_MAX_RETRIES, eps
        ),
    })
}

/// Cholesky factor and log-determinant produced alongside a shrunk covariance.
#[derive(Debug, Clone)]
pub struct ClassGaussianFactor {
    pub lower: DMatrix<f64>,
    pub log_det: f64,
}

/// The full Gaussian model for one perspective: per-class streaming stats and
/// the installed per-class parameters.
///
/// Scoring is a pure read on `&self`; mutation is single-writer through
/// `&mut self`, so readers never observe a half-updated bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveBank {
    perspective: Perspective,
    dim: usize,
    num_classes: usize,
    stats: Vec<SufficientStats>,
    params: Vec<ClassGaussian>,
}

impl PerspectiveBank {
    pub fn new(
        perspective: Perspective,
        dim: usize,
        stats: Vec<SufficientStats>,
        params: Vec<ClassGaussian>,
    ) -> Self {
        assert_eq!(stats.len(), params.len());
        assert!(stats.iter().all(|s| s.dim() == dim));
        assert!(params.iter().all(|p| p.dim() == dim));
        PerspectiveBank {
            perspective,
            dim,
            num_classes: stats.len(),
            stats,
            params,
        }
    }

    pub fn perspective(&self) -> Perspective {
        self.perspective
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn stats(&self) -> &[SufficientStats] {
        &self.stats
    }

    pub fn params(&self) -> &[ClassGaussian] {
        &self.params
    }

    pub(crate) fn stats_mut(&mut self) -> &mut [SufficientStats] {
        &mut self.stats
    }

    pub(crate) fn set_param(&mut self, class: usize, param: ClassGaussian) {
        assert_eq!(param.dim(), self.dim);
        self.params[class] = param;
    }

    /// Quadratic discriminant scores for one feature vector, one per class.
    pub fn quad_scores(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let mut scores = DVector::zeros(self.num_classes);
        for (c, g) in self.params.iter().enumerate() {
            scores[c] = quad_score(z, g)?;
        }
        Ok(scores)
    }

    /// Class posterior for one feature vector: softmax of the quadratic
    /// scores with max-subtraction, so it is invariant to any constant
    /// added to all scores.
    pub fn posterior(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(math::softmax(&self.quad_scores(z)?))
    }

    /// Scores for a whole batch (rows of `features`), as a B x C matrix.
    pub fn score_matrix(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let batch = features.nrows();
        let mut out = DMatrix::zeros(batch, self.num_classes);
        for i in 0..batch {
            let z = features.row(i).transpose();
            let scores = self.quad_scores(&z)?;
            out.row_mut(i).copy_from(&scores.transpose());
        }
        Ok(out)
    }

    /// Mean covariance across classes and the per-class deviations from it.
    /// The deviations sum to the zero matrix by construction.
    pub fn cov_deviations(&self) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let mut mean_cov = DMatrix::zeros(self.dim, self.dim);
        for g in &self.params {
            mean_cov += g.covariance();
        }
        mean_cov /= self.num_classes as f64;
        let deviations = self
            .params
            .iter()
            .map(|g| g.covariance() - &mean_cov)
            .collect();
        (mean_cov, deviations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_gaussian(log_prior: f64, mean: Vec<f64>) -> ClassGaussian {
        let d = mean.len();
        ClassGaussian::new(log_prior, DVector::from_vec(mean), DMatrix::identity(d, d)).unwrap()
    }

    #[test]
    fn quad_score_at_mean_identity_cov_unit_prior_is_zero() {
        let g = unit_gaussian(0.0, vec![1.0, 0.0]);
        let z = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(quad_score(&z, &g).unwrap(), 0.0);
    }

    #[test]
    fn quad_score_scaled_covariance() {
        // z = mu, Sigma = 2I, prior 1: score = -1/2 log|2I| = -log 2.
        let g = ClassGaussian::new(
            0.0,
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0])),
        )
        .unwrap();
        let z = DVector::from_vec(vec![1.0, 0.0]);
        // Oracle: full multivariate-normal log-density plus (d/2) log 2pi.
        let d = 2.0;
        let log_density = -0.5 * d * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * (2.0f64 * 2.0).ln()
            - 0.0;
        let expected = log_density + 0.5 * d * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(quad_score(&z, &g).unwrap(), expected, epsilon = 1e-12);
        assert_relative_eq!(
            quad_score(&z, &g).unwrap(),
            -std::f64::consts::LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn quad_score_offset_and_prior() {
        // Hand expansion: -1/2 * 4 + log 0.5.
        let g = unit_gaussian(0.5f64.ln(), vec![1.0, 0.0]);
        let z = DVector::from_vec(vec![3.0, 0.0]);
        assert_relative_eq!(
            quad_score(&z, &g).unwrap(),
            -2.0 + 0.5f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn quad_score_rejects_dimension_mismatch() {
        let g = unit_gaussian(0.0, vec![0.0, 0.0]);
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            quad_score(&z, &g),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn quad_score_rejects_non_finite() {
        let g = unit_gaussian(0.0, vec![0.0, 0.0]);
        let z = DVector::from_vec(vec![f64::NAN, 0.0]);
        assert!(matches!(
            quad_score(&z, &g),
            Err(Error::NonFiniteInput { .. })
        ));
    }

    fn two_class_bank(params: Vec<ClassGaussian>) -> PerspectiveBank {
        let d = params[0].dim();
        let stats = vec![SufficientStats::zeros(d); params.len()];
        PerspectiveBank::new(Perspective::Fused, d, stats, params)
    }

    #[test]
    fn posterior_identical_classes_is_uniform() {
        let bank = two_class_bank(vec![
            unit_gaussian(0.5f64.ln(), vec![1.0, 1.0]),
            unit_gaussian(0.5f64.ln(), vec![1.0, 1.0]),
        ]);
        let p = bank.posterior(&DVector::from_vec(vec![0.3, -0.7])).unwrap();
        assert_relative_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(p[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn posterior_matches_direct_softmax() {
        // Scores (0, -2.693147...) from the quad_score examples.
        let bank = two_class_bank(vec![
            unit_gaussian(0.0, vec![1.0, 0.0]),
            unit_gaussian(0.5f64.ln(), vec![-1.0, 0.0]),
        ]);
        let z = DVector::from_vec(vec![1.0, 0.0]);
        let scores = bank.quad_scores(&z).unwrap();
        assert_relative_eq!(scores[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(scores[1], -2.0 + 0.5f64.ln(), epsilon = 1e-12);
        let p = bank.posterior(&z).unwrap();
        let denom = 1.0 + (-2.0 + 0.5f64.ln()).exp();
        assert_relative_eq!(p[0], 1.0 / denom, epsilon = 1e-12);
        // Frozen from an independent softmax evaluation of (0, -2.693147).
        assert_relative_eq!(p[0], 0.936621, epsilon = 1e-6);
        assert_relative_eq!(p[1], 0.063379, epsilon = 1e-6);
        assert_relative_eq!(p.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn posterior_shift_invariance() {
        // Adding a constant to both log-priors shifts all scores equally.
        let z = DVector::from_vec(vec![0.4, 0.9]);
        let base = two_class_bank(vec![
            unit_gaussian(0.0, vec![1.0, 0.0]),
            unit_gaussian(0.3, vec![0.0, 1.0]),
        ]);
        let shifted = two_class_bank(vec![
            unit_gaussian(100.0, vec![1.0, 0.0]),
            unit_gaussian(100.3, vec![0.0, 1.0]),
        ]);
        let p0 = base.posterior(&z).unwrap();
        let p1 = shifted.posterior(&z).unwrap();
        for c in 0..2 {
            assert_relative_eq!(p0[c], p1[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn posterior_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params: Vec<ClassGaussian> = (0..3)
            .map(|c| {
                let mean = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
                let mut cov = DMatrix::identity(4, 4) * (1.0 + c as f64 * 0.5);
                cov[(0, 1)] = 0.2;
                cov[(1, 0)] = 0.2;
                ClassGaussian::new((0.2 + 0.1 * c as f64).ln(), mean, cov).unwrap()
            })
            .collect();
        let perm = [2usize, 0, 1];
        let permuted: Vec<ClassGaussian> = perm.iter().map(|&c| params[c].clone()).collect();
        let bank = two_class_bank(params);
        let bank_perm = two_class_bank(permuted);
        for _ in 0..20 {
            let z = DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
            let p = bank.posterior(&z).unwrap();
            let q = bank_perm.posterior(&z).unwrap();
            for (k, &c) in perm.iter().enumerate() {
                assert_relative_eq!(q[k], p[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mle_from_two_point_sample() {
        // Brute force over the sample {(1,0), (3,0)}.
        let stats = SufficientStats::from_parts(
            2.0,
            DVector::from_vec(vec![4.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[10.0, 0.0, 0.0, 0.0]),
        );
        let mle = mle_from_stats(&stats, 4.0).unwrap();
        assert_relative_eq!(mle.prior, 0.5, epsilon = 1e-15);
        assert_relative_eq!(mle.mean[0], 2.0, epsilon = 1e-15);
        assert_relative_eq!(mle.mean[1], 0.0, epsilon = 1e-15);
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(mle.covariance, expected, epsilon = 1e-12);
    }

    #[test]
    fn mle_single_sample_has_zero_scatter() {
        let z = DVector::from_vec(vec![0.5, -1.5]);
        let stats = SufficientStats::from_parts(1.0, z.clone(), &z * z.transpose());
        let mle = mle_from_stats(&stats, 1.0).unwrap();
        assert_relative_eq!(mle.mean, z, epsilon = 1e-15);
        assert!(mle.covariance.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn mle_repeated_sample_has_zero_variance() {
        let v = DVector::from_vec(vec![2.0, 3.0]);
        let stats =
            SufficientStats::from_parts(3.0, 3.0 * &v, 3.0 * &v * v.transpose());
        let mle = mle_from_stats(&stats, 3.0).unwrap();
        assert_relative_eq!(mle.mean, v, epsilon = 1e-15);
        assert!(mle.covariance.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn mle_empty_class_holds() {
        let stats = SufficientStats::zeros(2);
        assert!(mle_from_stats(&stats, 5.0).is_none());
    }

    #[test]
    fn mle_matches_batch_computation_on_random_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let d = rng.gen_range(1..=5);
            let n = rng.gen_range(2..=30);
            let samples: Vec<DVector<f64>> = (0..n)
                .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-4.0..4.0)))
                .collect();
            let mut stats = SufficientStats::zeros(d);
            for z in &samples {
                stats.accumulate(&SufficientStats::from_parts(
                    1.0,
                    z.clone(),
                    z * z.transpose(),
                ));
            }
            let mle = mle_from_stats(&stats, n as f64).unwrap();
            // Textbook batch mean and population covariance.
            let mut mean = DVector::zeros(d);
            for z in &samples {
                mean += z;
            }
            mean /= n as f64;
            let mut cov = DMatrix::zeros(d, d);
            for z in &samples {
                let c = z - &mean;
                cov += &c * c.transpose();
            }
            cov /= n as f64;
            assert_relative_eq!(mle.mean, mean, epsilon = 1e-10);
            assert_relative_eq!(mle.covariance, cov, epsilon = 1e-10);
        }
    }

    #[test]
    fn shrink_adds_diagonal() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let (shrunk, _) = shrink_covariance(&sigma, 1e-4, 0).unwrap();
        assert_relative_eq!(shrunk[(0, 0)], 1.0001, epsilon = 1e-15);
        assert_relative_eq!(shrunk[(1, 1)], 1e-4, epsilon = 1e-15);
    }

    #[test]
    fn shrink_zero_matrix() {
        let sigma = DMatrix::zeros(3, 3);
        let (shrunk, factor) = shrink_covariance(&sigma, 1e-4, 0).unwrap();
        assert_relative_eq!(shrunk, DMatrix::identity(3, 3) * 1e-4, epsilon = 1e-18);
        assert_relative_eq!(factor.log_det, 3.0 * 1e-4f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn shrink_identity_log_det() {
        let sigma = DMatrix::identity(4, 4);
        let (shrunk, factor) = shrink_covariance(&sigma, 1e-4, 0).unwrap();
        assert_relative_eq!(shrunk, DMatrix::identity(4, 4) * 1.0001, epsilon = 1e-15);
        // Direct log-determinant of the scaled identity.
        assert_relative_eq!(factor.log_det, 4.0 * 1.0001f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn shrink_min_eigenvalue_floor_on_psd_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = rng.gen_range(2..=6);
            let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let psd = &a * a.transpose(); // PSD by construction
            let eps = 1e-4;
            let (shrunk, _) = shrink_covariance(&psd, eps, 0).unwrap();
            let eig = nalgebra::SymmetricEigen::new(shrunk);
            let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(min >= eps - 1e-12, "min eigenvalue {min} below floor");
        }
    }

    #[test]
    fn cov_deviations_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params: Vec<ClassGaussian> = (0..4)
            .map(|_| {
                let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
                let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
                ClassGaussian::new(0.25f64.ln(), DVector::zeros(3), cov).unwrap()
            })
            .collect();
        let bank = two_class_bank(params);
        let (mean_cov, deviations) = bank.cov_deviations();
        let mut total = DMatrix::zeros(3, 3);
        for d in &deviations {
            total += d;
        }
        let scale = mean_cov.norm();
        assert!(total.norm() <= 1e-9 * scale.max(1.0));
    }

    #[test]
    fn cov_deviations_shared_covariance_is_zero() {
        let cov = DMatrix::identity(2, 2) * 1.5;
        let params: Vec<ClassGaussian> = (0..3)
            .map(|_| ClassGaussian::new(0.0, DVector::zeros(2), cov.clone()).unwrap())
            .collect();
        let bank = two_class_bank(params);
        let (_, deviations) = bank.cov_deviations();
        for d in &deviations {
            assert!(d.iter().all(|x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn cov_deviations_two_class_arithmetic() {
        let params = vec![
            ClassGaussian::new(0.0, DVector::zeros(2), DMatrix::identity(2, 2) * 2.0).unwrap(),
            ClassGaussian::new(0.0, DVector::zeros(2), DMatrix::identity(2, 2) * 4.0).unwrap(),
        ];
        let bank = two_class_bank(params);
        let (mean_cov, deviations) = bank.cov_deviations();
        assert_relative_eq!(mean_cov, DMatrix::identity(2, 2) * 3.0, epsilon = 1e-15);
        assert_relative_eq!(deviations[0], DMatrix::identity(2, 2) * -1.0, epsilon = 1e-15);
        assert_relative_eq!(deviations[1], DMatrix::identity(2, 2) * 1.0, epsilon = 1e-15);
    }

    #[test]
    fn identity_covariance_scores_reduce_to_linear_discriminant() {
        // With Sigma_c = I the pairwise score differences equal the
        // linear-discriminant differences w_c = mu_c, b_c = -1/2 ||mu_c||^2 + log prior.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let d = 8;
        let params: Vec<ClassGaussian> = (0..3)
            .map(|c| {
                let mean = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
                unit_gaussian((0.2 + 0.15 * c as f64).ln(), mean.iter().copied().collect())
            })
            .collect();
        let bank = two_class_bank(params.clone());
        for _ in 0..100 {
            let z = DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
            let scores = bank.quad_scores(&z).unwrap();
            for c in 0..3 {
                let expected = params[c].mean().dot(&z) - 0.5 * params[c].mean().norm_squared()
                    + params[c].log_prior()
                    - 0.5 * z.norm_squared();
                assert_relative_eq!(scores[c], expected, epsilon = 1e-10);
            }
            for c in 0..3 {
                for c2 in 0..3 {
                    let lin_diff = (params[c].mean() - params[c2].mean()).dot(&z)
                        - 0.5 * params[c].mean().norm_squared()
                        + 0.5 * params[c2].mean().norm_squared()
                        + params[c].log_prior()
                        - params[c2].log_prior();
                    assert_relative_eq!(scores[c] - scores[c2], lin_diff, epsilon = 1e-10);
                }
            }
        }
    }
}
