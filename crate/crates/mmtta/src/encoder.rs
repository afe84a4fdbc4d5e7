//! The stand-in differentiable pipeline: frozen per-modality projections, an
//! adaptable normalization affine per modality, an adaptable fusion map, and
//! a frozen linear head fit once on clean source-domain draws.
//!
//! Every sample is mapped to three features of the same dimension d: the two
//! per-modality features and their fusion, so one head initializes all three
//! Gaussian banks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::DEFAULT_EPSILON_SHRINK;
use crate::math;
use crate::streaming::HeadParams;
use crate::synth::CompiledScenario;

/// Floor added to the per-vector standard deviation before division.
pub const STANDARDIZE_STD_FLOOR: f64 = 1e-6;

/// Adaptable and frozen parameters of the toy encoder.
///
/// The projections and the head are frozen for the whole run; the
/// normalization affines and the fusion map are the adaptation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoderParams {
    /// Frozen d x d_raw projection for modality 1.
    pub projection_m1: DMatrix<f64>,
    /// Frozen d x d_raw projection for modality 2.
    pub projection_m2: DMatrix<f64>,
    pub ln_scale_m1: DVector<f64>,
    pub ln_shift_m1: DVector<f64>,
    pub ln_scale_m2: DVector<f64>,
    pub ln_shift_m2: DVector<f64>,
    /// Adaptable d x 2d fusion map applied to the stacked modality features.
    pub fusion: DMatrix<f64>,
    /// Frozen linear head on the fused feature.
    pub head: HeadParams,
}

/// Intermediate and final products of one forward pass. The standardized
/// (pre-affine) activations are retained because the normalization-affine
/// gradients are linear in them.
#[derive(Debug, Clone)]
pub struct Activations {
    pub standardized_m1: DMatrix<f64>,
    pub standardized_m2: DMatrix<f64>,
    pub z_m1: DMatrix<f64>,
    pub z_m2: DMatrix<f64>,
    pub z_fused: DMatrix<f64>,
    pub source_logits: DMatrix<f64>,
}

/// Subtract each row's mean and divide by its population std plus the floor.
/// A zero row stays zero.
pub fn standardize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = m.ncols() as f64;
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let mean: f64 = row.iter().sum::<f64>() / dim;
        let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / dim;
        let denom = var.sqrt() + STANDARDIZE_STD_FLOOR;
        row.apply(|x| *x = (*x - mean) / denom);
    }
    out
}

impl ToyEncoderParams {
    pub fn feature_dim(&self) -> usize {
        self.projection_m1.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Deterministic forward pass:
    /// `z_m = scale_m .* standardize(A_m x_m) + shift_m`,
    /// `z_F = W_F [z_m1; z_m2]`, `logits = head(z_F)`.
    pub fn forward(&self, x_m1: &DMatrix<f64>, x_m2: &DMatrix<f64>) -> Result<Activations> {
        if x_m1.ncols() != self.projection_m1.ncols() {
            return Err(Error::DimensionMismatch {
                context: "forward modality-1 raw dim",
                expected: self.projection_m1.ncols(),
                actual: x_m1.ncols(),
            });
        }
        if x_m2.ncols() != self.projection_m2.ncols() {
            return Err(Error::DimensionMismatch {
                context: "forward modality-2 raw dim",
                expected: self.projection_m2.ncols(),
                actual: x_m2.ncols(),
            });
        }
        if !math::all_finite_mat(x_m1) || !math::all_finite_mat(x_m2) {
            return Err(Error::NonFiniteInput { context: "forward" });
        }
        let standardized_m1 = standardize_rows(&(x_m1 * self.projection_m1.transpose()));
        let standardized_m2 = standardize_rows(&(x_m2 * self.projection_m2.transpose()));
        let affine = |h: &DMatrix<f64>, scale: &DVector<f64>, shift: &DVector<f64>| {
            let mut z = h.clone();
            for mut row in z.row_iter_mut() {
                row.component_mul_assign(&scale.transpose());
                row += shift.transpose();
            }
            z
        };
        let z_m1 = affine(&standardized_m1, &self.ln_scale_m1, &self.ln_shift_m1);
        let z_m2 = affine(&standardized_m2, &self.ln_scale_m2, &self.ln_shift_m2);
        let batch = z_m1.nrows();
        let dim = self.feature_dim();
        let mut stacked = DMatrix::zeros(batch, 2 * dim);
        stacked.columns_mut(0, dim).copy_from(&z_m1);
        stacked.columns_mut(dim, dim).copy_from(&z_m2);
        let z_fused = &stacked * self.fusion.transpose();
        let source_logits = self.head.logits(&z_fused);
        Ok(Activations {
            standardized_m1,
            standardized_m2,
            z_m1,
            z_m2,
            z_fused,
            source_logits,
        })
    }

    /// The stacked `[z_m1 z_m2]` matrix the fusion map consumed; the fusion
    /// gradient is linear in it.
    pub fn stack_features(z_m1: &DMatrix<f64>, z_m2: &DMatrix<f64>) -> DMatrix<f64> {
        let batch = z_m1.nrows();
        let dim = z_m1.ncols();
        let mut stacked = DMatrix::zeros(batch, 2 * dim);
        stacked.columns_mut(0, dim).copy_from(z_m1);
        stacked.columns_mut(dim, dim).copy_from(z_m2);
        stacked
    }
}

const ROLE_ENCODER: u64 = 0x454e43; // "ENC"

/// Build the frozen source model for a scenario: seeded projections, neutral
/// adaptable parameters (scale 1, shift 0, fusion = averaging blocks), and a
/// head fit in closed form on clean source-domain draws.
pub fn build_source_model(
    scenario: &CompiledScenario,
    feature_dim: usize,
    source_samples: usize,
    seed: u64,
) -> Result<ToyEncoderParams> {
    if feature_dim == 0 {
        return Err(Error::Config {
            message: "feature_dim must be positive".to_string(),
        });
    }
    if source_samples == 0 {
        return Err(Error::Config {
            message: "source_samples must be positive".to_string(),
        });
    }
    let spec = scenario.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ROLE_ENCODER);
    let mut projection = |d_raw: usize| {
        let scale = 1.0 / (d_raw as f64).sqrt();
        DMatrix::from_fn(feature_dim, d_raw, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        })
    };
    let projection_m1 = projection(spec.modality_1.dim);
    let projection_m2 = projection(spec.modality_2.dim);

    // Fusion starts as the average of the two modality features.
    let mut fusion = DMatrix::zeros(feature_dim, 2 * feature_dim);
    for i in 0..feature_dim {
        fusion[(i, i)] = 0.5;
        fusion[(i, feature_dim + i)] = 0.5;
    }

    let mut params = ToyEncoderParams {
        projection_m1,
        projection_m2,
        ln_scale_m1: DVector::from_element(feature_dim, 1.0),
        ln_shift_m1: DVector::zeros(feature_dim),
        ln_scale_m2: DVector::from_element(feature_dim, 1.0),
        ln_shift_m2: DVector::zeros(feature_dim),
        fusion,
        head: HeadParams::new(
            DMatrix::zeros(spec.num_classes, feature_dim),
            DVector::zeros(spec.num_classes),
        )?,
    };

    // Clean source draws, forwarded with the initial adaptable parameters.
    let mut x_m1 = DMatrix::zeros(source_samples, spec.modality_1.dim);
    let mut x_m2 = DMatrix::zeros(source_samples, spec.modality_2.dim);
    let mut labels = Vec::with_capacity(source_samples);
    for i in 0..source_samples {
        let sample = scenario.sample_source(i as u64);
        x_m1.row_mut(i).copy_from(&sample.m1.transpose());
        x_m2.row_mut(i).copy_from(&sample.m2.transpose());
        labels.push(sample.label);
    }
    let activations = params.forward(&x_m1, &x_m2)?;
    params.head = fit_linear_head(&activations.z_fused, &labels, spec.num_classes)?;
    Ok(params)
}

/// Closed-form linear head: per-class means with a pooled (shared)
/// covariance, giving `w_c = Sigma^-1 mu_c` and
/// `b_c = -1/2 mu_c^T Sigma^-1 mu_c + log prior_c`.
pub fn fit_linear_head(
    features: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
) -> Result<HeadParams> {
    let n = features.nrows();
    assert_eq!(labels.len(), n);
    let dim = features.ncols();
    let mut counts = vec![0usize; num_classes];
    let mut means = vec![DVector::zeros(dim); num_classes];
    for (i, &label) in labels.iter().enumerate() {
        counts[label] += 1;
        means[label] += features.row(i).transpose();
    }
    for (c, count) in counts.iter().enumerate() {
        if *count == 0 {
            return Err(Error::Config {
                message: format!(
                    "source pre-fit saw no samples of class {c}; increase source_samples"
                ),
            });
        }
        means[c] /= *count as f64;
    }
    let mut pooled = DMatrix::zeros(dim, dim);
    for (i, &label) in labels.iter().enumerate() {
        let centered = features.row(i).transpose() - &means[label];
        pooled.ger(1.0, &centered, &centered, 1.0);
    }
    pooled /= n as f64;
    for i in 0..dim {
        pooled[(i, i)] += DEFAULT_EPSILON_SHRINK;
    }
    let chol = nalgebra::Cholesky::new(pooled).ok_or_else(|| Error::NumericalDegeneracy {
        class_index: usize::MAX,
        details: "pooled source covariance is not positive definite".to_string(),
    })?;
    let mut weights = DMatrix::zeros(num_classes, dim);
    let mut biases = DVector::zeros(num_classes);
    for c in 0..num_classes {
        let w = chol.solve(&means[c]);
        biases[c] = -0.5 * means[c].dot(&w) + (counts[c] as f64 / n as f64).ln();
        weights.row_mut(c).copy_from(&w.transpose());
    }
    HeadParams::new(weights, biases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::synth::{Corruption, CovarianceSpec, ModalitySpec, ScenarioSpec};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn demo_scenario(seed: u64) -> CompiledScenario {
        CompiledScenario::compile(ScenarioSpec {
            num_classes: 3,
            modality_1: ModalitySpec {
                dim: 4,
                class_means: vec![
                    vec![2.0, 0.0, 0.0, 0.0],
                    vec![0.0, 2.0, 0.0, 0.0],
                    vec![0.0, 0.0, 2.0, 0.0],
                ],
                class_covariances: vec![CovarianceSpec::Identity; 3],
            },
            modality_2: ModalitySpec {
                dim: 4,
                class_means: vec![
                    vec![-2.0, 0.0, 1.0, 0.0],
                    vec![0.0, -2.0, 0.0, 1.0],
                    vec![1.0, 0.0, -2.0, 0.0],
                ],
                class_covariances: vec![CovarianceSpec::ScaledIdentity(0.5); 3],
            },
            samples: 32,
            class_prior: None,
            corruption: Corruption::none(),
            seed,
        })
        .unwrap()
    }

    #[test]
    fn standardize_handles_zero_rows() {
        let m = DMatrix::zeros(2, 3);
        let out = standardize_rows(&m);
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_input_maps_to_shift() {
        let scenario = demo_scenario(5);
        let params = build_source_model(&scenario, 4, 96, 5).unwrap();
        let x1 = DMatrix::zeros(1, 4);
        let x2 = DMatrix::zeros(1, 4);
        let act = params.forward(&x1, &x2).unwrap();
        assert_relative_eq!(act.z_m1.row(0).transpose(), params.ln_shift_m1, epsilon = 1e-12);
        assert_relative_eq!(act.z_m2.row(0).transpose(), params.ln_shift_m2, epsilon = 1e-12);
    }

    #[test]
    fn selection_fusion_returns_first_modality() {
        let scenario = demo_scenario(6);
        let mut params = build_source_model(&scenario, 4, 96, 6).unwrap();
        // Fusion blocks [I 0]: the fused feature is exactly z_m1.
        params.fusion = DMatrix::zeros(4, 8);
        for i in 0..4 {
            params.fusion[(i, i)] = 1.0;
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x1 = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let x2 = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let act = params.forward(&x1, &x2).unwrap();
        assert_relative_eq!(act.z_fused, act.z_m1, epsilon = 1e-14);
    }

    #[test]
    fn forward_is_deterministic() {
        let scenario = demo_scenario(7);
        let params = build_source_model(&scenario, 4, 96, 7).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x1 = DMatrix::from_fn(5, 4, |_, _| rng.gen_range(-2.0..2.0));
        let x2 = DMatrix::from_fn(5, 4, |_, _| rng.gen_range(-2.0..2.0));
        let a = params.forward(&x1, &x2).unwrap();
        let b = params.forward(&x1, &x2).unwrap();
        assert_eq!(a.z_fused, b.z_fused);
        assert_eq!(a.source_logits, b.source_logits);
    }

    #[test]
    fn source_model_build_is_deterministic() {
        let scenario = demo_scenario(8);
        let a = build_source_model(&scenario, 4, 128, 8).unwrap();
        let b = build_source_model(&scenario, 4, 128, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fitted_head_separates_clean_source_data() {
        let scenario = demo_scenario(9);
        let params = build_source_model(&scenario, 6, 256, 9).unwrap();
        // Accuracy of the head on held-out clean draws should be far above chance.
        let mut correct = 0;
        let n = 300;
        for i in 0..n {
            let sample = scenario.sample_source(10_000 + i as u64);
            let act = params
                .forward(
                    &DMatrix::from_rows(&[sample.m1.transpose()]),
                    &DMatrix::from_rows(&[sample.m2.transpose()]),
                )
                .unwrap();
            let pred = math::argmax(act.source_logits.row(0).iter().copied());
            if pred == sample.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        assert!(acc > 0.8, "source head accuracy {acc}");
    }

    #[test]
    fn head_fit_requires_every_class() {
        let features = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.9, 0.1]);
        let labels = vec![0, 0];
        assert!(matches!(
            fit_linear_head(&features, &labels, 2),
            Err(Error::Config { .. })
        ));
    }
}
