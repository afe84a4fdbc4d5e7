//! Seeded two-modality classification streams with controllable, asymmetric
//! distribution shift.
//!
//! Generation is a pure function of (spec, sample index): every sample
//! derives its own RNG streams (label, each modality, corruption noise) from
//! the scenario seed, the index, and a role tag. Corruption therefore never
//! perturbs the clean draws — streams generated from the same seed with
//! different severities share their non-target features bit-exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which modality the corruption applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionTarget {
    None,
    M1,
    M2,
    Both,
}

/// The shape of the applied shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// `x + severity * n`, `n ~ N(0, I)` from a dedicated noise stream.
    AdditiveGaussian,
    /// `x + severity * u` with `u` the unit diagonal direction `1/sqrt(d)`.
    MeanShift,
    /// `x * (1 + severity)`, so severity 0 is the identity.
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub target: CorruptionTarget,
    pub kind: CorruptionKind,
    pub severity: f64,
}

impl Corruption {
    pub fn none() -> Self {
        Corruption {
            target: CorruptionTarget::None,
            kind: CorruptionKind::AdditiveGaussian,
            severity: 0.0,
        }
    }
}

/// Class-conditional covariance in raw space, with compact shorthands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSpec {
    Identity,
    ScaledIdentity(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl CovarianceSpec {
    fn to_matrix(&self, dim: usize, field: &str) -> Result<DMatrix<f64>> {
        let invalid = |message: String| Error::Validation {
            field: field.to_string(),
            message,
        };
        match self {
            CovarianceSpec::Identity => Ok(DMatrix::identity(dim, dim)),
            CovarianceSpec::ScaledIdentity(s) => {
                if *s <= 0.0 {
                    return Err(invalid(format!("scale must be positive, got {s}")));
                }
                Ok(DMatrix::identity(dim, dim) * *s)
            }
            CovarianceSpec::Diagonal(d) => {
                if d.len() != dim {
                    return Err(invalid(format!(
                        "diagonal length {} does not match dim {dim}",
                        d.len()
                    )));
                }
                if d.iter().any(|&x| x <= 0.0) {
                    return Err(invalid("diagonal entries must be positive".to_string()));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_row_slice(d)))
            }
            CovarianceSpec::Full(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(invalid(format!("matrix must be {dim}x{dim}")));
                }
                let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
                if (&m - m.transpose()).amax() > 1e-9 {
                    return Err(invalid("matrix must be symmetric".to_string()));
                }
                Ok(m)
            }
        }
    }
}

/// One modality's raw-space class-conditional Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub dim: usize,
    /// One mean vector per class.
    pub class_means: Vec<Vec<f64>>,
    /// One covariance per class.
    pub class_covariances: Vec<CovarianceSpec>,
}

/// A complete, replayable stream description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub num_classes: usize,
    pub modality_1: ModalitySpec,
    pub modality_2: ModalitySpec,
    pub samples: usize,
    /// Class prior; uniform when omitted.
    #[serde(default)]
    pub class_prior: Option<Vec<f64>>,
    pub corruption: Corruption,
    pub seed: u64,
}

/// One generated sample: the true label and the two raw modality vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub m1: DVector<f64>,
    pub m2: DVector<f64>,
}

// Role tags for per-sample RNG stream derivation.
const ROLE_LABEL: u64 = 0;
const ROLE_M1: u64 = 1;
const ROLE_M2: u64 = 2;
const ROLE_CORRUPT_M1: u64 = 3;
const ROLE_CORRUPT_M2: u64 = 4;
/// Stream tag for clean source-domain draws, disjoint from the target stream.
const STREAM_SOURCE: u64 = 1;

/// SplitMix64 mixing of (seed, stream, index, role) into a sub-seed.
fn derive_seed(seed: u64, stream: u64, index: u64, role: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(role.wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A validated scenario with pre-factored covariances, ready to sample.
#[derive(Debug, Clone)]
pub struct CompiledScenario {
    spec: ScenarioSpec,
    chol_m1: Vec<DMatrix<f64>>,
    chol_m2: Vec<DMatrix<f64>>,
    cumulative_prior: Vec<f64>,
}

impl CompiledScenario {
    /// Validate every field and factor the covariances. Errors name the
    /// offending field.
    pub fn compile(spec: ScenarioSpec) -> Result<Self> {
        let c = spec.num_classes;
        if c == 0 {
            return Err(Error::Validation {
                field: "num_classes".to_string(),
                message: "must be positive".to_string(),
            });
        }
        if spec.corruption.severity < 0.0 {
            return Err(Error::Validation {
                field: "corruption.severity".to_string(),
                message: format!("must be nonnegative, got {}", spec.corruption.severity),
            });
        }
        let prior = match &spec.class_prior {
            None => vec![1.0 / c as f64; c],
            Some(p) => {
                if p.len() != c {
                    return Err(Error::Validation {
                        field: "class_prior".to_string(),
                        message: format!("length {} does not match num_classes {c}", p.len()),
                    });
                }
                if p.iter().any(|&x| x <= 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Validation {
                        field: "class_prior".to_string(),
                        message: "entries must be positive and sum to 1".to_string(),
                    });
                }
                p.clone()
            }
        };
        let mut cumulative_prior = Vec::with_capacity(c);
        let mut acc = 0.0;
        for &p in &prior {
            acc += p;
            cumulative_prior.push(acc);
        }

        let compile_modality = |m: &ModalitySpec, name: &str| -> Result<Vec<DMatrix<f64>>> {
            if m.dim == 0 {
                return Err(Error::Validation {
                    field: format!("{name}.dim"),
                    message: "must be positive".to_string(),
                });
            }
            if m.class_means.len() != c {
                return Err(Error::Validation {
                    field: format!("{name}.class_means"),
                    message: format!("expected {c} means, got {}", m.class_means.len()),
                });
            }
            if m.class_covariances.len() != c {
                return Err(Error::Validation {
                    field: format!("{name}.class_covariances"),
                    message: format!("expected {c} covariances, got {}", m.class_covariances.len()),
                });
            }
            for (k, mean) in m.class_means.iter().enumerate() {
                if mean.len() != m.dim {
                    return Err(Error::Validation {
                        field: format!("{name}.class_means[{k}]"),
                        message: format!("length {} does not match dim {}", mean.len(), m.dim),
                    });
                }
                if mean.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Validation {
                        field: format!("{name}.class_means[{k}]"),
                        message: "entries must be finite".to_string(),
                    });
                }
            }
            m.class_covariances
                .iter()
                .enumerate()
                .map(|(k, cov)| {
                    let field = format!("{name}.class_covariances[{k}]");
                    let matrix = cov.to_matrix(m.dim, &field)?;
                    nalgebra::Cholesky::new(matrix)
                        .map(|chol| chol.l())
                        .ok_or_else(|| Error::Validation {
                            field,
                            message: "covariance is not positive definite".to_string(),
                        })
                })
                .collect()
        };
        let chol_m1 = compile_modality(&spec.modality_1, "modality_1")?;
        let chol_m2 = compile_modality(&spec.modality_2, "modality_2")?;
        Ok(CompiledScenario {
            spec,
            chol_m1,
            chol_m2,
            cumulative_prior,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn num_samples(&self) -> usize {
        self.spec.samples
    }

    fn draw_label(&self, stream: u64, index: u64) -> usize {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, stream, index, ROLE_LABEL));
        let u: f64 = rng.gen();
        self.cumulative_prior
            .iter()
            .position(|&cum| u < cum)
            .unwrap_or(self.spec.num_classes - 1)
    }

    fn draw_clean(
        &self,
        stream: u64,
        index: u64,
        role: u64,
        label: usize,
        means: &[Vec<f64>],
        chols: &[DMatrix<f64>],
        dim: usize,
    ) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, stream, index, role));
        let noise = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        DVector::from_row_slice(&means[label]) + &chols[label] * noise
    }

    fn corrupt(&self, x: &mut DVector<f64>, stream: u64, index: u64, role: u64) {
        let severity = self.spec.corruption.severity;
        match self.spec.corruption.kind {
            CorruptionKind::AdditiveGaussian => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, stream, index, role));
                let noise =
                    DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                x.axpy(severity, &noise, 1.0);
            }
            CorruptionKind::MeanShift => {
                let shift = severity / (x.len() as f64).sqrt();
                x.add_scalar_mut(shift);
            }
            CorruptionKind::Scale => {
                *x *= 1.0 + severity;
            }
        }
    }

    fn sample_stream(&self, stream: u64, index: u64, corrupted: bool) -> Sample {
        let label = self.draw_label(stream, index);
        let mut m1 = self.draw_clean(
            stream,
            index,
            ROLE_M1,
            label,
            &self.spec.modality_1.class_means,
            &self.chol_m1,
            self.spec.modality_1.dim,
        );
        let mut m2 = self.draw_clean(
            stream,
            index,
            ROLE_M2,
            label,
            &self.spec.modality_2.class_means,
            &self.chol_m2,
            self.spec.modality_2.dim,
        );
        if corrupted {
            match self.spec.corruption.target {
                CorruptionTarget::None => {}
                CorruptionTarget::M1 => self.corrupt(&mut m1, stream, index, ROLE_CORRUPT_M1),
                CorruptionTarget::M2 => self.corrupt(&mut m2, stream, index, ROLE_CORRUPT_M2),
                CorruptionTarget::Both => {
                    self.corrupt(&mut m1, stream, index, ROLE_CORRUPT_M1);
                    self.corrupt(&mut m2, stream, index, ROLE_CORRUPT_M2);
                }
            }
        }
        Sample { label, m1, m2 }
    }

    /// The target-stream sample at `index`, with the configured corruption.
    pub fn sample_at(&self, index: u64) -> Sample {
        self.sample_stream(0, index, true)
    }

    /// A clean source-domain draw, from a stream disjoint from the target.
    pub fn sample_source(&self, index: u64) -> Sample {
        self.sample_stream(STREAM_SOURCE, index, false)
    }

    /// The full target stream.
    pub fn generate(&self) -> Vec<Sample> {
        (0..self.spec.samples as u64)
            .map(|i| self.sample_at(i))
            .collect()
    }
}
