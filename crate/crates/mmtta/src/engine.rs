//! The per-batch adaptation loop: forward, discriminant scoring, bank
//! updates, reliability partition, loss evaluation, gradient routing, and
//! the Adam step — plus the single-pass stream runner.
//!
//! Batch order within a step (all scoring and metrics use the pre-update
//! forward, so a batch never sees its own gradient step):
//! 1. forward through the toy encoder;
//! 2. discriminant scoring on all three perspectives;
//! 3. responsibilities and bank updates;
//! 4. reliability partition;
//! 5. loss evaluation;
//! 6. gradient routing: the alignment loss and the two regularizers reach
//!    only the fusion map; the contrastive loss reaches only the
//!    normalization affines of each anchor's own modality;
//! 7. Adam update (a group steps only when it received a gradient);
//! 8. predictions and metrics from the pre-update forward.

use nalgebra::{DMatrix, DVector};

use crate::adam::AdamGroup;
use crate::config::{AdaptationConfig, ResponsibilitySource, UnimodalPosteriorSource};
use crate::encoder::{Activations, ToyEncoderParams};
use crate::error::{Error, Result};
use crate::fusion::{
    alignment_loss, balance_reg, confidence_reg, fused_logits, predictions, BatchView,
    PerspectiveView,
};
use crate::gaussian::{Perspective, PerspectiveBank};
use crate::math;
use crate::rectify::{
    one_sided_infonce, reliability_partition_from, ReliabilityPartition,
};
use crate::report::{BatchRecord, RunAggregates, RunReport};
use crate::streaming::{
    absorb_and_reestimate, batch_deltas, ema_blend, init_from_head_for, EmaState, Responsibilities,
};
use crate::synth::Sample;

/// One raw input batch. Labels are evaluation-only.
#[derive(Debug, Clone)]
pub struct RawBatch {
    pub x_m1: DMatrix<f64>,
    pub x_m2: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
}

impl RawBatch {
    pub fn from_samples(samples: &[Sample]) -> Self {
        let batch = samples.len();
        let d1 = samples[0].m1.len();
        let d2 = samples[0].m2.len();
        let mut x_m1 = DMatrix::zeros(batch, d1);
        let mut x_m2 = DMatrix::zeros(batch, d2);
        let mut labels = Vec::with_capacity(batch);
        for (i, s) in samples.iter().enumerate() {
            x_m1.row_mut(i).copy_from(&s.m1.transpose());
            x_m2.row_mut(i).copy_from(&s.m2.transpose());
            labels.push(s.label);
        }
        RawBatch {
            x_m1,
            x_m2,
            labels: Some(labels),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.x_m1.nrows()
    }
}

/// Per-group gradients actually routed in a step. Groups outside a loss's
/// declared routing receive exactly zero from it; a `None` group received no
/// gradient at all this step and its Adam state does not advance.
#[derive(Debug, Clone)]
pub struct RoutedGradients {
    pub fusion: Option<DMatrix<f64>>,
    pub ln_scale_m1: Option<DVector<f64>>,
    pub ln_shift_m1: Option<DVector<f64>>,
    pub ln_scale_m2: Option<DVector<f64>>,
    pub ln_shift_m2: Option<DVector<f64>>,
}

/// Everything a step produces besides its side effects, kept for metrics and
/// for routing/stop-gradient instrumentation in tests.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: BatchRecord,
    pub partition: ReliabilityPartition,
    pub gradients: RoutedGradients,
}

/// One perspective's bank plus its EMA blending state.
#[derive(Debug, Clone)]
struct BankState {
    bank: PerspectiveBank,
    ema: EmaState,
}

/// Adam state per adaptable parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    fusion: AdamGroup,
    ln_scale_m1: AdamGroup,
    ln_shift_m1: AdamGroup,
    ln_scale_m2: AdamGroup,
    ln_shift_m2: AdamGroup,
}

/// The adaptation engine: encoder parameters, the three Gaussian banks, and
/// optimizer state. The stream loop is strictly sequential.
#[derive(Debug, Clone)]
pub struct Engine {
    config: AdaptationConfig,
    encoder: ToyEncoderParams,
    m1: BankState,
    m2: BankState,
    fused: BankState,
    adam: AdamState,
    batches_seen: usize,
    samples_seen: usize,
}

impl Engine {
    /// Initialize the three banks from the encoder's frozen head so the
    /// initial discriminant posteriors reproduce the source softmax exactly.
    pub fn new(config: AdaptationConfig, encoder: ToyEncoderParams) -> Result<Self> {
        config.validate()?;
        let dim = encoder.feature_dim();
        if config.feature_dim != dim {
            return Err(Error::Config {
                message: format!(
                    "config feature_dim {} does not match encoder dimension {dim}",
                    config.feature_dim
                ),
            });
        }
        let mut banks = Perspective::ALL.iter().map(|&p| {
            let (bank, ema) = init_from_head_for(&encoder.head, config.alpha, p)?;
            Ok(BankState { bank, ema })
        });
        let m1 = banks.next().unwrap()?;
        let m2 = banks.next().unwrap()?;
        let fused = banks.next().unwrap()?;
        let adam = AdamState {
            fusion: AdamGroup::new(dim, 2 * dim),
            ln_scale_m1: AdamGroup::new(dim, 1),
            ln_shift_m1: AdamGroup::new(dim, 1),
            ln_scale_m2: AdamGroup::new(dim, 1),
            ln_shift_m2: AdamGroup::new(dim, 1),
        };
        Ok(Engine {
            config,
            encoder,
            m1,
            m2,
            fused,
            adam,
            batches_seen: 0,
            samples_seen: 0,
        })
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.config
    }

    pub fn encoder(&self) -> &ToyEncoderParams {
        &self.encoder
    }

    pub fn bank(&self, perspective: Perspective) -> &PerspectiveBank {
        match perspective {
            Perspective::M1 => &self.m1.bank,
            Perspective::M2 => &self.m2.bank,
            Perspective::Fused => &self.fused.bank,
        }
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    /// Pre-update forward plus discriminant scoring on all three
    /// perspectives. Pure with respect to the engine state.
    pub fn score_batch(&self, batch: &RawBatch) -> Result<BatchView> {
        let activations = self.encoder.forward(&batch.x_m1, &batch.x_m2)?;
        self.view_from_activations(&activations, batch.labels.clone())
    }

    fn view_from_activations(
        &self,
        activations: &Activations,
        labels: Option<Vec<usize>>,
    ) -> Result<BatchView> {
        let view_of = |bank: &PerspectiveBank, features: &DMatrix<f64>| -> Result<PerspectiveView> {
            let scores = bank.score_matrix(features)?;
            Ok(PerspectiveView::from_scores(features.clone(), scores))
        };
        let m1 = view_of(&self.m1.bank, &activations.z_m1)?;
        let m2 = view_of(&self.m2.bank, &activations.z_m2)?;
        let fused = view_of(&self.fused.bank, &activations.z_fused)?;
        let src_posterior = math::softmax_rows(&activations.source_logits);
        Ok(BatchView {
            m1,
            m2,
            fused,
            source_logits: activations.source_logits.clone(),
            src_posterior,
            labels,
        })
    }

    fn responsibilities(&self, view: &BatchView) -> Result<Responsibilities> {
        let matrix = match self.config.responsibility_source {
            ResponsibilitySource::SourceLogits => view.src_posterior.clone(),
            ResponsibilitySource::FusedPosterior => view.fused.posterior.clone(),
        };
        Responsibilities::new(matrix)
    }

    fn update_banks(&mut self, view: &BatchView, resp: &Responsibilities) -> Result<()> {
        let eps = self.config.epsilon_shrink;
        for (state, features) in [
            (&mut self.m1, &view.m1.features),
            (&mut self.m2, &view.m2.features),
            (&mut self.fused, &view.fused.features),
        ] {
            let deltas = batch_deltas(features, resp)?;
            let estimates = absorb_and_reestimate(&mut state.bank, &deltas)?;
            ema_blend(&mut state.ema, &estimates, &mut state.bank, eps)?;
        }
        Ok(())
    }

    fn partition(&self, view: &BatchView) -> ReliabilityPartition {
        match self.config.unimodal_posterior_source {
            UnimodalPosteriorSource::Gda => reliability_partition_from(
                &view.m1.posterior,
                &view.m2.posterior,
                &view.fused.posterior,
            ),
            UnimodalPosteriorSource::Head => {
                let head_m1 = math::softmax_rows(&self.encoder.head.logits(&view.m1.features));
                let head_m2 = math::softmax_rows(&self.encoder.head.logits(&view.m2.features));
                reliability_partition_from(&head_m1, &head_m2, &view.fused.posterior)
            }
        }
    }

    /// Accuracy of row-argmax predictions against the labels.
    fn accuracy(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
        let preds = predictions(logits);
        let correct = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        correct as f64 / labels.len() as f64
    }

    /// Process one batch and return its metrics and routed gradients.
    pub fn step(&mut self, batch: &RawBatch) -> Result<StepOutput> {
        let config = self.config.clone();
        let activations = self.encoder.forward(&batch.x_m1, &batch.x_m2)?;
        let view = self.view_from_activations(&activations, batch.labels.clone())?;

        // Bank updates from the pre-update forward pass.
        let resp = self.responsibilities(&view)?;
        self.update_banks(&view, &resp)?;

        let partition = self.partition(&view);

        // Losses. The alignment reference (fused discriminant posterior) is
        // detached: it is a fixed matrix here, not a differentiated path.
        let (loss_g, grad_g) = alignment_loss(&view.fused.posterior, &view.source_logits);
        let (loss_ra, grad_ra) = confidence_reg(&view.src_posterior);
        let (loss_bal, grad_bal) = balance_reg(&view.src_posterior, config.balance_sign);
        let contrast = one_sided_infonce(
            &view.m1.features,
            &view.m2.features,
            &partition,
            config.tau,
        )?;
        let loss_total = config.w_ra * loss_ra
            + config.w_bal * loss_bal
            + config.w_c * contrast.loss
            + config.w_g * loss_g;
        for (name, value) in [
            ("alignment loss", loss_g),
            ("confidence regularizer", loss_ra),
            ("balance regularizer", loss_bal),
            ("contrastive loss", contrast.loss),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: name.to_string(),
                });
            }
        }

        // Routing. Fusion-path losses reach only the fusion map; the encoder
        // features entering the fusion are treated as detached constants.
        let fusion_active = config.w_ra != 0.0 || config.w_bal != 0.0 || config.w_g != 0.0;
        let gradients = self.route_gradients(
            &view,
            &activations,
            &partition,
            &contrast,
            &grad_g,
            &grad_ra,
            &grad_bal,
        )?;

        // Adam: only groups that received a gradient advance.
        if fusion_active {
            let grad = gradients.fusion.as_ref().expect("fusion gradient present");
            self.adam
                .fusion
                .apply(&mut self.encoder.fusion, grad, config.learning_rate);
        }
        let lr = config.learning_rate;
        let apply_ln = |grad_scale: &Option<DVector<f64>>,
                            grad_shift: &Option<DVector<f64>>,
                            scale_group: &mut AdamGroup,
                            shift_group: &mut AdamGroup,
                            scale: &mut DVector<f64>,
                            shift: &mut DVector<f64>| {
            if let (Some(gs), Some(gh)) = (grad_scale, grad_shift) {
                let mut scale_m = DMatrix::from_column_slice(scale.len(), 1, scale.as_slice());
                scale_group.apply(&mut scale_m, &DMatrix::from_column_slice(gs.len(), 1, gs.as_slice()), lr);
                scale.copy_from_slice(scale_m.as_slice());
                let mut shift_m = DMatrix::from_column_slice(shift.len(), 1, shift.as_slice());
                shift_group.apply(&mut shift_m, &DMatrix::from_column_slice(gh.len(), 1, gh.as_slice()), lr);
                shift.copy_from_slice(shift_m.as_slice());
            }
        };
        apply_ln(
            &gradients.ln_scale_m1,
            &gradients.ln_shift_m1,
            &mut self.adam.ln_scale_m1,
            &mut self.adam.ln_shift_m1,
            &mut self.encoder.ln_scale_m1,
            &mut self.encoder.ln_shift_m1,
        );
        apply_ln(
            &gradients.ln_scale_m2,
            &gradients.ln_shift_m2,
            &mut self.adam.ln_scale_m2,
            &mut self.adam.ln_shift_m2,
            &mut self.encoder.ln_scale_m2,
            &mut self.encoder.ln_shift_m2,
        );
        for (vec, name) in [
            (&self.encoder.ln_scale_m1, "modality-1 scale parameters"),
            (&self.encoder.ln_shift_m1, "modality-1 shift parameters"),
            (&self.encoder.ln_scale_m2, "modality-2 scale parameters"),
            (&self.encoder.ln_shift_m2, "modality-2 shift parameters"),
        ] {
            if !math::all_finite_vec(vec) {
                return Err(Error::NonFinite {
                    what: name.to_string(),
                });
            }
        }
        if !math::all_finite_mat(&self.encoder.fusion) {
            return Err(Error::NonFinite {
                what: "fusion parameters".to_string(),
            });
        }

        // Metrics from the pre-update forward.
        let fused = fused_logits(&view.source_logits, &view.fused.scores, config.lambda);
        let (acc_fused, acc_source, acc_gda) = match &view.labels {
            Some(labels) => (
                Self::accuracy(&fused, labels),
                Self::accuracy(&view.source_logits, labels),
                Self::accuracy(&view.fused.scores, labels),
            ),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        let record = BatchRecord {
            batch: self.batches_seen,
            samples: batch.batch_size(),
            loss_g,
            loss_ra,
            loss_bal,
            loss_c: contrast.loss,
            loss_total,
            acc_fused,
            acc_source,
            acc_gda,
            partition_m1: Some(partition.set_m1.len()),
            partition_m2: Some(partition.set_m2.len()),
        };
        self.batches_seen += 1;
        self.samples_seen += batch.batch_size();
        Ok(StepOutput {
            record,
            partition,
            gradients,
        })
    }

    /// Assemble the per-group gradients under the routing contract.
    #[allow(clippy::too_many_arguments)]
    fn route_gradients(
        &self,
        view: &BatchView,
        activations: &Activations,
        partition: &ReliabilityPartition,
        contrast: &crate::rectify::InfoNceOutput,
        grad_g: &DMatrix<f64>,
        grad_ra: &DMatrix<f64>,
        grad_bal: &DMatrix<f64>,
    ) -> Result<RoutedGradients> {
        let config = &self.config;
        let fusion_active = config.w_ra != 0.0 || config.w_bal != 0.0 || config.w_g != 0.0;
        let fusion = if fusion_active {
            // d(total)/d(logits), then back through the frozen head and the
            // fusion map; the stacked features are detached constants here.
            let grad_logits =
                config.w_ra * grad_ra + config.w_bal * grad_bal + config.w_g * grad_g;
            let grad_z_fused = &grad_logits * &self.encoder.head.weights;
            let stacked = ToyEncoderParams::stack_features(&view.m1.features, &view.m2.features);
            let grad = grad_z_fused.transpose() * stacked;
            if !math::all_finite_mat(&grad) {
                return Err(Error::NonFinite {
                    what: "fusion gradient".to_string(),
                });
            }
            Some(grad)
        } else {
            None
        };

        // Contrastive gradients reach only the anchor modality's affine
        // parameters; z = scale .* h + shift makes them linear in the
        // standardized activations.
        let ln_grads = |grad_z: &DMatrix<f64>,
                        standardized: &DMatrix<f64>|
         -> (DVector<f64>, DVector<f64>) {
            let dim = grad_z.ncols();
            let mut g_scale = DVector::zeros(dim);
            let mut g_shift = DVector::zeros(dim);
            for i in 0..grad_z.nrows() {
                for j in 0..dim {
                    let g = config.w_c * grad_z[(i, j)];
                    g_scale[j] += g * standardized[(i, j)];
                    g_shift[j] += g;
                }
            }
            (g_scale, g_shift)
        };
        let (mut ln_scale_m1, mut ln_shift_m1) = (None, None);
        let (mut ln_scale_m2, mut ln_shift_m2) = (None, None);
        if config.w_c != 0.0 && !partition.set_m1.is_empty() {
            let (gs, gh) = ln_grads(&contrast.grad_m1, &activations.standardized_m1);
            if !math::all_finite_vec(&gs) || !math::all_finite_vec(&gh) {
                return Err(Error::NonFinite {
                    what: "contrastive gradient (modality 1)".to_string(),
                });
            }
            ln_scale_m1 = Some(gs);
            ln_shift_m1 = Some(gh);
        }
        if config.w_c != 0.0 && !partition.set_m2.is_empty() {
            let (gs, gh) = ln_grads(&contrast.grad_m2, &activations.standardized_m2);
            if !math::all_finite_vec(&gs) || !math::all_finite_vec(&gh) {
                return Err(Error::NonFinite {
                    what: "contrastive gradient (modality 2)".to_string(),
                });
            }
            ln_scale_m2 = Some(gs);
            ln_shift_m2 = Some(gh);
        }
        Ok(RoutedGradients {
            fusion,
            ln_scale_m1,
            ln_shift_m1,
            ln_scale_m2,
            ln_shift_m2,
        })
    }

    /// Single pass over a labeled sample stream in batches of the configured
    /// size (the final batch may be ragged and is processed at its true
    /// size). `on_record` sees every batch record as it is produced.
    pub fn run_stream<I>(
        &mut self,
        samples: I,
        trace_partition: bool,
        mut on_record: impl FnMut(&BatchRecord) -> Result<()>,
    ) -> Result<RunReport>
    where
        I: IntoIterator<Item = Result<Sample>>,
    {
        let start = std::time::Instant::now();
        let mut records = Vec::new();
        let mut buffer: Vec<Sample> = Vec::with_capacity(self.config.batch_size);
        let mut correct = [0usize; 3];
        let mut total_samples = 0usize;
        let mut loss_sums = [0.0f64; 5];
        let mut partition_totals = (0usize, 0usize);

        let mut flush = |engine: &mut Engine,
                         buffer: &mut Vec<Sample>,
                         records: &mut Vec<BatchRecord>,
                         correct: &mut [usize; 3],
                         total_samples: &mut usize,
                         loss_sums: &mut [f64; 5],
                         partition_totals: &mut (usize, usize)|
         -> Result<()> {
            if buffer.is_empty() {
                return Ok(());
            }
            let batch = RawBatch::from_samples(buffer);
            let size = batch.batch_size();
            let mut output = engine.step(&batch)?;
            if !trace_partition {
                output.record.partition_m1 = None;
                output.record.partition_m2 = None;
            }
            *total_samples += size;
            correct[0] += (output.record.acc_fused * size as f64).round() as usize;
            correct[1] += (output.record.acc_source * size as f64).round() as usize;
            correct[2] += (output.record.acc_gda * size as f64).round() as usize;
            loss_sums[0] += output.record.loss_g;
            loss_sums[1] += output.record.loss_ra;
            loss_sums[2] += output.record.loss_bal;
            loss_sums[3] += output.record.loss_c;
            loss_sums[4] += output.record.loss_total;
            partition_totals.0 += output.partition.set_m1.len();
            partition_totals.1 += output.partition.set_m2.len();
            on_record(&output.record)?;
            records.push(output.record);
            buffer.clear();
            Ok(())
        };

        for sample in samples {
            buffer.push(sample?);
            if buffer.len() == self.config.batch_size {
                flush(
                    self,
                    &mut buffer,
                    &mut records,
                    &mut correct,
                    &mut total_samples,
                    &mut loss_sums,
                    &mut partition_totals,
                )?;
            }
        }
        flush(
            self,
            &mut buffer,
            &mut records,
            &mut correct,
            &mut total_samples,
            &mut loss_sums,
            &mut partition_totals,
        )?;

        let batches = records.len();
        let acc = |hits: usize| {
            if total_samples > 0 {
                Some(hits as f64 / total_samples as f64)
            } else {
                None
            }
        };
        let mean = |sum: f64| if batches > 0 { sum / batches as f64 } else { 0.0 };
        let aggregates = RunAggregates {
            batches,
            samples: total_samples,
            acc_fused: acc(correct[0]),
            acc_source: acc(correct[1]),
            acc_gda: acc(correct[2]),
            mean_loss_g: mean(loss_sums[0]),
            mean_loss_ra: mean(loss_sums[1]),
            mean_loss_bal: mean(loss_sums[2]),
            mean_loss_c: mean(loss_sums[3]),
            mean_loss_total: mean(loss_sums[4]),
            partition_m1_total: partition_totals.0,
            partition_m2_total: partition_totals.1,
        };
        Ok(RunReport {
            config: self.config.clone(),
            records,
            aggregates,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::build_source_model;
    use crate::synth::{
        CompiledScenario, Corruption, CorruptionKind, CorruptionTarget, CovarianceSpec,
        ModalitySpec, ScenarioSpec,
    };

    fn scenario(seed: u64, samples: usize, corruption: Corruption) -> CompiledScenario {
        CompiledScenario::compile(ScenarioSpec {
            num_classes: 3,
            modality_1: ModalitySpec {
                dim: 6,
                class_means: vec![
                    vec![3.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                    vec![0.0, 3.0, 0.0, 0.0, 1.0, 0.0],
                    vec![0.0, 0.0, 3.0, 0.0, 0.0, 1.0],
                ],
                class_covariances: vec![CovarianceSpec::Identity; 3],
            },
            modality_2: ModalitySpec {
                dim: 6,
                class_means: vec![
                    vec![-3.0, 0.0, 1.0, 0.0, 0.0, 0.0],
                    vec![0.0, -3.0, 0.0, 1.0, 0.0, 0.0],
                    vec![0.0, 0.0, -3.0, 0.0, 1.0, 0.0],
                ],
                class_covariances: vec![CovarianceSpec::ScaledIdentity(0.8); 3],
            },
            samples,
            class_prior: None,
            corruption,
            seed,
        })
        .unwrap()
    }

    fn engine_for(scn: &CompiledScenario, config: AdaptationConfig) -> Engine {
        let encoder =
            build_source_model(scn, config.feature_dim, config.source_samples, config.seed)
                .unwrap();
        Engine::new(config, encoder).unwrap()
    }

    fn batch_of(scn: &CompiledScenario, start: u64, size: usize) -> RawBatch {
        let samples: Vec<Sample> = (start..start + size as u64).map(|i| scn.sample_at(i)).collect();
        RawBatch::from_samples(&samples)
    }

    #[test]
    fn null_objective_leaves_parameters_untouched() {
        let scn = scenario(40, 64, Corruption::none());
        let config = AdaptationConfig {
            lambda: 0.0,
            w_c: 0.0,
            w_g: 0.0,
            w_ra: 0.0,
            w_bal: 0.0,
            feature_dim: 6,
            source_samples: 192,
            seed: 40,
            ..AdaptationConfig::default()
        };
        let mut engine = engine_for(&scn, config);
        let before = engine.encoder.clone();
        let batch = batch_of(&scn, 0, 16);
        let view = engine.score_batch(&batch).unwrap();
        let out = engine.step(&batch).unwrap();
        assert_eq!(engine.encoder, before);
        assert!(out.gradients.fusion.is_none());
        assert!(out.gradients.ln_scale_m1.is_none());
        assert!(out.gradients.ln_scale_m2.is_none());
        // lambda = 0: fused predictions equal source-head predictions.
        let fused = fused_logits(&view.source_logits, &view.fused.scores, 0.0);
        assert_eq!(predictions(&fused), predictions(&view.source_logits));
        assert_eq!(out.record.acc_fused, out.record.acc_source);
    }

    #[test]
    fn single_sample_batch_routes_one_modality_only() {
        let scn = scenario(41, 64, Corruption::none());
        let config = AdaptationConfig {
            batch_size: 1,
            feature_dim: 6,
            source_samples: 192,
            seed: 41,
            ..AdaptationConfig::default()
        };
        let mut engine = engine_for(&scn, config);
        let before = engine.encoder.clone();
        let batch = batch_of(&scn, 0, 1);
        let out = engine.step(&batch).unwrap();
        // Exactly one side anchors; the other side's affine parameters are
        // untouched bit-for-bit.
        if out.partition.set_m1.len() == 1 {
            assert!(out.gradients.ln_scale_m2.is_none());
            assert_eq!(engine.encoder.ln_scale_m2, before.ln_scale_m2);
            assert_eq!(engine.encoder.ln_shift_m2, before.ln_shift_m2);
        } else {
            assert_eq!(out.partition.set_m2.len(), 1);
            assert!(out.gradients.ln_scale_m1.is_none());
            assert_eq!(engine.encoder.ln_scale_m1, before.ln_scale_m1);
            assert_eq!(engine.encoder.ln_shift_m1, before.ln_shift_m1);
        }
    }

    #[test]
    fn frozen_parts_stay_bit_identical() {
        let scn = scenario(
            42,
            96,
            Corruption {
                target: CorruptionTarget::M1,
                kind: CorruptionKind::AdditiveGaussian,
                severity: 2.0,
            },
        );
        let config = AdaptationConfig {
            feature_dim: 6,
            source_samples: 192,
            seed: 42,
            ..AdaptationConfig::default()
        };
        let mut engine = engine_for(&scn, config);
        let proj_m1 = engine.encoder.projection_m1.clone();
        let proj_m2 = engine.encoder.projection_m2.clone();
        let head = engine.encoder.head.clone();
        for b in 0..6 {
            engine.step(&batch_of(&scn, b * 16, 16)).unwrap();
        }
        assert_eq!(engine.encoder.projection_m1, proj_m1);
        assert_eq!(engine.encoder.projection_m2, proj_m2);
        assert_eq!(engine.encoder.head, head);
        // And the adaptable parts did move under corruption.
        assert_ne!(engine.encoder.fusion, engine_for(&scn, engine.config.clone()).encoder.fusion);
    }

    #[test]
    fn gradient_routing_exclusivity_by_instrumented_accumulation() {
        let scn = scenario(43, 64, Corruption::none());
        // Only the contrastive loss: the fusion map must receive nothing.
        let config = AdaptationConfig {
            w_g: 0.0,
            w_ra: 0.0,
            w_bal: 0.0,
            w_c: 0.01,
            feature_dim: 6,
            source_samples: 192,
            seed: 43,
            ..AdaptationConfig::default()
        };
        let mut engine = engine_for(&scn, config);
        let fusion_before = engine.encoder.fusion.clone();
        let out = engine.step(&batch_of(&scn, 0, 16)).unwrap();
        assert!(out.gradients.fusion.is_none());
        assert_eq!(engine.encoder.fusion, fusion_before);

        // Only the fusion-path losses: no affine parameter receives anything.
        let config = AdaptationConfig {
            w_c: 0.0,
            feature_dim: 6,
            source_samples: 192,
            seed: 43,
            ..AdaptationConfig::default()
        };
        let mut engine = engine_for(&scn, config);
        let scale_before = engine.encoder.ln_scale_m1.clone();
        let out = engine.step(&batch_of(&scn, 0, 16)).unwrap();
        assert!(out.gradients.ln_scale_m1.is_none());
        assert!(out.gradients.ln_scale_m2.is_none());
        assert!(out.gradients.fusion.is_some());
        assert_eq!(engine.encoder.ln_scale_m1, scale_before);
    }

    #[test]
    fn empty_stream_reports_zero_batches_and_keeps_banks() {
        let scn = scenario(44, 0, Corruption::none());
        let config = AdaptationConfig {
            feature_dim: 6,
            source_samples: 192,
            seed: 44,
            ..AdaptationConfig::default()
        };
        let mut engine = engine_for(&scn, config.clone());
        let fresh = engine_for(&scn, config);
        let report = engine
            .run_stream(std::iter::empty(), false, |_| Ok(()))
            .unwrap();
        assert_eq!(report.aggregates.batches, 0);
        assert_eq!(report.aggregates.samples, 0);
        assert!(report.aggregates.acc_fused.is_none());
        for p in Perspective::ALL {
            assert_eq!(engine.bank(p).params(), fresh.bank(p).params());
            assert_eq!(engine.bank(p).stats(), fresh.bank(p).stats());
        }
    }

    #[test]
    fn ragged_final_batch_uses_true_size() {
        let scn = scenario(45, 40, Corruption::none());
        let config = AdaptationConfig {
            batch_size: 16,
            feature_dim: 6,
            source_samples: 192,
            seed: 45,
            ..AdaptationConfig::default()
        };
        let mut engine = engine_for(&scn, config);
        let report = engine
            .run_stream((0..40).map(|i| Ok(scn.sample_at(i))), false, |_| Ok(()))
            .unwrap();
        assert_eq!(report.aggregates.batches, 3);
        assert_eq!(report.aggregates.samples, 40);
        assert_eq!(report.records[2].samples, 8);
        // Single pass: every sample read exactly once.
        assert_eq!(engine.samples_seen(), 40);
    }

    #[test]
    fn partition_trace_flag_controls_record_fields() {
        let scn = scenario(46, 16, Corruption::none());
        let config = AdaptationConfig {
            feature_dim: 6,
            source_samples: 192,
            seed: 46,
            ..AdaptationConfig::default()
        };
        let mut engine = engine_for(&scn, config.clone());
        let traced = engine
            .run_stream((0..16).map(|i| Ok(scn.sample_at(i))), true, |_| Ok(()))
            .unwrap();
        assert!(traced.records[0].partition_m1.is_some());
        let mut engine = engine_for(&scn, config);
        let untraced = engine
            .run_stream((0..16).map(|i| Ok(scn.sample_at(i))), false, |_| Ok(()))
            .unwrap();
        assert!(untraced.records[0].partition_m1.is_none());
        // Aggregated partition totals are always present.
        assert_eq!(
            untraced.aggregates.partition_m1_total + untraced.aggregates.partition_m2_total,
            16
        );
    }
}
