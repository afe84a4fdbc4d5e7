//! Fusing source logits with fused-perspective discriminant scores, final
//! predictions, and the alignment / entropy-regularization losses together
//! with their analytic gradients with respect to the source logits.
//!
//! All probabilities are clamped below at [`PROB_CLAMP`] before any log.

use nalgebra::{DMatrix, DVector};

use crate::math;

/// Lower clamp applied to probabilities entering a logarithm.
pub const PROB_CLAMP: f64 = 1e-12;
/// Default weight on the fused-perspective scores in the fused logits.
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Default weight on the contrastive rectification loss.
pub const DEFAULT_W_C: f64 = 0.01;
/// Default weight on the prediction-alignment loss.
pub const DEFAULT_W_G: f64 = 1.0;

/// One scored perspective of a batch: features, discriminant scores, and the
/// softmax posterior of those scores.
#[derive(Debug, Clone)]
pub struct PerspectiveView {
    /// B x d feature matrix.
    pub features: DMatrix<f64>,
    /// B x C discriminant scores.
    pub scores: DMatrix<f64>,
    /// B x C row-softmax of `scores`.
    pub posterior: DMatrix<f64>,
}

impl PerspectiveView {
    pub fn from_scores(features: DMatrix<f64>, scores: DMatrix<f64>) -> Self {
        let posterior = math::softmax_rows(&scores);
        PerspectiveView {
            features,
            scores,
            posterior,
        }
    }
}

/// Everything derived from one batch's pre-update forward pass. Labels are
/// carried for evaluation only; no adaptation path reads them.
#[derive(Debug, Clone)]
pub struct BatchView {
    pub m1: PerspectiveView,
    pub m2: PerspectiveView,
    pub fused: PerspectiveView,
    /// B x C source-head logits on the fused features.
    pub source_logits: DMatrix<f64>,
    /// B x C row-softmax of the source logits.
    pub src_posterior: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
}

impl BatchView {
    pub fn batch_size(&self) -> usize {
        self.source_logits.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.source_logits.ncols()
    }
}

/// Fused logits `l = s + lambda * g_fused`, the final prediction basis.
pub fn fused_logits(source_logits: &DMatrix<f64>, gda_scores: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    source_logits + lambda * gda_scores
}

/// Per-row argmax predictions (lowest index wins ties).
pub fn predictions(logits: &DMatrix<f64>) -> Vec<usize> {
    math::argmax_rows(logits)
}

/// Cross-entropy of a detached reference posterior against the source
/// softmax, averaged over the batch, with its gradient with respect to the
/// source logits: `(p_src - p_ref) / B`.
///
/// The reference receives no gradient.
pub fn alignment_loss(
    reference_posterior: &DMatrix<f64>,
    source_logits: &DMatrix<f64>,
) -> (f64, DMatrix<f64>) {
    let batch = source_logits.nrows() as f64;
    let p_src = math::softmax_rows(source_logits);
    let mut loss = 0.0;
    for i in 0..source_logits.nrows() {
        for c in 0..source_logits.ncols() {
            loss -= reference_posterior[(i, c)] * p_src[(i, c)].max(PROB_CLAMP).ln();
        }
    }
    loss /= batch;
    let grad = (&p_src - reference_posterior) / batch;
    (loss, grad)
}

/// Confidence regularizer `-(1/B) sum_i u_i log u_i` with `u_i` the largest
/// source posterior entry of sample i (lowest-index tie-break), and its
/// gradient with respect to the source logits.
///
/// The max is nonsmooth; differentiation follows the subgradient through the
/// argmax coordinate only.
pub fn confidence_reg(src_posterior: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let (batch, classes) = src_posterior.shape();
    let b = batch as f64;
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(batch, classes);
    for i in 0..batch {
        let k = math::argmax(src_posterior.row(i).iter().copied());
        let u = src_posterior[(i, k)].max(PROB_CLAMP);
        loss -= u * u.ln();
        // d(-u log u)/du = -(log u + 1); du/ds_j = u (1[j=k] - p_j).
        let coeff = -(u.ln() + 1.0) / b;
        for j in 0..classes {
            let indicator = if j == k { 1.0 } else { 0.0 };
            grad[(i, j)] = coeff * u * (indicator - src_posterior[(i, j)]);
        }
    }
    (loss / b, grad)
}

/// Batch-balance regularizer: with `q = softmax(sum_i p_i)`, the value is
/// `-sum_c q_c log q_c` exactly as displayed (the entropy of `q`, added to
/// the minimized objective). `sign` lets callers flip it; the default
/// follows the display literally.
pub fn balance_reg(src_posterior: &DMatrix<f64>, sign: BalanceSign) -> (f64, DMatrix<f64>) {
    let (batch, classes) = src_posterior.shape();
    let summed: DVector<f64> = src_posterior
        .row_iter()
        .fold(DVector::zeros(classes), |acc, row| acc + row.transpose());
    let q = math::softmax(&summed);

    let mut entropy = 0.0;
    // a_c = d(-sum q log q)/dq_c
    let mut dq = DVector::zeros(classes);
    for c in 0..classes {
        let qc = q[c].max(PROB_CLAMP);
        entropy -= qc * qc.ln();
        dq[c] = -(qc.ln() + 1.0);
    }
    // Through q = softmax(r): dL/dr_c = q_c (a_c - <q, a>).
    let inner = q.dot(&dq);
    let dr: DVector<f64> = DVector::from_fn(classes, |c, _| q[c] * (dq[c] - inner));

    // r_c = sum_i p_ic, then p_i = softmax(s_i): dL/ds_ij = p_ij (dr_j - <p_i, dr>).
    let mut grad = DMatrix::zeros(batch, classes);
    for i in 0..batch {
        let p_i = src_posterior.row(i).transpose();
        let inner_i = p_i.dot(&dr);
        for j in 0..classes {
            grad[(i, j)] = p_i[j] * (dr[j] - inner_i);
        }
    }
    match sign {
        BalanceSign::Literal => (entropy, grad),
        BalanceSign::Flipped => (-entropy, -grad),
    }
}

/// Sign convention for the balance regularizer. `Literal` adds the batch
/// entropy to the minimized objective as displayed; `Flipped` negates it so
/// minimization encourages batch-level balance instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceSign {
    #[default]
    Literal,
    Flipped,
}
