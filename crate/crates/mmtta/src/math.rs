//! Small numeric helpers: stable softmax, argmax with a fixed tie rule,
//! matrix symmetrization.

use nalgebra::{DMatrix, DVector};

/// Numerically stable softmax: subtracts the row max before exponentiating,
/// so adding any constant to all entries leaves the output unchanged.
pub fn softmax(scores: &DVector<f64>) -> DVector<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = scores.map(|s| (s - max).exp());
    let sum: f64 = out.iter().sum();
    out /= sum;
    out
}

/// Row-wise stable softmax over a B x C matrix.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|s| *s = (*s - max).exp());
        let sum: f64 = row.iter().sum();
        row /= sum;
    }
    out
}

/// Index of the largest entry, lowest index winning ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best
}

/// Per-row argmax of a matrix, lowest-index tie-break.
pub fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter().map(|r| argmax(r.iter().copied())).collect()
}

/// Replace `m` with (M + M^T)/2, removing round-off asymmetry.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}
