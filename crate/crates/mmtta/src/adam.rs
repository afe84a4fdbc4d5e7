//! Adam optimizer over named parameter groups.
//!
//! Each group keeps its own moment buffers and step counter; a group only
//! advances when it actually receives a gradient, so groups outside a batch's
//! routing stay bit-identical (no momentum drift from stale moments).

use nalgebra::DMatrix;

/// Standard Adam constants; only the learning rate is configurable.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Moment buffers and step counter for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamGroup {
    first_moment: DMatrix<f64>,
    second_moment: DMatrix<f64>,
    step: u64,
}

impl AdamGroup {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamGroup {
            first_moment: DMatrix::zeros(rows, cols),
            second_moment: DMatrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` along `gradient`.
    pub fn apply(&mut self, params: &mut DMatrix<f64>, gradient: &DMatrix<f64>, learning_rate: f64) {
        debug_assert_eq!(params.shape(), gradient.shape());
        debug_assert_eq!(params.shape(), self.first_moment.shape());
        self.step += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for idx in 0..params.len() {
            let g = gradient[idx];
            let m = ADAM_BETA1 * self.first_moment[idx] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.second_moment[idx] + (1.0 - ADAM_BETA2) * g * g;
            self.first_moment[idx] = m;
            self.second_moment[idx] = v;
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            params[idx] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, the first update is lr * g / (|g| + eps).
        let mut params = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let grad = DMatrix::from_row_slice(1, 2, &[0.5, -2.0]);
        let mut group = AdamGroup::new(1, 2);
        group.apply(&mut params, &grad, 0.01);
        assert_relative_eq!(params[(0, 0)], 1.0 - 0.01, epsilon = 1e-6);
        assert_relative_eq!(params[(0, 1)], -1.0 + 0.01, epsilon = 1e-6);
    }

    #[test]
    fn zero_gradient_keeps_params_fixed() {
        let mut params = DMatrix::from_row_slice(1, 2, &[0.3, 0.7]);
        let before = params.clone();
        let grad = DMatrix::zeros(1, 2);
        let mut group = AdamGroup::new(1, 2);
        for _ in 0..5 {
            group.apply(&mut params, &grad, 0.01);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize (x - 3)^2; gradient 2(x - 3).
        let mut params = DMatrix::from_row_slice(1, 1, &[0.0]);
        let mut group = AdamGroup::new(1, 1);
        for _ in 0..20_000 {
            let grad = DMatrix::from_row_slice(1, 1, &[2.0 * (params[(0, 0)] - 3.0)]);
            group.apply(&mut params, &grad, 0.01);
        }
        assert_relative_eq!(params[(0, 0)], 3.0, epsilon = 1e-3);
    }
}
