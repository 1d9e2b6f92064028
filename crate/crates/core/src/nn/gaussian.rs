//! Diagonal Gaussian policy head with state-independent log-std.

use rand::Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.8378770664093453;

/// Stochastic head over a mean produced by a [`super::Net`].
///
/// The log standard deviations are free parameters shared across states.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub log_std: Vec<f64>,
}

impl GaussianHead {
    pub fn new(dim: usize, init_std: f64) -> Self {
        assert!(init_std > 0.0, "std must be positive");
        Self {
            log_std: vec![init_std.ln(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// Log-density of `action` under `N(mean, diag(std²))`.
    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        debug_assert_eq!(mean.len(), self.log_std.len());
        debug_assert_eq!(action.len(), self.log_std.len());
        let mut lp = 0.0;
        for i in 0..self.log_std.len() {
            let ls = self.log_std[i];
            let inv_std = (-ls).exp();
            let z = (action[i] - mean[i]) * inv_std;
            lp += -0.5 * z * z - ls - 0.5 * LN_2PI;
        }
        lp
    }

    /// Gradients of `log_prob` with respect to the mean and to `log_std`.
    pub fn log_prob_grads(&self, mean: &[f64], action: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.log_std.len();
        let mut d_mean = vec![0.0; n];
        let mut d_log_std = vec![0.0; n];
        for i in 0..n {
            let inv_var = (-2.0 * self.log_std[i]).exp();
            let diff = action[i] - mean[i];
            d_mean[i] = diff * inv_var;
            d_log_std[i] = diff * diff * inv_var - 1.0;
        }
        (d_mean, d_log_std)
    }

    /// Reparameterised sample `mean + std ⊙ ε`.
    pub fn sample<R: Rng>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        mean.iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Differential entropy of the diagonal Gaussian.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use approx::assert_relative_eq;

    #[test]
    fn log_prob_at_mean_unit_std_is_neg_half_ln_2pi() {
        let head = GaussianHead::new(1, 1.0);
        let lp = head.log_prob(&[0.4], &[0.4]);
        assert_relative_eq!(lp, -0.5 * LN_2PI, epsilon = 1e-15);
    }

    #[test]
    fn log_prob_mean_grad_matches_finite_differences() {
        let mut head = GaussianHead::new(3, 0.5);
        head.log_std = vec![-0.2, 0.1, -1.0];
        let mean = vec![0.3, -0.7, 0.05];
        let action = vec![0.5, -0.2, -0.6];
        let (d_mean, d_log_std) = head.log_prob_grads(&mean, &action);
        let h = 1e-6;
        for i in 0..3 {
            let mut mp = mean.clone();
            let mut mm = mean.clone();
            mp[i] += h;
            mm[i] -= h;
            let fd = (head.log_prob(&mp, &action) - head.log_prob(&mm, &action)) / (2.0 * h);
            assert_relative_eq!(d_mean[i], fd, max_relative = 1e-6);

            let mut hp = head.clone();
            let mut hm = head.clone();
            hp.log_std[i] += h;
            hm.log_std[i] -= h;
            let fd = (hp.log_prob(&mean, &action) - hm.log_prob(&mean, &action)) / (2.0 * h);
            assert_relative_eq!(d_log_std[i], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn sample_mean_converges_to_mean() {
        let head = GaussianHead::new(2, 0.7);
        let mean = vec![1.5, -2.0];
        let mut rng = stream(5, Domain::Trainer, 0);
        let n = 100_000;
        let mut acc = vec![0.0; 2];
        for _ in 0..n {
            let s = head.sample(&mean, &mut rng);
            acc[0] += s[0];
            acc[1] += s[1];
        }
        // 3 sigma / sqrt(n) bound.
        let tol = 3.0 * 0.7 / (n as f64).sqrt();
        assert!((acc[0] / n as f64 - 1.5).abs() < tol);
        assert!((acc[1] / n as f64 + 2.0).abs() < tol);
    }
}
