//! The fixed forward (noising) process and its tractable conditionals.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{self, DiagGaussian};
use crate::math;
use crate::schedule::{self, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardProcess {
    pub schedule: NoiseSchedule,
    pub data_dim: usize,
}

impl ForwardProcess {
    pub fn new(schedule: NoiseSchedule, data_dim: usize) -> Result<Self> {
        if data_dim == 0 {
            return Err(Error::config("data dimension must be at least 1"));
        }
        Ok(ForwardProcess { schedule, data_dim })
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.data_dim {
            return Err(Error::Shape {
                op: "forward",
                left: alloc::vec![self.data_dim],
                right: alloc::vec![x.len()],
            });
        }
        Ok(())
    }

    /// One transition `√α_t x_{t−1} + √(1−α_t) ε`.
    pub fn q_step(&self, x_prev: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.schedule.check_t(t, 1)?;
        self.check(x_prev)?;
        self.check(eps)?;
        let a = math::sqrt(self.schedule.alpha(t));
        let s = math::sqrt(self.schedule.beta(t));
        Ok(x_prev.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// Transition law `q(x_t | x_{t−1})`.
    pub fn q_step_dist(&self, x_prev: &[f64], t: usize) -> Result<DiagGaussian> {
        self.schedule.check_t(t, 1)?;
        self.check(x_prev)?;
        let a = math::sqrt(self.schedule.alpha(t));
        DiagGaussian::isotropic(x_prev.iter().map(|x| a * x).collect(), self.schedule.beta(t))
    }

    /// `q(x_t | x_0) = N(√ᾱ_t x_0, (1 − ᾱ_t) I)`.
    pub fn q_marginal(&self, x0: &[f64], t: usize) -> Result<DiagGaussian> {
        self.schedule.check_t(t, 1)?;
        self.check(x0)?;
        let a = math::sqrt(self.schedule.alpha_bar(t));
        DiagGaussian::isotropic(
            x0.iter().map(|x| a * x).collect(),
            self.schedule.one_minus_alpha_bar(t),
        )
    }

    /// One-shot draw `√ᾱ_t x_0 + √(1 − ᾱ_t) ε`.
    pub fn noisify(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.schedule.check_t(t, 1)?;
        self.check(x0)?;
        self.check(eps)?;
        Ok(noisify_with(&self.schedule, x0, t, eps))
    }

    /// Inverse of [`ForwardProcess::noisify`] given the noise.
    pub fn recover_x0(&self, x_t: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.schedule.check_t(t, 1)?;
        self.check(x_t)?;
        self.check(eps)?;
        let a = math::sqrt(self.schedule.alpha_bar(t));
        let s = math::sqrt(self.schedule.one_minus_alpha_bar(t));
        Ok(x_t.iter().zip(eps).map(|(x, e)| (x - s * e) / a).collect())
    }

    /// Ground-truth denoising posterior `q(x_{t−1} | x_t, x_0)`, `2 ≤ t ≤ T`.
    pub fn q_posterior(&self, x_t: &[f64], x0: &[f64], t: usize) -> Result<DiagGaussian> {
        self.schedule.check_t(t, 2)?;
        self.check(x_t)?;
        self.check(x0)?;
        let mean = posterior_mean_coeffs(&self.schedule, t);
        let var = schedule::sigma_q_sq(&self.schedule, t)?;
        DiagGaussian::isotropic(
            x_t.iter().zip(x0).map(|(xt, x0)| mean.0 * xt + mean.1 * x0).collect(),
            var,
        )
    }

    /// Log density of `q(x_t | x_{t−1})`.
    pub fn q_step_log_pdf(&self, x_t: &[f64], x_prev: &[f64], t: usize) -> Result<f64> {
        gauss::log_pdf(&self.q_step_dist(x_prev, t)?, x_t)
    }
}

pub(crate) fn noisify_with(s: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    let a = math::sqrt(s.alpha_bar(t));
    let b = math::sqrt(s.one_minus_alpha_bar(t));
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Coefficients `(c_t, c_0)` with `μ_q = c_t x_t + c_0 x_0`.
pub fn posterior_mean_coeffs(s: &NoiseSchedule, t: usize) -> (f64, f64) {
    let om = s.one_minus_alpha_bar(t);
    (
        math::sqrt(s.alpha(t)) * s.one_minus_alpha_bar(t - 1) / om,
        math::sqrt(s.alpha_bar(t - 1)) * s.beta(t) / om,
    )
}
