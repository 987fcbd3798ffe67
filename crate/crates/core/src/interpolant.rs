//! Stochastic interpolant coefficients and closed-form quantities.
//!
//! The interpolant between consecutive states is
//! `I_s = alpha_s x0 + beta_s x1 + sqrt(s) sigma_s z` with velocity
//! `R_s = alpha'_s x0 + beta'_s x1 + sqrt(s) sigma'_s z`.
//! The default schedule is `alpha = 1 - s`, `beta = s^2`,
//! `sigma = eta (1 - s)`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScheduleKind {
    #[default]
    Default,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolantSchedule {
    pub kind: ScheduleKind,
    /// Noise scale multiplying `sigma_s`.
    pub eta: f64,
}

impl Default for InterpolantSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Default,
            eta: 1.0,
        }
    }
}

/// `(alpha, beta, sigma)` and their derivatives at one `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub dalpha: f64,
    pub dbeta: f64,
    pub dsigma: f64,
}

fn check_time(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange(s))
    }
}

impl InterpolantSchedule {
    pub fn with_eta(eta: f64) -> Self {
        Self {
            kind: ScheduleKind::Default,
            eta,
        }
    }

    pub fn coeffs(&self, s: f64) -> Result<Coeffs> {
        check_time(s)?;
        Ok(self.coeffs_unchecked(s))
    }

    pub(crate) fn coeffs_unchecked(&self, s: f64) -> Coeffs {
        match self.kind {
            ScheduleKind::Default => Coeffs {
                alpha: 1.0 - s,
                beta: s * s,
                sigma: self.eta * (1.0 - s),
                dalpha: -1.0,
                dbeta: 2.0 * s,
                dsigma: -self.eta,
            },
        }
    }

    /// `sigma_s`, the diffusion coefficient of the sampling SDE.
    pub fn sigma(&self, s: f64) -> f64 {
        self.coeffs_unchecked(s).sigma
    }

    /// `int_s^1 sigma_u^2 du`, the variance of the noise left after `s`.
    pub fn remaining_noise_variance(&self, s: f64) -> f64 {
        match self.kind {
            ScheduleKind::Default => {
                let r = 1.0 - s;
                self.eta * self.eta * r * r * r / 3.0
            }
        }
    }

    /// Returns `(I_s, R_s)` for endpoints `x0`, `x1` and noise `z`.
    pub fn interpolate(&self, s: f64, x0: &[f64], x1: &[f64], z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_time(s)?;
        ensure_len(x1.len(), x0.len(), "interpolate x1")?;
        ensure_len(z.len(), x0.len(), "interpolate z")?;
        let mut value = alloc::vec![0.0; x0.len()];
        let mut velocity = alloc::vec![0.0; x0.len()];
        self.interpolate_into(s, x0, x1, z, &mut value, &mut velocity);
        Ok((value, velocity))
    }

    pub(crate) fn interpolate_into(
        &self,
        s: f64,
        x0: &[f64],
        x1: &[f64],
        z: &[f64],
        value: &mut [f64],
        velocity: &mut [f64],
    ) {
        let c = self.coeffs_unchecked(s);
        let rs = libm::sqrt(s);
        for i in 0..x0.len() {
            value[i] = c.alpha * x0[i] + c.beta * x1[i] + rs * c.sigma * z[i];
            velocity[i] = c.dalpha * x0[i] + c.dbeta * x1[i] + rs * c.dsigma * z[i];
        }
    }

    /// `A_s = 1 / (sqrt(s) (sigma'_s beta_s - sigma_s beta'_s))`.
    ///
    /// With this normalisation `A_s (beta_s b - c_s)` is the conditional
    /// noise mean `E[z | X_s, X_0]`.
    pub fn a_coefficient(&self, s: f64) -> Result<f64> {
        check_time(s)?;
        let c = self.coeffs_unchecked(s);
        let denom = libm::sqrt(s) * (c.dsigma * c.beta - c.sigma * c.dbeta);
        if denom.abs() < 1e-12 {
            return Err(Error::SingularCoefficient(s));
        }
        Ok(1.0 / denom)
    }

    /// `E[z | X_s = x_s, X_0 = x0]` recovered from a drift value `b`.
    pub fn noise_mean_from_drift(&self, s: f64, x_s: &[f64], x0: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        ensure_len(x0.len(), x_s.len(), "noise_mean_from_drift x0")?;
        ensure_len(b.len(), x_s.len(), "noise_mean_from_drift b")?;
        let a = self.a_coefficient(s)?;
        let c = self.coeffs_unchecked(s);
        let x0_coef = c.beta * c.dalpha - c.dbeta * c.alpha;
        Ok((0..x_s.len())
            .map(|i| a * (c.beta * b[i] - (c.dbeta * x_s[i] + x0_coef * x0[i])))
            .collect())
    }

    /// Score `grad log p(x_s | x0)` implied by a drift value `b`:
    /// `-E[z | X_s, X_0] / (sqrt(s) sigma_s)`.
    pub fn score_from_drift(&self, s: f64, x_s: &[f64], x0: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        let noise_mean = self.noise_mean_from_drift(s, x_s, x0, b)?;
        let scale = libm::sqrt(s) * self.coeffs_unchecked(s).sigma;
        if scale.abs() < 1e-12 {
            return Err(Error::SingularCoefficient(s));
        }
        Ok(noise_mean.into_iter().map(|m| -m / scale).collect())
    }
}
