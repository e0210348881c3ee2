//! Noise schedule and the forward/reverse diffusion recursions.
//!
//! Two parameterizations are supported. The default literal form mixes
//! signal and noise linearly,
//!
//! ```text
//! x_t     = alpha_t * x_{t-1} + beta_t * eps
//! mu_t    = (x_t - beta_t / (1 - abar_t) * eps_hat) / alpha_t
//! x_{t-1} = mu_t + beta_tilde_t * eta
//! ```
//!
//! while `sqrt_mode` switches to the variance-preserving square-root
//! coefficients used by standard DDPM. Timesteps are 1-based; `abar_0 = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::nn::Vector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sqrt_mode: bool,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `timesteps` steps.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64, sqrt_mode: bool) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = if timesteps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (timesteps - 1) as f64;
            (0..timesteps).map(|i| beta_start + span * i as f64).collect()
        };
        Ok(Self::from_betas(beta, beta_start, beta_end, sqrt_mode))
    }

    /// Builds a schedule from explicit betas. Caller guarantees `0 < beta < 1`.
    pub(crate) fn from_betas(beta: Vec<f64>, beta_start: f64, beta_end: f64, sqrt_mode: bool) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        NoiseSchedule {
            timesteps: beta.len(),
            beta_start,
            beta_end,
            sqrt_mode,
            alpha,
            beta,
            alpha_bar,
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t as i64,
                lo: 1,
                hi: self.timesteps as i64,
            });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(signal, noise)` coefficients of one forward step.
    pub fn step_coefficients(&self, t: usize) -> (f64, f64) {
        if self.sqrt_mode {
            (self.alpha(t).sqrt(), self.beta(t).sqrt())
        } else {
            (self.alpha(t), self.beta(t))
        }
    }

    /// Coefficients of an iterated forward pass from `x_0` to `x_t`:
    /// `x_t = signal * x_0 + sum_s noise[s-1] * eps_s`.
    pub fn unrolled_coefficients(&self, t: usize) -> Result<(f64, Vec<f64>)> {
        self.check_t(t)?;
        let mut signal = 1.0;
        let mut noise = Vec::with_capacity(t);
        for s in 1..=t {
            let (a, b) = self.step_coefficients(s);
            signal *= a;
            noise.iter_mut().for_each(|c: &mut f64| *c *= a);
            noise.push(b);
        }
        Ok((signal, noise))
    }

    pub fn forward_step(&self, x_prev: &Vector, t: usize, eps: &Vector) -> Result<Vector> {
        self.check_t(t)?;
        ensure_dim("forward noise", x_prev.len(), eps.len())?;
        let (a, b) = self.step_coefficients(t);
        Ok(x_prev * a + eps * b)
    }

    /// Forward step with class-conditioned noise. The conditioning lives in
    /// the distribution `eps_cond` was drawn from, so the arithmetic is the
    /// same as [`Self::forward_step`].
    pub fn cond_forward_step(&self, x_prev: &Vector, t: usize, eps_cond: &Vector) -> Result<Vector> {
        self.forward_step(x_prev, t, eps_cond)
    }

    /// Coefficient on `eps_hat` in the reverse mean, before the `1/alpha` scaling.
    pub fn eps_coefficient(&self, t: usize) -> f64 {
        let one_minus_bar = 1.0 - self.alpha_bar(t);
        if self.sqrt_mode {
            self.beta(t) / one_minus_bar.sqrt()
        } else {
            self.beta(t) / one_minus_bar
        }
    }

    pub fn reverse_mean(&self, x_t: &Vector, t: usize, eps_hat: &Vector) -> Result<Vector> {
        self.check_t(t)?;
        ensure_dim("predicted noise", x_t.len(), eps_hat.len())?;
        let scale = if self.sqrt_mode {
            self.alpha(t).sqrt()
        } else {
            self.alpha(t)
        };
        let c = self.eps_coefficient(t);
        Ok((x_t - &(eps_hat * c)) / scale)
    }

    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)))
    }

    pub fn reverse_step(&self, x_t: &Vector, t: usize, eps_hat: &Vector, eta: &Vector) -> Result<Vector> {
        ensure_dim("reverse noise", x_t.len(), eta.len())?;
        let mean = self.reverse_mean(x_t, t, eps_hat)?;
        let var = self.posterior_variance(t)?;
        let scale = if self.sqrt_mode { var.sqrt() } else { var };
        Ok(mean + eta * scale)
    }
}

/// One point of a diffusion trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub x: Vector,
    pub t: usize,
}
