//! Discrete-time noise schedule and reverse-step kernels.
//!
//! Timesteps are 1-based: `t = 1..=T`, with the convention `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Parameters that reproduce a schedule; stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta1: 1e-4,
            beta_t: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_linear_schedule(self.steps, self.beta1, self.beta_t)
    }
}

/// Linear beta schedule from `beta1` at `t = 1` to `beta_t` at `t = T`.
pub fn build_linear_schedule(steps: usize, beta1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(0.0 < beta1 && beta1 < beta_t && beta_t < 1.0) {
        return Err(Error::invalid(format!(
            "schedule needs 0 < beta1 < betaT < 1, got {beta1}, {beta_t}"
        )));
    }
    let span = (steps - 1) as f64;
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta1 + i as f64 / span * (beta_t - beta1))
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance `(1 - ab[t-1]) / (1 - ab[t]) * beta[t]`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if eps.len() != x0.len() {
        return Err(Error::Shape {
            op: "q_sample",
            lhs: vec![x0.len()],
            rhs: vec![eps.len()],
        });
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Posterior-mean estimate of `x0` from `x_t` and predicted noise.
pub fn predict_x0(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let ab = sched.alpha_bar(t);
    let (inv, b) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
    x_t.iter()
        .zip(eps_hat)
        .map(|(x, e)| inv * (x - b * e))
        .collect()
}

/// Coefficients `(c_xt, c_x0, sigma)` of the ancestral step
/// `x_{t-1} = c_xt x_t + c_x0 x0_hat + sigma z`.
pub fn ddpm_coefficients(t: usize, sched: &NoiseSchedule) -> (f64, f64, f64) {
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let c_xt = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let c_x0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab);
    (c_xt, c_x0, sched.posterior_variance(t).sqrt())
}

/// One ancestral (DDPM) reverse step.
pub fn ddpm_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    z: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check(t)?;
    let x0 = predict_x0(x_t, eps_hat, t, sched);
    Ok(ddpm_step_from_x0(x_t, &x0, t, z, sched))
}

pub(crate) fn ddpm_step_from_x0(
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    z: &[f64],
    sched: &NoiseSchedule,
) -> Vec<f64> {
    let (c_xt, c_x0, sigma) = ddpm_coefficients(t, sched);
    x_t.iter()
        .zip(x0_hat)
        .zip(z)
        .map(|((x, x0), z)| c_xt * x + c_x0 * x0 + sigma * z)
        .collect()
}

/// DDIM noise level for a `t -> t_prev` jump.
pub fn ddim_sigma(t: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule) -> f64 {
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

/// One DDIM step from `t` to `t_prev`; `z` is ignored when `eta == 0`.
pub fn ddim_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    eta: f64,
    z: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let x0 = predict_x0(x_t, eps_hat, t, sched);
    Ok(ddim_step_from_x0(&x0, eps_hat, t, t_prev, eta, z, sched))
}

pub(crate) fn ddim_step_from_x0(
    x0_hat: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    eta: f64,
    z: &[f64],
    sched: &NoiseSchedule,
) -> Vec<f64> {
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma = ddim_sigma(t, t_prev, eta, sched);
    let a = ab_prev.sqrt();
    let b = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    x0_hat
        .iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (x0, e))| {
            let noise = if sigma > 0.0 { sigma * z[i] } else { 0.0 };
            a * x0 + b * e + noise
        })
        .collect()
}

/// Strictly decreasing timesteps ending at 1.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub timesteps: Vec<usize>,
    pub eta: f64,
}

impl StepPlan {
    /// `(t, t_prev)` pairs, the last one jumping to 0.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0)))
    }

    pub fn is_consecutive(&self) -> bool {
        self.timesteps.windows(2).all(|w| w[0] == w[1] + 1) && self.timesteps.last() == Some(&1)
    }
}

/// `n_steps` timesteps spaced evenly from `truncation` down to 1.
pub fn make_step_plan(
    truncation: usize,
    n_steps: usize,
    eta: f64,
    sched: &NoiseSchedule,
) -> Result<StepPlan> {
    if n_steps == 0 || n_steps > truncation || truncation > sched.steps() {
        return Err(Error::invalid(format!(
            "step plan needs 1 <= n_steps ({n_steps}) <= truncation ({truncation}) <= T ({})",
            sched.steps()
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta must be in [0, 1], got {eta}")));
    }
    let timesteps = if n_steps == 1 {
        vec![truncation]
    } else {
        let span = (truncation - 1) as f64;
        (0..n_steps)
            .map(|i| truncation - (i as f64 * span / (n_steps - 1) as f64).round() as usize)
            .collect()
    };
    debug_assert!(timesteps.windows(2).all(|w| w[0] > w[1]));
    Ok(StepPlan { timesteps, eta })
}
