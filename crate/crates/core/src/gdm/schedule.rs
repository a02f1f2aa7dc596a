use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear DDPM variance schedule. Steps are 1-based: `beta(1)` is the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "noise coefficients must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    /// Standard deviation of the sampling noise at step `t`: `√β_t`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.beta(t)?.sqrt())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Config(format!(
            "noise length {} does not match data length {}",
            eps.len(),
            x0.len()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Mean of the reverse step before noise and clipping:
/// `(x_t − (1 − α_t)/√(1 − ᾱ_t)·ε̂) / √α_t`.
pub fn reverse_mean(x_t: f64, eps_hat: f64, alpha: f64, alpha_bar: f64) -> f64 {
    (x_t - (1.0 - alpha) / (1.0 - alpha_bar).sqrt() * eps_hat) / alpha.sqrt()
}
