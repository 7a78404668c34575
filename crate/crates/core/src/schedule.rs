use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Discrete forward-noising schedule over timesteps `1..=T`.
///
/// `alpha_bar(0) = 1` is the clean sample; DDIM uses it as the final target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        ensure!(!betas.is_empty(), Config, "schedule needs at least one step");
        ensure!(
            betas.iter().all(|&b| b > 0.0 && b < 1.0),
            Config,
            "betas must lie strictly inside (0, 1)"
        );
        ensure!(
            betas.windows(2).all(|w| w[0] <= w[1]),
            Config,
            "betas must be nondecreasing"
        );
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Linearly spaced betas, the DDPM default for pixel-space models.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(steps >= 1, Config, "schedule needs at least one step");
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::new(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.steps()).contains(&t),
            Domain,
            "timestep {t} outside [1, {}]",
            self.steps()
        );
        Ok(())
    }

    /// Cumulative product of `1 - beta` up to `t`; `t = 0` yields 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·noise`.
    pub fn add_noise(&self, z0: &Tensor, noise: &Tensor, t: usize) -> Result<Tensor> {
        self.check_timestep(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0.zip_map(noise, |x, e| a * x + b * e)
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid default schedule")
    }
}
