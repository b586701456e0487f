use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Linear variance schedule. Index `t` runs from 1 to `T`; the vectors are
/// stored zero-based so `beta(t) == betas[t - 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_1: f64 = 1e-4;
pub const DEFAULT_BETA_T: f64 = 2e-2;

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_1
                } else {
                    beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_1, DEFAULT_BETA_T).expect("default bounds are valid")
    }

    /// Builds from explicit variances. Zero variances are allowed here so
    /// tests can construct the identity process.
    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Self {
            steps: betas.len(),
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `abar_0 = 1`, the empty product.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        match t {
            0 => 1.0,
            _ => self.alpha_bars[t - 1],
        }
    }
}
