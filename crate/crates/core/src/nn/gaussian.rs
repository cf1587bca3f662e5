use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Result};
use crate::nn::adam::ParamSet;
use crate::nn::mlp::{ForwardCache, MlpInit, MlpParams};
use crate::seed::Rng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Diagonal Gaussian over actions.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianHead {
    /// Builds a head, clamping `log_std` into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<f64>, log_std: &[f64]) -> Self {
        GaussianHead {
            mean,
            log_std: log_std
                .iter()
                .map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s.exp() * z
            })
            .collect()
    }

    pub fn log_prob(&self, action: &[f64]) -> Result<f64> {
        check_len("action", self.dim(), action.len())?;
        check_finite("action", action)?;
        let mut lp = 0.0;
        for ((&a, &m), &s) in action.iter().zip(&self.mean).zip(&self.log_std) {
            let z = (a - m) / s.exp();
            lp += -0.5 * z * z - s - 0.5 * (2.0 * PI).ln();
        }
        Ok(lp)
    }

    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|s| s + 0.5 * (1.0 + (2.0 * PI).ln()))
            .sum()
    }
}

/// Mean network plus a state-independent learnable `log_std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: MlpParams,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn init(
        obs_dim: usize,
        action_dim: usize,
        hidden_width: usize,
        depth: usize,
        init: MlpInit,
        log_std_init: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(GaussianPolicy {
            net: MlpParams::init(obs_dim, hidden_width, depth, action_dim, init, rng)?,
            log_std: vec![log_std_init.clamp(LOG_STD_MIN, LOG_STD_MAX); action_dim],
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn head(&self, obs: &[f64]) -> Result<GaussianHead> {
        Ok(GaussianHead::new(self.net.forward(obs)?, &self.log_std))
    }

    pub fn head_cached(&self, obs: &[f64]) -> Result<(GaussianHead, ForwardCache)> {
        let cache = self.net.forward_cached(obs)?;
        Ok((GaussianHead::new(cache.output().to_vec(), &self.log_std), cache))
    }

    /// Greedy action: the Gaussian mean.
    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(obs)
    }

    pub fn zeros_like(&self) -> Self {
        GaussianPolicy {
            net: self.net.zeros_like(),
            log_std: vec![0.0; self.log_std.len()],
        }
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std
            .iter_mut()
            .for_each(|s| *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        check_len("log_std", self.net.output_dim(), self.log_std.len())?;
        check_finite("log_std", &self.log_std)
    }
}

impl ParamSet for GaussianPolicy {
    fn slices(&self) -> Vec<&[f64]> {
        let mut s = self.net.slices();
        s.push(&self.log_std);
        s
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.net.slices_mut();
        s.push(&mut self.log_std);
        s
    }
}
