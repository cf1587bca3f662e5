use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::mlp::MlpParams;

/// Anything that exposes its parameters as a fixed sequence of flat slices.
pub trait ParamSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn shapes(&self) -> Vec<usize> {
        self.slices().iter().map(|s| s.len()).collect()
    }
}

impl ParamSet for MlpParams {
    fn slices(&self) -> Vec<&[f64]> {
        MlpParams::slices(self)
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        MlpParams::slices_mut(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub stepsize: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            stepsize: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: ParamSet>(params: &P, config: AdamConfig) -> Self {
        let shapes = params.shapes();
        AdamState {
            config,
            step_count: 0,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam descent step. A non-finite gradient aborts the
    /// step and leaves both the parameters and the moments untouched.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        if !(self.config.stepsize > 0.0) {
            return Err(Error::config("stepsize", "must be > 0"));
        }
        let gs = grads.slices();
        check_len("gradient blocks", self.first_moment.len(), gs.len())?;
        for (g, m) in gs.iter().zip(&self.first_moment) {
            check_len("gradient block", m.len(), g.len())?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
        }
        let mut ps = params.slices_mut();
        check_len("parameter blocks", gs.len(), ps.len())?;
        for (p, g) in ps.iter().zip(&gs) {
            check_len("parameter block", g.len(), p.len())?;
        }

        self.step_count += 1;
        let AdamConfig {
            stepsize,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in ps
            .iter_mut()
            .zip(&gs)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= stepsize * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(net: &MlpParams) -> (f64, MlpParams) {
        // f(p) = sum_k c_k (p_k - t_k)^2 with mixed curvatures
        let mut grads = net.zeros_like();
        let mut loss = 0.0;
        let mut idx = 0.0_f64;
        for (p, g) in net.slices().iter().zip(grads.slices_mut()) {
            for k in 0..p.len() {
                idx += 1.0;
                let c = 0.5 + (idx % 3.0);
                let target = (idx * 0.37).sin();
                loss += c * (p[k] - target).powi(2);
                g[k] = 2.0 * c * (p[k] - target);
            }
        }
        (loss, grads)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut net = MlpParams::zeros(&[2, 3, 1]).unwrap();
        net.layers[0].weights[1] = 0.5;
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        adam.step(&mut net, &before.zeros_like()).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_stepsize_times_sign() {
        let mut net = MlpParams::zeros(&[2, 1]).unwrap();
        let mut grads = net.zeros_like();
        grads.layers[0].weights = vec![3.0, -0.02];
        grads.layers[0].biases = vec![1e3];
        let cfg = AdamConfig {
            stepsize: 0.01,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&net, cfg);
        adam.step(&mut net, &grads).unwrap();
        assert!((net.layers[0].weights[0] + 0.01).abs() < 1e-8);
        assert!((net.layers[0].weights[1] - 0.01).abs() < 1e-6);
        assert!((net.layers[0].biases[0] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn nan_gradient_is_rejected_without_side_effects() {
        let mut net = MlpParams::zeros(&[2, 1]).unwrap();
        let before = net.clone();
        let mut grads = net.zeros_like();
        grads.layers[0].weights[0] = f64::NAN;
        let mut adam = AdamState::new(&net, AdamConfig::default());
        assert!(matches!(adam.step(&mut net, &grads), Err(Error::NonFinite(_))));
        assert_eq!(net, before);
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn convex_quadratic_decreases() {
        let mut net = MlpParams::zeros(&[3, 4, 2]).unwrap();
        let mut adam = AdamState::new(
            &net,
            AdamConfig {
                stepsize: 0.05,
                ..AdamConfig::default()
            },
        );
        let (initial, _) = quadratic(&net);
        let mut last = initial;
        for _ in 0..100 {
            let (loss, grads) = quadratic(&net);
            last = loss;
            adam.step(&mut net, &grads).unwrap();
        }
        let (final_loss, _) = quadratic(&net);
        assert!(final_loss < last.max(initial));
        assert!(final_loss < initial / 10.0, "{initial} -> {final_loss}");
    }
}
