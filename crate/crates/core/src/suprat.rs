//! Supervised RAT: an inverse-dynamics regressor from a desired transition
//! `(s_t, s_{t+1})` to the real-world action that produces it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvId, EnvSpec, EnvState, LatentParams, RealityGap, WorldConfig, LATENT_DIM};
use crate::error::{check_finite, check_len, Error, Result};
use crate::eval::{run_episodes, EpisodeOutcome, Protocol};
use crate::nn::{AdamConfig, AdamState, MlpInit, MlpParams, NetworkConfig};
use crate::rat::{check_adjacent, GapSampler};
use crate::seed::{child_rng, Rng};
use crate::upn::UniversalPolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub gap: RealityGap,
    pub state: EnvState,
    pub next: EnvState,
    pub action: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub rows: Vec<TransitionRow>,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Columns `gap_*`, `s_*`, `s_next_*`, `a_*` over state features, then
    /// one constant column per `tags` entry.
    pub fn write_csv(&self, path: &Path, tags: &[(&str, String)]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let Some(first) = self.rows.first() else {
            w.write_record(["gap_0"].into_iter().chain(tags.iter().map(|t| t.0)))?;
            w.flush()?;
            return Ok(());
        };
        let sd = first.state.features().len();
        let ad = first.action.len();
        let mut header: Vec<String> = (0..LATENT_DIM).map(|k| format!("gap_{k}")).collect();
        header.extend((0..sd).map(|k| format!("s_{k}")));
        header.extend((0..sd).map(|k| format!("s_next_{k}")));
        header.extend((0..ad).map(|k| format!("a_{k}")));
        header.extend(tags.iter().map(|t| t.0.to_string()));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut fields: Vec<f64> = r.gap.0.to_vec();
            fields.extend(row_input(r));
            fields.extend_from_slice(&r.action);
            w.write_record(fields.iter().map(f64::to_string).chain(tags.iter().map(|t| t.1.clone())))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exploration noise standard deviation as a fraction of the action range.
pub const EXPLORATION_FRACTION: f64 = 0.2;

/// Rolls noisy greedy UPN actions at `theta_g` in hypothetical real worlds,
/// one sampled gap per episode, until exactly `steps` rows exist.
pub fn collect_dataset(
    upn: &UniversalPolicy,
    spec: &EnvSpec,
    theta_g: &LatentParams,
    sampler: &GapSampler,
    steps: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    sampler.validate()?;
    let episodes = steps.div_ceil(spec.horizon);
    let sigma = EXPLORATION_FRACTION * 2.0 * spec.action_bound;
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::config("suprat.noise", e.to_string()))?;
    let chunks: Vec<Vec<TransitionRow>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = child_rng(seed, "suprat-episode", i as u64);
            let gap = sampler.sample(&mut rng);
            let world = WorldConfig::real(*theta_g, gap);
            let len = spec.horizon.min(steps - i * spec.horizon);
            let mut state = spec.initial_state(&mut rng);
            let mut rows = Vec::with_capacity(len);
            for _ in 0..len {
                let greedy = upn.query(&state.features(), theta_g)?;
                let noisy: Vec<f64> = greedy.iter().map(|a| a + noise.sample(&mut rng)).collect();
                let action = spec.clamp_action(&noisy);
                let out = env::step(spec, &world, &state, &action)?;
                rows.push(TransitionRow {
                    gap,
                    state,
                    next: out.next,
                    action,
                });
                state = out.next;
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(TransitionDataset {
        rows: chunks.into_iter().flatten().collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub max_epochs: usize,
    pub minibatch: usize,
    pub stepsize: f64,
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_epochs: 60,
            minibatch: 128,
            stepsize: 1e-3,
            validation_fraction: 0.1,
            patience: 6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.minibatch == 0 {
            return Err(Error::config("suprat.fit.max_epochs", "max_epochs and minibatch must be >= 1"));
        }
        if !(self.stepsize > 0.0) {
            return Err(Error::config("suprat.fit.stepsize", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("suprat.fit.validation_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseMeta {
    pub env: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
    pub dataset_size: usize,
    pub sampler: GapSampler,
    pub train_mse: f64,
    pub validation_mse: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseDynamicsModel {
    pub net: MlpParams,
    /// Per-input standardization fitted on the training split.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub meta: InverseMeta,
}

impl InverseDynamicsModel {
    fn input(&self, state: &[f64], next: &[f64]) -> Vec<f64> {
        state
            .iter()
            .chain(next)
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Action predicted to carry `state` to `next`, clamped to bounds.
    pub fn act(&self, state: &[f64], next: &[f64]) -> Result<Vec<f64>> {
        check_len("inverse-dynamics state", self.meta.state_dim, state.len())?;
        check_len("inverse-dynamics next state", self.meta.state_dim, next.len())?;
        let b = self.meta.action_bound;
        Ok(self
            .net
            .forward(&self.input(state, next))?
            .into_iter()
            .map(|a| a.clamp(-b, b))
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        check_len("inverse-dynamics input width", 2 * self.meta.state_dim, self.net.input_dim())?;
        check_len("inverse-dynamics output width", self.meta.action_dim, self.net.output_dim())?;
        check_len("input mean", 2 * self.meta.state_dim, self.input_mean.len())?;
        check_len("input std", 2 * self.meta.state_dim, self.input_std.len())
    }
}

fn row_input(r: &TransitionRow) -> Vec<f64> {
    let mut v = r.state.features();
    v.extend(r.next.features());
    v
}

fn mse(net: &MlpParams, inputs: &[Vec<f64>], targets: &[Vec<f64>], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for &i in idx {
        let out = net.forward(&inputs[i])?;
        total += out.iter().zip(&targets[i]).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / out.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Adam on the mean squared action error with a shuffled train/validation
/// split and early stopping; keeps the parameters of the best validation
/// epoch (or the last epoch when there is no validation split).
pub fn fit(
    dataset: &TransitionDataset,
    spec: &EnvSpec,
    sampler: &GapSampler,
    net_cfg: &NetworkConfig,
    cfg: &FitConfig,
    rng: &mut Rng,
) -> Result<InverseDynamicsModel> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("transition dataset"));
    }
    let sd = spec.state_dim();
    let ad = spec.action_dim();
    let raw: Vec<Vec<f64>> = dataset.rows.iter().map(row_input).collect();
    let targets: Vec<Vec<f64>> = dataset.rows.iter().map(|r| r.action.clone()).collect();
    for (x, y) in raw.iter().zip(&targets) {
        check_len("dataset input", 2 * sd, x.len())?;
        check_len("dataset action", ad, y.len())?;
        check_finite("dataset row", x)?;
        check_finite("dataset action", y)?;
    }

    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.shuffle(rng);
    let n_val = ((raw.len() as f64) * cfg.validation_fraction).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let width = 2 * sd;
    let mut mean = vec![0.0; width];
    for &i in &train_idx {
        for (m, x) in mean.iter_mut().zip(&raw[i]) {
            *m += x / train_idx.len() as f64;
        }
    }
    let mut std = vec![0.0; width];
    for &i in &train_idx {
        for k in 0..width {
            std[k] += (raw[i][k] - mean[k]).powi(2) / train_idx.len() as f64;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
    let inputs: Vec<Vec<f64>> = raw
        .iter()
        .map(|x| x.iter().zip(mean.iter().zip(&std)).map(|(v, (m, s))| (v - m) / s).collect())
        .collect();

    let init = MlpInit {
        hidden_gain: net_cfg.hidden_gain,
        output_gain: 1.0,
    };
    let mut net = MlpParams::init(width, net_cfg.hidden_width, net_cfg.depth, ad, init, rng)?;
    let mut adam = AdamState::new(
        &net,
        AdamConfig {
            stepsize: cfg.stepsize,
            ..AdamConfig::default()
        },
    );
    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut stale = 0;
    let mut epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        train_idx.shuffle(rng);
        for batch in train_idx.chunks(cfg.minibatch) {
            let mut grads = net.zeros_like();
            let scale = 2.0 / (batch.len() * ad) as f64;
            for &i in batch {
                let cache = net.forward_cached(&inputs[i])?;
                let upstream: Vec<f64> = cache.output().iter().zip(&targets[i]).map(|(o, t)| scale * (o - t)).collect();
                net.backward_into(&cache, &upstream, &mut grads)?;
            }
            adam.step(&mut net, &grads)?;
        }
        if val_idx.is_empty() {
            continue;
        }
        let val = mse(&net, &inputs, &targets, val_idx)?;
        if !val.is_finite() {
            return Err(Error::Divergence(format!("inverse-dynamics validation loss {val} at epoch {epoch}")));
        }
        log::debug!(target: "suprat", "epoch {epoch} validation mse {val:.6}");
        if val < best.0 {
            best = (val, net.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if !val_idx.is_empty() {
        net = best.1;
    }
    let train_mse = mse(&net, &inputs, &targets, &train_idx)?;
    let validation_mse = mse(&net, &inputs, &targets, val_idx)?;
    log::info!(target: "suprat", "fit {} rows: train mse {train_mse:.6} validation mse {validation_mse:.6} after {epochs} epochs", raw.len());
    Ok(InverseDynamicsModel {
        net,
        input_mean: mean,
        input_std: std,
        meta: InverseMeta {
            env: spec.id,
            state_dim: sd,
            action_dim: ad,
            action_bound: spec.action_bound,
            dataset_size: raw.len(),
            sampler: *sampler,
            train_mse,
            validation_mse,
            epochs,
        },
    })
}

/// Zero-shot deployment in `[theta_hat, gap]`: each step the simulator at
/// `theta_hat`, re-synced to the real state, is advanced with the UPN
/// action, and the model's action for that target transition is executed.
#[allow(clippy::too_many_arguments)]
pub fn eval_supervised_zero_shot(
    upn: &UniversalPolicy,
    model: &InverseDynamicsModel,
    spec: &EnvSpec,
    theta_g: &LatentParams,
    theta_hat: &LatentParams,
    gap: &RealityGap,
    epsilon_max: f64,
    protocol: &Protocol,
) -> Result<Vec<EpisodeOutcome>> {
    check_adjacent(theta_g, theta_hat, epsilon_max)?;
    let sim = WorldConfig::sim(*theta_hat);
    let real = WorldConfig::real(*theta_hat, *gap);
    let eval_spec = protocol.apply(spec);
    run_episodes(spec, &real, protocol, |state| {
        let features = state.features();
        let a = upn.query(&features, theta_hat)?;
        let target = env::step(&eval_spec, &sim, state, &a)?;
        model.act(&features, &target.next.features())
    })
}
