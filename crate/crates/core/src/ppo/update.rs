use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{AdamConfig, AdamState, GaussianPolicy};
use crate::ppo::gae::{gae_advantages, normalize};
use crate::ppo::rollout::{collect_rollouts, Mdp};
use crate::ppo::trajectory::Trajectory;
use crate::ppo::ActorCritic;
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyperparams {
    pub gamma: f64,
    pub lam: f64,
    pub clip: f64,
    pub entcoeff: f64,
    pub stepsize: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub minibatches: usize,
}

impl Default for PpoHyperparams {
    fn default() -> Self {
        PpoHyperparams {
            gamma: 0.99,
            lam: 0.95,
            clip: 0.2,
            entcoeff: 0.0,
            stepsize: 3e-4,
            batch_size: 4000,
            epochs: 10,
            minibatches: 4,
        }
    }
}

impl PpoHyperparams {
    /// `prefix` names the config section in error messages.
    pub fn validate(&self, prefix: &str, horizon: usize) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(key("gamma"), "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return Err(Error::config(key("lam"), "must lie in [0, 1]"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config(key("clip"), "must be > 0"));
        }
        if !(self.entcoeff >= 0.0) {
            return Err(Error::config(key("entcoeff"), "must be >= 0"));
        }
        if !(self.stepsize > 0.0) {
            return Err(Error::config(key("stepsize"), "must be > 0"));
        }
        if self.batch_size < horizon.max(1) {
            return Err(Error::config(
                key("batch_size"),
                format!("must be >= the horizon ({horizon})"),
            ));
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return Err(Error::config(key("epochs"), "epochs and minibatches must be >= 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            stepsize: self.stepsize,
            ..AdamConfig::default()
        }
    }
}

/// Per-update statistics, also emitted as a `ppo` log line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub update: usize,
    pub steps: usize,
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

impl PpoDiagnostics {
    pub const CSV_HEADER: &'static str =
        "update,steps,mean_return,policy_loss,value_loss,entropy,clip_fraction,approx_kl";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.update,
            self.steps,
            self.mean_return,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.clip_fraction,
            self.approx_kl
        )
    }
}

/// Flattened batch ready for optimization.
#[derive(Clone, Debug, Default)]
pub struct Samples {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Samples {
    /// GAE per trajectory, then advantage normalization over the whole batch.
    pub fn from_batch(batch: &[Trajectory], gamma: f64, lam: f64, normalize_adv: bool) -> Result<Self> {
        let mut s = Samples::default();
        for traj in batch {
            let (adv, ret) = gae_advantages(traj, gamma, lam)?;
            s.obs.extend(traj.states.iter().cloned());
            s.actions.extend(traj.actions.iter().cloned());
            s.old_log_probs.extend_from_slice(&traj.log_probs);
            s.advantages.extend(adv);
            s.returns.extend(ret);
        }
        if s.obs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if normalize_adv {
            normalize(&mut s.advantages);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SurrogateStats {
    pub objective: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Gradient of the mean loss `-(min(rho A, clip(rho) A) + entcoeff * H)` over
/// `idx`, with respect to the actor's parameters.
pub fn surrogate_gradient(
    actor: &GaussianPolicy,
    samples: &Samples,
    idx: &[usize],
    clip: f64,
    entcoeff: f64,
) -> Result<(GaussianPolicy, SurrogateStats)> {
    let mut grads = actor.zeros_like();
    let mut stats = SurrogateStats::default();
    let n = idx.len() as f64;
    let dim = actor.action_dim();
    let mut d_mean = vec![0.0; dim];
    for &i in idx {
        let (head, cache) = actor.head_cached(&samples.obs[i])?;
        let action = &samples.actions[i];
        check_len("sampled action", dim, action.len())?;
        let log_prob = head.log_prob(action)?;
        let ratio = (log_prob - samples.old_log_probs[i]).exp();
        let adv = samples.advantages[i];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        stats.objective += unclipped.min(clipped) / n;
        stats.entropy += head.entropy() / n;
        stats.approx_kl += (samples.old_log_probs[i] - log_prob) / n;
        if (ratio - 1.0).abs() > clip {
            stats.clip_fraction += 1.0 / n;
        }
        // d loss / d log_prob; zero when the clipped branch is the minimum
        let g = if unclipped <= clipped { -unclipped / n } else { 0.0 };
        for k in 0..dim {
            let sigma = head.log_std[k].exp();
            let z = (action[k] - head.mean[k]) / sigma;
            d_mean[k] = g * z / sigma;
            grads.log_std[k] += g * (z * z - 1.0) - entcoeff / n;
        }
        actor.net.backward_into(&cache, &d_mean, &mut grads.net)?;
    }
    Ok((grads, stats))
}

/// Owns the actor-critic and its optimizers; the only writer of the model.
#[derive(Clone, Debug)]
pub struct PpoTrainer {
    pub model: ActorCritic,
    pub hp: PpoHyperparams,
    actor_opt: AdamState,
    critic_opt: AdamState,
    pub updates: usize,
    pub steps_trained: usize,
}

impl PpoTrainer {
    pub fn new(model: ActorCritic, hp: PpoHyperparams) -> Self {
        let actor_opt = AdamState::new(&model.actor, hp.adam());
        let critic_opt = AdamState::new(&model.critic, hp.adam());
        PpoTrainer {
            model,
            hp,
            actor_opt,
            critic_opt,
            updates: 0,
            steps_trained: 0,
        }
    }

    /// Clipped-surrogate PPO update on one batch. If any loss or gradient
    /// turns non-finite the model is restored and the update aborted.
    pub fn update(&mut self, batch: &[Trajectory], rng: &mut Rng) -> Result<PpoDiagnostics> {
        let samples = Samples::from_batch(batch, self.hp.gamma, self.hp.lam, true)?;
        let snapshot = (self.model.clone(), self.actor_opt.clone(), self.critic_opt.clone());
        match self.optimize(&samples, rng) {
            Ok(mut diag) => {
                self.updates += 1;
                self.steps_trained += samples.len();
                diag.update = self.updates;
                diag.steps = self.steps_trained;
                diag.mean_return = mean_return(batch);
                log::info!(
                    target: "ppo",
                    "update={} steps={} mean_return={:.6} clip_fraction={:.4} entropy={:.4} value_loss={:.6}",
                    diag.update,
                    diag.steps,
                    diag.mean_return,
                    diag.clip_fraction,
                    diag.entropy,
                    diag.value_loss
                );
                Ok(diag)
            }
            Err(e) => {
                (self.model, self.actor_opt, self.critic_opt) = snapshot;
                Err(Error::Divergence(format!(
                    "update {} aborted after {} steps: {e}",
                    self.updates + 1,
                    self.steps_trained
                )))
            }
        }
    }

    fn optimize(&mut self, samples: &Samples, rng: &mut Rng) -> Result<PpoDiagnostics> {
        let n = samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        let chunk = n.div_ceil(self.hp.minibatches.min(n));
        let mut diag = PpoDiagnostics::default();
        let mut rounds = 0.0;
        for _ in 0..self.hp.epochs {
            order.shuffle(rng);
            for idx in order.chunks(chunk) {
                let (actor_grads, stats) =
                    surrogate_gradient(&self.model.actor, samples, idx, self.hp.clip, self.hp.entcoeff)?;
                let (critic_grads, value_loss) = self.model.value_gradient(samples, idx)?;
                if !stats.objective.is_finite() || !value_loss.is_finite() {
                    return Err(Error::NonFinite("PPO loss"));
                }
                self.actor_opt.step(&mut self.model.actor, &actor_grads)?;
                self.model.actor.clamp_log_std();
                self.critic_opt.step(&mut self.model.critic, &critic_grads)?;

                rounds += 1.0;
                diag.policy_loss += -stats.objective;
                diag.value_loss += value_loss;
                diag.entropy += stats.entropy;
                diag.clip_fraction += stats.clip_fraction;
                diag.approx_kl += stats.approx_kl;
            }
        }
        diag.policy_loss /= rounds;
        diag.value_loss /= rounds;
        diag.entropy /= rounds;
        diag.clip_fraction /= rounds;
        diag.approx_kl /= rounds;
        Ok(diag)
    }

    /// Collects and learns from `total_steps` transitions in batches of
    /// `batch_size`; a trailing remainder smaller than a batch is folded into
    /// the last batch.
    pub fn train<M: Mdp + ?Sized>(
        &mut self,
        mdp: &mut M,
        total_steps: usize,
        rng: &mut Rng,
        mut on_update: impl FnMut(&PpoDiagnostics),
    ) -> Result<Vec<PpoDiagnostics>> {
        let mut log = Vec::new();
        let mut remaining = total_steps;
        while remaining > 0 {
            let take = if remaining < 2 * self.hp.batch_size {
                remaining
            } else {
                self.hp.batch_size
            };
            let batch = collect_rollouts(mdp, &self.model, take, rng)?;
            let diag = self.update(&batch, rng)?;
            on_update(&diag);
            log.push(diag);
            remaining -= take;
        }
        Ok(log)
    }
}

/// Mean total reward of completed episodes, or of all segments if none
/// completed.
pub fn mean_return(batch: &[Trajectory]) -> f64 {
    let complete: Vec<f64> = batch
        .iter()
        .filter(|t| t.complete)
        .map(Trajectory::total_reward)
        .collect();
    let pool: Vec<f64> = if complete.is_empty() {
        batch.iter().map(Trajectory::total_reward).collect()
    } else {
        complete
    };
    if pool.is_empty() {
        0.0
    } else {
        pool.iter().sum::<f64>() / pool.len() as f64
    }
}
