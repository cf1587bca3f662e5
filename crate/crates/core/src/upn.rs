//! Universal policy network: one actor-critic conditioned on the latent
//! vector, trained across sampled latents and fine-tuned at a fixed one.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvId, EnvSpec, LatentParams, WorldConfig, LATENT_DIM};
use crate::error::{check_len, Error, Result};
use crate::nn::NetworkConfig;
use crate::ppo::{ActorCritic, Mdp, MdpStep, PpoDiagnostics, PpoHyperparams, PpoTrainer};
use crate::seed::Rng;

/// Per-dimension box in normalized latent units, sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaRange {
    pub low: [f64; LATENT_DIM],
    pub high: [f64; LATENT_DIM],
}

impl Default for ThetaRange {
    fn default() -> Self {
        ThetaRange {
            low: [0.0; LATENT_DIM],
            high: [1.0; LATENT_DIM],
        }
    }
}

impl ThetaRange {
    pub fn point(theta: &LatentParams) -> Self {
        ThetaRange {
            low: theta.0,
            high: theta.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..LATENT_DIM {
            let (lo, hi) = (self.low[k], self.high[k]);
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::config(
                    format!("upn.theta_range[{k}]"),
                    format!("need 0 <= low <= high <= 1, got [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }

    pub fn contains(&self, theta: &LatentParams) -> bool {
        (0..LATENT_DIM).all(|k| theta.0[k] >= self.low[k] && theta.0[k] <= self.high[k])
    }

    pub fn sample(&self, rng: &mut Rng) -> LatentParams {
        let mut v = [0.0; LATENT_DIM];
        for k in 0..LATENT_DIM {
            v[k] = if self.low[k] < self.high[k] {
                rng.random_range(self.low[k]..self.high[k])
            } else {
                self.low[k]
            };
        }
        LatentParams(v)
    }
}

/// Network input: flattened task state followed by the latent vector.
pub fn upn_observation(features: &[f64], theta: &LatentParams) -> Vec<f64> {
    let mut obs = Vec::with_capacity(features.len() + LATENT_DIM);
    obs.extend_from_slice(features);
    obs.extend_from_slice(theta.as_slice());
    obs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpnMeta {
    pub env: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
    pub theta_range: ThetaRange,
    pub steps_trained: usize,
    pub fine_tune_steps: usize,
    /// Mean training return of the most recent update, if any.
    pub final_return: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniversalPolicy {
    pub model: ActorCritic,
    pub meta: UpnMeta,
}

impl UniversalPolicy {
    pub fn init(spec: &EnvSpec, range: ThetaRange, net: &NetworkConfig, rng: &mut Rng) -> Result<Self> {
        range.validate()?;
        let model = ActorCritic::init(spec.state_dim() + LATENT_DIM, spec.action_dim(), net, rng)?;
        Ok(UniversalPolicy {
            model,
            meta: UpnMeta {
                env: spec.id,
                state_dim: spec.state_dim(),
                action_dim: spec.action_dim(),
                action_bound: spec.action_bound,
                theta_range: range,
                steps_trained: 0,
                fine_tune_steps: 0,
                final_return: None,
            },
        })
    }

    /// Greedy action for `features` under latent `theta`, clamped to the
    /// action bounds.
    pub fn query(&self, features: &[f64], theta: &LatentParams) -> Result<Vec<f64>> {
        check_len("UPN state features", self.meta.state_dim, features.len())?;
        if !self.meta.theta_range.contains(theta) {
            log::warn!(target: "upn", "query at latent {:?} outside trained range", theta.0);
        }
        let mean = self.model.actor.mean_action(&upn_observation(features, theta))?;
        let b = self.meta.action_bound;
        Ok(mean.into_iter().map(|a| a.clamp(-b, b)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        check_len(
            "UPN input width",
            self.meta.state_dim + LATENT_DIM,
            self.model.actor.obs_dim(),
        )?;
        check_len("UPN action width", self.meta.action_dim, self.model.actor.action_dim())
    }
}

/// Simulator episodes with the latent drawn per episode and appended to the
/// observation.
pub struct UpnMdp {
    env: Env,
    range: ThetaRange,
    theta: LatentParams,
}

impl UpnMdp {
    pub fn new(spec: EnvSpec, range: ThetaRange, rng: &mut Rng) -> Result<Self> {
        range.validate()?;
        let theta = range.sample(rng);
        let env = Env::new(spec, WorldConfig::sim(theta), rng)?;
        Ok(UpnMdp { env, range, theta })
    }

    pub fn theta(&self) -> &LatentParams {
        &self.theta
    }
}

impl Mdp for UpnMdp {
    fn obs_dim(&self) -> usize {
        self.env.spec().state_dim() + LATENT_DIM
    }

    fn action_dim(&self) -> usize {
        self.env.spec().action_dim()
    }

    fn reset(&mut self, rng: &mut Rng) -> Result<Vec<f64>> {
        self.theta = self.range.sample(rng);
        self.env.set_config(WorldConfig::sim(self.theta));
        self.env.reset(rng);
        Ok(upn_observation(&self.env.features(), &self.theta))
    }

    fn step(&mut self, action: &[f64]) -> Result<MdpStep> {
        let out = self.env.step(action)?;
        Ok(MdpStep {
            obs: upn_observation(&out.next.features(), &self.theta),
            reward: out.reward,
            terminated: false,
            truncated: out.done,
        })
    }
}

/// Owns a policy while it trains. After an error the held policy is the last
/// one that completed an update, ready to be checkpointed.
pub struct UpnTrainer {
    ppo: PpoTrainer,
    pub meta: UpnMeta,
    spec: EnvSpec,
}

impl UpnTrainer {
    pub fn new(policy: UniversalPolicy, spec: EnvSpec, hp: PpoHyperparams) -> Result<Self> {
        policy.validate()?;
        if policy.meta.env != spec.id {
            return Err(Error::config(
                "env",
                format!("policy trained on {} cannot train on {}", policy.meta.env, spec.id),
            ));
        }
        Ok(UpnTrainer {
            ppo: PpoTrainer::new(policy.model, hp),
            meta: policy.meta,
            spec,
        })
    }

    pub fn policy(&self) -> UniversalPolicy {
        UniversalPolicy {
            model: self.ppo.model.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn into_policy(self) -> UniversalPolicy {
        UniversalPolicy {
            model: self.ppo.model,
            meta: self.meta,
        }
    }

    /// Runs PPO for `steps` transitions over latents drawn from `range`.
    /// `fine_tuning` selects which step counter in the metadata advances.
    pub fn run(
        &mut self,
        range: ThetaRange,
        fine_tuning: bool,
        steps: usize,
        rng: &mut Rng,
        on_update: &mut dyn FnMut(&PpoDiagnostics),
    ) -> Result<Vec<PpoDiagnostics>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        let mut mdp = UpnMdp::new(self.spec, range, rng)?;
        let before = self.ppo.steps_trained;
        let result = self.ppo.train(&mut mdp, steps, rng, |d| on_update(d));
        let done = self.ppo.steps_trained - before;
        if fine_tuning {
            self.meta.fine_tune_steps += done;
        } else {
            self.meta.steps_trained += done;
        }
        let log = result?;
        if let Some(last) = log.last() {
            self.meta.final_return = Some(last.mean_return);
        }
        Ok(log)
    }
}

/// PPO across latents sampled uniformly from `range`, resampled per episode.
pub fn train_upn(
    spec: &EnvSpec,
    range: ThetaRange,
    total_steps: usize,
    hp: PpoHyperparams,
    net: &NetworkConfig,
    rng: &mut Rng,
    on_update: &mut dyn FnMut(&PpoDiagnostics),
) -> Result<UniversalPolicy> {
    let policy = UniversalPolicy::init(spec, range, net, rng)?;
    let mut trainer = UpnTrainer::new(policy, *spec, hp)?;
    trainer.run(range, false, total_steps, rng, on_update)?;
    Ok(trainer.into_policy())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    /// Mean return before the first update.
    pub initial_return: f64,
    /// Mean return of the final update in each completed chunk.
    pub chunk_returns: Vec<f64>,
    pub steps_used: usize,
    pub stopped_early: bool,
}

/// Relative change from `old` to `new`, safe for negative returns.
pub fn relative_improvement(old: f64, new: f64) -> f64 {
    (new - old) / old.abs().max(1e-12)
}

/// Continues PPO at the fixed latent `theta` in chunks of `chunk_steps`.
/// Stops once a chunk improves on the previous one (or, for the first
/// chunk, on the pre-fine-tune return) by less than `threshold`.
pub fn fine_tune(
    policy: UniversalPolicy,
    spec: &EnvSpec,
    theta: &LatentParams,
    step_budget: usize,
    chunk_steps: usize,
    threshold: f64,
    hp: PpoHyperparams,
    rng: &mut Rng,
    on_update: &mut dyn FnMut(&PpoDiagnostics),
) -> Result<(UniversalPolicy, FineTuneReport)> {
    if chunk_steps == 0 {
        return Err(Error::config("upn.fine_tune_chunk", "must be >= 1"));
    }
    let mut trainer = UpnTrainer::new(policy, *spec, hp)?;
    let mut report = FineTuneReport::default();
    let range = ThetaRange::point(theta);
    let mut previous: Option<f64> = None;
    while report.steps_used < step_budget {
        let take = chunk_steps.min(step_budget - report.steps_used);
        let log = trainer.run(range, true, take, rng, on_update)?;
        report.steps_used += take;
        let (Some(first), Some(last)) = (log.first(), log.last()) else {
            break;
        };
        let old = *previous.get_or_insert_with(|| {
            report.initial_return = first.mean_return;
            first.mean_return
        });
        report.chunk_returns.push(last.mean_return);
        previous = Some(last.mean_return);
        let gain = relative_improvement(old, last.mean_return);
        log::info!(target: "upn", "fine-tune chunk {} return {:.4} improvement {:.4}", report.chunk_returns.len(), last.mean_return, gain);
        if gain < threshold {
            report.stopped_early = report.steps_used < step_budget;
            break;
        }
    }
    Ok((trainer.into_policy(), report))
}

/// Extra training at `theta` with no stopping rule, used to give baselines
/// the same additional budget a correction policy consumed.
pub fn extend_training(
    policy: UniversalPolicy,
    spec: &EnvSpec,
    theta: &LatentParams,
    steps: usize,
    hp: PpoHyperparams,
    rng: &mut Rng,
) -> Result<UniversalPolicy> {
    let mut trainer = UpnTrainer::new(policy, *spec, hp)?;
    trainer.run(ThetaRange::point(theta), true, steps, rng, &mut |_| {})?;
    Ok(trainer.into_policy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::DEFAULT_THETA_G;
    use crate::seed::rng_from;

    fn small_net() -> NetworkConfig {
        NetworkConfig {
            hidden_width: 16,
            ..NetworkConfig::default()
        }
    }

    fn small_hp() -> PpoHyperparams {
        PpoHyperparams {
            batch_size: 200,
            epochs: 2,
            ..PpoHyperparams::default()
        }
    }

    #[test]
    fn zero_steps_returns_initialized_policy() {
        let spec = EnvSpec::point_mass();
        let p = train_upn(&spec, ThetaRange::default(), 0, small_hp(), &small_net(), &mut rng_from(0), &mut |_| {})
            .unwrap();
        let fresh = UniversalPolicy::init(&spec, ThetaRange::default(), &small_net(), &mut rng_from(0)).unwrap();
        assert_eq!(p, fresh);
        assert_eq!(p.meta.steps_trained, 0);
    }

    #[test]
    fn observation_appends_latents() {
        let spec = EnvSpec::point_mass();
        let p = UniversalPolicy::init(&spec, ThetaRange::default(), &small_net(), &mut rng_from(1)).unwrap();
        assert_eq!(p.model.actor.obs_dim(), 9);
        let obs = upn_observation(&[1.0, 2.0, 3.0, 4.0], &LatentParams(DEFAULT_THETA_G));
        assert_eq!(obs.len(), 9);
        assert_eq!(obs[4..], DEFAULT_THETA_G);
    }

    #[test]
    fn query_is_deterministic_and_bounded() {
        let spec = EnvSpec::pendulum();
        let p = UniversalPolicy::init(&spec, ThetaRange::default(), &small_net(), &mut rng_from(2)).unwrap();
        let theta = LatentParams::default();
        let a = p.query(&[1.0, 0.0, 0.3], &theta).unwrap();
        assert_eq!(a, p.query(&[1.0, 0.0, 0.3], &theta).unwrap());
        assert!(a.iter().all(|x| x.abs() <= spec.action_bound));
        assert!(p.query(&[1.0, 0.0], &theta).is_err());
    }

    #[test]
    fn sampled_latents_stay_in_range() {
        let range = ThetaRange {
            low: [0.1, 0.2, 0.0, 0.5, 0.3],
            high: [0.2, 0.2, 1.0, 0.6, 0.9],
        };
        let mut rng = rng_from(3);
        for _ in 0..1000 {
            let t = range.sample(&mut rng);
            assert!(range.contains(&t));
            assert_eq!(t.0[1], 0.2);
        }
    }

    #[test]
    fn invalid_range_names_the_dimension() {
        let mut range = ThetaRange::default();
        range.low[3] = 0.8;
        range.high[3] = 0.2;
        let err = range.validate().unwrap_err().to_string();
        assert!(err.contains("theta_range[3]"), "{err}");
    }

    #[test]
    fn mdp_resamples_latent_each_episode() {
        let mut rng = rng_from(4);
        let mut mdp = UpnMdp::new(EnvSpec::point_mass(), ThetaRange::default(), &mut rng).unwrap();
        let a = mdp.reset(&mut rng).unwrap();
        let b = mdp.reset(&mut rng).unwrap();
        assert_ne!(a[4..], b[4..]);
    }

    #[test]
    fn relative_improvement_rule() {
        assert!((relative_improvement(100.0, 104.0) - 0.04).abs() < 1e-12);
        assert!(relative_improvement(100.0, 104.0) < 0.05);
        assert!((relative_improvement(-100.0, -90.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn infinite_threshold_stops_after_first_chunk() {
        let spec = EnvSpec::point_mass();
        let p = UniversalPolicy::init(&spec, ThetaRange::default(), &small_net(), &mut rng_from(5)).unwrap();
        let (out, report) = fine_tune(
            p,
            &spec,
            &LatentParams::default(),
            2000,
            400,
            f64::INFINITY,
            small_hp(),
            &mut rng_from(6),
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(report.chunk_returns.len(), 1);
        assert_eq!(report.steps_used, 400);
        assert!(report.stopped_early);
        assert_eq!(out.meta.fine_tune_steps, 400);
        assert_eq!(out.meta.steps_trained, 0);
    }

    #[test]
    fn negative_infinite_threshold_spends_whole_budget() {
        let spec = EnvSpec::point_mass();
        let p = UniversalPolicy::init(&spec, ThetaRange::default(), &small_net(), &mut rng_from(7)).unwrap();
        let (_, report) = fine_tune(
            p,
            &spec,
            &LatentParams::default(),
            1000,
            400,
            f64::NEG_INFINITY,
            small_hp(),
            &mut rng_from(8),
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(report.steps_used, 1000);
        assert_eq!(report.chunk_returns.len(), 3);
        assert!(!report.stopped_early);
    }

    #[test]
    fn extension_counts_exact_steps() {
        let spec = EnvSpec::pendulum();
        let p = UniversalPolicy::init(&spec, ThetaRange::default(), &small_net(), &mut rng_from(9)).unwrap();
        let p = extend_training(p, &spec, &LatentParams::default(), 700, small_hp(), &mut rng_from(10)).unwrap();
        assert_eq!(p.meta.fine_tune_steps, 700);
    }
}
