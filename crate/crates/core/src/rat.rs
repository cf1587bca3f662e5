//! Reverse action transformation: a correction policy that adds a per-step
//! offset to the universal policy's action so the real world follows the
//! simulator, trained against one fixed gap or across sampled gaps, and
//! reused zero-shot on adjacent latents.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{self, Env, EnvId, EnvSpec, EnvState, LatentParams, RealityGap, WorldConfig, LATENT_DIM};
use crate::error::{check_len, Error, Result};
use crate::eval::{run_episodes, EpisodeOutcome, Protocol};
use crate::nn::NetworkConfig;
use crate::ppo::{ActorCritic, Mdp, MdpStep, PpoDiagnostics, PpoHyperparams, PpoTrainer};
use crate::seed::{child_rng, Rng};
use crate::upn::UniversalPolicy;

/// `-|real_next - sim_next|^2` over flattened states.
pub fn rat_reward(real_next: &[f64], sim_next: &[f64]) -> Result<f64> {
    check_len("simulated next state", real_next.len(), sim_next.len())?;
    Ok(-real_next
        .iter()
        .zip(sim_next)
        .map(|(r, s)| (r - s) * (r - s))
        .sum::<f64>())
}

/// Real-world action: UPN action plus offset, clamped to `[-bound, bound]`.
pub fn correct_action(upn_action: &[f64], delta: &[f64], bound: f64) -> Vec<f64> {
    upn_action
        .iter()
        .zip(delta)
        .map(|(a, d)| (a + d).clamp(-bound, bound))
        .collect()
}

/// Correction-policy input: real state features followed by the UPN action.
pub fn rat_observation(real_features: &[f64], upn_action: &[f64]) -> Vec<f64> {
    let mut obs = Vec::with_capacity(real_features.len() + upn_action.len());
    obs.extend_from_slice(real_features);
    obs.extend_from_slice(upn_action);
    obs
}

/// Uniform box of hypothetical gaps in normalized latent units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSampler {
    pub low: [f64; LATENT_DIM],
    pub high: [f64; LATENT_DIM],
}

impl Default for GapSampler {
    /// Friction gaps in `[0, 1)`, mass gaps in `[1, 3)`, nothing elsewhere.
    fn default() -> Self {
        let mut low = [0.0; LATENT_DIM];
        let mut high = [0.0; LATENT_DIM];
        high[env::FRICTION] = 1.0;
        low[env::MASS] = 1.0;
        high[env::MASS] = 3.0;
        GapSampler { low, high }
    }
}

impl GapSampler {
    pub fn fixed(gap: &RealityGap) -> Self {
        GapSampler {
            low: gap.0,
            high: gap.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..LATENT_DIM {
            let (lo, hi) = (self.low[k], self.high[k]);
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::config(
                    format!("rat.gap_low[{k}]"),
                    format!("need finite low <= high, got [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }

    /// Dimensions that can carry a nonzero gap.
    pub fn support(&self) -> [bool; LATENT_DIM] {
        std::array::from_fn(|k| self.low[k] != 0.0 || self.high[k] != 0.0)
    }

    pub fn sample(&self, rng: &mut Rng) -> RealityGap {
        RealityGap(std::array::from_fn(|k| {
            if self.low[k] < self.high[k] {
                rng.random_range(self.low[k]..self.high[k])
            } else {
                self.low[k]
            }
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatProvenance {
    Fresh,
    /// Trained across sampled gaps.
    RobustInitial,
    /// Trained (or continued) against one fixed real world.
    FixedGap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatMeta {
    pub env: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
    pub theta_g: LatentParams,
    pub sampler: GapSampler,
    pub reset: bool,
    pub scale_reward: bool,
    pub provenance: RatProvenance,
    pub steps_trained: usize,
    pub episodes_trained: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatPolicy {
    pub model: ActorCritic,
    pub meta: RatMeta,
}

/// Training switches shared by both correction-policy trainers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatOptions {
    /// Re-sync the simulator to the real state after every step.
    pub reset: bool,
    /// Divide the imitation reward by the state dimension.
    pub scale_reward: bool,
}

impl Default for RatOptions {
    fn default() -> Self {
        RatOptions {
            reset: true,
            scale_reward: false,
        }
    }
}

impl RatPolicy {
    pub fn init(
        spec: &EnvSpec,
        theta_g: LatentParams,
        sampler: GapSampler,
        options: RatOptions,
        net: &NetworkConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        sampler.validate()?;
        let model = ActorCritic::init(spec.state_dim() + spec.action_dim(), spec.action_dim(), net, rng)?;
        Ok(RatPolicy {
            model,
            meta: RatMeta {
                env: spec.id,
                state_dim: spec.state_dim(),
                action_dim: spec.action_dim(),
                action_bound: spec.action_bound,
                theta_g,
                sampler,
                reset: options.reset,
                scale_reward: options.scale_reward,
                provenance: RatProvenance::Fresh,
                steps_trained: 0,
                episodes_trained: 0,
            },
        })
    }

    /// Greedy offset for a real state and the UPN action proposed there.
    pub fn delta(&self, real_features: &[f64], upn_action: &[f64]) -> Result<Vec<f64>> {
        check_len("real state features", self.meta.state_dim, real_features.len())?;
        check_len("UPN action", self.meta.action_dim, upn_action.len())?;
        self.model.actor.mean_action(&rat_observation(real_features, upn_action))
    }

    /// UPN action at `theta` plus the greedy offset, clamped.
    pub fn act(&self, upn: &UniversalPolicy, state: &EnvState, theta: &LatentParams) -> Result<Vec<f64>> {
        let features = state.features();
        let a = upn.query(&features, theta)?;
        let d = self.delta(&features, &a)?;
        Ok(correct_action(&a, &d, self.meta.action_bound))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        check_len(
            "correction policy input width",
            self.meta.state_dim + self.meta.action_dim,
            self.model.actor.obs_dim(),
        )?;
        check_len("correction policy output width", self.meta.action_dim, self.model.actor.action_dim())
    }
}

/// Paired simulator / real-world episodes seen from the correction policy.
/// The real world is `[theta_g, gap]`; with a sampler the gap is redrawn
/// every episode.
pub struct RatMdp<'a> {
    upn: &'a UniversalPolicy,
    theta_g: LatentParams,
    sampler: GapSampler,
    options: RatOptions,
    sim: Env,
    real: Env,
    upn_action: Vec<f64>,
    episodes: usize,
}

impl<'a> RatMdp<'a> {
    pub fn new(
        upn: &'a UniversalPolicy,
        spec: EnvSpec,
        theta_g: LatentParams,
        sampler: GapSampler,
        options: RatOptions,
        rng: &mut Rng,
    ) -> Result<Self> {
        if upn.meta.env != spec.id || upn.meta.state_dim != spec.state_dim() {
            return Err(Error::config(
                "env",
                format!("UPN for {} cannot drive {}", upn.meta.env, spec.id),
            ));
        }
        sampler.validate()?;
        let sim = Env::new(spec, WorldConfig::sim(theta_g), rng)?;
        let real = Env::new(spec, WorldConfig::real(theta_g, sampler.sample(rng)), rng)?;
        Ok(RatMdp {
            upn,
            theta_g,
            sampler,
            options,
            sim,
            real,
            upn_action: vec![0.0; spec.action_dim()],
            episodes: 0,
        })
    }

    pub fn sim(&self) -> &Env {
        &self.sim
    }

    pub fn real(&self) -> &Env {
        &self.real
    }

    pub fn upn_action(&self) -> &[f64] {
        &self.upn_action
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    fn observe(&mut self) -> Result<Vec<f64>> {
        self.upn_action = self.upn.query(&self.sim.features(), &self.theta_g)?;
        Ok(rat_observation(&self.real.features(), &self.upn_action))
    }
}

impl Mdp for RatMdp<'_> {
    fn obs_dim(&self) -> usize {
        self.sim.spec().state_dim() + self.sim.spec().action_dim()
    }

    fn action_dim(&self) -> usize {
        self.sim.spec().action_dim()
    }

    fn reset(&mut self, rng: &mut Rng) -> Result<Vec<f64>> {
        let gap = self.sampler.sample(rng);
        self.real.set_config(WorldConfig::real(self.theta_g, gap));
        let start = *self.real.reset(rng);
        self.sim.set_state(start)?;
        self.episodes += 1;
        self.observe()
    }

    fn step(&mut self, delta: &[f64]) -> Result<MdpStep> {
        let bound = self.real.spec().action_bound;
        let real_action = correct_action(&self.upn_action, delta, bound);
        let sim_out = self.sim.step(&self.upn_action)?;
        let real_out = self.real.step(&real_action)?;
        let mut reward = rat_reward(&real_out.next.features(), &sim_out.next.features())?;
        if self.options.scale_reward {
            reward /= self.sim.spec().state_dim() as f64;
        }
        if self.options.reset {
            self.sim.set_state(real_out.next)?;
        }
        let done = real_out.done || sim_out.done;
        Ok(MdpStep {
            obs: self.observe()?,
            reward,
            terminated: false,
            truncated: done,
        })
    }
}

/// Owns a correction policy while it trains; after an error the held policy
/// is the last one that completed an update.
pub struct RatTrainer {
    ppo: PpoTrainer,
    pub meta: RatMeta,
}

impl RatTrainer {
    pub fn new(policy: RatPolicy, hp: PpoHyperparams) -> Result<Self> {
        policy.validate()?;
        Ok(RatTrainer {
            ppo: PpoTrainer::new(policy.model, hp),
            meta: policy.meta,
        })
    }

    pub fn policy(&self) -> RatPolicy {
        RatPolicy {
            model: self.ppo.model.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn into_policy(self) -> RatPolicy {
        RatPolicy {
            model: self.ppo.model,
            meta: self.meta,
        }
    }

    /// Runs `steps` transitions of the paired-world loop.
    pub fn run(
        &mut self,
        upn: &UniversalPolicy,
        spec: &EnvSpec,
        sampler: GapSampler,
        steps: usize,
        rng: &mut Rng,
        on_update: &mut dyn FnMut(&PpoDiagnostics),
    ) -> Result<Vec<PpoDiagnostics>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        let options = RatOptions {
            reset: self.meta.reset,
            scale_reward: self.meta.scale_reward,
        };
        let mut mdp = RatMdp::new(upn, *spec, self.meta.theta_g, sampler, options, rng)?;
        let before = self.ppo.steps_trained;
        let result = self.ppo.train(&mut mdp, steps, rng, |d| on_update(d));
        self.meta.steps_trained += self.ppo.steps_trained - before;
        self.meta.episodes_trained += mdp.episodes();
        result
    }
}

/// Trains against the single real world `[theta_g, gap]`, optionally
/// continuing from `initial`.
#[allow(clippy::too_many_arguments)]
pub fn train_rat(
    upn: &UniversalPolicy,
    spec: &EnvSpec,
    theta_g: LatentParams,
    gap: &RealityGap,
    initial: Option<RatPolicy>,
    options: RatOptions,
    steps: usize,
    hp: PpoHyperparams,
    net: &NetworkConfig,
    rng: &mut Rng,
    on_update: &mut dyn FnMut(&PpoDiagnostics),
) -> Result<RatPolicy> {
    let sampler = GapSampler::fixed(gap);
    let mut policy = match initial {
        Some(p) => {
            if p.meta.theta_g != theta_g || p.meta.env != spec.id {
                return Err(Error::config(
                    "rat.initial",
                    "initial policy was trained for a different environment or latent",
                ));
            }
            p
        }
        None => RatPolicy::init(spec, theta_g, sampler, options, net, rng)?,
    };
    policy.meta.reset = options.reset;
    policy.meta.scale_reward = options.scale_reward;
    let mut trainer = RatTrainer::new(policy, hp)?;
    trainer.run(upn, spec, sampler, steps, rng, on_update)?;
    if steps > 0 {
        trainer.meta.provenance = RatProvenance::FixedGap;
    }
    Ok(trainer.into_policy())
}

/// Robust initial policy: `episodes` episodes, each against a hypothetical
/// real world with a freshly sampled gap, all feeding one policy and one
/// optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn train_rat_initial(
    upn: &UniversalPolicy,
    spec: &EnvSpec,
    theta_g: LatentParams,
    sampler: GapSampler,
    episodes: usize,
    options: RatOptions,
    hp: PpoHyperparams,
    net: &NetworkConfig,
    rng: &mut Rng,
    on_update: &mut dyn FnMut(&PpoDiagnostics),
) -> Result<RatPolicy> {
    let policy = RatPolicy::init(spec, theta_g, sampler, options, net, rng)?;
    let mut trainer = RatTrainer::new(policy, hp)?;
    trainer.run(upn, spec, sampler, episodes * spec.horizon, rng, on_update)?;
    if episodes > 0 {
        trainer.meta.provenance = RatProvenance::RobustInitial;
    }
    Ok(trainer.into_policy())
}

/// Largest elementwise distance between two latent vectors.
pub fn latent_distance(a: &LatentParams, b: &LatentParams) -> (usize, f64) {
    (0..LATENT_DIM)
        .map(|k| (k, (a.0[k] - b.0[k]).abs()))
        .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best })
}

/// Refuses latents farther than `epsilon_max` from `theta_g` on any axis.
pub fn check_adjacent(theta_g: &LatentParams, theta_hat: &LatentParams, epsilon_max: f64) -> Result<()> {
    let (dim, distance) = latent_distance(theta_g, theta_hat);
    if distance > epsilon_max {
        return Err(Error::OutsideAdjacency {
            dim,
            distance,
            epsilon_max,
        });
    }
    Ok(())
}

/// Zero-shot deployment in the real world `[theta_hat, gap]`: UPN queried at
/// `theta_hat`, greedy offset added, task reward recorded.
pub fn apply_zero_shot(
    upn: &UniversalPolicy,
    rat: &RatPolicy,
    spec: &EnvSpec,
    theta_hat: &LatentParams,
    gap: &RealityGap,
    epsilon_max: f64,
    protocol: &Protocol,
) -> Result<Vec<EpisodeOutcome>> {
    check_adjacent(&rat.meta.theta_g, theta_hat, epsilon_max)?;
    let world = WorldConfig::real(*theta_hat, *gap);
    run_episodes(spec, &world, protocol, |s| rat.act(upn, s, theta_hat))
}

/// Mean per-step squared deviation between where the real world went and
/// where the simulator at `theta` would have gone from the same state under
/// the UPN action. One value per episode; episodes share start states with
/// every other protocol run on the same seed.
pub fn imitation_deviation(
    upn: &UniversalPolicy,
    rat: Option<&RatPolicy>,
    spec: &EnvSpec,
    theta: &LatentParams,
    gap: &RealityGap,
    protocol: &Protocol,
) -> Result<Vec<f64>> {
    let spec = protocol.apply(spec);
    let sim = WorldConfig::sim(*theta);
    let real = WorldConfig::real(*theta, *gap);
    (0..protocol.episodes)
        .map(|i| {
            let mut rng = child_rng(protocol.seed, "episode", i as u64);
            let mut state = spec.initial_state(&mut rng);
            let mut total = 0.0;
            let mut steps = 0;
            loop {
                let features = state.features();
                let a = upn.query(&features, theta)?;
                let real_action = match rat {
                    Some(r) => correct_action(&a, &r.delta(&features, &a)?, spec.action_bound),
                    None => a.clone(),
                };
                let target = env::step(&spec, &sim, &state, &a)?;
                let out = env::step(&spec, &real, &state, &real_action)?;
                total -= rat_reward(&out.next.features(), &target.next.features())?;
                steps += 1;
                state = out.next;
                if out.done {
                    break;
                }
            }
            Ok(total / steps as f64)
        })
        .collect()
}
