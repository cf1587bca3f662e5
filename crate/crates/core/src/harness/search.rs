//! Seeded random search over the correction policy's PPO hyperparameters
//! and reset flag, scored by zero-shot performance in the configured real
//! world.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{metric_stepwise, Protocol, FORMAT_VERSION};
use crate::harness::config::{ExperimentConfig, SearchSpace};
use crate::ppo::PpoHyperparams;
use crate::rat::{apply_zero_shot, train_rat_initial, RatOptions};
use crate::seed::{child_rng, derive_seed, Rng};
use crate::upn::UniversalPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub clip: f64,
    pub entcoeff: f64,
    pub stepsize: f64,
    pub lam: f64,
    pub gamma: f64,
    pub reset: bool,
}

impl TrialParams {
    pub fn apply(&self, base: &PpoHyperparams) -> PpoHyperparams {
        PpoHyperparams {
            clip: self.clip,
            entcoeff: self.entcoeff,
            stepsize: self.stepsize,
            lam: self.lam,
            gamma: self.gamma,
            ..*base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: TrialParams,
    /// Mean step-wise reward, `None` when training diverged.
    pub objective: Option<f64>,
    pub error: Option<String>,
    pub seed: u64,
}

fn uniform(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_params(space: &SearchSpace, rng: &mut Rng) -> TrialParams {
    let clip = uniform(rng, space.clip);
    let entcoeff = uniform(rng, space.entcoeff);
    let stepsize = uniform(rng, [space.stepsize[0].ln(), space.stepsize[1].ln()]).exp();
    let lam = uniform(rng, space.lam);
    let gamma = uniform(rng, space.gamma);
    let reset = space.reset[rng.random_range(0..2)];
    TrialParams {
        clip,
        entcoeff,
        stepsize,
        lam,
        gamma,
        reset,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    pub best: usize,
}

impl SearchOutcome {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }
}

/// Runs `space.trials` trials in sequence. Each trains a robust initial
/// correction policy with the trial's settings and scores it at the ground
/// truth in the configured real world.
pub fn hyperparam_search(cfg: &ExperimentConfig, upn: &UniversalPolicy, space: &SearchSpace) -> Result<SearchOutcome> {
    space.validate()?;
    let spec = cfg.spec();
    let theta = cfg.theta();
    let gap = cfg.reality_gap();
    let protocol = Protocol {
        episodes: cfg.eval.episodes,
        horizon: cfg.horizon,
        seed: derive_seed(cfg.seed, "search-eval", 0),
    };
    let mut trials = Vec::with_capacity(space.trials);
    for i in 0..space.trials {
        let params = sample_params(space, &mut child_rng(cfg.seed, "search-params", i as u64));
        let seed = derive_seed(cfg.seed, "search-trial", i as u64);
        let options = RatOptions {
            reset: params.reset,
            scale_reward: cfg.rat.scale_reward,
        };
        let score = train_rat_initial(
            upn,
            &spec,
            theta,
            cfg.sampler(),
            cfg.rat_init_episodes(),
            options,
            params.apply(&cfg.rat.ppo),
            &cfg.rat.network,
            &mut crate::seed::rng_from(seed),
            &mut |_| {},
        )
        .and_then(|rat| apply_zero_shot(upn, &rat, &spec, &theta, &gap, 0.0, &protocol))
        .and_then(|outcomes| metric_stepwise(&outcomes).map(|(m, _)| m));
        let trial = match score {
            Ok(m) => Trial {
                index: i,
                params,
                objective: Some(m),
                error: None,
                seed,
            },
            Err(e @ Error::Divergence(_)) => Trial {
                index: i,
                params,
                objective: None,
                error: Some(e.to_string()),
                seed,
            },
            Err(e) => return Err(e),
        };
        log::info!(target: "search", "trial {i} {:?} objective {:?}", trial.params, trial.objective);
        trials.push(trial);
    }
    let best = trials
        .iter()
        .filter_map(|t| t.objective.map(|o| (t.index, o)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    match best {
        Some(best) => Ok(SearchOutcome { trials, best }),
        None => Err(Error::Divergence(format!(
            "all {} trials diverged: {}",
            trials.len(),
            trials
                .iter()
                .map(|t| format!("#{}: {}", t.index, t.error.as_deref().unwrap_or("?")))
                .collect::<Vec<_>>()
                .join("; ")
        ))),
    }
}

pub const TRIAL_CSV_HEADER: [&str; 13] = [
    "trial",
    "clip",
    "entcoeff",
    "stepsize",
    "lam",
    "gamma",
    "reset",
    "objective",
    "seed",
    "trial_seed",
    "config_id",
    "best",
    "format_version",
];

pub fn write_trials_csv(outcome: &SearchOutcome, seed: u64, config_id: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRIAL_CSV_HEADER)?;
    for t in &outcome.trials {
        let p = &t.params;
        w.write_record([
            t.index.to_string(),
            p.clip.to_string(),
            p.entcoeff.to_string(),
            p.stepsize.to_string(),
            p.lam.to_string(),
            p.gamma.to_string(),
            p.reset.to_string(),
            t.objective.map(|o| o.to_string()).unwrap_or_default(),
            seed.to_string(),
            t.seed.to_string(),
            config_id.to_string(),
            (t.index == outcome.best).to_string(),
            FORMAT_VERSION.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
