//! Evaluation protocol, baselines, adjacent-latent sampling and the
//! method-by-deviation comparison report.

use std::fmt;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvId, EnvSpec, EnvState, LatentParams, RealityGap, WorldConfig, LATENT_DIM};
use crate::error::{Error, Result};
use crate::rat::{self, RatPolicy};
use crate::seed::{child_rng, derive_seed};
use crate::suprat::{self, InverseDynamicsModel};
use crate::upn::UniversalPolicy;

/// Bumped whenever a CSV or checkpoint layout changes.
pub const FORMAT_VERSION: u32 = 1;

/// Episodes per evaluation, episode length and the seed that fixes every
/// start state. Episode `i` starts from the same state for every method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Protocol {
    /// `spec` with its horizon replaced by the protocol's.
    pub fn apply(&self, spec: &EnvSpec) -> EnvSpec {
        EnvSpec {
            horizon: self.horizon,
            ..*spec
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub total_reward: f64,
    pub steps: usize,
}

impl EpisodeOutcome {
    pub fn stepwise(&self) -> f64 {
        self.total_reward / self.steps as f64
    }
}

/// Rolls `controller` in `world` for every protocol episode. Episodes run in
/// parallel and come back in index order.
pub fn run_episodes<C>(spec: &EnvSpec, world: &WorldConfig, protocol: &Protocol, controller: C) -> Result<Vec<EpisodeOutcome>>
where
    C: Fn(&EnvState) -> Result<Vec<f64>> + Sync,
{
    let spec = protocol.apply(spec);
    spec.validate()?;
    (0..protocol.episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = child_rng(protocol.seed, "episode", i as u64);
            let mut state = spec.initial_state(&mut rng);
            let mut total = 0.0;
            let mut steps = 0;
            loop {
                let action = controller(&state)?;
                let out = env::step(&spec, world, &state, &action)?;
                total += out.reward;
                steps += 1;
                state = out.next;
                if out.done {
                    break;
                }
            }
            Ok(EpisodeOutcome {
                total_reward: total,
                steps,
            })
        })
        .collect()
}

/// Mean over episodes of return divided by steps taken, and its standard
/// error (sample standard deviation over the square root of the count).
pub fn metric_stepwise(outcomes: &[EpisodeOutcome]) -> Result<(f64, f64)> {
    if outcomes.is_empty() {
        return Err(Error::Empty("episode outcomes"));
    }
    let values: Vec<f64> = outcomes.iter().map(EpisodeOutcome::stepwise).collect();
    Ok(mean_and_se(&values))
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Greedy UPN at `theta` in the real world, no correction.
pub fn transfer_baseline(
    upn: &UniversalPolicy,
    spec: &EnvSpec,
    theta: &LatentParams,
    world: &WorldConfig,
    protocol: &Protocol,
) -> Result<Vec<EpisodeOutcome>> {
    run_episodes(spec, world, protocol, |s| upn.query(&s.features(), theta))
}

/// Action-mean of the UPN conditioned on each of `thetas`.
pub fn dr_action(upn: &UniversalPolicy, features: &[f64], thetas: &[LatentParams]) -> Result<Vec<f64>> {
    if thetas.is_empty() {
        return Err(Error::Empty("domain-randomized latents"));
    }
    // shifted by the first member's action so identical members average
    // to exactly that action
    let base = upn.query(features, &thetas[0])?;
    let mut offset = vec![0.0; base.len()];
    for t in &thetas[1..] {
        for ((o, a), b) in offset.iter_mut().zip(upn.query(features, t)?).zip(&base) {
            *o += a - b;
        }
    }
    let k = thetas.len() as f64;
    Ok(base.iter().zip(offset).map(|(b, o)| b + o / k).collect())
}

/// Ensemble of UPN conditionings on `thetas`, averaged per state.
pub fn dr_baseline(
    upn: &UniversalPolicy,
    spec: &EnvSpec,
    thetas: &[LatentParams],
    world: &WorldConfig,
    protocol: &Protocol,
) -> Result<Vec<EpisodeOutcome>> {
    run_episodes(spec, world, protocol, |s| dr_action(upn, &s.features(), thetas))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacentSample {
    pub theta_hat: LatentParams,
    pub deviation: f64,
    pub index: usize,
    pub seed: u64,
}

/// Inclusive relative band `theta * (1 -/+ deviation)` on dimension `k`.
pub fn band(theta: &LatentParams, deviation: f64, k: usize) -> (f64, f64) {
    let half = deviation * theta.0[k];
    (theta.0[k] - half, theta.0[k] + half)
}

/// `n` latents uniform in the relative band around `theta_g`. Sample `j`
/// uses the same unit draw at every deviation, so levels differ only in
/// scale.
pub fn sample_adjacent(theta_g: &LatentParams, deviation: f64, n: usize, seed: u64) -> Result<Vec<AdjacentSample>> {
    if !(deviation >= 0.0 && deviation.is_finite()) {
        return Err(Error::config("eval.deviation", format!("must be finite and >= 0, got {deviation}")));
    }
    Ok((0..n)
        .map(|j| {
            let mut rng = child_rng(seed, "adjacent", j as u64);
            let theta_hat = LatentParams(std::array::from_fn(|k| {
                let u: f64 = rng.random_range(-1.0..1.0);
                let (lo, hi) = band(theta_g, deviation, k);
                (theta_g.0[k] + deviation * theta_g.0[k] * u).clamp(lo, hi)
            }));
            AdjacentSample {
                theta_hat,
                deviation,
                index: j,
                seed,
            }
        })
        .collect())
}

/// Zero-shot guard radius for a sweep level: the widest band half-width.
pub fn epsilon_for(theta_g: &LatentParams, deviation: f64) -> f64 {
    (0..LATENT_DIM).map(|k| deviation * theta_g.0[k]).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Transfer,
    Dr,
    SupervisedRat,
    Rat,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Transfer, Method::Dr, Method::SupervisedRat, Method::Rat];

    pub fn name(self) -> &'static str {
        match self {
            Method::Transfer => "transfer",
            Method::Dr => "dr",
            Method::SupervisedRat => "supervised_rat",
            Method::Rat => "rat",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    pub deviation: f64,
    pub mean: f64,
    pub std_error: f64,
    pub episodes: usize,
    pub horizon: usize,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: EnvId,
    pub seed: u64,
    pub config_id: String,
    pub rows: Vec<EvalRow>,
    /// Per-episode step-wise rewards, indexed like `rows`.
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn row(&self, method: Method, deviation: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method && r.deviation == deviation)
    }

    pub fn samples_for(&self, method: Method, deviation: f64) -> Option<&[f64]> {
        let i = self.rows.iter().position(|r| r.method == method && r.deviation == deviation)?;
        self.samples.get(i).map(Vec::as_slice)
    }

    pub const CSV_HEADER: [&'static str; 11] = [
        "env",
        "method",
        "deviation",
        "mean",
        "std_error",
        "episodes",
        "horizon",
        "seed",
        "config_id",
        "best",
        "format_version",
    ];

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                self.env.name().to_string(),
                r.method.name().to_string(),
                r.deviation.to_string(),
                r.mean.to_string(),
                r.std_error.to_string(),
                r.episodes.to_string(),
                r.horizon.to_string(),
                self.seed.to_string(),
                self.config_id.clone(),
                r.best.to_string(),
                FORMAT_VERSION.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    fn mark_best(&mut self) {
        let mut levels: Vec<f64> = self.rows.iter().map(|r| r.deviation).collect();
        levels.dedup();
        for level in levels {
            let best = self
                .rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.deviation == level)
                .max_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
                .map(|(i, _)| i);
            if let Some(i) = best {
                self.rows[i].best = true;
            }
        }
    }
}

/// Models entering a comparison. RAT and Supervised RAT drive `upn`;
/// Transfer and DR use `baseline_upn`, the same network trained for the
/// extra steps the correction policy consumed.
pub struct Models<'a> {
    pub upn: &'a UniversalPolicy,
    pub baseline_upn: &'a UniversalPolicy,
    pub rat: Option<&'a RatPolicy>,
    pub suprat: Option<&'a InverseDynamicsModel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonConfig {
    pub episodes: usize,
    pub horizon: usize,
    /// Adjacent latents per nonzero deviation level.
    pub adjacent_samples: usize,
    /// Episodes run on each adjacent latent.
    pub episodes_per_sample: usize,
    pub dr_samples: usize,
    pub dr_deviation: f64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            episodes: 50,
            horizon: 200,
            adjacent_samples: 50,
            episodes_per_sample: 1,
            dr_samples: 10,
            dr_deviation: 0.05,
        }
    }
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.horizon == 0 || self.adjacent_samples == 0 || self.episodes_per_sample == 0 {
            return Err(Error::config(
                "eval.episodes",
                "episodes, horizon, adjacent_samples and episodes_per_sample must be >= 1",
            ));
        }
        if self.dr_samples == 0 {
            return Err(Error::config("eval.dr_samples", "must be >= 1"));
        }
        if !(self.dr_deviation >= 0.0) {
            return Err(Error::config("eval.dr_deviation", "must be >= 0"));
        }
        Ok(())
    }
}

/// Every method at every deviation level. Level 0 evaluates at `theta_g`;
/// other levels pool episodes over adjacent latents. Start states, adjacent
/// draws and DR draws derive from `seed`, shared by all methods.
#[allow(clippy::too_many_arguments)]
pub fn run_comparison(
    spec: &EnvSpec,
    theta_g: &LatentParams,
    gap: &RealityGap,
    models: &Models,
    deviations: &[f64],
    cfg: &ComparisonConfig,
    seed: u64,
    config_id: &str,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut report = EvalReport {
        env: spec.id,
        seed,
        config_id: config_id.to_string(),
        rows: Vec::new(),
        samples: Vec::new(),
    };
    if models.rat.is_none() {
        log::warn!(target: "eval", "no correction policy; RAT rows omitted");
    }
    if models.suprat.is_none() {
        log::warn!(target: "eval", "no inverse-dynamics model; Supervised RAT rows omitted");
    }
    let adjacent_seed = derive_seed(seed, "adjacent", 0);
    let dr_seed = derive_seed(seed, "dr", 0);
    for &deviation in deviations {
        let (thetas, per_theta) = if deviation == 0.0 {
            (vec![*theta_g], cfg.episodes)
        } else {
            let s = sample_adjacent(theta_g, deviation, cfg.adjacent_samples, adjacent_seed)?;
            (s.into_iter().map(|a| a.theta_hat).collect(), cfg.episodes_per_sample)
        };
        let epsilon_max = epsilon_for(theta_g, deviation);
        for method in Method::ALL {
            let available = match method {
                Method::Rat => models.rat.is_some(),
                Method::SupervisedRat => models.suprat.is_some(),
                _ => true,
            };
            if !available {
                continue;
            }
            let mut values = Vec::new();
            for (j, theta) in thetas.iter().enumerate() {
                let protocol = Protocol {
                    episodes: per_theta,
                    horizon: cfg.horizon,
                    seed: derive_seed(seed, "episodes", j as u64),
                };
                let world = WorldConfig::real(*theta, *gap);
                let outcomes = match method {
                    Method::Transfer => transfer_baseline(models.baseline_upn, spec, theta, &world, &protocol)?,
                    Method::Dr => {
                        let ds = sample_adjacent(theta, cfg.dr_deviation, cfg.dr_samples, dr_seed)?;
                        let dr_thetas: Vec<LatentParams> = ds.into_iter().map(|a| a.theta_hat).collect();
                        dr_baseline(models.baseline_upn, spec, &dr_thetas, &world, &protocol)?
                    }
                    Method::Rat => {
                        let r = models.rat.expect("checked above");
                        rat::apply_zero_shot(models.upn, r, spec, theta, gap, epsilon_max, &protocol)?
                    }
                    Method::SupervisedRat => {
                        let m = models.suprat.expect("checked above");
                        suprat::eval_supervised_zero_shot(
                            models.upn, m, spec, theta_g, theta, gap, epsilon_max, &protocol,
                        )?
                    }
                };
                values.extend(outcomes.iter().map(EpisodeOutcome::stepwise));
            }
            let (mean, std_error) = mean_and_se(&values);
            log::info!(
                target: "eval",
                "{} {method} deviation={deviation} mean={mean:.6} se={std_error:.6} episodes={}",
                spec.id,
                values.len()
            );
            report.rows.push(EvalRow {
                method,
                deviation,
                mean,
                std_error,
                episodes: values.len(),
                horizon: cfg.horizon,
                best: false,
            });
            report.samples.push(values);
        }
    }
    report.mark_best();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::DEFAULT_THETA_G;
    use crate::nn::NetworkConfig;
    use crate::seed::rng_from;
    use crate::upn::ThetaRange;

    fn outcome(total: f64, steps: usize) -> EpisodeOutcome {
        EpisodeOutcome {
            total_reward: total,
            steps,
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metric_stepwise(&[outcome(4.0, 4)]).unwrap(), (1.0, 0.0));
        let (m, se) = metric_stepwise(&[outcome(2.0, 10), outcome(4.0, 10)]).unwrap();
        assert!((m - 0.3).abs() < 1e-15);
        assert!((se - 0.1).abs() < 1e-15);
        assert!(metric_stepwise(&[]).is_err());
    }

    #[test]
    fn adjacent_examples() {
        let g = LatentParams(DEFAULT_THETA_G);
        for s in sample_adjacent(&g, 0.0, 5, 1).unwrap() {
            assert_eq!(s.theta_hat, g);
        }
        let half = LatentParams([0.5; LATENT_DIM]);
        for s in sample_adjacent(&half, 0.05, 200, 2).unwrap() {
            assert!(s.theta_hat.0.iter().all(|v| (0.475..=0.525).contains(v)));
        }
        assert!(sample_adjacent(&g, -0.1, 5, 1).is_err());
        assert_eq!(sample_adjacent(&g, 0.1, 7, 3).unwrap(), sample_adjacent(&g, 0.1, 7, 3).unwrap());
    }

    #[test]
    fn adjacent_levels_share_unit_draws() {
        let g = LatentParams(DEFAULT_THETA_G);
        let a = sample_adjacent(&g, 0.05, 10, 4).unwrap();
        let b = sample_adjacent(&g, 0.20, 10, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for k in 0..LATENT_DIM {
                let dx = x.theta_hat.0[k] - g.0[k];
                let dy = y.theta_hat.0[k] - g.0[k];
                assert!((4.0 * dx - dy).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dr_action_is_action_mean() {
        let spec = EnvSpec::pendulum();
        let upn = UniversalPolicy::init(&spec, ThetaRange::default(), &NetworkConfig::default(), &mut rng_from(5))
            .unwrap();
        let f = [0.3, 0.9, -1.0];
        let t1 = LatentParams([0.1; 5]);
        let t2 = LatentParams([0.9; 5]);
        let a1 = upn.query(&f, &t1).unwrap();
        let a2 = upn.query(&f, &t2).unwrap();
        let dr = dr_action(&upn, &f, &[t1, t2]).unwrap();
        assert!((dr[0] - (a1[0] + a2[0]) / 2.0).abs() < 1e-15);
        assert_eq!(dr_action(&upn, &f, &[t1]).unwrap(), a1);
        assert!(dr_action(&upn, &f, &[]).is_err());
    }

    #[test]
    fn same_seed_same_outcomes() {
        let spec = EnvSpec::point_mass();
        let upn = UniversalPolicy::init(&spec, ThetaRange::default(), &NetworkConfig::default(), &mut rng_from(6))
            .unwrap();
        let theta = LatentParams::default();
        let world = WorldConfig::sim(theta);
        let p = Protocol {
            episodes: 4,
            horizon: 20,
            seed: 7,
        };
        let a = transfer_baseline(&upn, &spec, &theta, &world, &p).unwrap();
        assert_eq!(a, transfer_baseline(&upn, &spec, &theta, &world, &p).unwrap());
        assert!(a.iter().all(|o| o.steps == 20));
    }

    #[test]
    fn comparison_marks_one_best_per_level() {
        let spec = EnvSpec::point_mass();
        let upn = UniversalPolicy::init(&spec, ThetaRange::default(), &NetworkConfig::default(), &mut rng_from(8))
            .unwrap();
        let models = Models {
            upn: &upn,
            baseline_upn: &upn,
            rat: None,
            suprat: None,
        };
        let cfg = ComparisonConfig {
            episodes: 3,
            horizon: 10,
            adjacent_samples: 3,
            dr_samples: 2,
            ..ComparisonConfig::default()
        };
        let theta = LatentParams::default();
        let r = run_comparison(&spec, &theta, &RealityGap::zero(), &models, &[0.0, 0.05], &cfg, 9, "cfg-test").unwrap();
        assert_eq!(r.rows.len(), 4);
        for level in [0.0, 0.05] {
            assert_eq!(r.rows.iter().filter(|x| x.deviation == level && x.best).count(), 1);
        }
        assert_eq!(r.row(Method::Transfer, 0.05).unwrap().episodes, 3);
    }
}
