//! Experiment configuration: TOML with defaults for every key, unknown keys
//! rejected, and `RAT__section__key=value` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvId, EnvSpec, LatentParams, RealityGap, DEFAULT_THETA_G, FRICTION, LATENT_DIM, MASS};
use crate::error::{Error, Result};
use crate::eval::ComparisonConfig;
use crate::nn::NetworkConfig;
use crate::ppo::PpoHyperparams;
use crate::rat::{GapSampler, RatOptions};
use crate::suprat::FitConfig;
use crate::upn::ThetaRange;

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "RAT__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub theta_g: [f64; LATENT_DIM],
    pub horizon: usize,
    pub gap: GapConfig,
    pub network: NetworkConfig,
    pub ppo: PpoHyperparams,
    pub upn: UpnConfig,
    pub rat: RatConfig,
    pub suprat: SupratConfig,
    pub eval: EvalConfig,
    pub search: SearchSpace,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvId::PointMass,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            theta_g: DEFAULT_THETA_G,
            horizon: 200,
            gap: GapConfig::default(),
            network: NetworkConfig::default(),
            ppo: PpoHyperparams::default(),
            upn: UpnConfig::default(),
            rat: RatConfig::default(),
            suprat: SupratConfig::default(),
            eval: EvalConfig::default(),
            search: SearchSpace::default(),
        }
    }
}

/// Real-world gap as a relative increase of selected latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapConfig {
    /// 4.0 means +400% of the ground-truth value.
    pub factor: f64,
    pub dims: Vec<usize>,
}

impl Default for GapConfig {
    fn default() -> Self {
        GapConfig {
            factor: 4.0,
            dims: vec![FRICTION, MASS],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpnConfig {
    pub steps: usize,
    pub theta_low: [f64; LATENT_DIM],
    pub theta_high: [f64; LATENT_DIM],
    pub fine_tune_steps: usize,
    pub fine_tune_chunk: usize,
    pub improvement_threshold: f64,
}

impl Default for UpnConfig {
    fn default() -> Self {
        UpnConfig {
            steps: 300_000,
            theta_low: [0.0; LATENT_DIM],
            theta_high: [1.0; LATENT_DIM],
            fine_tune_steps: 50_000,
            fine_tune_chunk: 10_000,
            improvement_threshold: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatConfig {
    /// Budget of the robust initial policy, rounded up to whole episodes.
    pub init_steps: usize,
    /// Budget of fixed-gap training against the configured real world.
    pub real_steps: usize,
    pub gap_low: [f64; LATENT_DIM],
    pub gap_high: [f64; LATENT_DIM],
    pub reset: bool,
    pub scale_reward: bool,
    /// Largest allowed per-dimension distance of a deployment latent.
    pub epsilon_max: f64,
    pub ppo: PpoHyperparams,
    pub network: NetworkConfig,
}

impl Default for RatConfig {
    fn default() -> Self {
        let s = GapSampler::default();
        RatConfig {
            init_steps: 100_000,
            real_steps: 100_000,
            gap_low: s.low,
            gap_high: s.high,
            reset: true,
            scale_reward: false,
            epsilon_max: 0.05,
            ppo: PpoHyperparams::default(),
            network: NetworkConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupratConfig {
    pub dataset_steps: usize,
    pub fit: FitConfig,
    pub network: NetworkConfig,
}

impl Default for SupratConfig {
    fn default() -> Self {
        SupratConfig {
            dataset_steps: 100_000,
            fit: FitConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub adjacent_samples: usize,
    pub episodes_per_sample: usize,
    pub dr_samples: usize,
    pub dr_deviation: f64,
    pub deviations: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let c = ComparisonConfig::default();
        EvalConfig {
            episodes: c.episodes,
            adjacent_samples: c.adjacent_samples,
            episodes_per_sample: c.episodes_per_sample,
            dr_samples: c.dr_samples,
            dr_deviation: c.dr_deviation,
            deviations: vec![0.0, 0.05, 0.10, 0.20],
        }
    }
}

/// Hyperparameter ranges for the correction-policy search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub clip: [f64; 2],
    pub entcoeff: [f64; 2],
    /// Sampled log-uniformly.
    pub stepsize: [f64; 2],
    pub lam: [f64; 2],
    pub gamma: [f64; 2],
    /// Candidate values of the reset flag, drawn uniformly.
    pub reset: [bool; 2],
    pub trials: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            clip: [0.1, 0.3],
            entcoeff: [0.0, 0.01],
            stepsize: [1e-4, 1e-3],
            lam: [0.9, 0.99],
            gamma: [0.95, 0.999],
            reset: [true, false],
            trials: 40,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (key, [lo, hi]) in [
            ("search.clip", self.clip),
            ("search.entcoeff", self.entcoeff),
            ("search.stepsize", self.stepsize),
            ("search.lam", self.lam),
            ("search.gamma", self.gamma),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(key, format!("need finite low <= high, got [{lo}, {hi}]")));
            }
        }
        if !(self.stepsize[0] > 0.0) {
            return Err(Error::config("search.stepsize", "must be > 0 (sampled log-uniformly)"));
        }
        if !(self.clip[0] > 0.0) {
            return Err(Error::config("search.clip", "must be > 0"));
        }
        if !(self.gamma[0] > 0.0 && self.gamma[1] <= 1.0) {
            return Err(Error::config("search.gamma", "must lie in (0, 1]"));
        }
        if !(self.lam[0] >= 0.0 && self.lam[1] <= 1.0) {
            return Err(Error::config("search.lam", "must lie in [0, 1]"));
        }
        if self.entcoeff[0] < 0.0 {
            return Err(Error::config("search.entcoeff", "must be >= 0"));
        }
        if self.trials == 0 {
            return Err(Error::config("search.trials", "must be >= 1"));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.theta_g.iter().enumerate() {
            if !(0.0..1.0).contains(v) {
                return Err(Error::config(format!("theta_g[{k}]"), format!("{v} is outside [0, 1)")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be >= 1"));
        }
        if !(self.gap.factor.is_finite() && self.gap.factor >= 0.0) {
            return Err(Error::config("gap.factor", "must be finite and >= 0"));
        }
        if let Some(d) = self.gap.dims.iter().find(|&&d| d >= LATENT_DIM) {
            return Err(Error::config("gap.dims", format!("dimension {d} is not below {LATENT_DIM}")));
        }
        for (key, n) in [
            ("network", &self.network),
            ("rat.network", &self.rat.network),
            ("suprat.network", &self.suprat.network),
        ] {
            if n.hidden_width == 0 {
                return Err(Error::config(format!("{key}.hidden_width"), "must be >= 1"));
            }
        }
        self.ppo.validate("ppo", 1)?;
        self.rat.ppo.validate("rat.ppo", 1)?;
        self.theta_range().validate()?;
        if self.upn.fine_tune_chunk == 0 {
            return Err(Error::config("upn.fine_tune_chunk", "must be >= 1"));
        }
        if self.upn.improvement_threshold.is_nan() {
            return Err(Error::config("upn.improvement_threshold", "must be a number"));
        }
        self.sampler().validate()?;
        if !(self.rat.epsilon_max >= 0.0) {
            return Err(Error::config("rat.epsilon_max", "must be >= 0"));
        }
        self.suprat.fit.validate()?;
        self.comparison().validate()?;
        if let Some(d) = self.eval.deviations.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return Err(Error::config("eval.deviations", format!("{d} is not a finite value >= 0")));
        }
        self.search.validate()
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec::new(self.env, self.horizon)
    }

    pub fn theta(&self) -> LatentParams {
        LatentParams(self.theta_g)
    }

    pub fn reality_gap(&self) -> RealityGap {
        RealityGap::relative(&self.theta(), self.gap.factor, &self.gap.dims)
    }

    pub fn theta_range(&self) -> ThetaRange {
        ThetaRange {
            low: self.upn.theta_low,
            high: self.upn.theta_high,
        }
    }

    pub fn sampler(&self) -> GapSampler {
        GapSampler {
            low: self.rat.gap_low,
            high: self.rat.gap_high,
        }
    }

    pub fn rat_options(&self) -> RatOptions {
        RatOptions {
            reset: self.rat.reset,
            scale_reward: self.rat.scale_reward,
        }
    }

    /// Episodes of robust initial training: the step budget in whole episodes.
    pub fn rat_init_episodes(&self) -> usize {
        self.rat.init_steps.div_ceil(self.horizon)
    }

    pub fn comparison(&self) -> ComparisonConfig {
        ComparisonConfig {
            episodes: self.eval.episodes,
            horizon: self.horizon,
            adjacent_samples: self.eval.adjacent_samples,
            episodes_per_sample: self.eval.episodes_per_sample,
            dr_samples: self.eval.dr_samples,
            dr_deviation: self.eval.dr_deviation,
        }
    }

    /// Budgets and protocol of the full-size experiments: 2e8 UPN steps,
    /// 5e6 fine-tune steps checked every 1e6, 1e6 steps for each correction
    /// model, 100 episodes of 500 steps, 128-wide five-layer correction
    /// policy.
    pub fn paper_scale(&mut self) {
        self.upn.steps = 200_000_000;
        self.upn.fine_tune_steps = 5_000_000;
        self.upn.fine_tune_chunk = 1_000_000;
        self.rat.init_steps = 1_000_000;
        self.rat.real_steps = 1_000_000;
        self.suprat.dataset_steps = 1_000_000;
        self.horizon = 500;
        self.eval.episodes = 100;
        self.eval.adjacent_samples = 100;
        self.rat.network.hidden_width = 128;
        self.rat.network.depth = 5;
    }

    /// `cfg-` plus 16 hex digits of the SHA-256 of the canonical JSON form,
    /// excluding the output directory.
    pub fn config_id(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        format!("cfg-{}", &hex::encode(digest)[..16])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Parses `text`, applies `overrides` (`section__key` paths, lowercase,
/// values in TOML syntax or bare strings), fills defaults and validates.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config(toml_key(&e), e.message().to_string()))?;
    for (path, raw) in overrides {
        apply_override(&mut table, path, raw)?;
    }
    let cfg: ExperimentConfig = ExperimentConfig::deserialize(table)
        .map_err(|e: toml::de::Error| Error::config(toml_key(&e), e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn toml_key(e: &toml::de::Error) -> String {
    // unknown-field messages name the key themselves
    let msg = e.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    "config".to_string()
}

fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split("__").filter(|p| !p.is_empty()).collect();
    let Some((last, parents)) = parts.split_last() else {
        return Err(Error::config(path, "empty override path"));
    };
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(parts.join("."), format!("{p} is not a section")))?;
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    cur.insert(last.to_string(), value);
    Ok(())
}

/// `RAT__a__b=v` pairs from the process environment, as `("a__b", "v")`.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, val)| k.strip_prefix(ENV_PREFIX).map(|p| (p.to_lowercase(), val)))
        .collect();
    v.sort();
    v
}

/// Reads `path` (or starts from defaults when `None`) and applies
/// environment overrides.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text, &env_overrides())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.theta_g, [0.5488135, 0.71518937, 0.60276338, 0.54488318, 0.4236548]);
        assert_eq!(c.seed, 0);
    }

    #[test]
    fn out_of_range_theta_names_the_bound() {
        let err = parse_config("theta_g = [0.5, 1.5, 0.1, 0.1, 0.1]", &[]).unwrap_err().to_string();
        assert!(err.contains("theta_g[1]") && err.contains("[0, 1)"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = parse_config("[upn]\nstepz = 3\n", &[]).unwrap_err().to_string();
        assert!(err.contains("stepz"), "{err}");
    }

    #[test]
    fn nested_values_parse() {
        let c = parse_config("env = \"pendulum\"\nseed = 9\n[rat]\nreset = false\n[rat.ppo]\nclip = 0.1\n", &[]).unwrap();
        assert_eq!(c.env, EnvId::Pendulum);
        assert_eq!(c.seed, 9);
        assert!(!c.rat.reset);
        assert_eq!(c.rat.ppo.clip, 0.1);
        assert_eq!(c.ppo.clip, 0.2);
    }

    #[test]
    fn overrides_apply_with_typed_values() {
        let o = vec![
            ("rat__reset".to_string(), "false".to_string()),
            ("upn__steps".to_string(), "123".to_string()),
            ("env".to_string(), "pendulum".to_string()),
        ];
        let c = parse_config("[upn]\nsteps = 5\n", &o).unwrap();
        assert!(!c.rat.reset);
        assert_eq!(c.upn.steps, 123);
        assert_eq!(c.env, EnvId::Pendulum);
    }

    #[test]
    fn config_id_ignores_output_directory_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.config_id(), b.config_id());
        b.seed = 1;
        assert_ne!(a.config_id(), b.config_id());
        assert!(a.config_id().starts_with("cfg-") && a.config_id().len() == 20);
    }

    #[test]
    fn toml_round_trip() {
        let mut a = ExperimentConfig::default();
        a.paper_scale();
        let b = parse_config(&a.to_toml(), &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_gap_dimension_rejected() {
        let err = parse_config("[gap]\ndims = [7]\n", &[]).unwrap_err().to_string();
        assert!(err.contains("gap.dims"), "{err}");
    }
}
