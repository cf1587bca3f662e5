//! End-to-end experiment stages and their on-disk artifacts.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{run_comparison, EvalReport, Models, FORMAT_VERSION};
use crate::harness::checkpoint::{self, Checkpoint, Provenance};
use crate::harness::config::ExperimentConfig;
use crate::ppo::PpoDiagnostics;
use crate::rat::{train_rat, train_rat_initial, RatPolicy};
use crate::seed::{child_rng, derive_seed};
use crate::suprat::{collect_dataset, fit, InverseDynamicsModel};
use crate::upn::{extend_training, fine_tune, train_upn, FineTuneReport, UniversalPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    TrainUpn,
    FineTune,
    TrainRatInit,
    TrainRat,
    TrainSuprat,
    Baseline,
    Eval,
    Search,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::TrainUpn => "train-upn",
            Stage::FineTune => "fine-tune",
            Stage::TrainRatInit => "train-rat-init",
            Stage::TrainRat => "train-rat",
            Stage::TrainSuprat => "train-suprat",
            Stage::Baseline => "baseline",
            Stage::Eval => "eval",
            Stage::Search => "hyperopt",
        }
    }

    /// Process exit status reported when this stage fails.
    pub fn exit_code(self) -> i32 {
        10 + self as i32
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed (config {config_id}): {source}")]
pub struct StageError {
    pub stage: Stage,
    pub config_id: String,
    #[source]
    pub source: Error,
}

pub trait StageContext<T> {
    fn stage(self, stage: Stage, config_id: &str) -> std::result::Result<T, StageError>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: Stage, config_id: &str) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError {
            stage,
            config_id: config_id.to_string(),
            source,
        })
    }
}

/// Artifact paths for one `(env, seed)` run under the configured output
/// directory.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub dir: PathBuf,
    pub env: &'static str,
    pub seed: u64,
    pub config_id: String,
}

impl Outputs {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            dir: cfg.out_dir.clone(),
            env: cfg.env.name(),
            seed: cfg.seed,
            config_id: cfg.config_id(),
        }
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        Ok(())
    }

    fn named(&self, stem: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{stem}_{}_{}.{ext}", self.env, self.seed))
    }

    pub fn checkpoint(&self, kind: &str) -> PathBuf {
        self.dir.join(checkpoint::file_name(kind, self.env, self.seed))
    }

    pub fn results(&self) -> PathBuf {
        self.named("results", "csv")
    }

    pub fn training_log(&self) -> PathBuf {
        self.named("training", "csv")
    }

    /// Training log of a single stage run on its own from the command line.
    pub fn stage_log(&self, stage: Stage) -> PathBuf {
        self.named(&format!("training-{stage}"), "csv")
    }

    pub fn dataset(&self) -> PathBuf {
        self.named("dataset", "csv")
    }

    pub fn trials(&self) -> PathBuf {
        self.named("trials", "csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.named("summary", "json")
    }

    pub fn config_echo(&self) -> PathBuf {
        self.named("config", "toml")
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.seed, self.config_id.clone())
    }

    pub fn tags(&self) -> [(&'static str, String); 3] {
        [
            ("seed", self.seed.to_string()),
            ("config_id", self.config_id.clone()),
            ("format_version", FORMAT_VERSION.to_string()),
        ]
    }

    pub fn save<M: Checkpoint>(&self, kind: &str, model: &M, summary: serde_json::Value) -> Result<PathBuf> {
        let path = self.checkpoint(kind);
        let prov = self.provenance();
        checkpoint::save(model, &prov, &path)?;
        checkpoint::write_sidecar(model, &prov, &path, summary)?;
        log::info!(target: "harness", "wrote {}", path.display());
        Ok(path)
    }

    /// Loads a checkpoint written by this run's configuration. A differing
    /// configuration id is reported but not fatal.
    pub fn load<M: Checkpoint>(&self, kind: &str) -> Result<M> {
        let path = self.checkpoint(kind);
        let (model, prov) = checkpoint::load::<M>(&path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if prov.config_id != self.config_id {
            log::warn!(
                target: "harness",
                "{} was written under {} (current {})",
                path.display(),
                prov.config_id,
                self.config_id
            );
        }
        Ok(model)
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let path = self.config_echo();
        let text = format!(
            "# config_id = {}\n# format_version = {FORMAT_VERSION}\n{}",
            self.config_id,
            cfg.to_toml()
        );
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Per-update PPO statistics of every training phase in a run.
#[derive(Clone, Debug, Default)]
pub struct TrainingLog {
    pub rows: Vec<(&'static str, PpoDiagnostics)>,
}

impl TrainingLog {
    pub fn sink(&mut self, phase: &'static str) -> impl FnMut(&PpoDiagnostics) + '_ {
        move |d| self.rows.push((phase, *d))
    }

    pub fn write_csv(&self, out: &Outputs, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "phase,{},seed,config_id,format_version", PpoDiagnostics::CSV_HEADER)?;
        for (phase, d) in &self.rows {
            writeln!(f, "{phase},{},{},{},{FORMAT_VERSION}", d.csv_row(), out.seed, out.config_id)?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn stage_train_upn(cfg: &ExperimentConfig, log: &mut TrainingLog) -> Result<UniversalPolicy> {
    train_upn(
        &cfg.spec(),
        cfg.theta_range(),
        cfg.upn.steps,
        cfg.ppo,
        &cfg.network,
        &mut child_rng(cfg.seed, "upn", 0),
        &mut log.sink("upn"),
    )
}

pub fn stage_fine_tune(
    cfg: &ExperimentConfig,
    upn: UniversalPolicy,
    log: &mut TrainingLog,
) -> Result<(UniversalPolicy, FineTuneReport)> {
    fine_tune(
        upn,
        &cfg.spec(),
        &cfg.theta(),
        cfg.upn.fine_tune_steps,
        cfg.upn.fine_tune_chunk,
        cfg.upn.improvement_threshold,
        cfg.ppo,
        &mut child_rng(cfg.seed, "fine-tune", 0),
        &mut log.sink("fine-tune"),
    )
}

pub fn stage_train_rat_init(cfg: &ExperimentConfig, upn: &UniversalPolicy, log: &mut TrainingLog) -> Result<RatPolicy> {
    train_rat_initial(
        upn,
        &cfg.spec(),
        cfg.theta(),
        cfg.sampler(),
        cfg.rat_init_episodes(),
        cfg.rat_options(),
        cfg.rat.ppo,
        &cfg.rat.network,
        &mut child_rng(cfg.seed, "rat-init", 0),
        &mut log.sink("rat-init"),
    )
}

/// Trains against the configured real world, continuing from `initial`
/// when given.
pub fn stage_train_rat(
    cfg: &ExperimentConfig,
    upn: &UniversalPolicy,
    initial: Option<RatPolicy>,
    log: &mut TrainingLog,
) -> Result<RatPolicy> {
    train_rat(
        upn,
        &cfg.spec(),
        cfg.theta(),
        &cfg.reality_gap(),
        initial,
        cfg.rat_options(),
        cfg.rat.real_steps,
        cfg.rat.ppo,
        &cfg.rat.network,
        &mut child_rng(cfg.seed, "rat-real", 0),
        &mut log.sink("rat-real"),
    )
}

/// Collects the transition dataset, writes it next to the other
/// artifacts and fits the inverse model. `None` when the dataset budget is
/// zero.
pub fn stage_train_suprat(
    cfg: &ExperimentConfig,
    upn: &UniversalPolicy,
    out: &Outputs,
) -> Result<Option<InverseDynamicsModel>> {
    if cfg.suprat.dataset_steps == 0 {
        log::warn!(target: "harness", "suprat.dataset_steps is 0, skipping the supervised model");
        return Ok(None);
    }
    let spec = cfg.spec();
    let sampler = cfg.sampler();
    let data = collect_dataset(
        upn,
        &spec,
        &cfg.theta(),
        &sampler,
        cfg.suprat.dataset_steps,
        derive_seed(cfg.seed, "suprat-data", 0),
    )?;
    data.write_csv(&out.dataset(), &out.tags())?;
    let model = fit(
        &data,
        &spec,
        &sampler,
        &cfg.suprat.network,
        &cfg.suprat.fit,
        &mut child_rng(cfg.seed, "suprat-fit", 0),
    )?;
    Ok(Some(model))
}

/// Gives the transfer and DR baselines the extra budget the correction
/// policy consumed, as further training at the ground-truth latent.
pub fn stage_baseline(cfg: &ExperimentConfig, upn: &UniversalPolicy, extra_steps: usize) -> Result<UniversalPolicy> {
    extend_training(
        upn.clone(),
        &cfg.spec(),
        &cfg.theta(),
        extra_steps,
        cfg.ppo,
        &mut child_rng(cfg.seed, "baseline", 0),
    )
}

pub fn stage_eval(cfg: &ExperimentConfig, models: &Models, deviations: &[f64]) -> Result<EvalReport> {
    run_comparison(
        &cfg.spec(),
        &cfg.theta(),
        &cfg.reality_gap(),
        models,
        deviations,
        &cfg.comparison(),
        cfg.seed,
        &cfg.config_id(),
    )
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub report: EvalReport,
    pub fine_tune: FineTuneReport,
    pub upn: UniversalPolicy,
    pub baseline_upn: UniversalPolicy,
    pub rat: RatPolicy,
    pub suprat: Option<InverseDynamicsModel>,
    pub outputs: Outputs,
}

/// UPN training, fine-tuning, robust initial correction policy, supervised
/// model, budget-matched baselines and the adjacent-parameter comparison.
/// Artifacts of finished stages stay on disk when a later stage fails.
pub fn run_pipeline(cfg: &ExperimentConfig) -> std::result::Result<PipelineOutput, StageError> {
    let out = Outputs::new(cfg);
    let id = out.config_id.clone();
    cfg.validate().stage(Stage::Config, &id)?;
    out.create().stage(Stage::Config, &id)?;
    out.write_config(cfg).stage(Stage::Config, &id)?;
    log::info!(target: "harness", "pipeline {} env {} seed {} -> {}", id, out.env, out.seed, out.dir.display());

    let mut log = TrainingLog::default();
    let finish = |log: &TrainingLog, stage: Stage| log.write_csv(&out, &out.training_log()).stage(stage, &id);

    let upn = stage_train_upn(cfg, &mut log).stage(Stage::TrainUpn, &id);
    finish(&log, Stage::TrainUpn)?;
    let upn = upn?;
    out.save("upn", &upn, json!({ "stage": "train-upn" })).stage(Stage::TrainUpn, &id)?;

    let tuned = stage_fine_tune(cfg, upn, &mut log).stage(Stage::FineTune, &id);
    finish(&log, Stage::FineTune)?;
    let (upn, report) = tuned?;
    out.save("upn", &upn, json!({ "stage": "fine-tune", "fine_tune": report }))
        .stage(Stage::FineTune, &id)?;

    let rat = stage_train_rat_init(cfg, &upn, &mut log).stage(Stage::TrainRatInit, &id);
    finish(&log, Stage::TrainRatInit)?;
    let rat = rat?;
    out.save("rat", &rat, json!({ "stage": "train-rat-init" }))
        .stage(Stage::TrainRatInit, &id)?;

    let suprat = stage_train_suprat(cfg, &upn, &out).stage(Stage::TrainSuprat, &id)?;
    if let Some(m) = &suprat {
        out.save("suprat", m, json!({ "stage": "train-suprat" }))
            .stage(Stage::TrainSuprat, &id)?;
    }

    let baseline_upn = stage_baseline(cfg, &upn, rat.meta.steps_trained).stage(Stage::Baseline, &id)?;
    out.save(
        "upn-baseline",
        &baseline_upn,
        json!({ "stage": "baseline", "extra_steps": rat.meta.steps_trained }),
    )
    .stage(Stage::Baseline, &id)?;

    let models = Models {
        upn: &upn,
        baseline_upn: &baseline_upn,
        rat: Some(&rat),
        suprat: suprat.as_ref(),
    };
    let eval = stage_eval(cfg, &models, &cfg.eval.deviations).stage(Stage::Eval, &id)?;
    eval.write_csv(&out.results()).stage(Stage::Eval, &id)?;
    write_summary(&out, &report, &eval).stage(Stage::Eval, &id)?;

    Ok(PipelineOutput {
        report: eval,
        fine_tune: report,
        upn,
        baseline_upn,
        rat,
        suprat,
        outputs: out,
    })
}

fn write_summary(out: &Outputs, fine_tune: &FineTuneReport, eval: &EvalReport) -> Result<()> {
    let doc = json!({
        "env": out.env,
        "seed": out.seed,
        "config_id": out.config_id,
        "format_version": FORMAT_VERSION,
        "fine_tune": fine_tune,
        "results": eval.rows,
    });
    fs::write(out.summary(), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

/// Lists the files of a finished run, sorted by name.
pub fn list_artifacts(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    v.sort();
    Ok(v)
}
