use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rat_core::env::EnvId;
use rat_core::eval::Models;
use rat_core::harness::config::{load_config, ExperimentConfig};
use rat_core::harness::pipeline::{
    run_pipeline, stage_eval, stage_fine_tune, stage_train_rat, stage_train_rat_init, stage_train_suprat,
    stage_train_upn, Outputs, Stage, StageContext, StageError, TrainingLog,
};
use rat_core::harness::search::{hyperparam_search, write_trials_csv};
use rat_core::rat::RatPolicy;
use rat_core::suprat::InverseDynamicsModel;
use rat_core::upn::UniversalPolicy;

#[derive(Parser)]
#[command(name = "rat", version, about = "Zero-shot sim-to-real transfer with reverse action transformation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and CSVs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    env: Option<EnvId>,
    /// Use the full-size budgets and evaluation protocol.
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the universal policy across sampled latents.
    TrainUpn,
    /// Fine-tune the saved universal policy at the ground-truth latent.
    FineTune,
    /// Train the robust initial correction policy over sampled gaps.
    TrainRatInit,
    /// Train the correction policy against the configured real world.
    TrainRat {
        /// Continue from the robust initial checkpoint.
        #[arg(long)]
        from_init: bool,
    },
    /// Collect transitions and fit the supervised inverse model.
    TrainSuprat,
    /// Compare all methods at the given deviation levels (default: 0).
    Eval {
        #[arg(long = "deviation", value_delimiter = ',')]
        deviations: Vec<f64>,
        /// Correction checkpoint to evaluate (`rat` or `rat-real`).
        #[arg(long, default_value = "rat")]
        rat: String,
    },
    /// Compare all methods at every configured deviation level.
    SweepAdjacent {
        #[arg(long, default_value = "rat")]
        rat: String,
    },
    /// Random search over the correction policy's PPO settings.
    Hyperopt {
        /// Overrides the configured number of trials.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run every stage end to end.
    Pipeline,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::TrainUpn => Stage::TrainUpn,
            Command::FineTune => Stage::FineTune,
            Command::TrainRatInit => Stage::TrainRatInit,
            Command::TrainRat { .. } => Stage::TrainRat,
            Command::TrainSuprat => Stage::TrainSuprat,
            Command::Eval { .. } | Command::SweepAdjacent { .. } => Stage::Eval,
            Command::Hyperopt { .. } => Stage::Search,
            Command::Pipeline => Stage::Eval,
        }
    }
}

fn configure(common: &Common) -> rat_core::Result<ExperimentConfig> {
    let mut cfg = load_config(common.config.as_deref())?;
    if common.paper_scale {
        cfg.paper_scale();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(env) = common.env {
        cfg.env = env;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_optional<M: rat_core::harness::checkpoint::Checkpoint>(out: &Outputs, kind: &str) -> Option<M> {
    if !out.checkpoint(kind).exists() {
        log::warn!("no {kind} checkpoint in {}", out.dir.display());
        return None;
    }
    match out.load(kind) {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("{e}");
            None
        }
    }
}

fn evaluate(cfg: &ExperimentConfig, out: &Outputs, deviations: &[f64], rat_kind: &str) -> rat_core::Result<()> {
    let upn: UniversalPolicy = out.load("upn")?;
    let baseline_upn = match load_optional::<UniversalPolicy>(out, "upn-baseline") {
        Some(b) => b,
        None => {
            log::warn!("transfer and DR use the fine-tuned policy without budget matching");
            upn.clone()
        }
    };
    let rat: Option<RatPolicy> = load_optional(out, rat_kind);
    let suprat: Option<InverseDynamicsModel> = load_optional(out, "suprat");
    let models = Models {
        upn: &upn,
        baseline_upn: &baseline_upn,
        rat: rat.as_ref(),
        suprat: suprat.as_ref(),
    };
    let report = stage_eval(cfg, &models, deviations)?;
    report.write_csv(&out.results())?;
    for r in &report.rows {
        println!(
            "{:<15} dev {:<5} mean {:>10.5} se {:.5}{}",
            r.method.name(),
            r.deviation,
            r.mean,
            r.std_error,
            if r.best { "  *" } else { "" }
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let stage = cli.command.stage();
    let cfg = configure(&cli.common).stage(Stage::Config, "-")?;
    let out = Outputs::new(&cfg);
    let id = out.config_id.clone();
    if let Command::Pipeline = cli.command {
        let result = run_pipeline(&cfg)?;
        println!("results written to {}", out.results().display());
        for r in &result.report.rows {
            println!("{:<15} dev {:<5} mean {:>10.5} se {:.5}", r.method.name(), r.deviation, r.mean, r.std_error);
        }
        return Ok(());
    }
    out.create().stage(Stage::Config, &id)?;
    out.write_config(&cfg).stage(Stage::Config, &id)?;
    let mut log = TrainingLog::default();
    let result: rat_core::Result<()> = (|| {
        match &cli.command {
            Command::TrainUpn => {
                let upn = stage_train_upn(&cfg, &mut log)?;
                out.save("upn", &upn, json!({ "stage": "train-upn" }))?;
            }
            Command::FineTune => {
                let (upn, report) = stage_fine_tune(&cfg, out.load("upn")?, &mut log)?;
                out.save("upn", &upn, json!({ "stage": "fine-tune", "fine_tune": report }))?;
            }
            Command::TrainRatInit => {
                let rat = stage_train_rat_init(&cfg, &out.load("upn")?, &mut log)?;
                out.save("rat", &rat, json!({ "stage": "train-rat-init" }))?;
            }
            Command::TrainRat { from_init } => {
                let initial = if *from_init { Some(out.load("rat")?) } else { None };
                let rat = stage_train_rat(&cfg, &out.load("upn")?, initial, &mut log)?;
                out.save("rat-real", &rat, json!({ "stage": "train-rat", "from_init": from_init }))?;
            }
            Command::TrainSuprat => {
                if let Some(m) = stage_train_suprat(&cfg, &out.load("upn")?, &out)? {
                    out.save("suprat", &m, json!({ "stage": "train-suprat" }))?;
                }
            }
            Command::Eval { deviations, rat } => {
                let levels = if deviations.is_empty() { vec![0.0] } else { deviations.clone() };
                evaluate(&cfg, &out, &levels, rat)?;
            }
            Command::SweepAdjacent { rat } => evaluate(&cfg, &out, &cfg.eval.deviations, rat)?,
            Command::Hyperopt { trials } => {
                let mut space = cfg.search.clone();
                if let Some(n) = trials {
                    space.trials = *n;
                }
                let outcome = hyperparam_search(&cfg, &out.load("upn")?, &space)?;
                write_trials_csv(&outcome, cfg.seed, &id, &out.trials())?;
                let best = outcome.best_trial();
                println!("best trial {} objective {:?}: {:?}", best.index, best.objective, best.params);
            }
            Command::Pipeline => unreachable!(),
        }
        Ok(())
    })();
    if !log.rows.is_empty() {
        log.write_csv(&out, &out.stage_log(stage)).stage(stage, &id)?;
    }
    Ok(result.stage(stage, &id)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.downcast_ref::<StageError>().map_or(1, |s| s.stage.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
