//! `stfoundry` command-line entry point.

mod plots;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use stfoundry::data::SplitName;
use stfoundry::pipeline::{self, ExperimentConfig, RunLayout};
use stfoundry::prompting::TaskId;
use stfoundry::Error;

#[derive(Debug, Parser)]
#[command(name = "stfoundry", version, about = "Spatiotemporal multi-task model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded reference mode.
    #[arg(long)]
    serial: bool,
    /// Overwrite existing generated data.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic world into `<out>/data`.
    GenData(Common),
    /// Stage 1: masked reconstruction training.
    Pretrain(Common),
    /// Stage 2: multi-task prompt tuning.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Also tune each task of the mix alone from the stage-1 checkpoint.
        #[arg(long)]
        ablation: bool,
    },
    /// Score tasks with the tuned checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Task to score; repeatable. Defaults to `eval_tasks`.
        #[arg(long = "task", value_parser = parse_task)]
        tasks: Vec<TaskId>,
        /// Recovery mask ratio.
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long, value_parser = parse_split)]
        split: Option<SplitName>,
    },
    /// Aggregate reports into `summary.json` and plots.
    Report(Common),
    /// Every stage in order.
    Run(Common),
}

fn parse_task(s: &str) -> Result<TaskId, String> {
    TaskId::from_str(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    match s {
        "train" => Ok(SplitName::Train),
        "valid" => Ok(SplitName::Valid),
        "test" => Ok(SplitName::Test),
        other => Err(format!("unknown split `{other}`")),
    }
}

/// Exit status of a failed run.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Registry(_)) => 2,
        Some(Error::Dependency(_)) => 3,
        Some(Error::Numeric { .. }) => 4,
        _ => 1,
    }
}

/// Caps worker threads before the tensor backend builds its pool.
fn configure_threads(serial: bool) {
    let threads = if serial {
        Some("1".to_string())
    } else {
        std::env::var("STFOUNDRY_THREADS").ok().filter(|s| s.parse::<usize>().is_ok_and(|n| n > 0))
    };
    if let Some(n) = threads {
        std::env::set_var("RAYON_NUM_THREADS", &n);
        std::env::set_var("CANDLE_NUM_THREADS", &n);
    }
}

fn prepare(common: &Common) -> anyhow::Result<(ExperimentConfig, RunLayout)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    if common.serial {
        cfg.serial_mode = true;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no run directory: pass --out or set `out`".into()))?;
    configure_threads(cfg.serial_mode);
    Ok((cfg, RunLayout::new(out)))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, layout) = prepare(&c)?;
            pipeline::gen_data(&cfg, &layout, c.force)?;
        }
        Command::Pretrain(c) => {
            let (cfg, layout) = prepare(&c)?;
            let report = pipeline::pretrain(&cfg, &layout)?;
            if let Some(last) = report.epochs.last() {
                info!("stage 1 finished: {:?}", last.components);
            }
        }
        Command::Tune { common, ablation } => {
            let (cfg, layout) = prepare(&common)?;
            if ablation {
                let tasks: Vec<TaskId> = cfg.tune.task_mix.iter().map(|s| s.task).collect();
                pipeline::tune_ablation(&cfg, &layout, &tasks)?;
            } else {
                pipeline::tune(&cfg, &layout)?;
            }
        }
        Command::Eval {
            common,
            tasks,
            mask_ratio,
            split,
        } => {
            let (mut cfg, layout) = prepare(&common)?;
            if let Some(r) = mask_ratio {
                if !(r > 0.0 && r < 1.0) {
                    return Err(Error::Config(format!("mask ratio {r} must lie in (0, 1)")).into());
                }
                cfg.eval.params.recovery_ratio = r;
            }
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            let tasks = if tasks.is_empty() { cfg.eval_tasks.clone() } else { tasks };
            for r in pipeline::evaluate(&cfg, &layout, &tasks)? {
                println!("{}", summary_line(&r));
            }
        }
        Command::Report(c) => {
            let (cfg, layout) = prepare(&c)?;
            let summary = pipeline::summarize(&cfg, &layout)?;
            plots::render_all(&layout, &summary)?;
        }
        Command::Run(c) => {
            let (cfg, layout) = prepare(&c)?;
            let summary = pipeline::run_all(&cfg, &layout, c.force)?;
            plots::render_all(&layout, &summary)?;
        }
    }
    Ok(())
}

fn summary_line(r: &stfoundry::evaluation::MetricReport) -> String {
    let metrics: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    format!("{} ({} samples): {}", r.task, r.samples, metrics.join(" "))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
