use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use skinfair::experiment::{
    self, fairness_metric, load_aggregate, recorded_task, ExperimentConfig, Metric, Selection, Stage,
};
use skinfair::ingest::Task;
use skinfair::models::Variant;
use skinfair::synthetic::{self, SyntheticSpec};

#[derive(Parser)]
#[command(name = "skinfair", version, about = "Skin-tone fairness experiments for lesion classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the task (cancer or inflammatory).
    #[arg(long, global = true)]
    task: Option<Task>,
    /// Restrict to the named backbone(s).
    #[arg(long, global = true)]
    backbone: Vec<String>,
    /// Restrict to the given variant(s).
    #[arg(long, global = true)]
    variant: Vec<Variant>,
    /// Override the run and split seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Results directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent sub-runs.
    #[arg(long, global = true)]
    parallel: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate both datasets; write records, rejections and the tone table.
    Ingest,
    /// Write the stratified split series.
    Split,
    /// Train selected sub-runs and save their checkpoints.
    Train(SplitArg),
    /// Evaluate saved checkpoints on the internal and external test sets.
    Evaluate(SplitArg),
    /// Aggregate split reports and render the tables.
    Report,
    /// Render the fairness versus accuracy plot.
    Plot {
        /// eom, pqd, balanced_accuracy or tone_probe; defaults to the task's metric.
        #[arg(long)]
        metric: Option<Metric>,
    },
    /// Generate a synthetic tone-confounded dataset.
    Synthetic,
    /// Train, evaluate, aggregate and render the full matrix.
    Run(SplitArg),
}

#[derive(Args, Clone, Default)]
struct SplitArg {
    /// Restrict to the given split index(es).
    #[arg(long)]
    split: Vec<usize>,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common.config.as_ref().context("--config is required for this command")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(t) = common.task {
        cfg.set_task(t);
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.splits.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(p) = common.parallel {
        cfg.parallel = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn selection(common: &Common, split: &SplitArg) -> Selection {
    Selection {
        variants: (!common.variant.is_empty()).then(|| common.variant.clone()),
        backbones: (!common.backbone.is_empty()).then(|| common.backbone.clone()),
        splits: (!split.split.is_empty()).then(|| split.split.clone()),
    }
}

/// Results directory from `--out`, else from the config.
fn results_dir(common: &Common) -> Result<PathBuf> {
    if let Some(o) = &common.out {
        return Ok(o.clone());
    }
    Ok(load_config(common)?.output_dir)
}

fn task_metric(common: &Common, results: &std::path::Path) -> Metric {
    let task = common.task.or_else(|| recorded_task(results)).unwrap_or(Task::Cancer);
    fairness_metric(task)
}

fn matrix(common: &Common, split: &SplitArg, stage: Stage) -> Result<bool> {
    let cfg = load_config(common)?;
    let sel = selection(common, split);
    let device = skinfair::Device::Cpu;
    let prepared = experiment::prepare(&cfg, &sel, &device)?;
    let summary = experiment::run(&prepared, &sel, stage, &device)?;
    println!(
        "{} of {} sub-runs completed; results in {}",
        summary.completed,
        summary.sub_runs,
        cfg.output_dir.display()
    );
    for f in &summary.failures {
        eprintln!("FAILED {} / {} / split {}: {}", f.variant, f.backbone, f.split, f.message);
    }
    for e in &summary.render_errors {
        eprintln!("render error: {e}");
    }
    Ok(summary.success())
}

fn execute(cli: Cli) -> Result<bool> {
    let common = &cli.common;
    match &cli.command {
        Command::Ingest => {
            let cfg = load_config(common)?;
            let data = experiment::ingest(&cfg)?;
            let dir = cfg.output_dir.join("ingest");
            experiment::write_ingest_outputs(&data, &dir)?;
            println!(
                "{}: {} records, {} rejected; {}: {} records, {} rejected; written to {}",
                cfg.train_source,
                data.train.records.len(),
                data.train.rejections.len(),
                cfg.external_source,
                data.external.records.len(),
                data.external.rejections.len(),
                dir.display()
            );
            Ok(true)
        }
        Command::Split => {
            let cfg = load_config(common)?;
            let data = experiment::ingest(&cfg)?;
            let series = experiment::make_splits(&cfg, &data.train.records)?;
            let ids: Vec<String> = data.train.records.iter().map(|r| r.image_id.clone()).collect();
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("splits.csv");
            series.export_csv(&ids, &path)?;
            for (k, s) in series.splits.iter().enumerate() {
                println!("split {k}: train {}, val {}, test {}", s.train.len(), s.val.len(), s.test.len());
            }
            println!("written to {}", path.display());
            Ok(true)
        }
        Command::Train(s) => matrix(common, s, Stage::Train),
        Command::Evaluate(s) => matrix(common, s, Stage::Evaluate),
        Command::Run(s) => matrix(common, s, Stage::All),
        Command::Report => {
            let dir = results_dir(common)?;
            let files = experiment::write_reports(&dir, task_metric(common, &dir))?;
            println!("aggregate: {}", files.aggregate.display());
            for t in &files.tables {
                println!("table: {}", t.display());
            }
            if let Some(p) = &files.plot {
                println!("plot: {} ({} points)", p.svg.display(), p.points);
            }
            Ok(true)
        }
        Command::Plot { metric } => {
            let dir = results_dir(common)?;
            let rows = load_aggregate(&dir).context("run `report` first")?;
            let metric = metric.unwrap_or_else(|| task_metric(common, &dir));
            let files = experiment::plot_external(&dir, &rows, metric)?;
            println!(
                "{} points: {}, {}, {}",
                files.points,
                files.svg.display(),
                files.png.display(),
                files.csv.display()
            );
            Ok(true)
        }
        Command::Synthetic => {
            let mut spec = match &common.config {
                Some(_) => load_config(common)?.synthetic.unwrap_or_default(),
                None => SyntheticSpec::default(),
            };
            if let Some(t) = common.task {
                spec.task = t;
            }
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let Some(out) = common.out.clone() else {
                bail!("--out is required for `synthetic`");
            };
            let data = synthetic::generate(&spec)?;
            let (train, test) = synthetic::write_dataset(&data, &out)?;
            println!(
                "{} train images (phi {:.3}) in {}, {} test images in {}",
                data.train.len(),
                data.train_phi,
                train.display(),
                data.test.len(),
                test.display()
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
