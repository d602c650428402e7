//! Command-line front end: training, evaluation from checkpoints, ablation,
//! alpha sweeps, synthetic data generation and result reports.

pub mod config;
pub mod plot;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rankcp::cp::ScoreKind;
use rankcp::gcn::{load_params, save_params, Propagator};
use rankcp::graph::{generate_sbm, write_dataset};
use rankcp::pipeline::{
    evaluate_saved, flatten_records, run_ablation, run_experiment, run_experiment_alphas, summarize, write_results_csv,
    write_summary_csv, RunReport, SummaryRow, Variant,
};

use config::{parse_config, Overrides, Settings};

#[derive(Debug, Parser)]
#[command(name = "rankcp", version, about = "Rank-based conformal prediction for GNN node classification")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train base and correction models, evaluate, save checkpoints.
    Train(ExperimentArgs),
    /// Re-evaluate checkpoints written by `train`.
    Eval(EvalArgs),
    /// Compare RCP-THR, RCP-APS, w/o Conf.Tr. and RCP-GNN on shared splits.
    Ablate(AblateArgs),
    /// Evaluate over a list of alpha values.
    Sweep(SweepArgs),
    /// Write an SBM dataset as features/edges/labels CSV files.
    GenSynth(GenSynthArgs),
    /// Summarise every results.csv below a directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Any config key, repeatable: `--set cp.tau=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub score: Option<ScoreKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub splits: Option<usize>,
}

impl ConfigArgs {
    pub fn settings(&self) -> Result<Settings> {
        let overrides = Overrides {
            alpha: self.alpha,
            tau: self.tau,
            lambda: self.lambda,
            kappa: self.kappa,
            score: self.score,
            seed: self.seed,
            runs: self.runs,
            splits: self.splits,
        };
        Ok(parse_config(self.config.as_deref(), &self.set, &overrides)?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory (created if missing).
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Directory written by `train`; its resolved.cfg is used.
    #[arg(long)]
    pub from: PathBuf,
    /// Alphas to evaluate at (defaults to cp.alpha).
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub splits: Option<usize>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Variants to run (defaults to all four).
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Comma-separated alphas (defaults to run.alphas).
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    /// Also write sweep.svg.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenSynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    pub dir: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_runs_csv(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["run", "seed", "base_accuracy", "corrected_accuracy", "best_epoch"])?;
    for r in reports {
        w.write_record([
            r.run.to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.base_accuracy),
            format!("{:.6}", r.corrected_accuracy),
            r.best_epoch.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_history_csv(path: &Path, report: &RunReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["epoch", "loss", "pred_loss", "cp_loss", "valid_objective", "valid_ineff"])?;
    for e in &report.history {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.loss),
            format!("{:.6}", e.pred_loss),
            format!("{:.6}", e.cp_loss),
            format!("{:.6}", e.valid_objective),
            format!("{:.6}", e.valid_ineff),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// results.csv and summary.csv for `reports`; returns the summary.
fn write_results(dir: &Path, reports: &[RunReport]) -> Result<Vec<SummaryRow>> {
    let records = flatten_records(reports);
    write_results_csv(&dir.join("results.csv"), &records)?;
    let summary = summarize(&records);
    write_summary_csv(&dir.join("summary.csv"), &summary)?;
    Ok(summary)
}

fn summary_lines(rows: &[SummaryRow]) -> String {
    rows.iter()
        .map(|r| {
            format!(
                "{} alpha={} coverage={} ineff={}\n",
                r.score,
                r.alpha,
                report::mean_sd_cell(r.coverage_mean, r.coverage_sd),
                report::mean_sd_cell(r.ineff_mean, r.ineff_sd)
            )
        })
        .collect()
}

pub const RESOLVED_CONFIG: &str = "resolved.cfg";

fn run_dir(out: &Path, run: usize) -> PathBuf {
    out.join(format!("run-{run}"))
}

pub fn cmd_train(args: &ExperimentArgs) -> Result<String> {
    let settings = args.config.settings()?;
    create_dir(&args.out)?;
    write_text(&args.out.join(RESOLVED_CONFIG), &settings.render())?;
    let reports = run_experiment(&settings.experiment)?;
    for r in &reports {
        let dir = run_dir(&args.out, r.run);
        create_dir(&dir)?;
        save_params(&dir.join("base.ckpt"), &r.base_params)?;
        save_params(&dir.join("correction.ckpt"), &r.correction_params)?;
        write_history_csv(&dir.join("history.csv"), r)?;
    }
    write_runs_csv(&args.out.join("runs.csv"), &reports)?;
    let summary = write_results(&args.out, &reports)?;
    Ok(summary_lines(&summary))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let cfg_path = args.from.join(RESOLVED_CONFIG);
    let mut settings = Settings::from_file(&cfg_path)?;
    if let Some(n) = args.splits {
        settings.apply_pair("run.splits", &n.to_string(), "--splits", 0)?;
    }
    settings.validate()?;
    let alphas = if args.alphas.is_empty() { vec![settings.experiment.smooth.alpha] } else { args.alphas.clone() };
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        bail!("alpha must lie in (0, 1), got {a}");
    }
    let cfg = &settings.experiment;
    let g = cfg.dataset.load()?;
    let prop = Propagator::new(&g);
    let mut records = Vec::new();
    for run in 0..cfg.n_runs {
        let dir = run_dir(&args.from, run);
        let base = load_params(&dir.join("base.ckpt")).with_context(|| format!("run {run}"))?;
        let correction = load_params(&dir.join("correction.ckpt")).with_context(|| format!("run {run}"))?;
        records.extend(evaluate_saved(cfg, &g, &prop, run, &base, &correction, &alphas)?);
    }
    create_dir(&args.out)?;
    write_results_csv(&args.out.join("results.csv"), &records)?;
    let summary = summarize(&records);
    write_summary_csv(&args.out.join("summary.csv"), &summary)?;
    Ok(summary_lines(&summary))
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<String> {
    let settings = args.experiment.config.settings()?;
    let out = &args.experiment.out;
    create_dir(out)?;
    write_text(&out.join(RESOLVED_CONFIG), &settings.render())?;
    let variants = if args.variants.is_empty() { Variant::ALL.to_vec() } else { args.variants.clone() };
    let results = run_ablation(&settings.experiment, &variants)?;
    let table_path = out.join("ablation.csv");
    let mut table = csv::Writer::from_path(&table_path).with_context(|| format!("cannot write {}", table_path.display()))?;
    table.write_record([
        "variant",
        "score",
        "alpha",
        "coverage_mean",
        "coverage_sd",
        "ineff_mean",
        "ineff_sd",
    ])?;
    let mut text = String::new();
    for (variant, reports) in &results {
        let dir = out.join(variant.slug());
        create_dir(&dir)?;
        write_runs_csv(&dir.join("runs.csv"), reports)?;
        for row in write_results(&dir, reports)? {
            table.write_record([
                variant.name().to_string(),
                row.score.to_string(),
                row.alpha.to_string(),
                format!("{:.6}", row.coverage_mean),
                format!("{:.6}", row.coverage_sd),
                format!("{:.6}", row.ineff_mean),
                format!("{:.6}", row.ineff_sd),
            ])?;
            text.push_str(&format!(
                "{:<13} coverage={} ineff={}\n",
                variant.name(),
                report::mean_sd_cell(row.coverage_mean, row.coverage_sd),
                report::mean_sd_cell(row.ineff_mean, row.ineff_sd)
            ));
        }
    }
    table.flush()?;
    Ok(text)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<String> {
    let mut settings = args.experiment.config.settings()?;
    if !args.alphas.is_empty() {
        let list: Vec<String> = args.alphas.iter().map(|a| format!("{a:?}")).collect();
        settings.apply_pair("run.alphas", &list.join(","), "--alphas", 0)?;
    }
    let out = &args.experiment.out;
    create_dir(out)?;
    write_text(&out.join(RESOLVED_CONFIG), &settings.render())?;
    let reports = run_experiment_alphas(&settings.experiment, &settings.sweep_alphas)?;
    let records = flatten_records(&reports);
    write_results_csv(&out.join("results.csv"), &records)?;
    let summary = summarize(&records);
    write_summary_csv(&out.join("sweep.csv"), &summary)?;
    write_runs_csv(&out.join("runs.csv"), &reports)?;
    if args.plot {
        write_text(&out.join("sweep.svg"), &plot::sweep_svg(&summary))?;
    }
    Ok(summary_lines(&summary))
}

pub fn cmd_gen_synth(args: &GenSynthArgs) -> Result<String> {
    let settings = args.config.settings()?;
    let g = generate_sbm(&settings.sbm, settings.sbm_seed)?;
    create_dir(&args.out)?;
    write_dataset(
        &g,
        &args.out.join("features.csv"),
        &args.out.join("edges.csv"),
        &args.out.join("labels.csv"),
    )?;
    Ok(format!(
        "{} nodes, {} edges, {} classes written to {}\n",
        g.n_nodes(),
        g.edges().len(),
        g.n_classes(),
        args.out.display()
    ))
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    Ok(report::render(&report::collect(&args.dir)?))
}

/// Runs the parsed command and returns its stdout text.
pub fn run(cli: &Cli) -> Result<String> {
    let exec = || match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::Report(a) => cmd_report(a),
    };
    match cli.jobs {
        Some(0) => bail!("--jobs must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(exec),
        None => exec(),
    }
}
