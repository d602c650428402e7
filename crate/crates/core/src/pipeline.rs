//! Two-stage experiment runner: base training, conformal training of the
//! correction model, then hard conformal evaluation over repeated splits.
//!
//! Node pools per run:
//! - `split.train` / `split.valid` fit and select both models;
//! - a share of `split.calib` is the conformal-training pool, re-split
//!   50/50 into a calibration fold and a prediction fold every epoch;
//! - the rest of `split.calib` plus `split.test` is the evaluation pool,
//!   split 50/50 into calibration and evaluation halves for every
//!   reported split.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cp::{self, BuildOptions, Calibration, CpError, ScoreKind};
use crate::gcn::{
    cross_entropy, forward_correction, predict_base, predict_correction, train_base, GcnError, GcnParams, ProbMatrix,
    Propagator, SgdMomentum, TrainConfig,
};
use crate::graph::{generate_sbm, load_dataset, split_nodes, Graph, GraphError, NodeSplit, SbmSpec, SplitRatios};
use crate::smooth::{self, SmoothConfig, SmoothError};
use crate::tensor::{Matrix, Tape, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gcn(#[from] GcnError),
    #[error(transparent)]
    Cp(#[from] CpError),
    #[error(transparent)]
    Smooth(#[from] SmoothError),
    #[error("leakage: {count} evaluation nodes were used during training (first: node {first})")]
    Leakage { count: usize, first: usize },
    #[error("conformal-training fold of {size} nodes is too small for alpha={alpha}: need at least {min}")]
    FoldTooSmall { size: usize, alpha: f64, min: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Files { features: PathBuf, edges: PathBuf, labels: PathBuf },
    Sbm { spec: SbmSpec, seed: u64 },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Graph> {
        Ok(match self {
            DatasetSource::Files { features, edges, labels } => load_dataset(features, edges, labels)?,
            DatasetSource::Sbm { spec, seed } => generate_sbm(spec, *seed)?,
        })
    }
}

/// Correction-model training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub hidden: usize,
    pub n_layers: usize,
    /// Optional cap on each conformal-training fold.
    pub max_fold: Option<usize>,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            epochs: 100,
            hidden: 64,
            n_layers: 2,
            max_fold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub ratios: SplitRatios,
    pub calib_fraction: f64,
    /// Share of the calibration set withheld from conformal training for evaluation.
    pub withhold_fraction: f64,
    /// Run `r` uses seed `seed + r` for its split, models and folds.
    pub seed: u64,
    pub base: TrainConfig,
    pub correction: CorrectionConfig,
    pub smooth: SmoothConfig,
    pub score: ScoreKind,
    pub n_runs: usize,
    pub n_splits: usize,
    pub build: BuildOptions,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        Self {
            dataset,
            ratios: SplitRatios::default(),
            calib_fraction: 0.5,
            withhold_fraction: 0.5,
            seed: 0,
            base: TrainConfig::default(),
            correction: CorrectionConfig::default(),
            smooth: SmoothConfig::default(),
            score: ScoreKind::Rank,
            n_runs: 10,
            n_splits: 100,
            build: BuildOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.smooth.validate()?;
        let bad = |msg: String| Err(PipelineError::Config(msg));
        if self.n_runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.n_splits == 0 {
            return bad("splits must be at least 1".into());
        }
        if !(self.withhold_fraction > 0.0 && self.withhold_fraction < 1.0) {
            return bad(format!("withhold fraction must lie in (0,1), got {}", self.withhold_fraction));
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction < 1.0) {
            return bad(format!("calib fraction must lie in (0,1), got {}", self.calib_fraction));
        }
        for (name, lr) in [("model.lr", self.base.lr), ("correction.lr", self.correction.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.correction.max_fold == Some(0) {
            return bad("max fold must be positive".into());
        }
        Ok(())
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

/// One reported cell: coverage and inefficiency of one evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run: usize,
    pub split: usize,
    pub score: ScoreKind,
    pub alpha: f64,
    pub coverage: f64,
    pub ineff: f64,
}

/// Training variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    RcpThr,
    RcpAps,
    WithoutConfTr,
    RcpGnn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::RcpThr, Variant::RcpAps, Variant::WithoutConfTr, Variant::RcpGnn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RcpThr => "RCP-THR",
            Variant::RcpAps => "RCP-APS",
            Variant::WithoutConfTr => "w/o Conf.Tr.",
            Variant::RcpGnn => "RCP-GNN",
        }
    }

    /// Filesystem-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::RcpThr => "rcp-thr",
            Variant::RcpAps => "rcp-aps",
            Variant::WithoutConfTr => "wo-conftr",
            Variant::RcpGnn => "rcp-gnn",
        }
    }

    pub fn score(self) -> ScoreKind {
        match self {
            Variant::RcpThr => ScoreKind::Thr,
            Variant::RcpAps => ScoreKind::Aps,
            Variant::WithoutConfTr | Variant::RcpGnn => ScoreKind::Rank,
        }
    }

    /// Configuration for this variant derived from `cfg`.
    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut out = cfg.clone();
        out.score = self.score();
        if self == Variant::WithoutConfTr {
            out.smooth.lambda = 0.0;
        }
        out
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.slug() == s.to_ascii_lowercase() || v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant `{s}` (expected rcp-thr, rcp-aps, wo-conftr or rcp-gnn)"))
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for stream `tag`, index `i` of run seed `seed`.
fn derive_seed(seed: u64, tag: u64, i: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(tag)).wrapping_add(i))
}

const TAG_POOLS: u64 = 1;
const TAG_EVAL: u64 = 2;
const TAG_CORRECTION: u64 = 3;

/// Conformal-training and evaluation pools of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pools {
    pub training: Vec<usize>,
    pub evaluation: Vec<usize>,
}

impl Pools {
    pub fn from_split(split: &NodeSplit, withhold_fraction: f64, seed: u64) -> Result<Self> {
        let mut calib = split.calib.clone();
        calib.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_POOLS, 0)));
        let withheld = ((calib.len() as f64 * withhold_fraction) + 1e-9).floor() as usize;
        if withheld == 0 || withheld == calib.len() {
            return Err(PipelineError::Config(format!(
                "withholding {withhold_fraction} of {} calibration nodes leaves an empty pool",
                calib.len()
            )));
        }
        let training = calib.split_off(withheld);
        let mut evaluation = calib;
        evaluation.extend_from_slice(&split.test);
        Ok(Pools { training, evaluation })
    }
}

/// Per-epoch conformal-training statistics of the correction model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub pred_loss: f64,
    pub cp_loss: f64,
    pub valid_objective: f64,
    pub valid_ineff: f64,
}

#[derive(Debug, Clone)]
pub struct CorrectionOutcome {
    pub params: GcnParams,
    pub best_epoch: usize,
    pub history: Vec<CorrectionEpoch>,
    /// Every node that entered a conformal-training fold.
    pub fold_nodes: BTreeSet<usize>,
}

/// Everything a run needs before the correction stage.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub run: usize,
    pub seed: u64,
    pub split: NodeSplit,
    pub pools: Pools,
    pub base_params: GcnParams,
    pub base_probs: ProbMatrix,
    pub base_accuracy: f64,
}

/// Splits the graph and trains the base model of run `run`.
pub fn prepare_run(cfg: &ExperimentConfig, g: &Graph, prop: &Propagator, run: usize) -> Result<RunContext> {
    let seed = cfg.run_seed(run);
    let split = split_nodes(g.n_nodes(), cfg.ratios, cfg.calib_fraction, seed)?;
    let pools = Pools::from_split(&split, cfg.withhold_fraction, seed)?;
    let base_cfg = TrainConfig { seed, ..cfg.base.clone() };
    let base = train_base(g, &split, &base_cfg)?;
    let base_probs = predict_base(g, prop, &base.params)?;
    let base_accuracy = base_probs.accuracy(&split.test, g.labels());
    Ok(RunContext {
        run,
        seed,
        split,
        pools,
        base_params: base.params,
        base_probs,
        base_accuracy,
    })
}

fn fold_cap(fold: &mut Vec<usize>, cap: Option<usize>) {
    if let Some(c) = cap {
        fold.truncate(c);
    }
}

/// Validation objective `CE + λ·L_cp` (in-sample smooth calibration on the
/// validation nodes) and hard inefficiency of in-sample calibrated sets.
fn validation_objective(cfg: &ExperimentConfig, probs: &ProbMatrix, valid: &[usize], labels: &[usize]) -> Result<(f64, f64)> {
    let rows = probs.select(valid);
    let y: Vec<usize> = valid.iter().map(|&i| labels[i]).collect();
    let mut tape = Tape::new();
    let p = tape.constant(rows.matrix().clone());
    let all: Vec<usize> = (0..valid.len()).collect();
    let by_row: Vec<usize> = all.iter().map(|&i| y[i]).collect();
    let ce = cross_entropy(&mut tape, p, &all, &by_row)?;
    let mut objective = tape.value(ce).item();
    if cfg.smooth.lambda > 0.0 {
        let lcp = smooth::fold_conformity_loss(&mut tape, cfg.score, p, &all, &y, &all, &cfg.smooth)?;
        objective += cfg.smooth.lambda * tape.value(lcp).item();
    }
    let ineff = Calibration::fit(cfg.score, &rows, &y, cfg.smooth.alpha)
        .and_then(|c| cp::build_sets(&rows, valid, &c, cfg.build))
        .and_then(|s| cp::inefficiency(&s))
        .unwrap_or(f64::INFINITY);
    Ok((objective, ineff))
}

/// Trains the correction model on top of the frozen base probabilities.
///
/// Each epoch re-splits the conformal-training pool into a calibration and a
/// prediction fold, and steps on `CE(train) + λ·L_cp(folds)`. The returned
/// parameters are those with the lowest validation objective (hard
/// inefficiency breaks ties, then the earliest epoch).
pub fn run_conformal_training(
    cfg: &ExperimentConfig,
    g: &Graph,
    prop: &Propagator,
    ctx: &RunContext,
) -> Result<CorrectionOutcome> {
    cfg.validate()?;
    let labels = g.labels();
    let c = &cfg.correction;
    let alpha = cfg.smooth.alpha;
    let mut params = GcnParams::init_correction(
        g.n_classes(),
        c.hidden,
        c.n_layers,
        derive_seed(ctx.seed, TAG_CORRECTION, 0),
    );
    let mut opt = SgdMomentum::new(c.lr, c.momentum);
    let mut best: Option<(f64, f64, usize, GcnParams)> = None;
    let mut history = Vec::with_capacity(c.epochs);
    let mut fold_nodes = BTreeSet::new();
    for epoch in 0..=c.epochs {
        let mut tape = Tape::new();
        let fwd = forward_correction(&mut tape, &ctx.base_probs, prop, &params)?;
        let probs = ProbMatrix::new(tape.value(fwd.probs).clone())?;
        let (valid_objective, valid_ineff) = validation_objective(cfg, &probs, &ctx.split.valid, labels)?;
        let better = match &best {
            None => true,
            Some((o, i, _, _)) => valid_objective < *o || (valid_objective == *o && valid_ineff < *i),
        };
        if better {
            best = Some((valid_objective, valid_ineff, epoch, params.clone()));
        }
        if epoch == c.epochs {
            break;
        }

        let pred_loss = cross_entropy(&mut tape, fwd.probs, &ctx.split.train, labels)?;
        let (loss, cp_loss) = if cfg.smooth.lambda > 0.0 {
            let mut pool = ctx.pools.training.clone();
            pool.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.seed.wrapping_add(epoch as u64)));
            let mut pred_fold = pool.split_off(pool.len() / 2);
            let mut calib_fold = pool;
            fold_cap(&mut calib_fold, c.max_fold);
            fold_cap(&mut pred_fold, c.max_fold);
            let min = cp::min_calibration_size(alpha);
            if calib_fold.len() < min || pred_fold.is_empty() {
                return Err(PipelineError::FoldTooSmall {
                    size: calib_fold.len(),
                    alpha,
                    min,
                });
            }
            fold_nodes.extend(calib_fold.iter().chain(&pred_fold).copied());
            let rows: Vec<usize> = calib_fold.iter().chain(&pred_fold).copied().collect();
            let fold_probs = tape.gather_rows(fwd.probs, &rows)?;
            let nc = calib_fold.len();
            let calib_local: Vec<usize> = (0..nc).collect();
            let pred_local: Vec<usize> = (nc..rows.len()).collect();
            let calib_labels: Vec<usize> = calib_fold.iter().map(|&i| labels[i]).collect();
            let lcp = smooth::fold_conformity_loss(
                &mut tape,
                cfg.score,
                fold_probs,
                &calib_local,
                &calib_labels,
                &pred_local,
                &cfg.smooth,
            )?;
            let total = smooth::total_loss(&mut tape, pred_loss, lcp, cfg.smooth.lambda)?;
            (total, tape.value(lcp).item())
        } else {
            (pred_loss, 0.0)
        };
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(GcnError::Divergence { epoch, loss: loss_value }.into());
        }
        let grads = tape.backward(loss)?;
        let g_list: Vec<Matrix> = fwd
            .params
            .iter()
            .map(|&id| grads.get(id).cloned().unwrap_or_else(|| tape.grad(id)))
            .collect();
        if g_list.iter().any(|m| !m.is_finite()) {
            return Err(GcnError::Divergence { epoch, loss: loss_value }.into());
        }
        opt.step(&mut params, &g_list);
        history.push(CorrectionEpoch {
            epoch,
            loss: loss_value,
            pred_loss: tape.value(pred_loss).item(),
            cp_loss,
            valid_objective,
            valid_ineff,
        });
    }
    let (_, _, best_epoch, params) = best.expect("at least one epoch evaluated");
    Ok(CorrectionOutcome {
        params,
        best_epoch,
        history,
        fold_nodes,
    })
}

/// Rejects an evaluation pool that shares nodes with any training set.
pub fn check_leakage(evaluation: &[usize], used: &BTreeSet<usize>) -> Result<()> {
    let leaked: Vec<usize> = evaluation.iter().copied().filter(|i| used.contains(i)).collect();
    match leaked.first() {
        Some(&first) => Err(PipelineError::Leakage {
            count: leaked.len(),
            first,
        }),
        None => Ok(()),
    }
}

/// Hard conformal evaluation over `n_splits` random 50/50 partitions of
/// `pool`, one record per (alpha, split).
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    probs: &ProbMatrix,
    labels: &[usize],
    pool: &[usize],
    kind: ScoreKind,
    alphas: &[f64],
    n_splits: usize,
    run: usize,
    seed: u64,
    build: BuildOptions,
) -> Result<Vec<MetricsRecord>> {
    if pool.len() < 2 {
        return Err(PipelineError::Config(format!("evaluation pool of {} nodes is too small", pool.len())));
    }
    let per_split: Vec<Result<Vec<MetricsRecord>>> = (0..n_splits)
        .into_par_iter()
        .map(|s| {
            let mut ids = pool.to_vec();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EVAL, s as u64)));
            let (cal, ev) = ids.split_at(ids.len() / 2);
            let cal_p = probs.select(cal);
            let ev_p = probs.select(ev);
            let cal_y: Vec<usize> = cal.iter().map(|&i| labels[i]).collect();
            let ev_y: Vec<usize> = ev.iter().map(|&i| labels[i]).collect();
            alphas
                .iter()
                .map(|&alpha| {
                    let c = Calibration::fit(kind, &cal_p, &cal_y, alpha)?;
                    let sets = cp::build_sets(&ev_p, ev, &c, build)?;
                    Ok(MetricsRecord {
                        run,
                        split: s,
                        score: kind,
                        alpha,
                        coverage: cp::coverage(&sets, &ev_y)?,
                        ineff: cp::inefficiency(&sets)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n_splits * alphas.len());
    for r in per_split {
        out.extend(r?);
    }
    out.sort_by(|a, b| a.alpha.total_cmp(&b.alpha).then(a.split.cmp(&b.split)));
    Ok(out)
}

/// Outcome of one run of one configuration.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub run: usize,
    pub seed: u64,
    pub base_accuracy: f64,
    pub corrected_accuracy: f64,
    pub best_epoch: usize,
    pub history: Vec<CorrectionEpoch>,
    pub records: Vec<MetricsRecord>,
    pub fold_nodes: BTreeSet<usize>,
    pub evaluation_pool: Vec<usize>,
    pub base_params: GcnParams,
    pub correction_params: GcnParams,
}

/// Correction stage plus evaluation at every `alphas` entry, for a prepared run.
pub fn run_stage_two(
    cfg: &ExperimentConfig,
    g: &Graph,
    prop: &Propagator,
    ctx: &RunContext,
    alphas: &[f64],
) -> Result<RunReport> {
    let outcome = run_conformal_training(cfg, g, prop, ctx)?;
    let mut used = outcome.fold_nodes.clone();
    used.extend(ctx.split.train.iter().chain(&ctx.split.valid).copied());
    check_leakage(&ctx.pools.evaluation, &used)?;
    let probs = predict_correction(&ctx.base_probs, prop, &outcome.params)?;
    let records = evaluate(
        &probs,
        g.labels(),
        &ctx.pools.evaluation,
        cfg.score,
        alphas,
        cfg.n_splits,
        ctx.run,
        ctx.seed,
        cfg.build,
    )?;
    Ok(RunReport {
        run: ctx.run,
        seed: ctx.seed,
        base_accuracy: ctx.base_accuracy,
        corrected_accuracy: probs.accuracy(&ctx.split.test, g.labels()),
        best_epoch: outcome.best_epoch,
        history: outcome.history,
        records,
        fold_nodes: outcome.fold_nodes,
        evaluation_pool: ctx.pools.evaluation.clone(),
        base_params: ctx.base_params.clone(),
        correction_params: outcome.params,
    })
}

/// Re-evaluates saved base and correction parameters of run `run` on the
/// evaluation pool that run would use.
pub fn evaluate_saved(
    cfg: &ExperimentConfig,
    g: &Graph,
    prop: &Propagator,
    run: usize,
    base: &GcnParams,
    correction: &GcnParams,
    alphas: &[f64],
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let seed = cfg.run_seed(run);
    let split = split_nodes(g.n_nodes(), cfg.ratios, cfg.calib_fraction, seed)?;
    let pools = Pools::from_split(&split, cfg.withhold_fraction, seed)?;
    let used: BTreeSet<usize> = split
        .train
        .iter()
        .chain(&split.valid)
        .chain(&pools.training)
        .copied()
        .collect();
    check_leakage(&pools.evaluation, &used)?;
    let base_probs = predict_base(g, prop, base)?;
    let probs = predict_correction(&base_probs, prop, correction)?;
    evaluate(&probs, g.labels(), &pools.evaluation, cfg.score, alphas, cfg.n_splits, run, seed, cfg.build)
}

/// Full experiment over `n_runs` seeds, evaluated at each of `alphas`.
/// Runs execute on the current rayon pool; output order is by run.
pub fn run_experiment_alphas(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    if alphas.is_empty() {
        return Err(PipelineError::Config("alpha list is empty".into()));
    }
    if let Some(&a) = alphas.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
        return Err(PipelineError::Config(format!("alpha must lie in (0,1), got {a}")));
    }
    let g = cfg.dataset.load()?;
    let prop = Propagator::new(&g);
    (0..cfg.n_runs)
        .into_par_iter()
        .map(|run| {
            let ctx = prepare_run(cfg, &g, &prop, run)?;
            run_stage_two(cfg, &g, &prop, &ctx, alphas)
        })
        .collect()
}

/// Full experiment at the configured alpha.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    run_experiment_alphas(cfg, &[cfg.smooth.alpha])
}

/// Runs every listed variant on shared splits and base models.
pub fn run_ablation(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<(Variant, Vec<RunReport>)>> {
    cfg.validate()?;
    let g = cfg.dataset.load()?;
    let prop = Propagator::new(&g);
    let per_run: Vec<Vec<RunReport>> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|run| {
            let ctx = prepare_run(cfg, &g, &prop, run)?;
            variants
                .iter()
                .map(|v| {
                    let vcfg = v.apply(cfg);
                    run_stage_two(&vcfg, &g, &prop, &ctx, &[vcfg.smooth.alpha])
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(vi, &v)| (v, per_run.iter().map(|reports| reports[vi].clone()).collect()))
        .collect())
}

pub fn flatten_records(reports: &[RunReport]) -> Vec<MetricsRecord> {
    reports.iter().flat_map(|r| r.records.iter().cloned()).collect()
}

/// Mean and population standard deviation across runs of per-run means.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub score: ScoreKind,
    pub alpha: f64,
    pub n_runs: usize,
    pub n_splits: usize,
    pub coverage_mean: f64,
    pub coverage_sd: f64,
    pub ineff_mean: f64,
    pub ineff_sd: f64,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups by (score, alpha) in first-seen order.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(ScoreKind, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|&(s, a)| s == r.score && a == r.alpha) {
            keys.push((r.score, r.alpha));
        }
    }
    keys.into_iter()
        .map(|(score, alpha)| {
            let group: Vec<&MetricsRecord> = records.iter().filter(|r| r.score == score && r.alpha == alpha).collect();
            let mut runs: Vec<usize> = group.iter().map(|r| r.run).collect();
            runs.sort_unstable();
            runs.dedup();
            let per_run = |f: fn(&MetricsRecord) -> f64| -> Vec<f64> {
                runs.iter()
                    .map(|&run| {
                        let v: Vec<f64> = group.iter().filter(|r| r.run == run).map(|r| f(r)).collect();
                        mean_sd(&v).0
                    })
                    .collect()
            };
            let (coverage_mean, coverage_sd) = mean_sd(&per_run(|r| r.coverage));
            let (ineff_mean, ineff_sd) = mean_sd(&per_run(|r| r.ineff));
            SummaryRow {
                score,
                alpha,
                n_runs: runs.len(),
                n_splits: group.len() / runs.len().max(1),
                coverage_mean,
                coverage_sd,
                ineff_mean,
                ineff_sd,
            }
        })
        .collect()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const RESULTS_HEADER: &str = "run,split,score,alpha,coverage,ineff";
pub const SUMMARY_HEADER: &str = "score,alpha,runs,splits,coverage_mean,coverage_sd,ineff_mean,ineff_sd";

pub fn write_results_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    (|| -> std::io::Result<()> {
        writeln!(w, "{RESULTS_HEADER}")?;
        for r in records {
            writeln!(
                w,
                "{},{},{},{},{:.6},{:.6}",
                r.run, r.split, r.score, r.alpha, r.coverage, r.ineff
            )?;
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let parse_err = |line: usize, message: String| PipelineError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let ln = i + 1;
        if ln == 1 {
            if line.trim() != RESULTS_HEADER {
                return Err(parse_err(1, format!("expected header `{RESULTS_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(ln, format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|e| parse_err(ln, format!("bad {what} `{s}`: {e}")))
        };
        let int = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse::<usize>().map_err(|e| parse_err(ln, format!("bad {what} `{s}`: {e}")))
        };
        out.push(MetricsRecord {
            run: int(f[0], "run")?,
            split: int(f[1], "split")?,
            score: f[2].trim().parse().map_err(|e: String| parse_err(ln, e))?,
            alpha: num(f[3], "alpha")?,
            coverage: num(f[4], "coverage")?,
            ineff: num(f[5], "ineff")?,
        });
    }
    if out.is_empty() {
        return Err(parse_err(1, "no records".into()));
    }
    Ok(out)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    (|| -> std::io::Result<()> {
        writeln!(w, "{SUMMARY_HEADER}")?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.score, r.alpha, r.n_runs, r.n_splits, r.coverage_mean, r.coverage_sd, r.ineff_mean, r.ineff_sd
            )?;
        }
        w.flush()
    })()
    .map_err(io_err(path))
}
