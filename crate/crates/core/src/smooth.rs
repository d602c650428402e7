//! Differentiable conformal prediction on the autodiff tape.
//!
//! Hard ranks, quantiles and set sizes are replaced by sigmoid relaxations
//! at temperature `τ`. All functions take node ids on a [`Tape`] and return
//! new nodes, so gradients flow back to whatever produced the probabilities.

use thiserror::Error;

use crate::cp::{Orientation, ScoreKind};
use crate::tensor::{Matrix, NodeId, Tape, TensorError};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

/// Floor added to every quantile kernel weight so the normaliser never vanishes.
const KERNEL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SmoothError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("temperature must lie in [{TAU_MIN}, {TAU_MAX}], got {0}")]
    InvalidTau(f64),
    #[error("kappa must be 0 or 1, got {0}")]
    InvalidKappa(f64),
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("alpha must lie in (0,1), got {0}")]
    InvalidAlpha(f64),
    #[error("quantile level must lie in (0,1], got {0}")]
    InvalidLevel(f64),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
}

pub type Result<T> = std::result::Result<T, SmoothError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothConfig {
    pub tau: f64,
    pub kappa: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig {
            tau: 0.1,
            kappa: 1.0,
            lambda: 1.0,
            alpha: 0.1,
        }
    }
}

impl SmoothConfig {
    pub fn new(tau: f64, kappa: f64, lambda: f64, alpha: f64) -> Result<Self> {
        let cfg = SmoothConfig {
            tau,
            kappa,
            lambda,
            alpha,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.kappa != 0.0 && self.kappa != 1.0 {
            return Err(SmoothError::InvalidKappa(self.kappa));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(SmoothError::InvalidLambda(self.lambda));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SmoothError::InvalidAlpha(self.alpha));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if (TAU_MIN..=TAU_MAX).contains(&tau) {
        Ok(())
    } else {
        Err(SmoothError::InvalidTau(tau))
    }
}

/// `K × K²` map with column `k·K + j` equal to `μ_j − μ_k`.
fn pairwise_difference(k: usize) -> Matrix {
    let mut m = Matrix::zeros(k, k * k);
    for a in 0..k {
        for j in 0..k {
            let c = a * k + j;
            m.set(j, c, m.get(j, c) + 1.0);
            m.set(a, c, m.get(a, c) - 1.0);
        }
    }
    m
}

/// `K × K²` map copying `μ_j` into column `k·K + j`.
fn tile_columns(k: usize) -> Matrix {
    let mut m = Matrix::zeros(k, k * k);
    for a in 0..k {
        for j in 0..k {
            m.set(j, a * k + j, 1.0);
        }
    }
    m
}

/// `K² × K` map summing each block of `K` columns.
fn block_sum(k: usize) -> Matrix {
    let mut m = Matrix::zeros(k * k, k);
    for a in 0..k {
        for j in 0..k {
            m.set(a * k + j, a, 1.0);
        }
    }
    m
}

/// `m × K²` sigmoids `σ(sign·(μ_j − μ_k)/τ)`.
fn pairwise_sigmoid(tape: &mut Tape, probs: NodeId, tau: f64, sign: f64) -> Result<NodeId> {
    let k = tape.value(probs).cols();
    let diff = tape.constant(pairwise_difference(k));
    let d = tape.matmul(probs, diff)?;
    let z = tape.scale(d, sign / tau)?;
    Ok(tape.sigmoid(z)?)
}

/// Smooth rank scores `Ṽ(x, k) = Σ_j σ((μ_j − μ_k)/τ)` for every row and class.
pub fn smooth_rank_scores(tape: &mut Tape, probs: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let k = tape.value(probs).cols();
    let sig = pairwise_sigmoid(tape, probs, tau, 1.0)?;
    let sum = tape.constant(block_sum(k));
    Ok(tape.matmul(sig, sum)?)
}

/// `Σ_j σ(sign·(μ_k − μ_j)/τ)·μ_j` for every class `k`.
fn weighted_pairwise(tape: &mut Tape, probs: NodeId, tau: f64, sign: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let k = tape.value(probs).cols();
    let sig = pairwise_sigmoid(tape, probs, tau, -sign)?;
    let tile = tape.constant(tile_columns(k));
    let mu = tape.matmul(probs, tile)?;
    let weighted = tape.mul(sig, mu)?;
    let sum = tape.constant(block_sum(k));
    Ok(tape.matmul(weighted, sum)?)
}

/// Smooth APS-type score of every class: `Σ_j σ((μ_k − μ_j)/τ)·μ_j`.
/// High values mean a confident class.
pub fn smooth_aps_matrix(tape: &mut Tape, probs: NodeId, tau: f64) -> Result<NodeId> {
    weighted_pairwise(tape, probs, tau, 1.0)
}

/// Smooth cumulative mass above each class, `Σ_j σ((μ_j − μ_k)/τ)·μ_j`.
/// Low values mean a confident class, like the hard APS score.
pub fn smooth_aps_cumulative(tape: &mut Tape, probs: NodeId, tau: f64) -> Result<NodeId> {
    weighted_pairwise(tape, probs, tau, -1.0)
}

/// `m × 1` column holding entry `(i, labels[i])` of `scores`.
pub fn select_labels(tape: &mut Tape, scores: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (m, k) = tape.value(scores).shape();
    if labels.len() != m {
        return Err(SmoothError::Tensor(TensorError::ShapeMismatch {
            op: "select_labels",
            lhs: (m, k),
            rhs: (labels.len(), 1),
        }));
    }
    let mut mask = Matrix::zeros(m, k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(SmoothError::LabelOutOfRange { label: y, n_classes: k });
        }
        mask.set(i, y, 1.0);
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(scores, mask)?;
    let ones = tape.constant(Matrix::filled(k, 1, 1.0));
    Ok(tape.matmul(picked, ones)?)
}

/// Smooth APS score of the true class of each row: `Σ_k σ((μ_y − μ_k)/τ)·μ_k`.
pub fn smooth_aps_scores(tape: &mut Tape, probs: NodeId, labels: &[usize], tau: f64) -> Result<NodeId> {
    let all = smooth_aps_matrix(tape, probs, tau)?;
    select_labels(tape, all, labels)
}

/// Differentiable `⌈level·n⌉`-th smallest entry of `scores` (any shape).
///
/// Soft ascending ranks `r_i = 0.5 + Σ_j σ((s_i − s_j)/τ)` are matched to the
/// target rank with a unit-bandwidth triangular kernel, and the result is
/// the kernel-weighted mean of the scores.
pub fn smooth_quantile(tape: &mut Tape, scores: NodeId, level: f64, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    if !(level > 0.0 && level <= 1.0) {
        return Err(SmoothError::InvalidLevel(level));
    }
    let (r, c) = tape.value(scores).shape();
    let n = r * c;
    if n == 0 {
        return Err(SmoothError::Empty("scores"));
    }
    let col = tape.reshape(scores, n, 1)?;
    let row = tape.reshape(scores, 1, n)?;
    let ones_row = tape.constant(Matrix::filled(1, n, 1.0));
    let ones_col = tape.constant(Matrix::filled(n, 1, 1.0));
    let si = tape.matmul(col, ones_row)?;
    let sj = tape.matmul(ones_col, row)?;
    let d = tape.sub(si, sj)?;
    let z = tape.scale(d, 1.0 / tau)?;
    let sig = tape.sigmoid(z)?;
    let sums = tape.matmul(sig, ones_col)?;

    let target = crate::cp::ceil_count(level * n as f64).max(1) as f64;
    let dist = tape.add_scalar(sums, 0.5 - target)?;
    let above = tape.relu(dist)?;
    let neg = tape.scale(dist, -1.0)?;
    let below = tape.relu(neg)?;
    let spread = tape.add(above, below)?;
    let flipped = tape.scale(spread, -1.0)?;
    let tri = tape.add_scalar(flipped, 1.0)?;
    let tri = tape.relu(tri)?;
    let w = tape.add_scalar(tri, KERNEL_FLOOR)?;

    let ws = tape.mul(w, col)?;
    let num = tape.sum_all(ws)?;
    let den = tape.sum_all(w)?;
    Ok(tape.div(num, den)?)
}

/// Soft set sizes `c_i = max(0, Σ_k σ(s·(η − Ṽ(x_i,k))/τ) − κ)` as an `m × 1`
/// column, with `s = +1` when low scores are in the set and `−1` otherwise.
pub fn soft_set_size(
    tape: &mut Tape,
    scores: NodeId,
    threshold: NodeId,
    orientation: Orientation,
    tau: f64,
    kappa: f64,
) -> Result<NodeId> {
    check_tau(tau)?;
    let k = tape.value(scores).cols();
    let ones_row = tape.constant(Matrix::filled(1, k, 1.0));
    let eta = tape.matmul(threshold, ones_row)?;
    let gap = tape.sub(scores, eta)?;
    let z = tape.scale(gap, -orientation.sign() / tau)?;
    let member = tape.sigmoid(z)?;
    let ones_col = tape.constant(Matrix::filled(k, 1, 1.0));
    let size = tape.matmul(member, ones_col)?;
    let shifted = tape.add_scalar(size, -kappa)?;
    Ok(tape.relu(shifted)?)
}

/// `L_cp = Σ c_i / (m·K)` over an `m × 1` column of soft sizes.
pub fn conformity_loss(tape: &mut Tape, sizes: NodeId, n_classes: usize) -> Result<NodeId> {
    let m = tape.value(sizes).rows() * tape.value(sizes).cols();
    if m == 0 {
        return Err(SmoothError::Empty("prediction fold"));
    }
    if n_classes == 0 {
        return Err(SmoothError::Empty("class set"));
    }
    let total = tape.sum_all(sizes)?;
    Ok(tape.div_const(total, (m * n_classes) as f64)?)
}

/// `L = L_pred + λ·L_cp`.
pub fn total_loss(tape: &mut Tape, pred: NodeId, cp: NodeId, lambda: f64) -> Result<NodeId> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SmoothError::InvalidLambda(lambda));
    }
    if lambda == 0.0 {
        return Ok(pred);
    }
    let weighted = tape.scale(cp, lambda)?;
    Ok(tape.add(pred, weighted)?)
}

/// Per-class smooth scores for a score family, oriented like the hard score.
pub fn class_scores(tape: &mut Tape, kind: ScoreKind, probs: NodeId, tau: f64) -> Result<NodeId> {
    match kind {
        ScoreKind::Thr => Ok(probs),
        ScoreKind::Aps => smooth_aps_cumulative(tape, probs, tau),
        ScoreKind::Rank => smooth_rank_scores(tape, probs, tau),
    }
}

/// Finite-sample quantile level used for the smooth threshold on `n` calibration points.
pub fn training_level(kind: ScoreKind, alpha: f64, n: usize) -> f64 {
    let corrected = 1.0 + 1.0 / n as f64;
    let level = match kind.orientation() {
        Orientation::LowInSet => (1.0 - alpha) * corrected,
        Orientation::HighInSet => alpha * corrected,
    };
    level.min(1.0)
}

/// Conformity loss of one calibration/prediction fold split.
///
/// `probs` holds the rows of both folds; `calib_rows` and `pred_rows` index into it.
pub fn fold_conformity_loss(
    tape: &mut Tape,
    kind: ScoreKind,
    probs: NodeId,
    calib_rows: &[usize],
    calib_labels: &[usize],
    pred_rows: &[usize],
    config: &SmoothConfig,
) -> Result<NodeId> {
    config.validate()?;
    if calib_rows.is_empty() {
        return Err(SmoothError::Empty("calibration fold"));
    }
    if pred_rows.is_empty() {
        return Err(SmoothError::Empty("prediction fold"));
    }
    let k = tape.value(probs).cols();
    let scores = class_scores(tape, kind, probs, config.tau)?;
    let calib = tape.gather_rows(scores, calib_rows)?;
    let true_scores = select_labels(tape, calib, calib_labels)?;
    let level = training_level(kind, config.alpha, calib_rows.len());
    let eta = smooth_quantile(tape, true_scores, level, config.tau)?;
    let pred = tape.gather_rows(scores, pred_rows)?;
    let sizes = soft_set_size(tape, pred, eta, kind.orientation(), config.tau, config.kappa)?;
    conformity_loss(tape, sizes, k)
}
