//! Split conformal prediction with THR, APS and RANK conformity scores.
//!
//! Ranks are descending (rank 1 = largest probability) with ties broken
//! by class index unless a seeded random tie-break is requested. An
//! empirical `q`-quantile of `n` values is the `⌈q·n⌉`-th smallest.
//!
//! RANK calibration picks a rank threshold `r*` from the calibration ranks
//! and a probability cutoff `μ*` that decides, per node, whether the
//! `r*`-th class joins the top-`(r* − 1)` set. `μ*` is taken among the
//! calibration nodes whose true class sits exactly at rank `r*`, as the
//! largest cutoff that still covers `⌈(n+1)(1−α)⌉` calibration nodes.
//! This is split conformal prediction on the lexicographic score
//! `(rank of y, −μ_y)`, so the finite-sample guarantee carries over.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gcn::ProbMatrix;

#[derive(Debug, Error)]
pub enum CpError {
    #[error("class {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("alpha must lie in (0,1), got {0}")]
    InvalidAlpha(f64),
    #[error("{n} calibration points are too few for alpha={alpha}: need at least {min_n}")]
    TooFewCalibration { n: usize, alpha: f64, min_n: usize },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("calibration kind {calibration} cannot build {requested} sets")]
    KindMismatch {
        calibration: ScoreKind,
        requested: ScoreKind,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CpError>;

/// Which side of the threshold belongs to the prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    HighInSet,
    LowInSet,
}

impl Orientation {
    /// `+1` when low scores are in the set, `−1` otherwise.
    pub fn sign(self) -> f64 {
        match self {
            Orientation::HighInSet => -1.0,
            Orientation::LowInSet => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScoreKind {
    Thr,
    Aps,
    Rank,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Thr, ScoreKind::Aps, ScoreKind::Rank];

    pub fn orientation(self) -> Orientation {
        match self {
            ScoreKind::Thr => Orientation::HighInSet,
            ScoreKind::Aps | ScoreKind::Rank => Orientation::LowInSet,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Thr => "thr",
            ScoreKind::Aps => "aps",
            ScoreKind::Rank => "rank",
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "thr" => Ok(ScoreKind::Thr),
            "aps" => Ok(ScoreKind::Aps),
            "rank" => Ok(ScoreKind::Rank),
            other => Err(format!("unknown score kind `{other}` (expected thr, aps or rank)")),
        }
    }
}

/// Tie-breaking rule among equal probabilities within a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    ClassIndex,
    /// Uniformly random order among ties, reproducible per (seed, row).
    Seeded(u64),
}

impl TieBreak {
    fn priorities(self, row_index: usize, k: usize) -> Vec<u64> {
        match self {
            TieBreak::ClassIndex => (0..k as u64).collect(),
            TieBreak::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (row_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                (0..k).map(|_| rng.random()).collect()
            }
        }
    }
}

/// Class ids sorted by descending probability.
pub fn descending_order(row: &[f64], tie: TieBreak, row_index: usize) -> Vec<usize> {
    let prio = tie.priorities(row_index, row.len());
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(prio[a].cmp(&prio[b])));
    order
}

/// 1-based descending rank of class `k` within `row` (class-index ties).
pub fn class_rank(row: &[f64], k: usize) -> usize {
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > row[k] || (v == row[k] && j < k))
        .count()
}

fn check_class(row: &[f64], k: usize) -> Result<()> {
    if k >= row.len() {
        return Err(CpError::ClassOutOfRange {
            class: k,
            n_classes: row.len(),
        });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CpError::InvalidAlpha(alpha))
    }
}

/// THR score: the class probability itself.
pub fn score_thr(row: &[f64], k: usize) -> Result<f64> {
    check_class(row, k)?;
    Ok(row[k])
}

/// APS score: cumulative descending-sorted probability mass through class `k`.
pub fn score_aps(row: &[f64], k: usize) -> Result<f64> {
    check_class(row, k)?;
    Ok(aps_cumulative(row, TieBreak::ClassIndex, 0)[k])
}

/// APS scores of every class in `row`.
fn aps_cumulative(row: &[f64], tie: TieBreak, row_index: usize) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    let mut acc = 0.0;
    for k in descending_order(row, tie, row_index) {
        acc += row[k];
        out[k] = acc;
    }
    out
}

fn check_labels(probs: &ProbMatrix, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.n_rows() {
        return Err(CpError::LengthMismatch {
            what: "labels",
            got: labels.len(),
            expected: probs.n_rows(),
        });
    }
    for &y in labels {
        check_class(probs.row(0), y)?;
    }
    Ok(())
}

/// Ranks of the true labels, one per row.
fn true_ranks(probs: &ProbMatrix, labels: &[usize], tie: TieBreak) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            1 + descending_order(probs.row(i), tie, i)
                .iter()
                .position(|&k| k == y)
                .expect("label checked")
        })
        .collect()
}

/// RANK conformity scores on calibration rows:
/// `(in-row rank of μ_y) − 1 + (1/n)·(rank of μ_y in the class-y column)`.
pub fn score_rank_calib(probs: &ProbMatrix, labels: &[usize]) -> Result<Vec<f64>> {
    let n = probs.n_rows();
    if n == 0 {
        return Err(CpError::Empty("calibration set"));
    }
    check_labels(probs, labels)?;
    let scores = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let v = probs.row(i)[y];
            let col_rank = 1 + (0..n)
                .filter(|&j| {
                    let u = probs.row(j)[y];
                    u > v || (u == v && j < i)
                })
                .count();
            (class_rank(probs.row(i), y) - 1) as f64 + col_rank as f64 / n as f64
        })
        .collect();
    Ok(scores)
}

/// True-label scores for THR or APS rows; RANK uses [`score_rank_calib`].
pub fn true_label_scores(kind: ScoreKind, probs: &ProbMatrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(probs, labels)?;
    match kind {
        ScoreKind::Thr => Ok(labels.iter().enumerate().map(|(i, &y)| probs.row(i)[y]).collect()),
        ScoreKind::Aps => labels
            .iter()
            .enumerate()
            .map(|(i, &y)| score_aps(probs.row(i), y))
            .collect(),
        ScoreKind::Rank => score_rank_calib(probs, labels),
    }
}

/// `⌈x⌉` tolerant of representation error such as `(19+1)·0.05 = 1.0000000000000002`.
pub(crate) fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

fn floor_count(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// Smallest calibration size for which the corrected quantile exists.
pub fn min_calibration_size(alpha: f64) -> usize {
    ceil_count(1.0 / alpha - 1.0).max(1)
}

/// 1-based position (ascending) of the calibrated threshold among `n` sorted scores.
pub fn quantile_position(n: usize, alpha: f64, kind: ScoreKind) -> Result<usize> {
    check_alpha(alpha)?;
    if n == 0 {
        return Err(CpError::Empty("scores"));
    }
    let too_few = || CpError::TooFewCalibration {
        n,
        alpha,
        min_n: min_calibration_size(alpha),
    };
    let nf = n as f64;
    let pos = match kind {
        ScoreKind::Thr => ceil_count(alpha * (1.0 + 1.0 / nf) * nf).max(1),
        ScoreKind::Aps => ceil_count((1.0 - alpha) * (1.0 + 1.0 / nf) * nf),
        ScoreKind::Rank => {
            let j = floor_count((nf + 1.0) * alpha);
            if j == 0 {
                return Err(too_few());
            }
            n + 1 - j.min(n)
        }
    };
    if pos == 0 || pos > n {
        return Err(too_few());
    }
    Ok(pos)
}

/// Calibrated threshold: THR the `⌈α(1+1/n)·n⌉`-th smallest score, APS the
/// `⌈(1−α)(1+1/n)·n⌉`-th smallest, RANK the `⌊(n+1)α⌋`-th largest.
pub fn calibrate_threshold(scores: &[f64], alpha: f64, kind: ScoreKind) -> Result<f64> {
    let pos = quantile_position(scores.len(), alpha, kind)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[pos - 1])
}

/// Fitted RANK calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct RankCalibration {
    pub r_star: usize,
    /// Cutoff on a node's `r*`-th largest probability; `+∞` when `p = 0`.
    pub mu_star: f64,
    /// Fraction of calibration nodes whose `r*`-th probability reaches `μ*`.
    pub p: f64,
    pub q_score: f64,
    pub n_calib: usize,
    pub alpha: f64,
}

/// Fits `r*`, `μ*`, `p` and the RANK score quantile on calibration rows.
pub fn fit_rank_calibration(probs: &ProbMatrix, labels: &[usize], alpha: f64) -> Result<RankCalibration> {
    fit_rank_calibration_with(probs, labels, alpha, TieBreak::ClassIndex)
}

pub fn fit_rank_calibration_with(
    probs: &ProbMatrix,
    labels: &[usize],
    alpha: f64,
    tie: TieBreak,
) -> Result<RankCalibration> {
    let n = probs.n_rows();
    if n == 0 {
        return Err(CpError::Empty("calibration set"));
    }
    check_labels(probs, labels)?;
    // position of the ⌊(n+1)α⌋-th largest; validates n against alpha
    let pos = quantile_position(n, alpha, ScoreKind::Rank)?;
    let ranks = true_ranks(probs, labels, tie);
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let r_star = sorted[pos - 1];

    let target = ceil_count((n as f64 + 1.0) * (1.0 - alpha)).min(n);
    let already = ranks.iter().filter(|&&r| r < r_star).count();
    let need = target.saturating_sub(already);
    let order_stat = |i: usize| {
        let order = descending_order(probs.row(i), tie, i);
        probs.row(i)[order[r_star - 1]]
    };
    let mu_star = if need == 0 {
        f64::INFINITY
    } else {
        let mut at_star: Vec<f64> = (0..n).filter(|&i| ranks[i] == r_star).map(|i| probs.row(i)[labels[i]]).collect();
        at_star.sort_by(|a, b| b.total_cmp(a));
        // #{r_i ≤ r*} ≥ target, so at_star holds at least `need` entries
        at_star[need.min(at_star.len()) - 1]
    };
    let p = if mu_star.is_finite() {
        (0..n).filter(|&i| order_stat(i) >= mu_star).count() as f64 / n as f64
    } else {
        0.0
    };
    let q_score = calibrate_threshold(&score_rank_calib(probs, labels)?, alpha, ScoreKind::Rank)?;
    Ok(RankCalibration {
        r_star,
        mu_star,
        p,
        q_score,
        n_calib: n,
        alpha,
    })
}

/// A fitted calibration for any score family.
#[derive(Debug, Clone, PartialEq)]
pub enum Calibration {
    Thr { threshold: f64, alpha: f64 },
    Aps { threshold: f64, alpha: f64 },
    Rank(RankCalibration),
}

impl Calibration {
    pub fn fit(kind: ScoreKind, probs: &ProbMatrix, labels: &[usize], alpha: f64) -> Result<Self> {
        Ok(match kind {
            ScoreKind::Thr => Calibration::Thr {
                threshold: calibrate_threshold(&true_label_scores(kind, probs, labels)?, alpha, kind)?,
                alpha,
            },
            ScoreKind::Aps => Calibration::Aps {
                threshold: calibrate_threshold(&true_label_scores(kind, probs, labels)?, alpha, kind)?,
                alpha,
            },
            ScoreKind::Rank => Calibration::Rank(fit_rank_calibration(probs, labels, alpha)?),
        })
    }

    pub fn kind(&self) -> ScoreKind {
        match self {
            Calibration::Thr { .. } => ScoreKind::Thr,
            Calibration::Aps { .. } => ScoreKind::Aps,
            Calibration::Rank(_) => ScoreKind::Rank,
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Calibration::Thr { alpha, .. } | Calibration::Aps { alpha, .. } => *alpha,
            Calibration::Rank(r) => r.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildOptions {
    /// Replace an empty set by the top-1 class.
    pub force_top1: bool,
    pub tie_break: TieBreak,
}

/// Per-node class-membership masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSetBatch {
    pub node_ids: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    pub alpha: f64,
}

impl PredictionSetBatch {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn size(&self, i: usize) -> usize {
        self.masks[i].iter().filter(|&&m| m).count()
    }

    pub fn members(&self, i: usize) -> Vec<usize> {
        (0..self.masks[i].len()).filter(|&k| self.masks[i][k]).collect()
    }

    pub fn contains(&self, i: usize, k: usize) -> bool {
        self.masks[i][k]
    }

    /// CSV `node_id,set_size,members,covered`; `labels` is indexed like the batch rows.
    pub fn write_csv(&self, path: &Path, labels: Option<&[usize]>) -> Result<()> {
        let io = |source| CpError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        (|| -> std::io::Result<()> {
            writeln!(w, "node_id,set_size,members,covered")?;
            for i in 0..self.len() {
                let members: Vec<String> = self.members(i).iter().map(usize::to_string).collect();
                let covered = labels.map_or(String::new(), |y| u8::from(self.masks[i][y[i]]).to_string());
                writeln!(w, "{},{},{},{}", self.node_ids[i], self.size(i), members.join(";"), covered)?;
            }
            w.flush()
        })()
        .map_err(io)
    }
}

/// Builds prediction sets for every row of `probs`. `node_ids` label the rows.
pub fn build_sets(
    probs: &ProbMatrix,
    node_ids: &[usize],
    calibration: &Calibration,
    options: BuildOptions,
) -> Result<PredictionSetBatch> {
    if node_ids.len() != probs.n_rows() {
        return Err(CpError::LengthMismatch {
            what: "node ids",
            got: node_ids.len(),
            expected: probs.n_rows(),
        });
    }
    let k = probs.n_classes();
    let tie = options.tie_break;
    let masks = (0..probs.n_rows())
        .map(|i| {
            let row = probs.row(i);
            let mut mask = match calibration {
                Calibration::Thr { threshold, .. } => row.iter().map(|&v| v >= *threshold).collect(),
                Calibration::Aps { threshold, .. } => aps_cumulative(row, tie, i)
                    .into_iter()
                    .map(|s| s <= *threshold)
                    .collect(),
                Calibration::Rank(rc) => {
                    let order = descending_order(row, tie, i);
                    let r = rc.r_star.min(k);
                    let size = if r >= 1 && row[order[r - 1]] >= rc.mu_star { r } else { r.saturating_sub(1) };
                    let mut mask = vec![false; k];
                    for &c in &order[..size] {
                        mask[c] = true;
                    }
                    mask
                }
            };
            if options.force_top1 && !mask.iter().any(|&m| m) {
                mask[descending_order(row, tie, i)[0]] = true;
            }
            mask
        })
        .collect();
    Ok(PredictionSetBatch {
        node_ids: node_ids.to_vec(),
        masks,
        alpha: calibration.alpha(),
    })
}

/// Fraction of rows whose set contains the label (`labels` indexed like the batch).
pub fn coverage(sets: &PredictionSetBatch, labels: &[usize]) -> Result<f64> {
    if sets.is_empty() {
        return Err(CpError::Empty("prediction set batch"));
    }
    if labels.len() != sets.len() {
        return Err(CpError::LengthMismatch {
            what: "labels",
            got: labels.len(),
            expected: sets.len(),
        });
    }
    let hits = labels.iter().enumerate().filter(|&(i, &y)| sets.masks[i][y]).count();
    Ok(hits as f64 / sets.len() as f64)
}

/// Mean prediction-set size.
pub fn inefficiency(sets: &PredictionSetBatch) -> Result<f64> {
    if sets.is_empty() {
        return Err(CpError::Empty("prediction set batch"));
    }
    let total: usize = (0..sets.len()).map(|i| sets.size(i)).sum();
    Ok(total as f64 / sets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::seq::SliceRandom;

    fn probs(rows: &[Vec<f64>]) -> ProbMatrix {
        ProbMatrix::from_rows(rows).unwrap()
    }

    fn batch(masks: Vec<Vec<bool>>) -> PredictionSetBatch {
        PredictionSetBatch {
            node_ids: (0..masks.len()).collect(),
            masks,
            alpha: 0.1,
        }
    }

    #[test]
    fn thr_scores() {
        assert_eq!(score_thr(&[1.0, 0.0, 0.0], 0).unwrap(), 1.0);
        assert_eq!(score_thr(&[0.25; 4], 2).unwrap(), 0.25);
        assert_eq!(score_thr(&[0.6, 0.3, 0.1], 1).unwrap(), 0.3);
        assert!(matches!(score_thr(&[0.5, 0.5], 2), Err(CpError::ClassOutOfRange { .. })));
    }

    #[test]
    fn aps_scores() {
        assert!((score_aps(&[0.5, 0.3, 0.2], 1).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(score_aps(&[1.0, 0.0, 0.0], 0).unwrap(), 1.0);
        assert!((score_aps(&[0.1, 0.6, 0.3], 0).unwrap() - 1.0).abs() < 1e-15);
        assert!(score_aps(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn aps_matches_permutation_oracle() {
        // brute force: sum over every class whose probability precedes or equals k's in sorted order
        let row = [0.15, 0.05, 0.4, 0.1, 0.3];
        for k in 0..5 {
            let oracle: f64 = row.iter().filter(|&&v| v >= row[k]).sum();
            assert!((score_aps(&row, k).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_scores_three_node_example() {
        let p = probs(&[vec![0.7, 0.2, 0.1], vec![0.4, 0.5, 0.1], vec![0.5, 0.2, 0.3]]);
        let s = score_rank_calib(&p, &[0, 1, 2]).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-12);
        // node 1: in-row rank 1, class-1 column [0.2,0.5,0.2] rank 1
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-12);
        // node 2: class 2 is second in its row; class-2 column [0.1,0.1,0.3] rank 1
        assert!((s[2] - (1.0 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn rank_score_worst_rank_and_empty() {
        let p = probs(&[vec![0.6, 0.3, 0.1], vec![0.2, 0.3, 0.5]]);
        let s = score_rank_calib(&p, &[2, 2]).unwrap();
        assert!((s[0] - (2.0 + 1.0)).abs() < 1e-12);
        assert!((s[1] - 0.5).abs() < 1e-12);
        let empty = ProbMatrix::new(crate::tensor::Matrix::zeros(0, 3)).unwrap();
        assert!(matches!(score_rank_calib(&empty, &[]), Err(CpError::Empty(_))));
    }

    #[test]
    fn thresholds() {
        for kind in ScoreKind::ALL {
            assert_eq!(calibrate_threshold(&[0.4; 30], 0.1, kind).unwrap(), 0.4);
        }
        let s = [1.1, 2.3, 0.2, 3.4, 1.9, 0.8, 2.9, 0.4, 1.5];
        assert_eq!(calibrate_threshold(&s, 0.2, ScoreKind::Rank).unwrap(), 2.9);
        assert_eq!(calibrate_threshold(&[0.3, 0.1, 0.4, 0.2], 0.2, ScoreKind::Thr).unwrap(), 0.1);
        assert_eq!(quantile_position(4, 0.2, ScoreKind::Thr).unwrap(), 1);
    }

    #[test]
    fn too_few_calibration_points() {
        let err = calibrate_threshold(&[0.1, 0.2, 0.3], 0.05, ScoreKind::Rank).unwrap_err();
        assert!(matches!(err, CpError::TooFewCalibration { min_n: 19, .. }));
        assert!(calibrate_threshold(&[0.1; 19], 0.05, ScoreKind::Rank).is_ok());
        assert!(calibrate_threshold(&[0.1; 18], 0.05, ScoreKind::Aps).is_err());
        assert!(calibrate_threshold(&[0.1; 19], 0.05, ScoreKind::Aps).is_ok());
        assert!(matches!(
            calibrate_threshold(&[0.1], 1.5, ScoreKind::Thr),
            Err(CpError::InvalidAlpha(_))
        ));
    }

    /// Rows whose true label has the given rank and whose r-th order statistic is `mu`.
    fn row_with(rank: usize, second: f64) -> (Vec<f64>, usize) {
        // K = 3, sorted probs [1 - second - 0.01, second, 0.01]
        let row = vec![1.0 - second - 0.01, second, 0.01];
        (row, rank - 1)
    }

    #[test]
    fn perfect_classifier_gives_top1() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| {
            let mut r = vec![0.0; 3];
            r[i % 3] = 1.0;
            r
        }).collect();
        let p = probs(&rows);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let rc = fit_rank_calibration(&p, &labels, 0.1).unwrap();
        assert_eq!(rc.r_star, 1);
        let sets = build_sets(&p, &(0..20).collect::<Vec<_>>(), &Calibration::Rank(rc), BuildOptions::default()).unwrap();
        assert!((0..20).all(|i| sets.size(i) == 1 && sets.contains(i, labels[i])));
    }

    #[test]
    fn rank_one_calibration_empties_least_confident_node() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![0.8 - 0.01 * i as f64, 0.1, 0.1 + 0.01 * i as f64]).collect();
        let p = probs(&rows);
        let rc = fit_rank_calibration(&p, &[0; 20], 0.1).unwrap();
        assert_eq!(rc.r_star, 1);
        // ⌈21·0.9⌉ = 19 nodes must be covered, so the 19th largest top probability is the cutoff
        assert!((rc.mu_star - 0.62).abs() < 1e-12);
        let sets = build_sets(&p, &(0..20).collect::<Vec<_>>(), &Calibration::Rank(rc), BuildOptions::default()).unwrap();
        assert_eq!((0..20).filter(|&i| sets.size(i) == 1).count(), 19);
        assert_eq!(sets.size(19), 0);
    }

    #[test]
    fn rank_fit_four_node_example() {
        let cases = [(1, 0.30), (2, 0.25), (2, 0.20), (1, 0.15)];
        let (rows, labels): (Vec<_>, Vec<_>) = cases.iter().map(|&(r, m)| row_with(r, m)).unzip();
        let p = probs(&rows);
        let rc = fit_rank_calibration(&p, &labels, 0.25).unwrap();
        assert_eq!(rc.r_star, 2);
        // target ⌈5·0.75⌉ = 4, two nodes already covered by top-1, both rank-2 nodes needed
        assert_eq!(rc.mu_star, 0.20);
        assert_eq!(rc.p, 0.75);

        let cal = Calibration::Rank(rc);
        let test = probs(&[vec![0.70, 0.27, 0.03], vec![0.75, 0.22, 0.03], vec![0.80, 0.19, 0.01]]);
        let sets = build_sets(&test, &[0, 1, 2], &cal, BuildOptions::default()).unwrap();
        assert_eq!(sets.members(0), vec![0, 1]);
        assert_eq!(sets.members(1), vec![0, 1]);
        assert_eq!(sets.members(2), vec![0]);

        let replay = build_sets(&p, &[0, 1, 2, 3], &cal, BuildOptions::default()).unwrap();
        assert_eq!(coverage(&replay, &labels).unwrap(), 1.0);
    }

    #[test]
    fn cutoff_over_all_nodes_can_lose_coverage() {
        // μ* as the ⌈np⌉-th largest over all calibration nodes (p from the shortfall
        // formula) lands on a rank-1 node here and the replay drops to 0.5 < 1 − α.
        let cases = [(1, 0.30), (2, 0.15), (2, 0.20), (1, 0.25)];
        let (rows, labels): (Vec<_>, Vec<_>) = cases.iter().map(|&(r, m)| row_with(r, m)).unzip();
        let n = 4.0f64;
        let p_shortfall = ((5.0f64 * 0.75).ceil() - 2.0) / n;
        let mut all: Vec<f64> = cases.iter().map(|c| c.1).collect();
        all.sort_by(|a, b| b.total_cmp(a));
        let naive_mu = all[(n * p_shortfall).ceil() as usize - 1];
        let naive = Calibration::Rank(RankCalibration {
            r_star: 2,
            mu_star: naive_mu,
            p: p_shortfall,
            q_score: 0.0,
            n_calib: 4,
            alpha: 0.25,
        });
        let p = probs(&rows);
        let ids = [0, 1, 2, 3];
        let replay = build_sets(&p, &ids, &naive, BuildOptions::default()).unwrap();
        assert_eq!(coverage(&replay, &labels).unwrap(), 0.5);

        let fitted = Calibration::Rank(fit_rank_calibration(&p, &labels, 0.25).unwrap());
        let replay = build_sets(&p, &ids, &fitted, BuildOptions::default()).unwrap();
        assert!(coverage(&replay, &labels).unwrap() >= 0.75);
    }

    #[test]
    fn set_construction_examples() {
        let p = probs(&[vec![0.6, 0.3, 0.1]]);
        let thr = Calibration::Thr {
            threshold: 0.25,
            alpha: 0.1,
        };
        assert_eq!(build_sets(&p, &[0], &thr, BuildOptions::default()).unwrap().members(0), vec![0, 1]);
        let p = probs(&[vec![0.5, 0.3, 0.2]]);
        let aps = Calibration::Aps {
            threshold: 0.85,
            alpha: 0.1,
        };
        assert_eq!(build_sets(&p, &[0], &aps, BuildOptions::default()).unwrap().members(0), vec![0, 1]);
    }

    #[test]
    fn empty_sets_and_force_top1() {
        let p = probs(&[vec![0.5, 0.3, 0.2]]);
        let aps = Calibration::Aps {
            threshold: 0.1,
            alpha: 0.1,
        };
        assert_eq!(build_sets(&p, &[0], &aps, BuildOptions::default()).unwrap().size(0), 0);
        let forced = BuildOptions {
            force_top1: true,
            ..BuildOptions::default()
        };
        assert_eq!(build_sets(&p, &[0], &aps, forced).unwrap().members(0), vec![0]);
        let rank = Calibration::Rank(RankCalibration {
            r_star: 1,
            mu_star: 0.9,
            p: 0.1,
            q_score: 0.5,
            n_calib: 10,
            alpha: 0.1,
        });
        assert_eq!(build_sets(&p, &[0], &rank, BuildOptions::default()).unwrap().size(0), 0);
    }

    #[test]
    fn metrics() {
        let all = batch(vec![vec![true, false], vec![false, true]]);
        assert_eq!(coverage(&all, &[0, 1]).unwrap(), 1.0);
        assert_eq!(coverage(&all, &[1, 0]).unwrap(), 0.0);
        let four = batch(vec![vec![true, false]; 4]);
        assert_eq!(coverage(&four, &[0, 0, 0, 1]).unwrap(), 0.75);
        assert_eq!(inefficiency(&four).unwrap(), 1.0);
        let sizes = batch(vec![
            vec![true, false, false],
            vec![true, true, false],
            vec![true, true, true],
        ]);
        assert_eq!(inefficiency(&sizes).unwrap(), 2.0);
        let empty = batch(vec![]);
        assert!(coverage(&empty, &[]).is_err());
        assert!(inefficiency(&empty).is_err());
    }

    #[test]
    fn seeded_tie_break_is_reproducible_and_varies() {
        let row = [0.25; 4];
        let a = descending_order(&row, TieBreak::Seeded(1), 3);
        assert_eq!(a, descending_order(&row, TieBreak::Seeded(1), 3));
        let distinct: std::collections::BTreeSet<Vec<usize>> =
            (0..20).map(|i| descending_order(&row, TieBreak::Seeded(1), i)).collect();
        assert!(distinct.len() > 1);
        assert_eq!(descending_order(&row, TieBreak::ClassIndex, 0), vec![0, 1, 2, 3]);
    }

    #[test]
    fn csv_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sets.csv");
        let b = PredictionSetBatch {
            node_ids: vec![7, 9],
            masks: vec![vec![true, true, false], vec![false, false, true]],
            alpha: 0.1,
        };
        b.write_csv(&path, Some(&[1, 0])).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "node_id,set_size,members,covered\n7,2,0;1,1\n9,1,2,0\n");
    }

    fn random_probs(rng: &mut ChaCha8Rng, n: usize, k: usize, temperature: f64) -> (ProbMatrix, Vec<usize>) {
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0) * temperature).collect();
            let m = logits.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let row: Vec<f64> = e.iter().map(|v| v / s).collect();
            // label drawn from the row itself
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = k - 1;
            for (c, &pv) in row.iter().enumerate() {
                acc += pv;
                if u < acc {
                    y = c;
                    break;
                }
            }
            rows.push(row);
            labels.push(y);
        }
        (ProbMatrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn exchangeable_coverage_over_random_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pool = 600;
        let (p, y) = random_probs(&mut rng, pool, 5, 1.5);
        for kind in ScoreKind::ALL {
            for alpha in [0.05, 0.1] {
                let mut total = 0.0;
                let splits = 100;
                for s in 0..splits {
                    let mut ids: Vec<usize> = (0..pool).collect();
                    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(1000 + s));
                    let (cal, ev) = ids.split_at(pool / 2);
                    let cal_y: Vec<usize> = cal.iter().map(|&i| y[i]).collect();
                    let ev_y: Vec<usize> = ev.iter().map(|&i| y[i]).collect();
                    let c = Calibration::fit(kind, &p.select(cal), &cal_y, alpha).unwrap();
                    let sets = build_sets(&p.select(ev), ev, &c, BuildOptions::default()).unwrap();
                    total += coverage(&sets, &ev_y).unwrap();
                }
                let mean = total / splits as f64;
                let se = (alpha * (1.0 - alpha) / pool as f64).sqrt();
                assert!((mean - (1.0 - alpha)).abs() <= 3.0 * se, "{kind} α={alpha}: {mean}");
            }
        }
    }

    proptest! {
        #[test]
        fn smaller_alpha_never_shrinks_sets(seed in any::<u64>(), n in 20usize..60, k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, y) = random_probs(&mut rng, n + 10, k, 2.0);
            let cal: Vec<usize> = (0..n).collect();
            let ev: Vec<usize> = (n..n + 10).collect();
            let cal_y: Vec<usize> = cal.iter().map(|&i| y[i]).collect();
            for kind in ScoreKind::ALL {
                let big = Calibration::fit(kind, &p.select(&cal), &cal_y, 0.3).unwrap();
                let small = Calibration::fit(kind, &p.select(&cal), &cal_y, 0.1).unwrap();
                let a = build_sets(&p.select(&ev), &ev, &big, BuildOptions::default()).unwrap();
                let b = build_sets(&p.select(&ev), &ev, &small, BuildOptions::default()).unwrap();
                for i in 0..ev.len() {
                    for c in 0..k {
                        prop_assert!(!a.contains(i, c) || b.contains(i, c), "{} row {} class {}", kind, i, c);
                    }
                }
            }
        }

        #[test]
        fn thr_and_aps_sets_are_upward_closed(seed in any::<u64>(), eta in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, _) = random_probs(&mut rng, 10, 5, 2.0);
            let ids: Vec<usize> = (0..10).collect();
            for cal in [Calibration::Thr { threshold: eta, alpha: 0.1 }, Calibration::Aps { threshold: eta, alpha: 0.1 }] {
                let sets = build_sets(&p, &ids, &cal, BuildOptions::default()).unwrap();
                for i in 0..10 {
                    let row = p.row(i);
                    for a in 0..5 {
                        for b in 0..5 {
                            if sets.contains(i, a) && row[b] > row[a] {
                                prop_assert!(sets.contains(i, b));
                            }
                        }
                    }
                }
            }
        }
    }
}
