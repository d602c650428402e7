//! Two-stage message-passing classifiers.
//!
//! Every layer computes `Â · H · W` with the symmetric-normalized adjacency
//! `Â`; inner layers apply relu and the last applies a row softmax. The
//! correction model reads the frozen base probabilities `μ` as node
//! features and additionally carries a skip weight on `ln μ` in its final
//! logits, so `skip = I` with a near-zero last layer reproduces `μ`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{normalized_adjacency_sparse, write_matrix_rows, Graph, NodeSplit};
use crate::tensor::{Matrix, NodeId, SparseMatrix, Tape, TensorError};

#[derive(Debug, Error)]
pub enum GcnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter shapes do not compose: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("probability rows must sum to 1: row {row} sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, GcnError>;

/// Row-stochastic `n × K` class-probability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        for r in 0..m.rows() {
            let sum: f64 = m.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-9 || m.row(r).iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(GcnError::NotStochastic { row: r, sum });
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn n_rows(&self) -> usize {
        self.0.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.cols()
    }

    pub fn select(&self, nodes: &[usize]) -> ProbMatrix {
        ProbMatrix(self.0.select_rows(nodes))
    }

    pub fn argmax(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        best
    }

    /// Fraction of `nodes` whose argmax equals the label.
    pub fn accuracy(&self, nodes: &[usize], labels: &[usize]) -> f64 {
        if nodes.is_empty() {
            return 0.0;
        }
        let hits = nodes.iter().filter(|&&i| self.argmax(i) == labels[i]).count();
        hits as f64 / nodes.len() as f64
    }
}

/// Layer weights of a message-passing classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub layer_weights: Vec<Matrix>,
    /// Final-logit weight on `ln μ`; present only for correction models.
    pub skip: Option<Matrix>,
    pub hidden_dim: usize,
    pub n_layers: usize,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Matrix {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Matrix::new(fan_in, fan_out, data).expect("sized by construction")
}

fn layer_dims(in_dim: usize, hidden: usize, out_dim: usize, n_layers: usize) -> Vec<(usize, usize)> {
    (0..n_layers)
        .map(|l| {
            let i = if l == 0 { in_dim } else { hidden };
            let o = if l + 1 == n_layers { out_dim } else { hidden };
            (i, o)
        })
        .collect()
}

impl GcnParams {
    /// Glorot-uniform initialization.
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, n_layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer_weights = layer_dims(in_dim, hidden, out_dim, n_layers.max(1))
            .into_iter()
            .map(|(i, o)| glorot(&mut rng, i, o, 1.0))
            .collect();
        Self {
            layer_weights,
            skip: None,
            hidden_dim: hidden,
            n_layers: n_layers.max(1),
        }
    }

    /// Near-identity correction model: `skip = I`, last layer scaled by 1e-2.
    pub fn init_correction(n_classes: usize, hidden: usize, n_layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = layer_dims(n_classes, hidden, n_classes, n_layers.max(1));
        let last = dims.len() - 1;
        let layer_weights = dims
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| glorot(&mut rng, i, o, if l == last { 1e-2 } else { 1.0 }))
            .collect();
        Self {
            layer_weights,
            skip: Some(Matrix::identity(n_classes)),
            hidden_dim: hidden,
            n_layers: n_layers.max(1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_weights.first().map_or(0, Matrix::rows)
    }

    pub fn output_dim(&self) -> usize {
        self.layer_weights.last().map_or(0, Matrix::cols)
    }

    fn validate(&self, in_dim: usize, n_classes: usize) -> Result<()> {
        if self.layer_weights.is_empty() {
            return Err(GcnError::Shape("no layers".into()));
        }
        if self.input_dim() != in_dim {
            return Err(GcnError::Shape(format!(
                "first layer expects {} inputs, data has {in_dim}",
                self.input_dim()
            )));
        }
        for (l, pair) in self.layer_weights.windows(2).enumerate() {
            if pair[0].cols() != pair[1].rows() {
                return Err(GcnError::Shape(format!(
                    "layer {l} outputs {} but layer {} expects {}",
                    pair[0].cols(),
                    l + 1,
                    pair[1].rows()
                )));
            }
        }
        if self.output_dim() != n_classes {
            return Err(GcnError::Shape(format!(
                "last layer outputs {} but there are {n_classes} classes",
                self.output_dim()
            )));
        }
        if let Some(s) = &self.skip {
            if s.shape() != (n_classes, n_classes) {
                return Err(GcnError::Shape(format!("skip weight is {:?}", s.shape())));
            }
        }
        Ok(())
    }

    /// All parameter matrices in a fixed order (layers, then skip).
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layer_weights.iter().chain(self.skip.as_ref()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layer_weights.iter_mut().chain(self.skip.as_mut()).collect()
    }
}

/// Graph operator shared by every forward pass on one graph.
#[derive(Debug, Clone)]
pub struct Propagator {
    adjacency: Arc<SparseMatrix>,
}

impl Propagator {
    pub fn new(g: &Graph) -> Self {
        Self {
            adjacency: Arc::new(normalized_adjacency_sparse(g)),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.shape().0
    }
}

/// Tape handles produced by a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub probs: NodeId,
    /// Parameter nodes in the order of [`GcnParams::tensors`].
    pub params: Vec<NodeId>,
}

fn forward_layers(
    tape: &mut Tape,
    prop: &Propagator,
    input: NodeId,
    params: &GcnParams,
    skip_input: Option<NodeId>,
) -> Result<Forward> {
    let mut nodes = Vec::with_capacity(params.layer_weights.len() + 1);
    let mut h = input;
    let last = params.layer_weights.len() - 1;
    for (l, w) in params.layer_weights.iter().enumerate() {
        let w = tape.param(w.clone());
        nodes.push(w);
        let hw = tape.matmul(h, w)?;
        let z = tape.propagate(&prop.adjacency, hw)?;
        h = if l == last { z } else { tape.relu(z)? };
    }
    if let (Some(skip), Some(log_mu)) = (&params.skip, skip_input) {
        let s = tape.param(skip.clone());
        nodes.push(s);
        let direct = tape.matmul(log_mu, s)?;
        h = tape.add(h, direct)?;
    }
    let probs = tape.row_softmax(h)?;
    Ok(Forward {
        probs,
        params: nodes,
    })
}

/// Base model `GNN_base` on the graph features.
pub fn forward_base(tape: &mut Tape, g: &Graph, prop: &Propagator, params: &GcnParams) -> Result<Forward> {
    params.validate(g.feature_dim(), g.n_classes())?;
    let x = tape.constant(g.features().clone());
    forward_layers(tape, prop, x, params, None)
}

/// Correction model `GNN_cor` reading the frozen base output `mu`.
pub fn forward_correction(
    tape: &mut Tape,
    mu: &ProbMatrix,
    prop: &Propagator,
    params: &GcnParams,
) -> Result<Forward> {
    params.validate(mu.n_classes(), mu.n_classes())?;
    if mu.n_rows() != prop.n_nodes() {
        return Err(GcnError::Shape(format!(
            "{} probability rows for {} nodes",
            mu.n_rows(),
            prop.n_nodes()
        )));
    }
    let x = tape.constant(mu.matrix().clone());
    let skip_input = if params.skip.is_some() {
        let log_mu = tape.ln(x)?;
        Some(log_mu)
    } else {
        None
    };
    forward_layers(tape, prop, x, params, skip_input)
}

fn read_probs(tape: &Tape, fwd: &Forward) -> ProbMatrix {
    ProbMatrix(tape.value(fwd.probs).clone())
}

/// Inference-only base forward.
pub fn predict_base(g: &Graph, prop: &Propagator, params: &GcnParams) -> Result<ProbMatrix> {
    let mut tape = Tape::new();
    let fwd = forward_base(&mut tape, g, prop, params)?;
    Ok(read_probs(&tape, &fwd))
}

/// Inference-only correction forward.
pub fn predict_correction(mu: &ProbMatrix, prop: &Propagator, params: &GcnParams) -> Result<ProbMatrix> {
    let mut tape = Tape::new();
    let fwd = forward_correction(&mut tape, mu, prop, params)?;
    Ok(read_probs(&tape, &fwd))
}

/// Mean multiclass cross-entropy `−ln μ_y` over the listed rows.
pub fn cross_entropy(tape: &mut Tape, probs: NodeId, rows: &[usize], labels: &[usize]) -> Result<NodeId> {
    if rows.is_empty() {
        return Err(GcnError::EmptySet("cross-entropy"));
    }
    let k = tape.value(probs).cols();
    let mut onehot = Matrix::zeros(rows.len(), k);
    for (r, &i) in rows.iter().enumerate() {
        onehot.set(r, labels[i], 1.0);
    }
    let picked = tape.gather_rows(probs, rows)?;
    let logp = tape.ln(picked)?;
    let mask = tape.constant(onehot);
    let masked = tape.mul(logp, mask)?;
    let total = tape.sum_all(masked)?;
    Ok(tape.scale(total, -1.0 / rows.len() as f64)?)
}

/// Heavy-ball SGD: `v ← m·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Matrix>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut GcnParams, grads: &[Matrix]) {
        let tensors = params.tensors_mut();
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        }
        for ((w, v), g) in tensors.into_iter().zip(&mut self.velocity).zip(grads) {
            for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *wv -= self.lr * *vv;
            }
        }
    }
}

/// Base training hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            epochs: 200,
            hidden: 64,
            n_layers: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: GcnParams,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Full-batch cross-entropy training on `split.train`; returns the
/// parameters with the best validation accuracy (earliest on ties).
pub fn train_base(g: &Graph, split: &NodeSplit, cfg: &TrainConfig) -> Result<TrainedModel> {
    if split.train.is_empty() {
        return Err(GcnError::EmptySet("train"));
    }
    if split.valid.is_empty() {
        return Err(GcnError::EmptySet("valid"));
    }
    let prop = Propagator::new(g);
    let mut params = GcnParams::init(g.feature_dim(), cfg.hidden, g.n_classes(), cfg.n_layers, cfg.seed);
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..=cfg.epochs {
        let mut tape = Tape::new();
        let fwd = forward_base(&mut tape, g, &prop, &params)?;
        let probs = read_probs(&tape, &fwd);
        let acc = probs.accuracy(&split.valid, g.labels());
        if acc > best.0 {
            best = (acc, epoch, params.clone());
        }
        if epoch == cfg.epochs {
            break;
        }
        let loss = cross_entropy(&mut tape, fwd.probs, &split.train, g.labels())?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(GcnError::Divergence {
                epoch,
                loss: loss_value,
            });
        }
        let grads = tape.backward(loss)?;
        let g_list: Vec<Matrix> = fwd
            .params
            .iter()
            .map(|&id| grads.get(id).cloned().expect("parameter gradient"))
            .collect();
        if g_list.iter().any(|m| !m.is_finite()) {
            return Err(GcnError::Divergence {
                epoch,
                loss: loss_value,
            });
        }
        opt.step(&mut params, &g_list);
        history.push(EpochStats {
            epoch,
            train_loss: loss_value,
            valid_accuracy: acc,
        });
    }
    Ok(TrainedModel {
        params: best.2,
        best_epoch: best.1,
        history,
    })
}

/// Writes a checkpoint: a `gcn_params` header, then one `matrix,rows=,cols=`
/// block per layer and an optional `skip` block, each followed by its rows.
pub fn save_params(path: &Path, params: &GcnParams) -> Result<()> {
    let io = |source| GcnError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        writeln!(
            w,
            "gcn_params,layers={},hidden={},skip={}",
            params.n_layers,
            params.hidden_dim,
            u8::from(params.skip.is_some())
        )?;
        for m in &params.layer_weights {
            write_matrix_rows(&mut w, &format!("matrix,rows={},cols={}", m.rows(), m.cols()), m)?;
        }
        if let Some(s) = &params.skip {
            write_matrix_rows(&mut w, &format!("skip,rows={},cols={}", s.rows(), s.cols()), s)?;
        }
        w.flush()
    })()
    .map_err(io)
}

fn kv(field: &str, key: &str) -> Option<usize> {
    field.strip_prefix(key)?.strip_prefix('=')?.parse().ok()
}

/// Reads a checkpoint written by [`save_params`].
pub fn load_params(path: &Path) -> Result<GcnParams> {
    let text = std::fs::read_to_string(path).map_err(|source| GcnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, message: &str| GcnError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty checkpoint"))?;
    let h: Vec<&str> = header.split(',').collect();
    let parsed = (h.len() == 4 && h[0] == "gcn_params")
        .then(|| (kv(h[1], "layers"), kv(h[2], "hidden"), kv(h[3], "skip")));
    let Some((Some(n_layers), Some(hidden_dim), Some(skip_flag))) = parsed else {
        return Err(bad(1, "expected `gcn_params,layers=<n>,hidden=<n>,skip=<0|1>`"));
    };
    let mut blocks: Vec<(String, Matrix)> = Vec::new();
    while let Some((ln, head)) = lines.next() {
        let f: Vec<&str> = head.split(',').collect();
        let shape = (f.len() == 3).then(|| (kv(f[1], "rows"), kv(f[2], "cols")));
        let Some((Some(rows), Some(cols))) = shape else {
            return Err(bad(ln, "expected `<matrix|skip>,rows=<r>,cols=<c>`"));
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, row) = lines.next().ok_or_else(|| bad(ln, "truncated matrix"))?;
            for v in row.split(',') {
                data.push(v.trim().parse::<f64>().map_err(|_| bad(ln, "not a number"))?);
            }
        }
        let m = Matrix::new(rows, cols, data).map_err(|e| bad(ln, &e.to_string()))?;
        blocks.push((f[0].to_string(), m));
    }
    let mut layer_weights = Vec::new();
    let mut skip = None;
    for (kind, m) in blocks {
        match kind.as_str() {
            "matrix" => layer_weights.push(m),
            "skip" => skip = Some(m),
            other => return Err(bad(0, &format!("unknown block `{other}`"))),
        }
    }
    if layer_weights.len() != n_layers || skip.is_some() != (skip_flag == 1) {
        return Err(bad(1, "header does not match the stored blocks"));
    }
    Ok(GcnParams {
        layer_weights,
        skip,
        hidden_dim,
        n_layers,
    })
}
