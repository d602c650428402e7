//! Graphs, dataset files, adjacency normalization, node splits and
//! stochastic-block-model generation.
//!
//! File dialect (all node ids 0-based and dense):
//!
//! * features: header `node_features,d=<d>`, then one row of `d` reals per node
//! * edges: `src,dst` integer pairs, `#` starts a comment
//! * labels: header `labels,k=<K>`, then one class id per node

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Matrix, SparseMatrix};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}:{line}: node id {node} out of range for {n_nodes} nodes")]
    NodeOutOfRange {
        path: PathBuf,
        line: u64,
        node: usize,
        n_nodes: usize,
    },
    #[error("{path}:{line}: label {label} not below declared class count {n_classes}")]
    LabelOutOfRange {
        path: PathBuf,
        line: u64,
        label: usize,
        n_classes: usize,
    },
    #[error("feature file has {features} rows but label file has {labels}")]
    RowCountMismatch { features: usize, labels: usize },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Undirected attributed graph with one class label per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Graph {
    /// Validates and canonicalizes: edges become sorted `(lo, hi)` pairs,
    /// duplicates and reversed duplicates collapse, self-loops are dropped.
    pub fn new(
        features: Matrix,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let n_nodes = features.rows();
        if labels.len() != n_nodes {
            return Err(GraphError::RowCountMismatch {
                features: n_nodes,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(GraphError::Invalid(format!(
                "label {bad} not below class count {n_classes}"
            )));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n_nodes || v >= n_nodes {
                return Err(GraphError::Invalid(format!(
                    "edge ({u},{v}) out of range for {n_nodes} nodes"
                )));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        Ok(Self {
            n_nodes,
            edges: set.into_iter().collect(),
            features,
            labels,
            n_classes,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Degrees in `A + I`.
    fn self_loop_degrees(&self) -> Vec<f64> {
        let mut deg = vec![1.0; self.n_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1.0;
            deg[v] += 1.0;
        }
        deg
    }

    fn normalized_triplets(&self) -> Vec<(usize, usize, f64)> {
        let inv_sqrt: Vec<f64> = self
            .self_loop_degrees()
            .into_iter()
            .map(|d| 1.0 / d.sqrt())
            .collect();
        let mut t = Vec::with_capacity(self.n_nodes + 2 * self.edges.len());
        for (i, &s) in inv_sqrt.iter().enumerate() {
            t.push((i, i, s * s));
        }
        for &(u, v) in &self.edges {
            let w = inv_sqrt[u] * inv_sqrt[v];
            t.push((u, v, w));
            t.push((v, u, w));
        }
        t
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` as a dense matrix.
pub fn normalized_adjacency(g: &Graph) -> Matrix {
    let mut m = Matrix::zeros(g.n_nodes, g.n_nodes);
    for (r, c, w) in g.normalized_triplets() {
        m.set(r, c, w);
    }
    m
}

/// Same operator as [`normalized_adjacency`], stored sparsely for propagation.
pub fn normalized_adjacency_sparse(g: &Graph) -> SparseMatrix {
    SparseMatrix::from_triplets(g.n_nodes, g.n_nodes, g.normalized_triplets())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> GraphError {
    GraphError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads `<name>,<key>=<value>` and returns the value.
fn header_value(path: &Path, record: &csv::StringRecord, name: &str, key: &str) -> Result<usize> {
    let line = record.position().map_or(1, |p| p.line());
    let ok = record.len() == 2 && &record[0] == name;
    let value = record
        .get(1)
        .and_then(|f| f.strip_prefix(key))
        .and_then(|f| f.strip_prefix('='))
        .and_then(|v| v.parse().ok());
    match (ok, value) {
        (true, Some(v)) => Ok(v),
        _ => Err(parse_err(
            path,
            line,
            format!("expected header `{name},{key}=<n>`"),
        )),
    }
}

fn read_features(path: &Path) -> Result<Matrix> {
    let mut rdr = reader(path)?;
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let d = header_value(path, &header, "node_features", "d")?;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in records {
        let rec = rec.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != d {
            return Err(parse_err(path, line, format!("expected {d} columns, got {}", rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("not a number: `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, "non-finite feature"));
            }
            data.push(v);
        }
        rows += 1;
    }
    Matrix::new(rows, d, data).map_err(|e| GraphError::Invalid(e.to_string()))
}

fn read_labels(path: &Path) -> Result<(Vec<usize>, usize)> {
    let mut rdr = reader(path)?;
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let k = header_value(path, &header, "labels", "k")?;
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 1 {
            return Err(parse_err(path, line, "expected one label per row"));
        }
        let label: usize = rec[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("not a class id: `{}`", &rec[0])))?;
        if label >= k {
            return Err(GraphError::LabelOutOfRange {
                path: path.to_path_buf(),
                line,
                label,
                n_classes: k,
            });
        }
        labels.push(label);
    }
    Ok((labels, k))
}

fn read_edges(path: &Path, n_nodes: usize) -> Result<Vec<(usize, usize)>> {
    let mut rdr = reader(path)?;
    let mut edges = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if i == 0 && rec.len() == 2 && &rec[0] == "src" && &rec[1] == "dst" {
            continue;
        }
        if rec.len() != 2 {
            return Err(parse_err(path, line, "expected `src,dst`"));
        }
        let mut ends = [0usize; 2];
        for (slot, field) in ends.iter_mut().zip(rec.iter()) {
            *slot = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("not a node id: `{field}`")))?;
            if *slot >= n_nodes {
                return Err(GraphError::NodeOutOfRange {
                    path: path.to_path_buf(),
                    line,
                    node: *slot,
                    n_nodes,
                });
            }
        }
        edges.push((ends[0], ends[1]));
    }
    Ok(edges)
}

/// Loads a graph from the three-file CSV dialect.
pub fn load_dataset(features: &Path, edges: &Path, labels: &Path) -> Result<Graph> {
    let x = read_features(features)?;
    let (y, k) = read_labels(labels)?;
    if x.rows() != y.len() {
        return Err(GraphError::RowCountMismatch {
            features: x.rows(),
            labels: y.len(),
        });
    }
    let e = read_edges(edges, x.rows())?;
    Graph::new(x, e, y, k)
}

/// Writes the three dataset files; [`load_dataset`] reads them back identically.
pub fn write_dataset(g: &Graph, features: &Path, edges: &Path, labels: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(features).map_err(io_err(features))?);
    write_matrix_rows(&mut f, &format!("node_features,d={}", g.feature_dim()), &g.features)
        .map_err(io_err(features))?;

    let mut e = BufWriter::new(File::create(edges).map_err(io_err(edges))?);
    (|| -> std::io::Result<()> {
        writeln!(e, "# undirected edges, {} nodes", g.n_nodes)?;
        for &(u, v) in &g.edges {
            writeln!(e, "{u},{v}")?;
        }
        e.flush()
    })()
    .map_err(io_err(edges))?;

    let mut l = BufWriter::new(File::create(labels).map_err(io_err(labels))?);
    (|| -> std::io::Result<()> {
        writeln!(l, "labels,k={}", g.n_classes)?;
        for y in &g.labels {
            writeln!(l, "{y}")?;
        }
        l.flush()
    })()
    .map_err(io_err(labels))
}

/// Writes a header line followed by the matrix rows (shortest round-trip float form).
pub(crate) fn write_matrix_rows(w: &mut impl Write, header: &str, m: &Matrix) -> std::io::Result<()> {
    writeln!(w, "{header}")?;
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()
}

/// Train/valid/calib/test partition of the node ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub calib: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fractions of nodes for train, validation and the remaining (calib + test) pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub rest: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.2,
            valid: 0.1,
            rest: 0.7,
        }
    }
}

/// `floor(x)` tolerant of representation error such as `0.29 * 100 = 28.999…`.
pub(crate) fn floor_count(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// Random partition of all nodes. Train and valid take `floor(ratio·n)`
/// nodes; calib takes `floor(calib_fraction·rest)` of the remainder and the
/// test set gets what is left, so calib and test come from one random pool.
pub fn split_nodes(
    n_nodes: usize,
    ratios: SplitRatios,
    calib_fraction: f64,
    seed: u64,
) -> Result<NodeSplit> {
    let r = [ratios.train, ratios.valid, ratios.rest];
    if r.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(GraphError::InvalidSplit(format!(
            "ratios must be positive, got {r:?}"
        )));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(GraphError::InvalidSplit(format!("ratios must sum to 1, got {r:?}")));
    }
    if !(calib_fraction > 0.0 && calib_fraction < 1.0) {
        return Err(GraphError::InvalidSplit(format!(
            "calib fraction must lie in (0,1), got {calib_fraction}"
        )));
    }
    let n_train = floor_count(ratios.train * n_nodes as f64);
    let n_valid = floor_count(ratios.valid * n_nodes as f64);
    let rest = n_nodes.saturating_sub(n_train + n_valid);
    let n_calib = floor_count(calib_fraction * rest as f64);
    let n_test = rest - n_calib;
    for (name, size) in [("train", n_train), ("valid", n_valid), ("calib", n_calib), ("test", n_test)] {
        if size == 0 {
            return Err(GraphError::InvalidSplit(format!(
                "{name} set would be empty for {n_nodes} nodes"
            )));
        }
    }
    let mut ids: Vec<usize> = (0..n_nodes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest_ids = ids.split_off(n_train);
    let mut after_valid = rest_ids.split_off(n_valid);
    let test = after_valid.split_off(n_calib);
    Ok(NodeSplit {
        train: ids,
        valid: rest_ids,
        calib: after_valid,
        test,
    })
}

/// Stochastic block model settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmSpec {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
}

/// Samples an SBM graph. Node features are the one-hot block indicator
/// (block `b` lights coordinate `b mod feature_dim`) plus Gaussian noise.
pub fn generate_sbm(spec: &SbmSpec, seed: u64) -> Result<Graph> {
    let SbmSpec {
        block_sizes,
        p_in,
        p_out,
        feature_dim,
        feature_noise,
    } = spec;
    if block_sizes.is_empty() || block_sizes.contains(&0) {
        return Err(GraphError::Invalid("block sizes must be non-empty and positive".into()));
    }
    for p in [p_in, p_out] {
        if !(0.0..=1.0).contains(p) {
            return Err(GraphError::Invalid(format!("edge probability {p} outside [0,1]")));
        }
    }
    if *feature_dim == 0 || !(feature_noise.is_finite() && *feature_noise >= 0.0) {
        return Err(GraphError::Invalid(
            "feature_dim must be positive and feature_noise finite and non-negative".into(),
        ));
    }
    let labels: Vec<usize> = block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { *p_in } else { *p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let noise = Normal::new(0.0, *feature_noise).expect("validated noise scale");
    let mut x = Matrix::zeros(n, *feature_dim);
    for (i, &y) in labels.iter().enumerate() {
        for (c, v) in x.row_mut(i).iter_mut().enumerate() {
            let centroid = if c == y % feature_dim { 1.0 } else { 0.0 };
            *v = centroid + noise.sample(&mut rng);
        }
    }
    Graph::new(x, edges, labels, block_sizes.len())
}
