//! Flat `key=value` experiment configuration with `dataset.`, `model.`,
//! `cp.` and `run.` sections. `#` starts a comment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rankcp::cp::ScoreKind;
use rankcp::graph::SbmSpec;
use rankcp::pipeline::{DatasetSource, ExperimentConfig};
use rankcp::smooth::SmoothConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{origin}:{line}: expected `key = value`")]
    Syntax { origin: String, line: usize },
    #[error("{origin}:{line}: unknown key `{key}`")]
    UnknownKey { origin: String, line: usize, key: String },
    #[error("{origin}:{line}: bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        origin: String,
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// SBM settings used when `dataset.kind = sbm` (and by `gen-synth`).
pub fn default_sbm() -> SbmSpec {
    SbmSpec {
        block_sizes: vec![250; 4],
        p_in: 0.03,
        p_out: 0.005,
        feature_dim: 4,
        feature_noise: 1.0,
    }
}

/// Experiment configuration plus the CLI-only alpha list for sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub experiment: ExperimentConfig,
    /// SBM parameters, kept even when the dataset comes from files.
    pub sbm: SbmSpec,
    pub sbm_seed: u64,
    pub sweep_alphas: Vec<f64>,
}

impl Default for Settings {
    fn default() -> Self {
        let sbm = default_sbm();
        Settings {
            experiment: ExperimentConfig::new(DatasetSource::Sbm { spec: sbm.clone(), seed: 0 }),
            sbm,
            sbm_seed: 0,
            sweep_alphas: vec![0.1, 0.15, 0.2, 0.25, 0.3],
        }
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| e.to_string()))
        .collect()
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| e.to_string())
}

/// Every key accepted in a config file, in the order they are written.
pub const KEYS: &[&str] = &[
    "dataset.kind",
    "dataset.features",
    "dataset.edges",
    "dataset.labels",
    "dataset.sbm.blocks",
    "dataset.sbm.p_in",
    "dataset.sbm.p_out",
    "dataset.sbm.feature_dim",
    "dataset.sbm.noise",
    "dataset.sbm.seed",
    "dataset.train",
    "dataset.valid",
    "dataset.rest",
    "dataset.calib_fraction",
    "dataset.withhold_fraction",
    "model.lr",
    "model.momentum",
    "model.epochs",
    "model.hidden",
    "model.layers",
    "model.cor_lr",
    "model.cor_momentum",
    "model.cor_epochs",
    "model.cor_hidden",
    "model.cor_layers",
    "model.cor_max_fold",
    "cp.score",
    "cp.alpha",
    "cp.tau",
    "cp.lambda",
    "cp.kappa",
    "cp.force_top1",
    "run.seed",
    "run.runs",
    "run.splits",
    "run.alphas",
];

impl Settings {
    /// Sets one key; values are range-checked where the key has a range.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), SetError> {
        let e = &mut self.experiment;
        let v = value.trim();
        let r: std::result::Result<(), String> = (|| {
            match key {
                "dataset.kind" => match v {
                    "sbm" => e.dataset = DatasetSource::Sbm { spec: self.sbm.clone(), seed: self.sbm_seed },
                    "files" => {
                        if !matches!(e.dataset, DatasetSource::Files { .. }) {
                            e.dataset = DatasetSource::Files {
                                features: PathBuf::new(),
                                edges: PathBuf::new(),
                                labels: PathBuf::new(),
                            }
                        }
                    }
                    _ => return Err("expected sbm or files".into()),
                },
                "dataset.features" | "dataset.edges" | "dataset.labels" => {
                    let DatasetSource::Files { features, edges, labels } = &mut e.dataset else {
                        return Err("set dataset.kind = files first".into());
                    };
                    let slot = match key {
                        "dataset.features" => features,
                        "dataset.edges" => edges,
                        _ => labels,
                    };
                    *slot = PathBuf::from(v);
                }
                "dataset.sbm.blocks" => self.sbm.block_sizes = parse_list(v)?,
                "dataset.sbm.p_in" => self.sbm.p_in = parse_num(v)?,
                "dataset.sbm.p_out" => self.sbm.p_out = parse_num(v)?,
                "dataset.sbm.feature_dim" => self.sbm.feature_dim = parse_num(v)?,
                "dataset.sbm.noise" => self.sbm.feature_noise = parse_num(v)?,
                "dataset.sbm.seed" => self.sbm_seed = parse_num(v)?,
                "dataset.train" => e.ratios.train = parse_num(v)?,
                "dataset.valid" => e.ratios.valid = parse_num(v)?,
                "dataset.rest" => e.ratios.rest = parse_num(v)?,
                "dataset.calib_fraction" => e.calib_fraction = parse_num(v)?,
                "dataset.withhold_fraction" => e.withhold_fraction = parse_num(v)?,
                "model.lr" => e.base.lr = parse_num(v)?,
                "model.momentum" => e.base.momentum = parse_num(v)?,
                "model.epochs" => e.base.epochs = parse_num(v)?,
                "model.hidden" => e.base.hidden = parse_num(v)?,
                "model.layers" => e.base.n_layers = parse_num(v)?,
                "model.cor_lr" => e.correction.lr = parse_num(v)?,
                "model.cor_momentum" => e.correction.momentum = parse_num(v)?,
                "model.cor_epochs" => e.correction.epochs = parse_num(v)?,
                "model.cor_hidden" => e.correction.hidden = parse_num(v)?,
                "model.cor_layers" => e.correction.n_layers = parse_num(v)?,
                "model.cor_max_fold" => {
                    e.correction.max_fold = if v == "none" { None } else { Some(parse_num(v)?) }
                }
                "cp.score" => e.score = v.parse::<ScoreKind>()?,
                "cp.alpha" => e.smooth.alpha = parse_num(v)?,
                "cp.tau" => e.smooth.tau = parse_num(v)?,
                "cp.lambda" => e.smooth.lambda = parse_num(v)?,
                "cp.kappa" => e.smooth.kappa = parse_num(v)?,
                "cp.force_top1" => e.build.force_top1 = parse_bool(v)?,
                "run.seed" => e.seed = parse_num(v)?,
                "run.runs" => e.n_runs = parse_num(v)?,
                "run.splits" => e.n_splits = parse_num(v)?,
                "run.alphas" => self.sweep_alphas = parse_list(v)?,
                _ => return Err(String::new()),
            }
            Ok(())
        })();
        match r {
            Ok(()) => {
                if key.starts_with("dataset.sbm.") {
                    if let DatasetSource::Sbm { spec, seed } = &mut self.experiment.dataset {
                        *spec = self.sbm.clone();
                        *seed = self.sbm_seed;
                    }
                }
                self.check_range(key).map_err(SetError::Value)
            }
            Err(reason) if reason.is_empty() && !KEYS.contains(&key) => Err(SetError::UnknownKey),
            Err(reason) => Err(SetError::Value(reason)),
        }
    }

    fn check_range(&self, key: &str) -> std::result::Result<(), String> {
        let e = &self.experiment;
        let unit = |x: f64| x > 0.0 && x < 1.0;
        let ok = match key {
            "cp.alpha" => unit(e.smooth.alpha),
            "cp.tau" => (rankcp::smooth::TAU_MIN..=rankcp::smooth::TAU_MAX).contains(&e.smooth.tau),
            "cp.lambda" => e.smooth.lambda >= 0.0 && e.smooth.lambda.is_finite(),
            "cp.kappa" => e.smooth.kappa == 0.0 || e.smooth.kappa == 1.0,
            "dataset.calib_fraction" => unit(e.calib_fraction),
            "dataset.withhold_fraction" => unit(e.withhold_fraction),
            "dataset.train" => unit(e.ratios.train),
            "dataset.valid" => unit(e.ratios.valid),
            "dataset.rest" => unit(e.ratios.rest),
            "dataset.sbm.p_in" => (0.0..=1.0).contains(&self.sbm.p_in),
            "dataset.sbm.p_out" => (0.0..=1.0).contains(&self.sbm.p_out),
            "run.runs" => e.n_runs >= 1,
            "run.splits" => e.n_splits >= 1,
            "run.alphas" => !self.sweep_alphas.is_empty() && self.sweep_alphas.iter().all(|&a| unit(a)),
            "model.lr" => e.base.lr > 0.0,
            "model.cor_lr" => e.correction.lr > 0.0,
            "model.layers" => e.base.n_layers >= 1,
            "model.cor_layers" => e.correction.n_layers >= 1,
            _ => true,
        };
        let range = match key {
            "cp.tau" => "[0.001, 10]",
            "cp.kappa" => "{0, 1}",
            "cp.lambda" => "[0, inf)",
            "dataset.sbm.p_in" | "dataset.sbm.p_out" => "[0, 1]",
            "run.runs" | "run.splits" | "model.layers" | "model.cor_layers" => "at least 1",
            "model.lr" | "model.cor_lr" => "(0, inf)",
            "run.alphas" => "a non-empty list within (0, 1)",
            _ => "(0, 1)",
        };
        if ok {
            Ok(())
        } else {
            Err(format!("must lie in {range}"))
        }
    }

    /// Applies `key = value` lines; `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: origin.to_string(),
                line: i + 1,
            })?;
            self.apply_pair(key.trim(), value.trim(), origin, i + 1)?;
        }
        Ok(())
    }

    pub fn apply_pair(&mut self, key: &str, value: &str, origin: &str, line: usize) -> Result<()> {
        self.set(key, value).map_err(|e| match e {
            SetError::UnknownKey => ConfigError::UnknownKey {
                origin: origin.to_string(),
                line,
                key: key.to_string(),
            },
            SetError::Value(reason) => ConfigError::BadValue {
                origin: origin.to_string(),
                line,
                key: key.to_string(),
                value: value.to_string(),
                reason,
            },
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut s = Settings::default();
        s.apply_text(&text, &path.display().to_string())?;
        Ok(s)
    }

    /// Whole-config checks that single keys cannot express.
    pub fn validate(&self) -> Result<()> {
        let r = &self.experiment.ratios;
        if (r.train + r.valid + r.rest - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "dataset.train + dataset.valid + dataset.rest must equal 1, got {}",
                r.train + r.valid + r.rest
            )));
        }
        if let DatasetSource::Files { features, edges, labels } = &self.experiment.dataset {
            for (k, p) in [("dataset.features", features), ("dataset.edges", edges), ("dataset.labels", labels)] {
                if p.as_os_str().is_empty() {
                    return Err(ConfigError::Invalid(format!("{k} is required when dataset.kind = files")));
                }
            }
        }
        SmoothConfig::validate(&self.experiment.smooth).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.experiment.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Full configuration as `key = value` lines, readable by [`Settings::apply_text`].
    pub fn render(&self) -> String {
        let e = &self.experiment;
        let mut out = String::new();
        let list = |v: &[f64]| v.iter().map(|a| format!("{a:?}")).collect::<Vec<_>>().join(",");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &e.dataset {
            DatasetSource::Sbm { .. } => put("dataset.kind", "sbm".into()),
            DatasetSource::Files { features, edges, labels } => {
                put("dataset.kind", "files".into());
                put("dataset.features", features.display().to_string());
                put("dataset.edges", edges.display().to_string());
                put("dataset.labels", labels.display().to_string());
            }
        }
        let blocks: Vec<String> = self.sbm.block_sizes.iter().map(usize::to_string).collect();
        put("dataset.sbm.blocks", blocks.join(","));
        put("dataset.sbm.p_in", format!("{:?}", self.sbm.p_in));
        put("dataset.sbm.p_out", format!("{:?}", self.sbm.p_out));
        put("dataset.sbm.feature_dim", self.sbm.feature_dim.to_string());
        put("dataset.sbm.noise", format!("{:?}", self.sbm.feature_noise));
        put("dataset.sbm.seed", self.sbm_seed.to_string());
        put("dataset.train", format!("{:?}", e.ratios.train));
        put("dataset.valid", format!("{:?}", e.ratios.valid));
        put("dataset.rest", format!("{:?}", e.ratios.rest));
        put("dataset.calib_fraction", format!("{:?}", e.calib_fraction));
        put("dataset.withhold_fraction", format!("{:?}", e.withhold_fraction));
        put("model.lr", format!("{:?}", e.base.lr));
        put("model.momentum", format!("{:?}", e.base.momentum));
        put("model.epochs", e.base.epochs.to_string());
        put("model.hidden", e.base.hidden.to_string());
        put("model.layers", e.base.n_layers.to_string());
        put("model.cor_lr", format!("{:?}", e.correction.lr));
        put("model.cor_momentum", format!("{:?}", e.correction.momentum));
        put("model.cor_epochs", e.correction.epochs.to_string());
        put("model.cor_hidden", e.correction.hidden.to_string());
        put("model.cor_layers", e.correction.n_layers.to_string());
        put(
            "model.cor_max_fold",
            e.correction.max_fold.map_or("none".into(), |m| m.to_string()),
        );
        put("cp.score", e.score.to_string());
        put("cp.alpha", format!("{:?}", e.smooth.alpha));
        put("cp.tau", format!("{:?}", e.smooth.tau));
        put("cp.lambda", format!("{:?}", e.smooth.lambda));
        put("cp.kappa", format!("{:?}", e.smooth.kappa));
        put("cp.force_top1", e.build.force_top1.to_string());
        put("run.seed", e.seed.to_string());
        put("run.runs", e.n_runs.to_string());
        put("run.splits", e.n_splits.to_string());
        put("run.alphas", list(&self.sweep_alphas));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SetError {
    UnknownKey,
    Value(String),
}

/// Command-line overrides; each maps to exactly one config key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub kappa: Option<f64>,
    pub score: Option<ScoreKind>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub splits: Option<usize>,
}

impl Overrides {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if let Some(v) = self.alpha {
            out.push(("cp.alpha", format!("{v:?}")));
        }
        if let Some(v) = self.tau {
            out.push(("cp.tau", format!("{v:?}")));
        }
        if let Some(v) = self.lambda {
            out.push(("cp.lambda", format!("{v:?}")));
        }
        if let Some(v) = self.kappa {
            out.push(("cp.kappa", format!("{v:?}")));
        }
        if let Some(v) = self.score {
            out.push(("cp.score", v.to_string()));
        }
        if let Some(v) = self.seed {
            out.push(("run.seed", v.to_string()));
        }
        if let Some(v) = self.runs {
            out.push(("run.runs", v.to_string()));
        }
        if let Some(v) = self.splits {
            out.push(("run.splits", v.to_string()));
        }
        out
    }
}

/// File values (or defaults), then `KEY=VALUE` assignments, then flag
/// overrides, validated as a whole.
pub fn parse_config(file: Option<&Path>, sets: &[String], overrides: &Overrides) -> Result<Settings> {
    let mut s = match file {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    for item in sets {
        let (key, value) = item.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: format!("--set {item}"),
            line: 0,
        })?;
        s.apply_pair(key.trim(), value.trim(), "--set", 0)?;
    }
    for (key, value) in overrides.pairs() {
        let flag = format!("--{}", key.rsplit('.').next().unwrap_or(key));
        s.apply_pair(key, &value, &flag, 0)?;
    }
    s.validate()?;
    Ok(s)
}
