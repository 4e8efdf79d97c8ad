//! Run configuration as flat `key = value` text.
//!
//! Keys carry a section prefix (`model.hidden_dim = 32`). A `[model]` header
//! line sets the prefix for the keys that follow, so TOML-style files with
//! simple scalar values also parse. `#` starts a comment. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use crate::dataset::TrafficSeries;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::io::{read_to_string, write_atomic};
use crate::pca::projection::DEFAULT_THETA;
use crate::pca::ComponentSpec;
use crate::transfer::DEFAULT_ADAPTATION_FRACTION;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    /// Second period of the same sensors, used by component sweeps.
    pub shifted: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// `None` takes the value from the data.
    pub steps_per_day: Option<usize>,
    pub theta: f64,
    /// Explicit component count, overriding `theta`.
    pub k: Option<usize>,
    pub adaptation_fraction: f64,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            shifted: None,
            output_dir: PathBuf::from("out"),
            steps_per_day: None,
            theta: DEFAULT_THETA,
            k: None,
            adaptation_fraction: DEFAULT_ADAPTATION_FRACTION,
            experiment: ExperimentConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}, expected true or false"))),
    }
}

fn auto_or<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\''))) {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, found {line:?}", i + 1)))?;
            let key = key.trim();
            let full = if section.is_empty() || key.contains('.') {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            cfg.set(&full, unquote(value))
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {p:?} is not key=value")))?;
            self.set(k.trim(), unquote(v))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.experiment;
        match key {
            "data.path" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.shifted" => self.shifted = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.normalize_zeros" => e.normalize_zeros = parse_bool(key, value)?,
            "split.train" => e.split[0] = parse_num(key, value)?,
            "split.val" => e.split[1] = parse_num(key, value)?,
            "split.test" => e.split[2] = parse_num(key, value)?,
            "model.l1" => e.model.l1 = parse_num(key, value)?,
            "model.l2" => e.model.l2 = parse_num(key, value)?,
            "model.steps_per_day" => self.steps_per_day = auto_or(key, value)?,
            "model.embed_dim" => e.model.embed_dim = parse_num(key, value)?,
            "model.tod_dim" => e.model.tod_dim = parse_num(key, value)?,
            "model.dow_dim" => e.model.dow_dim = parse_num(key, value)?,
            "model.hidden_dim" => e.model.hidden_dim = parse_num(key, value)?,
            "model.num_blocks" => e.model.num_blocks = parse_num(key, value)?,
            "model.use_graph" => e.model.use_graph = parse_bool(key, value)?,
            "embedding.strategy" => e.strategy = value.parse().map_err(|err: Error| Error::Config(strip_prefix(err)))?,
            "embedding.theta" => self.theta = parse_num(key, value)?,
            "embedding.k" => self.k = auto_or(key, value)?,
            "embedding.centered" => e.centered = parse_bool(key, value)?,
            "train.lr" => e.train.lr = parse_num(key, value)?,
            "train.max_epochs" => e.train.max_epochs = parse_num(key, value)?,
            "train.patience" => e.train.patience = parse_num(key, value)?,
            "train.batch_size" => e.train.batch_size = parse_num(key, value)?,
            "train.grad_clip_norm" => e.train.grad_clip_norm = parse_num(key, value)?,
            "train.seed" => e.train.seed = parse_num(key, value)?,
            "transfer.adaptation_fraction" => self.adaptation_fraction = parse_num(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        self.experiment.components = match self.k {
            Some(k) => ComponentSpec::Count(k),
            None => ComponentSpec::VarianceThreshold(self.theta),
        };
        Ok(())
    }

    /// Every key with its current value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let e = &self.experiment;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let auto = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_else(|| "auto".into());
        let rows: Vec<(&str, String)> = vec![
            ("data.path", path(&self.data)),
            ("data.shifted", path(&self.shifted)),
            ("data.normalize_zeros", e.normalize_zeros.to_string()),
            ("split.train", e.split[0].to_string()),
            ("split.val", e.split[1].to_string()),
            ("split.test", e.split[2].to_string()),
            ("model.l1", e.model.l1.to_string()),
            ("model.l2", e.model.l2.to_string()),
            ("model.steps_per_day", auto(self.steps_per_day)),
            ("model.embed_dim", e.model.embed_dim.to_string()),
            ("model.tod_dim", e.model.tod_dim.to_string()),
            ("model.dow_dim", e.model.dow_dim.to_string()),
            ("model.hidden_dim", e.model.hidden_dim.to_string()),
            ("model.num_blocks", e.model.num_blocks.to_string()),
            ("model.use_graph", e.model.use_graph.to_string()),
            ("embedding.strategy", e.strategy.to_string()),
            ("embedding.theta", self.theta.to_string()),
            ("embedding.k", auto(self.k)),
            ("embedding.centered", e.centered.to_string()),
            ("train.lr", e.train.lr.to_string()),
            ("train.max_epochs", e.train.max_epochs.to_string()),
            ("train.patience", e.train.patience.to_string()),
            ("train.batch_size", e.train.batch_size.to_string()),
            ("train.grad_clip_norm", e.train.grad_clip_norm.to_string()),
            ("train.seed", e.train.seed.to_string()),
            ("transfer.adaptation_fraction", self.adaptation_fraction.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        let cfg_err = |err: Error| Error::Config(strip_prefix(err));
        let mut model = e.model;
        model.steps_per_day = self.steps_per_day.unwrap_or(1);
        model.validate().map_err(cfg_err)?;
        e.train.validate()?;
        if e.split.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (e.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {:?} must be positive and sum to 1", e.split)));
        }
        if self.k.is_none() && !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("embedding.theta {} outside (0, 1]", self.theta)));
        }
        if self.k == Some(0) {
            return Err(Error::Config("embedding.k must be at least 1".into()));
        }
        if !(self.adaptation_fraction > 0.0 && self.adaptation_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "transfer.adaptation_fraction {} outside (0, 0.5]",
                self.adaptation_fraction
            )));
        }
        Ok(())
    }

    /// Fills `steps_per_day` from the data when it is `auto`.
    pub fn resolve(&mut self, series: &TrafficSeries) {
        let t = *self.steps_per_day.get_or_insert(series.steps_per_day());
        self.experiment.model.steps_per_day = t;
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("data.path is not set".into()))
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        write_atomic(&path, self.to_text().as_bytes())?;
        Ok(path)
    }
}

/// The message of `e` without the variant's display prefix.
fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) | Error::Invalid(m) => m,
        other => other.to_string(),
    }
}
