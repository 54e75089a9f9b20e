//! Run configuration: a line-oriented `key = value` file plus overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::{CIFAR_CLASSES, CIFAR_DIMS};
use crate::net::{toy_cnn_spec, vgg_variant_spec_for_input, LayerSpec};
use crate::partition::partition_network;
use crate::runtime::RuntimeConfig;
use crate::scalar::ScalarWidth;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{key}: {msg}")]
    Value { key: String, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    OracleCheck,
    PlanOnly,
    VolumeSweep,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Mode::Train),
            "oracle-check" => Ok(Mode::OracleCheck),
            "plan-only" => Ok(Mode::PlanOnly),
            "volume-sweep" => Ok(Mode::VolumeSweep),
            _ => Err(format!("unknown mode `{s}` (train, oracle-check, plan-only, volume-sweep)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::OracleCheck => "oracle-check",
            Mode::PlanOnly => "plan-only",
            Mode::VolumeSweep => "volume-sweep",
        })
    }
}

/// `synthetic:n=512,classes=4,dims=3x8x8` or `cifar10:PATH`.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic { n: usize, dims: Vec<usize>, classes: usize },
    Cifar10 { path: PathBuf },
}

impl DatasetSpec {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            DatasetSpec::Synthetic { dims, .. } => dims.clone(),
            DatasetSpec::Cifar10 { .. } => CIFAR_DIMS.to_vec(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { classes, .. } => *classes,
            DatasetSpec::Cifar10 { .. } => CIFAR_CLASSES,
        }
    }
}

pub(crate) fn parse_dims(s: &str) -> Result<Vec<usize>, String> {
    let dims: Result<Vec<usize>, _> = s.split('x').map(|d| d.trim().parse::<usize>()).collect();
    match dims {
        Ok(d) if !d.is_empty() && d.iter().all(|&x| x > 0) => Ok(d),
        _ => Err(format!("`{s}` is not a list of positive extents like 3x8x8")),
    }
}

impl FromStr for DatasetSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("cifar10:") {
            return Ok(DatasetSpec::Cifar10 { path: PathBuf::from(path) });
        }
        let Some(rest) = s.strip_prefix("synthetic") else {
            return Err(format!("unknown dataset `{s}` (synthetic:..., cifar10:PATH)"));
        };
        let (mut n, mut dims, mut classes) = (512, vec![3, 8, 8], 4);
        for kv in rest.trim_start_matches(':').split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("`{kv}` is not key=value"))?;
            match k.trim() {
                "n" => n = v.trim().parse().map_err(|_| format!("bad example count `{v}`"))?,
                "classes" => classes = v.trim().parse().map_err(|_| format!("bad class count `{v}`"))?,
                "dims" => dims = parse_dims(v)?,
                other => return Err(format!("unknown synthetic option `{other}`")),
            }
        }
        if classes < 2 {
            return Err("synthetic data needs at least 2 classes".into());
        }
        Ok(DatasetSpec::Synthetic { n, dims, classes })
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Synthetic { n, dims, classes } => {
                let d: Vec<String> = dims.iter().map(|x| x.to_string()).collect();
                write!(f, "synthetic:n={n},classes={classes},dims={}", d.join("x"))
            }
            DatasetSpec::Cifar10 { path } => write!(f, "cifar10:{}", path.display()),
        }
    }
}

/// `vgg` (sized to the dataset images), `toy`, or `file:PATH` in the layer
/// text format.
#[derive(Debug, Clone, PartialEq)]
pub enum NetChoice {
    Vgg,
    Toy,
    File(PathBuf),
}

impl FromStr for NetChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vgg" => Ok(NetChoice::Vgg),
            "toy" => Ok(NetChoice::Toy),
            _ => s
                .strip_prefix("file:")
                .map(|p| NetChoice::File(PathBuf::from(p)))
                .ok_or_else(|| format!("unknown network `{s}` (vgg, toy, file:PATH)")),
        }
    }
}

impl fmt::Display for NetChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetChoice::Vgg => f.write_str("vgg"),
            NetChoice::Toy => f.write_str("toy"),
            NetChoice::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub workers: usize,
    pub mp: usize,
    pub batch: usize,
    pub avg_period: u64,
    pub ccr_threshold: f64,
    pub lr: f64,
    pub epochs: u64,
    /// Exact number of train steps when set, overriding `epochs`.
    pub steps: Option<u64>,
    pub seed: u64,
    pub scalar: ScalarWidth,
    pub dataset: DatasetSpec,
    pub out: PathBuf,
    pub mode: Mode,
    pub net: NetChoice,
    pub mp_enabled: bool,
    pub dropout: bool,
    /// Record wall-clock images/sec; off keeps outputs byte-reproducible.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workers: 1,
            mp: 1,
            batch: 16,
            avg_period: 1,
            ccr_threshold: 0.0,
            lr: 0.05,
            epochs: 1,
            steps: None,
            seed: 0,
            scalar: ScalarWidth::F32,
            dataset: DatasetSpec::Synthetic {
                n: 512,
                dims: vec![3, 8, 8],
                classes: 4,
            },
            out: PathBuf::from("out"),
            mode: Mode::Train,
            net: NetChoice::Toy,
            mp_enabled: true,
            dropout: true,
            timing: false,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: fmt::Display,
{
    value.parse::<V>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        msg: format!("`{value}`: {e}"),
    })
}

impl RunConfig {
    /// Applies one `key = value` setting. Dashes and underscores in keys are
    /// interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "workers" => self.workers = parse(&key, value)?,
            "mp" => self.mp = parse(&key, value)?,
            "batch" => self.batch = parse(&key, value)?,
            "avg_period" => self.avg_period = parse(&key, value)?,
            "ccr_threshold" => self.ccr_threshold = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "steps" => self.steps = Some(parse(&key, value)?),
            "seed" => self.seed = parse(&key, value)?,
            "scalar" => self.scalar = parse(&key, value)?,
            "dataset" => self.dataset = parse(&key, value)?,
            "out" => self.out = PathBuf::from(value),
            "mode" => self.mode = parse(&key, value)?,
            "net" => self.net = parse(&key, value)?,
            "mp_enabled" => self.mp_enabled = parse(&key, value)?,
            "dropout" => self.dropout = parse(&key, value)?,
            "timing" => self.timing = parse(&key, value)?,
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults. Blank lines and
    /// `#` comments are ignored.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            cfg.set(k, v).map_err(|e| match e {
                ConfigError::Value { .. } | ConfigError::UnknownKey(_) => ConfigError::Syntax {
                    line: i + 1,
                    msg: e.to_string(),
                },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text)
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "workers = {}\nmp = {}\nbatch = {}\navg_period = {}\nccr_threshold = {}\nlr = {}\nepochs = {}\n",
            self.workers, self.mp, self.batch, self.avg_period, self.ccr_threshold, self.lr, self.epochs
        );
        if let Some(steps) = self.steps {
            s.push_str(&format!("steps = {steps}\n"));
        }
        s.push_str(&format!(
            "seed = {}\nscalar = {}\ndataset = {}\nout = {}\nmode = {}\nnet = {}\nmp_enabled = {}\ndropout = {}\ntiming = {}\n",
            self.seed,
            self.scalar,
            self.dataset,
            self.out.display(),
            self.mode,
            self.net,
            self.mp_enabled,
            self.dropout,
            self.timing
        ));
        s
    }

    pub fn runtime_config(&self) -> RuntimeConfig {
        RuntimeConfig {
            workers: self.workers,
            group_size: self.mp,
            batch: self.batch,
            avg_period: self.avg_period,
            lr: self.lr,
            ccr_threshold: self.ccr_threshold,
            mp_enabled: self.mp_enabled,
            seed: self.seed,
            deferred: false,
            dropout: self.dropout,
        }
    }

    /// The network and its per-example input shape.
    pub fn network(&self) -> Result<(LayerSpec, Vec<usize>), ConfigError> {
        let dims = self.dataset.dims();
        let classes = self.dataset.classes();
        let spec = match &self.net {
            NetChoice::Vgg => {
                if dims.len() != 3 || dims[0] != 3 || dims[1] % 8 != 0 || dims[2] % 8 != 0 {
                    return Err(ConfigError::Invalid(format!(
                        "the VGG variant needs 3xHxW images with H, W divisible by 8, dataset has {dims:?}"
                    )));
                }
                if classes != 10 {
                    return Err(ConfigError::Invalid(format!(
                        "the VGG variant has 10 outputs, dataset has {classes} classes"
                    )));
                }
                vgg_variant_spec_for_input(dims[1], dims[2])
            }
            NetChoice::Toy => {
                if dims != [3, 8, 8] {
                    return Err(ConfigError::Invalid(format!("the toy CNN needs 3x8x8 images, dataset has {dims:?}")));
                }
                toy_cnn_spec(classes)
            }
            NetChoice::File(path) => {
                let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                LayerSpec::parse_layers(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?
            }
        };
        Ok((spec, dims))
    }

    /// Checks every runtime precondition, including FC divisibility under the
    /// partition plan, and returns the network.
    pub fn validate(&self) -> Result<(LayerSpec, Vec<usize>), ConfigError> {
        let rcfg = self.runtime_config();
        rcfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.epochs == 0 && self.mode == Mode::Train {
            return Err(ConfigError::Invalid("epochs must be >= 1".into()));
        }
        let (spec, dims) = self.network()?;
        let mut shape = dims.clone();
        for (i, leaf) in spec.leaves().iter().enumerate() {
            shape = leaf
                .resize(&shape)
                .map_err(|e| ConfigError::Invalid(format!("layer {i}: {e}")))?;
        }
        if shape != [self.dataset.classes()] {
            return Err(ConfigError::Invalid(format!(
                "network outputs {shape:?} but the dataset has {} classes",
                self.dataset.classes()
            )));
        }
        for offset in 0..self.mp {
            partition_network(&spec, &dims, &rcfg.partition_config(), offset)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok((spec, dims))
    }
}
