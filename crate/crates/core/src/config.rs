//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys,
//! repeated keys and unparsable values are errors. [`RunConfig::to_text`]
//! writes every key with its resolved value; parsing that text gives back
//! the same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{read_cifar, read_idx, Dataset, Split};
use crate::distill::{DistillConfig, Stage2Input};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::quant::QuantConfig;
use crate::runtime::RequantMode;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Idx,
    Cifar,
}

impl Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataFormat::Idx => "idx",
            DataFormat::Cifar => "cifar",
        })
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(DataFormat::Idx),
            "cifar" => Ok(DataFormat::Cifar),
            other => Err(Error::Config(format!("unknown data format {other:?}"))),
        }
    }
}

/// Dataset files. IDX uses one image and one label file per split; CIFAR
/// uses one or more binary batch files per split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub format: DataFormat,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = |f: &str| PathBuf::from("data/mnist").join(f);
        Self {
            format: DataFormat::Idx,
            train: vec![p("train-images-idx3-ubyte"), p("train-labels-idx1-ubyte")],
            test: vec![p("t10k-images-idx3-ubyte"), p("t10k-labels-idx1-ubyte")],
            train_limit: None,
            test_limit: None,
        }
    }
}

impl DataConfig {
    fn read(&self, paths: &[PathBuf], classes: usize, split: Split, limit: Option<usize>) -> Result<Dataset> {
        let data = match self.format {
            DataFormat::Idx => match paths {
                [images, labels] => read_idx(images, labels, classes, split)?,
                _ => return Err(Error::Config("idx data needs an image file and a label file".into())),
            },
            DataFormat::Cifar => {
                if paths.is_empty() {
                    return Err(Error::Config("cifar data needs at least one batch file".into()));
                }
                read_cifar(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>(), split)?
            }
        };
        if data.classes() != classes {
            return Err(Error::Data(format!("dataset has {} classes, network {classes}", data.classes())));
        }
        match limit {
            Some(n) => data.take(n.min(data.len())),
            None => Ok(data),
        }
    }

    pub fn train_set(&self, classes: usize) -> Result<Dataset> {
        self.read(&self.train, classes, Split::Train, self.train_limit)
    }

    pub fn test_set(&self, classes: usize) -> Result<Dataset> {
        self.read(&self.test, classes, Split::Test, self.test_limit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layers: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub input_bits: u8,
    pub weight_bits: u8,
    pub activation_bits: u8,
    /// `(block, weight bits, activation bits)`.
    pub overrides: Vec<(usize, u8, u8)>,
    pub exempt_first_last: bool,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub data: DataConfig,
    pub mode: RequantMode,
    pub seed: u64,
}

/// LeNet-style CNN for 28x28 grayscale digits.
pub const LENET: &str = "conv:8:5:1:0 bn clip pool:2 conv:16:5:1:0 bn clip pool:2 flatten dense:64 bn clip dense:10 bn";

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            layers: LENET.into(),
            input_shape: vec![1, 28, 28],
            classes: 10,
            input_bits: 8,
            weight_bits: 4,
            activation_bits: 4,
            overrides: Vec::new(),
            exempt_first_last: false,
            train: TrainConfig::default(),
            distill: DistillConfig {
                stage1_weight_steps: 50,
                stage1_learning_rate: 1e-3,
                stage2_learning_rate: 1e-3,
                stage2_input: Stage2Input::StudentPrefix,
                ..DistillConfig::default()
            },
            data: DataConfig::default(),
            mode: RequantMode::ExactRational,
            seed: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str, sep: char) -> Result<Vec<T>> {
    value.split(sep).filter(|s| !s.trim().is_empty()).map(|s| parse(key, s.trim())).collect()
}

fn opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |v| v.to_string())
}

fn join<T: Display>(v: &[T], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn paths(v: &[PathBuf]) -> String {
    v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key and its value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let d = &self.distill;
        vec![
            ("seed", self.seed.to_string()),
            ("network.layers", self.layers.clone()),
            ("network.input_shape", join(&self.input_shape, "x")),
            ("network.classes", self.classes.to_string()),
            ("network.input_bits", self.input_bits.to_string()),
            ("network.exempt_first_last", self.exempt_first_last.to_string()),
            ("quant.weight_bits", self.weight_bits.to_string()),
            ("quant.activation_bits", self.activation_bits.to_string()),
            ("quant.overrides", self.overrides.iter().map(|(b, w, a)| format!("{b}:{w}:{a}")).collect::<Vec<_>>().join(",")),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.lr_decay_epochs", join(&t.lr_decay_epochs, ",")),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.max_samples", opt(&t.max_samples)),
            ("distill.batch_size", d.batch_size.to_string()),
            ("distill.calibration_batches", d.calibration_batches.to_string()),
            ("distill.stage1_weight_steps", d.stage1_weight_steps.to_string()),
            ("distill.stage1_learning_rate", d.stage1_learning_rate.to_string()),
            ("distill.stage2_epochs", d.stage2_epochs.to_string()),
            ("distill.stage2_learning_rate", d.stage2_learning_rate.to_string()),
            ("distill.momentum", d.momentum.to_string()),
            ("distill.stage2_samples", opt(&d.stage2_samples)),
            ("distill.stage2_input", d.stage2_input.to_string()),
            ("distill.threshold", d.threshold.to_string()),
            ("distill.patience", d.patience.to_string()),
            ("runtime.mode", self.mode.to_string()),
            ("data.format", self.data.format.to_string()),
            ("data.train", paths(&self.data.train)),
            ("data.test", paths(&self.data.test)),
            ("data.train_limit", opt(&self.data.train_limit)),
            ("data.test_limit", opt(&self.data.test_limit)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let d = &mut self.distill;
        match key {
            "seed" => self.set_seed(parse(key, v)?),
            "network.layers" => self.layers = v.to_string(),
            "network.input_shape" => self.input_shape = parse_list(key, v, 'x')?,
            "network.classes" => self.classes = parse(key, v)?,
            "network.input_bits" => self.input_bits = parse(key, v)?,
            "network.exempt_first_last" => self.exempt_first_last = parse(key, v)?,
            "quant.weight_bits" => self.weight_bits = parse(key, v)?,
            "quant.activation_bits" => self.activation_bits = parse(key, v)?,
            "quant.overrides" => {
                self.overrides = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|item| match parse_list::<usize>(key, item, ':')?.as_slice() {
                        &[b, w, a] if w <= 255 && a <= 255 => Ok((b, w as u8, a as u8)),
                        _ => Err(Error::Config(format!("bad override {item:?}, expected block:w:a"))),
                    })
                    .collect::<Result<_>>()?
            }
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.lr_decay_epochs" => t.lr_decay_epochs = parse_list(key, v, ',')?,
            "train.lr_decay" => t.lr_decay = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.max_samples" => t.max_samples = parse_opt(key, v)?,
            "distill.batch_size" => d.batch_size = parse(key, v)?,
            "distill.calibration_batches" => d.calibration_batches = parse(key, v)?,
            "distill.stage1_weight_steps" => d.stage1_weight_steps = parse(key, v)?,
            "distill.stage1_learning_rate" => d.stage1_learning_rate = parse(key, v)?,
            "distill.stage2_epochs" => d.stage2_epochs = parse(key, v)?,
            "distill.stage2_learning_rate" => d.stage2_learning_rate = parse(key, v)?,
            "distill.momentum" => d.momentum = parse(key, v)?,
            "distill.stage2_samples" => d.stage2_samples = parse_opt(key, v)?,
            "distill.stage2_input" => d.stage2_input = v.parse::<Stage2Input>()?,
            "distill.threshold" => d.threshold = parse(key, v)?,
            "distill.patience" => d.patience = parse(key, v)?,
            "runtime.mode" => self.mode = v.parse()?,
            "data.format" => self.data.format = v.parse()?,
            "data.train" => self.data.train = parse_list(key, v, ',')?,
            "data.test" => self.data.test = parse_list(key, v, ',')?,
            "data.train_limit" => self.data.train_limit = parse_opt(key, v)?,
            "data.test_limit" => self.data.test_limit = parse_opt(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// One seed drives training and distillation.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.distill.seed = seed;
    }

    /// Defaults overridden by the given text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} given twice", no + 1)));
            }
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a file, resolving relative data paths against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")))?;
        Ok(cfg)
    }

    /// Make relative data paths absolute, taking them relative to `base`
    /// (itself relative to the working directory).
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let base = if base.as_os_str().is_empty() { std::env::current_dir() } else { std::path::absolute(base) }
            .map_err(|e| Error::Config(format!("cannot resolve {}: {e}", base.display())))?;
        for p in self.data.train.iter_mut().chain(self.data.test.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.distill.validate()?;
        self.network_spec()?;
        Ok(())
    }

    pub fn quant_config(&self) -> Result<QuantConfig> {
        self.overrides
            .iter()
            .try_fold(QuantConfig::new(self.weight_bits, self.activation_bits)?, |q, &(b, w, a)| {
                q.with_override(b, w, a)
            })
    }

    /// Teacher network described by the configuration.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec::new(
            NetworkSpec::parse_layers(&self.layers)?,
            self.quant_config()?,
            self.input_shape.clone(),
            self.classes,
            self.input_bits,
        )?;
        if self.exempt_first_last {
            spec.exempt_first_last();
            spec.blocks()?;
        }
        Ok(spec)
    }
}
