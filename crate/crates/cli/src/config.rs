//! Flat `key = value` run configs.
//!
//! Every config has a canonical text form listing all keys with resolved
//! values; manifests store it and replays parse it back.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use iffnn::inben::InbenParams;
use iffnn::models::{ModelSpec, VariantName};
use iffnn::training::TrainConfig;

use crate::error::CliError;

/// Environment variable naming the data root; MNIST is looked up in
/// `$IFFNN_DATA_ROOT/mnist`.
pub const DATA_ROOT_ENV: &str = "IFFNN_DATA_ROOT";

/// Parsed key/value pairs, consumed key by key so leftovers can be reported.
#[derive(Debug, Clone)]
pub struct KeyValues {
    pairs: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: `{line}` is not key = value", no + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(CliError::config(format!("line {}: empty key", no + 1)));
            }
            if pairs.iter().any(|(existing, _)| *existing == key) {
                return Err(CliError::config(format!("duplicate key `{key}`")));
            }
            pairs.push((key, v.trim().to_string()));
        }
        Ok(Self { pairs })
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        let pos = self.pairs.iter().position(|(k, _)| k == key)?;
        Some(self.pairs.remove(pos).1)
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::config(format!("`{v}` is not a valid value for `{key}`"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.take_parsed(key)?.unwrap_or(default))
    }

    /// Fails on any key that was not consumed.
    pub fn finish(self) -> Result<(), CliError> {
        match self.pairs.first() {
            None => Ok(()),
            Some((k, _)) => Err(CliError::config(format!("unknown key `{k}`"))),
        }
    }
}

fn resolve(base: Option<&Path>, path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    match base {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    }
}

/// Makes a path absolute without requiring it to exist.
fn absolute(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InbenGenConfig {
    pub params: InbenParams,
    pub data_seed: u64,
    pub sizes: [usize; 3],
    /// Worker threads for sampling; the output does not depend on it.
    pub threads: usize,
}

impl Default for InbenGenConfig {
    fn default() -> Self {
        Self {
            params: InbenParams::default(),
            data_seed: 0,
            sizes: [100_000, 10_000, 10_000],
            threads: 0,
        }
    }
}

impl InbenGenConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut kv = KeyValues::parse(text)?;
        let d = Self::default();
        let density = match kv.take("density") {
            None => None,
            Some(v) if v == "auto" => None,
            Some(v) => Some(
                v.parse::<f64>()
                    .map_err(|_| CliError::config(format!("`{v}` is not a valid value for `density`")))?,
            ),
        };
        let params = InbenParams {
            m: kv.take_or("m", d.params.m)?,
            classes: kv.take_or("classes", d.params.classes)?,
            k: kv.take_or("k", d.params.k)?,
            len_min: kv.take_or("len_min", d.params.len_min)?,
            len_max: kv.take_or("len_max", d.params.len_max)?,
            density,
            seed: kv.take_or("spec_seed", d.params.seed)?,
        };
        let cfg = Self {
            params,
            data_seed: kv.take_or("data_seed", d.data_seed)?,
            sizes: [
                kv.take_or("train", d.sizes[0])?,
                kv.take_or("valid", d.sizes[1])?,
                kv.take_or("test", d.sizes[2])?,
            ],
            threads: kv.take_or("threads", d.threads)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.params.validate()?;
        if self.sizes.contains(&0) {
            return Err(CliError::config(format!("split sizes {:?} must all be positive", self.sizes)));
        }
        Ok(())
    }

    pub fn canonical_text(&self) -> String {
        let p = &self.params;
        let density = match p.density {
            None => "auto".to_string(),
            Some(d) => format!("{d:?}"),
        };
        format!(
            "m = {}\nclasses = {}\nk = {}\nlen_min = {}\nlen_max = {}\ndensity = {density}\n\
             spec_seed = {}\ndata_seed = {}\ntrain = {}\nvalid = {}\ntest = {}\nthreads = {}\n",
            p.m,
            p.classes,
            p.k,
            p.len_min,
            p.len_max,
            p.seed,
            self.data_seed,
            self.sizes[0],
            self.sizes[1],
            self.sizes[2],
            self.threads
        )
    }
}

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetRef {
    /// A directory with the four IDX files.
    Mnist(PathBuf),
    /// The same, restricted to two digit classes relabeled 0 / 1.
    MnistPair(PathBuf, usize, usize),
    Inben(PathBuf),
}

impl DatasetRef {
    /// Parses `mnist[:DIR]`, `mnist2[:DIR]`, `mnist2-AB[:DIR]` (digits A
    /// and B) or `inben:FILE`. Relative paths
    /// resolve against `base`; a missing MNIST directory falls back to the
    /// data root.
    pub fn parse(value: &str, pair: (usize, usize), base: Option<&Path>) -> Result<Self, CliError> {
        let (kind, path) = match value.split_once(':') {
            Some((k, p)) => (k.trim(), Some(p.trim())),
            None => (value.trim(), None),
        };
        let path = match path.filter(|p| !p.is_empty()) {
            Some(p) => absolute(resolve(base, p)),
            None if kind == "inben" => return Err(CliError::config("`inben` datasets need a file path")),
            None => match std::env::var_os(DATA_ROOT_ENV) {
                Some(root) => absolute(PathBuf::from(root).join("mnist")),
                None => {
                    return Err(CliError::config(format!(
                        "dataset `{value}` has no directory and {DATA_ROOT_ENV} is not set"
                    )))
                }
            },
        };
        if let Some(digits) = kind.strip_prefix("mnist2-") {
            let d: Vec<usize> = digits.chars().filter_map(|c| c.to_digit(10)).map(|d| d as usize).collect();
            return match d[..] {
                [a, b] if digits.len() == 2 && a != b => Ok(DatasetRef::MnistPair(path, a, b)),
                _ => Err(CliError::config(format!("`{kind}` needs two distinct digits, as in mnist2-01"))),
            };
        }
        match kind {
            "mnist" => Ok(DatasetRef::Mnist(path)),
            "mnist2" => Ok(DatasetRef::MnistPair(path, pair.0, pair.1)),
            "inben" => Ok(DatasetRef::Inben(path)),
            other => Err(CliError::config(format!("unknown dataset kind `{other}`"))),
        }
    }

    /// The `dataset` value in canonical form.
    pub fn text(&self) -> String {
        match self {
            DatasetRef::Mnist(p) => format!("mnist:{}", p.display()),
            DatasetRef::MnistPair(p, ..) => format!("mnist2:{}", p.display()),
            DatasetRef::Inben(p) => format!("inben:{}", p.display()),
        }
    }

    pub fn kind(&self) -> String {
        match self {
            DatasetRef::Mnist(_) => "mnist".into(),
            DatasetRef::MnistPair(_, a, b) => format!("mnist2-{a}{b}"),
            DatasetRef::Inben(_) => "inben".into(),
        }
    }
}

/// Model architecture before the data fixes input shape and class count.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelChoice {
    Named(VariantName),
    /// `key = value` lines of a [`ModelSpec`] without `input`, `classes`, `seed`.
    Explicit(String),
}

impl ModelChoice {
    pub fn spec(&self, input_shape: &[usize], classes: usize, seed: u64) -> Result<ModelSpec, CliError> {
        match self {
            ModelChoice::Named(name) => Ok(name.spec(input_shape, classes, seed)?),
            ModelChoice::Explicit(lines) => {
                let dims: Vec<String> = input_shape.iter().map(|d| d.to_string()).collect();
                let text = format!("{lines}input = {}\nclasses = {classes}\nseed = {seed}\n", dims.join(","));
                Ok(ModelSpec::from_text(&text)?)
            }
        }
    }

    /// Row label for reports.
    pub fn label(&self) -> String {
        match self {
            ModelChoice::Named(name) => name.to_string(),
            ModelChoice::Explicit(lines) => lines
                .lines()
                .filter_map(|l| l.split_once('=').map(|(_, v)| v.trim().to_string()))
                .collect::<Vec<_>>()
                .join("/"),
        }
    }
}

const MODEL_KEYS: [&str; 5] = ["trunk", "hidden", "conv", "activation", "head"];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub dataset: DatasetRef,
    /// Validation examples carved out of the training split (MNIST only;
    /// INBEN files carry their own validation split).
    pub valid_size: Option<usize>,
    pub valid_seed: u64,
    pub model: ModelChoice,
    /// Seeds parameter initialisation and the training shuffles.
    pub seed: u64,
    pub train: TrainConfig,
}

impl TrainRunConfig {
    /// Parses a config; relative paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, CliError> {
        let mut kv = KeyValues::parse(text)?;
        let pair_text = kv.take("pair");
        let pair = match &pair_text {
            None => (0, 1),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                match parts[..] {
                    [a, b] => match (a.parse(), b.parse()) {
                        (Ok(a), Ok(b)) if a != b => (a, b),
                        _ => return Err(CliError::config(format!("`pair = {v}` needs two distinct classes"))),
                    },
                    _ => return Err(CliError::config(format!("`pair = {v}` needs two classes"))),
                }
            }
        };
        let dataset_text = kv.take("dataset").ok_or_else(|| CliError::config("missing key `dataset`"))?;
        let dataset = DatasetRef::parse(&dataset_text, pair, base)?;
        if pair_text.is_some() && !matches!(dataset, DatasetRef::MnistPair(..)) {
            return Err(CliError::config("`pair` only applies to mnist2 datasets"));
        }

        let named = kv.take("model");
        let mut explicit = String::new();
        for key in MODEL_KEYS {
            if let Some(v) = kv.take(key) {
                explicit += &format!("{key} = {v}\n");
            }
        }
        let model = match (named, explicit.is_empty()) {
            (Some(n), true) => ModelChoice::Named(
                n.parse::<VariantName>()
                    .map_err(|e| CliError::config(e.to_string()))?,
            ),
            (None, false) => ModelChoice::Explicit(explicit),
            (Some(_), false) => {
                return Err(CliError::config("give either `model` or explicit architecture keys, not both"))
            }
            (None, true) => return Err(CliError::config("missing key `model`")),
        };

        let d = TrainConfig::default();
        let seed = kv.take_or("seed", 0u64)?;
        let cfg = Self {
            dataset,
            valid_size: kv.take_parsed("valid_size")?,
            valid_seed: kv.take_or("valid_seed", 0)?,
            model,
            seed,
            train: TrainConfig {
                learning_rate: kv.take_or("learning_rate", d.learning_rate)?,
                batch_size: kv.take_or("batch_size", d.batch_size)?,
                epochs: kv.take_or("epochs", d.epochs)?,
                beta1: kv.take_or("beta1", d.beta1)?,
                beta2: kv.take_or("beta2", d.beta2)?,
                epsilon: kv.take_or("epsilon", d.epsilon)?,
                seed,
                shuffle: kv.take_or("shuffle", d.shuffle)?,
            },
        };
        kv.finish()?;
        if matches!(cfg.dataset, DatasetRef::Inben(_)) && cfg.valid_size.is_some() {
            return Err(CliError::config("`valid_size` does not apply to inben datasets"));
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn canonical_text(&self) -> String {
        let mut out = format!("dataset = {}\n", self.dataset.text());
        if let DatasetRef::MnistPair(_, a, b) = self.dataset {
            out += &format!("pair = {a},{b}\n");
        }
        if let Some(v) = self.valid_size {
            out += &format!("valid_size = {v}\n");
        }
        if !matches!(self.dataset, DatasetRef::Inben(_)) {
            out += &format!("valid_seed = {}\n", self.valid_seed);
        }
        match &self.model {
            ModelChoice::Named(n) => out += &format!("model = {n}\n"),
            ModelChoice::Explicit(lines) => out += lines,
        }
        let t = &self.train;
        out += &format!(
            "seed = {}\nlearning_rate = {:?}\nbatch_size = {}\nepochs = {}\nbeta1 = {:?}\nbeta2 = {:?}\n\
             epsilon = {:?}\nshuffle = {}\n",
            self.seed, t.learning_rate, t.batch_size, t.epochs, t.beta1, t.beta2, t.epsilon, t.shuffle
        );
        out
    }
}

/// Parses `--seeds`: a comma list (`0,1,2`), an inclusive range (`0-4` or
/// `0..4`), or a mix of both.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::config(format!("`{text}` is not a seed list"));
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim) {
        let range = part.split_once("..").or_else(|| part.split_once('-'));
        match range {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if seeds.is_empty() || sorted.len() != seeds.len() {
        return Err(bad());
    }
    Ok(seeds)
}
