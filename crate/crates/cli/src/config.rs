//! Experiment configuration: documented defaults, a flat key=value config
//! file, and command-line overrides, with precedence flags > file > defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use multiverb_core::LabelScheme;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "MULTIVERB_OUT";

/// Resolve an output path: an explicit flag wins, otherwise the path is
/// placed under `$MULTIVERB_OUT` (or the current directory).
pub fn resolve_out(flag: Option<PathBuf>, default_name: &str) -> PathBuf {
    match flag {
        Some(path) => path,
        None => {
            let root = std::env::var_os(OUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("."));
            root.join(default_name)
        }
    }
}

/// Derive a per-stage seed from the top-level seed, so every stage draws from
/// its own deterministic stream (FNV-1a over the seed bytes and stage tag).
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for byte in master.to_le_bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(PRIME);
    }
    for byte in stage.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

/// Fully resolved configuration of a cross-validated experiment run.
///
/// Defaults mirror the reference protocol: 100 epochs, 5 folds, relevance
/// thresholds 0.5 and 0.3, text-to-video queries of 1..=5 verbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub vocab: PathBuf,
    pub votes: PathBuf,
    pub features: PathBuf,
    pub out: PathBuf,
    /// Labelling schemes to train a model for.
    pub schemes: Vec<LabelScheme>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden_dims: Vec<usize>,
    pub ml_threshold: f64,
    /// Relevance thresholds for accuracy and the v2t ranking rows.
    pub alphas: Vec<f64>,
    pub fold_count: usize,
    /// Text-to-video queries are built for every n in `1..=t2v_n_max`.
    pub t2v_n_max: usize,
    /// Threshold for query co-occurrence and t2v relevance.
    pub t2v_alpha: f64,
    pub seed: u64,
    pub ignore_unknown: bool,
}

impl ExperimentConfig {
    fn with_defaults() -> Self {
        Self {
            vocab: PathBuf::new(),
            votes: PathBuf::new(),
            features: PathBuf::new(),
            out: PathBuf::new(),
            schemes: vec![LabelScheme::Sl, LabelScheme::Ml, LabelScheme::Saml],
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            hidden_dims: Vec::new(),
            ml_threshold: 0.5,
            alphas: vec![0.5, 0.3],
            fold_count: 5,
            t2v_n_max: 5,
            t2v_alpha: 0.5,
            seed: 7,
            ignore_unknown: false,
        }
    }

    /// Build the effective config from an optional file and the command-line
    /// overrides.
    pub fn resolve(file: Option<&Path>, overrides: &ConfigOverrides) -> Result<Self> {
        let mut config = Self::with_defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file '{}'", path.display()))?;
            config
                .apply_file(&text)
                .with_context(|| format!("parsing config file '{}'", path.display()))?;
        }
        overrides.apply(&mut config);
        if config.out.as_os_str().is_empty() {
            config.out = resolve_out(None, "run");
        }
        config.validate()?;
        Ok(config)
    }

    fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected 'key = value'", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            self.apply_key(key, value)
                .with_context(|| format!("line {}: key '{key}'", lineno + 1))?;
        }
        Ok(())
    }

    fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab" => self.vocab = PathBuf::from(value),
            "votes" => self.votes = PathBuf::from(value),
            "features" => self.features = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "schemes" => self.schemes = parse_schemes(value)?,
            "epochs" => self.epochs = value.parse()?,
            "batch_size" => self.batch_size = value.parse()?,
            "learning_rate" => self.learning_rate = value.parse()?,
            "momentum" => self.momentum = value.parse()?,
            "hidden_dims" => self.hidden_dims = parse_list(value)?,
            "ml_threshold" => self.ml_threshold = value.parse()?,
            "alphas" => self.alphas = parse_list(value)?,
            "folds" => self.fold_count = value.parse()?,
            "t2v_n_max" => self.t2v_n_max = value.parse()?,
            "t2v_alpha" => self.t2v_alpha = value.parse()?,
            "seed" => self.seed = value.parse()?,
            "ignore_unknown" => self.ignore_unknown = value.parse()?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, path) in [
            ("vocab", &self.vocab),
            ("votes", &self.votes),
            ("features", &self.features),
        ] {
            if path.as_os_str().is_empty() {
                bail!("missing required path '{name}' (set it in the config file or by flag)");
            }
        }
        if self.schemes.is_empty() {
            bail!("at least one scheme is required");
        }
        let mut seen = BTreeSet::new();
        for scheme in &self.schemes {
            if *scheme == LabelScheme::Predicted {
                bail!("PREDICTED is not a trainable scheme");
            }
            if !seen.insert(scheme.name()) {
                bail!("scheme {scheme} listed twice");
            }
        }
        if self.alphas.is_empty() {
            bail!("at least one alpha is required");
        }
        for &alpha in &self.alphas {
            if !alpha.is_finite() || !(0.0 < alpha && alpha <= 1.0) {
                bail!("alpha {alpha} outside (0,1]");
            }
        }
        if self.fold_count < 2 {
            bail!("folds must be >= 2, got {}", self.fold_count);
        }
        if self.t2v_n_max == 0 {
            bail!("t2v_n_max must be >= 1");
        }
        if !self.t2v_alpha.is_finite() || !(0.0 < self.t2v_alpha && self.t2v_alpha <= 1.0) {
            bail!("t2v_alpha {} outside (0,1]", self.t2v_alpha);
        }
        Ok(())
    }
}

fn parse_schemes(value: &str) -> Result<Vec<LabelScheme>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<LabelScheme>().map_err(anyhow::Error::from))
        .collect()
}

fn parse_list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<T>().map_err(anyhow::Error::from))
        .collect()
}

/// Command-line overrides; `None` fields keep the file or default value.
#[derive(Debug, Default, Clone)]
pub struct ConfigOverrides {
    pub vocab: Option<PathBuf>,
    pub votes: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub schemes: Option<Vec<LabelScheme>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub hidden_dims: Option<Vec<usize>>,
    pub ml_threshold: Option<f64>,
    pub alphas: Option<Vec<f64>>,
    pub fold_count: Option<usize>,
    pub t2v_n_max: Option<usize>,
    pub t2v_alpha: Option<f64>,
    pub seed: Option<u64>,
    pub ignore_unknown: bool,
}

impl ConfigOverrides {
    fn apply(&self, config: &mut ExperimentConfig) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(value) = &self.$field {
                    config.$field = value.clone();
                }
            };
        }
        set!(vocab);
        set!(votes);
        set!(features);
        set!(out);
        set!(schemes);
        set!(epochs);
        set!(batch_size);
        set!(learning_rate);
        set!(momentum);
        set!(hidden_dims);
        set!(ml_threshold);
        set!(alphas);
        set!(fold_count);
        set!(t2v_n_max);
        set!(t2v_alpha);
        set!(seed);
        if self.ignore_unknown {
            config.ignore_unknown = true;
        }
    }
}
