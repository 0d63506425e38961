//! Run configuration as flat `key = value` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowscale_core::{ModelConfig, TrainConfig};

use crate::error::{Error, Result};

/// Sample-MSE weight of the perceptual training variant.
pub const PERCEPTUAL_WEIGHT: f64 = 0.05;

pub const VARIANTS: [&str; 4] = ["bicubic", "cnf", "cnf+perceptual", "cnf+constraint"];

/// Everything a run depends on. Defaults are the desk-scale experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub num_fields: usize,
    pub height: usize,
    pub width: usize,
    pub beta: f64,
    pub data_seed: u64,
    pub split_seed: u64,
    pub model_seed: u64,
    pub sample_seed: u64,
    pub tau: f64,
    pub ensemble_n: usize,
    /// Corpus manifest read by `train`.
    pub corpus: Option<PathBuf>,
    /// Checkpoints read by `evaluate`.
    pub cnf_checkpoint: Option<PathBuf>,
    pub perceptual_checkpoint: Option<PathBuf>,
    /// Test manifest read by `evaluate`.
    pub test_manifest: Option<PathBuf>,
    pub variants: Vec<String>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                upsampling: 2,
                num_scales: 2,
                steps_per_scale: 2,
                hidden_channels: 64,
                cond_channels: 64,
                channels: 1,
            },
            train: TrainConfig {
                epochs: 10,
                batch_size: 16,
                decay_interval: 2000,
                ..TrainConfig::default()
            },
            num_fields: 2000,
            height: 32,
            width: 32,
            beta: 3.0,
            data_seed: 0,
            split_seed: 0,
            model_seed: 0,
            sample_seed: 0,
            tau: 0.8,
            ensemble_n: 20,
            corpus: None,
            cnf_checkpoint: None,
            perceptual_checkpoint: None,
            test_manifest: None,
            variants: VARIANTS.iter().map(|s| s.to_string()).collect(),
            out: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        message: format!("cannot parse {key} = {v:?}"),
    })
}

fn path_opt(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected key = value, got {s:?}"),
            })?;
            c.set(line, k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key; `line` is used for error reporting.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let p = PathBuf::from(v);
        let opt = (!v.is_empty()).then(|| p.clone());
        match key {
            "upsampling" => self.model.upsampling = parse(line, key, v)?,
            "num_scales" => self.model.num_scales = parse(line, key, v)?,
            "steps_per_scale" => self.model.steps_per_scale = parse(line, key, v)?,
            "hidden_channels" => self.model.hidden_channels = parse(line, key, v)?,
            "cond_channels" => self.model.cond_channels = parse(line, key, v)?,
            "lr0" => self.train.lr0 = parse(line, key, v)?,
            "decay" => self.train.decay = parse(line, key, v)?,
            "decay_interval" => self.train.decay_interval = parse(line, key, v)?,
            "beta1" => self.train.beta1 = parse(line, key, v)?,
            "beta2" => self.train.beta2 = parse(line, key, v)?,
            "eps" => self.train.eps = parse(line, key, v)?,
            "ema_decay" => self.train.ema_decay = parse(line, key, v)?,
            "epochs" => self.train.epochs = parse(line, key, v)?,
            "batch_size" => self.train.batch_size = parse(line, key, v)?,
            "perceptual_weight" => self.train.perceptual_weight = parse(line, key, v)?,
            "jitter" => self.train.jitter = parse(line, key, v)?,
            "clip_norm" => self.train.clip_norm = parse(line, key, v)?,
            "train_seed" => self.train.seed = parse(line, key, v)?,
            "num_fields" => self.num_fields = parse(line, key, v)?,
            "height" => self.height = parse(line, key, v)?,
            "width" => self.width = parse(line, key, v)?,
            "beta" => self.beta = parse(line, key, v)?,
            "data_seed" => self.data_seed = parse(line, key, v)?,
            "split_seed" => self.split_seed = parse(line, key, v)?,
            "model_seed" => self.model_seed = parse(line, key, v)?,
            "sample_seed" => self.sample_seed = parse(line, key, v)?,
            "tau" => self.tau = parse(line, key, v)?,
            "ensemble_n" => self.ensemble_n = parse(line, key, v)?,
            "corpus" => self.corpus = opt,
            "cnf_checkpoint" => self.cnf_checkpoint = opt,
            "perceptual_checkpoint" => self.perceptual_checkpoint = opt,
            "test_manifest" => self.test_manifest = opt,
            "variants" => {
                self.variants = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "out" => self.out = p,
            _ => {
                return Err(Error::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.tau >= 0.0) || self.ensemble_n == 0 {
            return Err(Error::Config {
                line: 0,
                message: "tau must be non-negative and ensemble_n positive".into(),
            });
        }
        if let Some(v) = self.variants.iter().find(|v| !VARIANTS.contains(&v.as_str())) {
            return Err(Error::UnknownVariant(v.clone()));
        }
        Ok(())
    }

    /// Serialization that [`RunConfig::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("upsampling", m.upsampling.to_string());
        kv("num_scales", m.num_scales.to_string());
        kv("steps_per_scale", m.steps_per_scale.to_string());
        kv("hidden_channels", m.hidden_channels.to_string());
        kv("cond_channels", m.cond_channels.to_string());
        kv("lr0", t.lr0.to_string());
        kv("decay", t.decay.to_string());
        kv("decay_interval", t.decay_interval.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("eps", t.eps.to_string());
        kv("ema_decay", t.ema_decay.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("perceptual_weight", t.perceptual_weight.to_string());
        kv("jitter", t.jitter.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("train_seed", t.seed.to_string());
        kv("num_fields", self.num_fields.to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("beta", self.beta.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("split_seed", self.split_seed.to_string());
        kv("model_seed", self.model_seed.to_string());
        kv("sample_seed", self.sample_seed.to_string());
        kv("tau", self.tau.to_string());
        kv("ensemble_n", self.ensemble_n.to_string());
        kv("corpus", path_opt(&self.corpus));
        kv("cnf_checkpoint", path_opt(&self.cnf_checkpoint));
        kv("perceptual_checkpoint", path_opt(&self.perceptual_checkpoint));
        kv("test_manifest", path_opt(&self.test_manifest));
        kv("variants", self.variants.join(","));
        kv("out", self.out.display().to_string());
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(Error::io(path))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(Error::io(path))
    }
}
