//! Run configuration: line-oriented `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors. Optional keys take the value `none` to clear them.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hypernet::HypernetConfig;
use crate::training::{LossNorm, NoiseMode, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub rank: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub refine_steps: usize,
    /// Feed-forward width; `4 · model_dim` when unset.
    pub ffn_dim: Option<usize>,
    pub control_carry: bool,
    pub batch: usize,
    pub tau: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub epochs: usize,
    pub steps: Option<usize>,
    pub cycle_length: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub noise_mode: NoiseMode,
    pub noise_scale: f64,
    pub loss_norm: LossNorm,
    pub co_sample: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            rank: HypernetConfig::DEFAULT_RANK,
            model_dim: HypernetConfig::DEFAULT_MODEL_DIM,
            layers: HypernetConfig::DEFAULT_LAYERS,
            heads: HypernetConfig::DEFAULT_HEADS,
            refine_steps: HypernetConfig::DEFAULT_REFINE_STEPS,
            ffn_dim: None,
            control_carry: false,
            batch: t.batch,
            tau: t.tau,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            weight_decay: t.weight_decay,
            seed: t.seed,
            epochs: t.epochs,
            steps: t.steps,
            cycle_length: t.cycle_length,
            checkpoint_every: t.checkpoint_every,
            noise_mode: t.noise_mode,
            noise_scale: t.noise_scale,
            loss_norm: t.loss_norm,
            co_sample: t.co_sample,
        }
    }
}

pub const KEYS: [&str; 21] = [
    "rank",
    "model_dim",
    "layers",
    "heads",
    "refine_steps",
    "ffn_dim",
    "control_carry",
    "batch",
    "tau",
    "lr_max",
    "lr_min",
    "weight_decay",
    "seed",
    "epochs",
    "steps",
    "cycle_length",
    "checkpoint_every",
    "noise_mode",
    "noise_scale",
    "loss_norm",
    "co_sample",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn show<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_owned(), T::to_string)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: key {key} given twice", n + 1)));
            }
            c.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("invalid configuration: "))))?;
            seen.push(key);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "rank" => self.rank = num(key, v)?,
            "model_dim" => self.model_dim = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "refine_steps" => self.refine_steps = num(key, v)?,
            "ffn_dim" => self.ffn_dim = opt(key, v)?,
            "control_carry" => self.control_carry = flag(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "lr_max" => self.lr_max = num(key, v)?,
            "lr_min" => self.lr_min = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "steps" => self.steps = opt(key, v)?,
            "cycle_length" => self.cycle_length = opt(key, v)?,
            "checkpoint_every" => self.checkpoint_every = opt(key, v)?,
            "noise_mode" => self.noise_mode = NoiseMode::parse(v)?,
            "noise_scale" => self.noise_scale = num(key, v)?,
            "loss_norm" => self.loss_norm = LossNorm::parse(v)?,
            "co_sample" => self.co_sample = flag(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.hypernet_config(1)?;
        self.train_config().validate()
    }

    /// Every key in canonical order; `parse(to_text())` returns `self`.
    pub fn to_text(&self) -> String {
        let values = [
            self.rank.to_string(),
            self.model_dim.to_string(),
            self.layers.to_string(),
            self.heads.to_string(),
            self.refine_steps.to_string(),
            show(&self.ffn_dim),
            self.control_carry.to_string(),
            self.batch.to_string(),
            self.tau.to_string(),
            self.lr_max.to_string(),
            self.lr_min.to_string(),
            self.weight_decay.to_string(),
            self.seed.to_string(),
            self.epochs.to_string(),
            show(&self.steps),
            show(&self.cycle_length),
            show(&self.checkpoint_every),
            self.noise_mode.as_str().to_owned(),
            self.noise_scale.to_string(),
            self.loss_norm.as_str().to_owned(),
            self.co_sample.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hypernet_config(&self, embed_dim: usize) -> Result<HypernetConfig> {
        let c = HypernetConfig {
            embed_dim,
            rank: self.rank,
            model_dim: self.model_dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim.unwrap_or(4 * self.model_dim),
            refine_steps: self.refine_steps,
            control_carry: self.control_carry,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            tau: self.tau,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            steps: self.steps,
            cycle_length: self.cycle_length,
            checkpoint_every: self.checkpoint_every,
            noise_mode: self.noise_mode,
            noise_scale: self.noise_scale,
            loss_norm: self.loss_norm,
            co_sample: self.co_sample,
            seed: self.seed,
        }
    }
}
