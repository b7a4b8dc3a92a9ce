//! Run configuration as a flat `key=value` file.
//!
//! Every key has a default; unknown keys are rejected. Lines starting with
//! `#` are comments.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::read_text;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Weight of the alignment-retention loss.
    pub beta: f64,
    /// Weight of the semantic relation structure loss.
    pub gamma: f64,
    /// Logit scale multiplying cosine similarities before softmax.
    pub temperature: f64,
    pub margin: f64,
    pub lr_adapter: f64,
    pub lr_prototype: f64,
    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Attention tokens per feature vector; must divide the feature dim.
    pub tokens: usize,
    /// GCN hidden width; 0 means "same as the input dim".
    pub hidden_dim: usize,
    pub use_attention_adapter: bool,
    pub use_gcn: bool,
    pub use_residual_projector: bool,
    pub srs_on_source: bool,
    pub srs_on_target: bool,
    pub align_on_source: bool,
    pub align_on_target: bool,
    /// Permit joint training with no target features (continued source training).
    pub allow_empty_target: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            beta: 1.0,
            gamma: 0.1,
            temperature: 30.0,
            margin: 0.1,
            lr_adapter: 1e-3,
            lr_prototype: 1e-3,
            warmup_epochs: 5,
            joint_epochs: 20,
            batch_size: 64,
            seed: 0,
            tokens: 8,
            hidden_dim: 0,
            use_attention_adapter: true,
            use_gcn: true,
            use_residual_projector: true,
            srs_on_source: true,
            srs_on_target: true,
            align_on_source: true,
            align_on_target: true,
            allow_empty_target: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "beta",
    "gamma",
    "temperature",
    "margin",
    "lr_adapter",
    "lr_prototype",
    "warmup_epochs",
    "joint_epochs",
    "batch_size",
    "seed",
    "tokens",
    "hidden_dim",
    "use_attention_adapter",
    "use_gcn",
    "use_residual_projector",
    "srs_on_source",
    "srs_on_target",
    "align_on_source",
    "align_on_target",
    "allow_empty_target",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "beta" => self.beta = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "margin" => self.margin = parse_value(key, value)?,
            "lr_adapter" => self.lr_adapter = parse_value(key, value)?,
            "lr_prototype" => self.lr_prototype = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "joint_epochs" => self.joint_epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "tokens" => self.tokens = parse_value(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "use_attention_adapter" => self.use_attention_adapter = parse_value(key, value)?,
            "use_gcn" => self.use_gcn = parse_value(key, value)?,
            "use_residual_projector" => self.use_residual_projector = parse_value(key, value)?,
            "srs_on_source" => self.srs_on_source = parse_value(key, value)?,
            "srs_on_target" => self.srs_on_target = parse_value(key, value)?,
            "align_on_source" => self.align_on_source = parse_value(key, value)?,
            "align_on_target" => self.align_on_target = parse_value(key, value)?,
            "allow_empty_target" => self.allow_empty_target = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(key, value)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            config
                .apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        check(self.beta >= 0.0 && self.beta.is_finite(), "beta must be >= 0")?;
        check(self.gamma >= 0.0 && self.gamma.is_finite(), "gamma must be >= 0")?;
        check(
            self.temperature > 0.0 && self.temperature.is_finite(),
            "temperature must be > 0",
        )?;
        check(self.margin >= 0.0 && self.margin.is_finite(), "margin must be >= 0")?;
        check(
            self.lr_adapter >= 0.0 && self.lr_prototype >= 0.0,
            "learning rates must be >= 0",
        )?;
        check(self.batch_size > 0, "batch_size must be > 0")?;
        check(self.tokens > 0, "tokens must be > 0")?;
        check(
            self.use_gcn || self.use_residual_projector,
            "use_gcn and use_residual_projector cannot both be false",
        )?;
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "beta" => self.beta.to_string(),
                    "gamma" => self.gamma.to_string(),
                    "temperature" => self.temperature.to_string(),
                    "margin" => self.margin.to_string(),
                    "lr_adapter" => self.lr_adapter.to_string(),
                    "lr_prototype" => self.lr_prototype.to_string(),
                    "warmup_epochs" => self.warmup_epochs.to_string(),
                    "joint_epochs" => self.joint_epochs.to_string(),
                    "batch_size" => self.batch_size.to_string(),
                    "seed" => self.seed.to_string(),
                    "tokens" => self.tokens.to_string(),
                    "hidden_dim" => self.hidden_dim.to_string(),
                    "use_attention_adapter" => self.use_attention_adapter.to_string(),
                    "use_gcn" => self.use_gcn.to_string(),
                    "use_residual_projector" => self.use_residual_projector.to_string(),
                    "srs_on_source" => self.srs_on_source.to_string(),
                    "srs_on_target" => self.srs_on_target.to_string(),
                    "align_on_source" => self.align_on_source.to_string(),
                    "align_on_target" => self.align_on_target.to_string(),
                    "allow_empty_target" => self.allow_empty_target.to_string(),
                    _ => unreachable!("every key is listed"),
                };
                (k, v)
            })
            .collect()
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
