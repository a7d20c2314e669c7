//! Model and training configuration, the flat `key = value` config-file
//! format, and the shared key table the CLI override flags map onto.

use crate::error::{Error, Result};
use crate::grouping::SteVariant;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Denominator used in attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// 1/sqrt(d_n / heads): the standard multi-head reading. Default.
    HeadDim,
    /// 1/sqrt(d_n): the single-head formula kept verbatim under splitting.
    ModelDim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// min over heads of the scene-mean pointwise error. Default for training.
    PerScene,
    /// min over heads inside the per-agent, per-step sum.
    PerPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// All agents scored jointly: min over heads of the scene aggregate.
    Joint,
    /// Per-agent min over heads, then averaged across agents.
    Marginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input features per agent per step: 2 (displacements) or 4
    /// (absolute positions + displacements).
    pub d_in: usize,
    pub d_n: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub d_d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of prediction heads (candidate futures per agent).
    pub k: usize,
    pub t_p: usize,
    pub t_f: usize,
    pub attn_scale: AttnScale,
    pub ste_variant: SteVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 2,
            d_n: 64,
            d_e: 64,
            d_h: 128,
            d_d: 128,
            layers: 4,
            heads: 8,
            k: 20,
            t_p: 8,
            t_f: 12,
            attn_scale: AttnScale::HeadDim,
            ste_variant: SteVariant::Triangle,
        }
    }
}

impl ModelConfig {
    /// The documented tiny configuration used by gradient checking.
    pub fn tiny() -> Self {
        ModelConfig {
            d_in: 2,
            d_n: 8,
            d_e: 8,
            d_h: 16,
            d_d: 16,
            layers: 1,
            heads: 2,
            k: 2,
            t_p: 4,
            t_f: 3,
            attn_scale: AttnScale::HeadDim,
            ste_variant: SteVariant::Triangle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 10] = [
            ("d_in", self.d_in),
            ("d_n", self.d_n),
            ("d_e", self.d_e),
            ("d_h", self.d_h),
            ("d_d", self.d_d),
            ("heads", self.heads),
            ("k", self.k),
            ("t_p", self.t_p),
            ("t_f", self.t_f),
            ("layers + 1", self.layers + 1),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_n % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_n = {} must be divisible by heads = {}",
                self.d_n, self.heads
            )));
        }
        if self.d_n % 2 != 0 {
            return Err(Error::Config(format!(
                "d_n = {} must be even for the sinusoidal positional encoding",
                self.d_n
            )));
        }
        if self.d_d % 2 != 0 {
            return Err(Error::Config(format!(
                "d_d = {} must be even (second decoder hidden layer is d_d / 2)",
                self.d_d
            )));
        }
        if self.d_in != 2 && self.d_in != 4 {
            return Err(Error::Config(format!(
                "d_in must be 2 (displacements) or 4 (positions + displacements), got {}",
                self.d_in
            )));
        }
        if self.t_p < 2 {
            return Err(Error::Config(format!("t_p must be at least 2, got {}", self.t_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_n / self.heads
    }

    /// Attention logit scale factor per the configured convention.
    pub fn attn_scale_factor(&self) -> f64 {
        let d = match self.attn_scale {
            AttnScale::HeadDim => self.head_dim(),
            AttnScale::ModelDim => self.d_n,
        };
        1.0 / (d as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub loss_reduction: LossReduction,
    pub metric_mode: MetricMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 5.0e-4,
            batch_size: 64,
            epochs: 100,
            lr_decay_factor: 0.5,
            lr_decay_every: 100,
            seed: 1,
            loss_reduction: LossReduction::PerScene,
            metric_mode: MetricMode::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }

    /// Step-decayed learning rate for a given epoch index (from 0).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Set one configuration key from its textual value. The same table
    /// backs the config file and the `--key value` CLI overrides.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| Error::Config(format!("invalid value for {key}: {value} ({e})")))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "lr_decay_every" => self.lr_decay_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "d_in" => self.model.d_in = num(key, value)?,
            "d_n" => self.model.d_n = num(key, value)?,
            "d_e" => self.model.d_e = num(key, value)?,
            "d_h" => self.model.d_h = num(key, value)?,
            "d_d" => self.model.d_d = num(key, value)?,
            "layers" => self.model.layers = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "k" => self.model.k = num(key, value)?,
            "t_p" => self.model.t_p = num(key, value)?,
            "t_f" => self.model.t_f = num(key, value)?,
            "attn_scale" => self.model.attn_scale = value.parse()?,
            "ste_variant" => self.model.ste_variant = value.parse()?,
            "loss_reduction" => self.loss_reduction = value.parse()?,
            "metric_mode" => self.metric_mode = value.parse()?,
            other => {
                return Err(Error::Config(format!("unknown configuration key: {other}")));
            }
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file. `#` starts a comment.
    pub fn load_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("expected `key = value`, got: {raw}"),
                });
            };
            self.apply_key(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: e.to_string(),
                })?;
        }
        Ok(())
    }
}

impl FromStr for AttnScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head_dim" => Ok(AttnScale::HeadDim),
            "model_dim" => Ok(AttnScale::ModelDim),
            other => Err(Error::Config(format!(
                "unknown attn_scale: {other} (expected head_dim or model_dim)"
            ))),
        }
    }
}

impl FromStr for LossReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_scene" => Ok(LossReduction::PerScene),
            "per_point" => Ok(LossReduction::PerPoint),
            other => Err(Error::Config(format!(
                "unknown loss_reduction: {other} (expected per_scene or per_point)"
            ))),
        }
    }
}

impl FromStr for MetricMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(MetricMode::Joint),
            "marginal" => Ok(MetricMode::Marginal),
            other => Err(Error::Config(format!(
                "unknown metric_mode: {other} (expected joint or marginal)"
            ))),
        }
    }
}

impl fmt::Display for MetricMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricMode::Joint => write!(f, "joint"),
            MetricMode::Marginal => write!(f, "marginal"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_node_dim() {
        let mut cfg = ModelConfig::default();
        cfg.heads = 7;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn lr_schedule_steps_down() {
        let cfg = TrainConfig {
            lr: 1.0,
            lr_decay_factor: 0.5,
            lr_decay_every: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at_epoch(0), 1.0);
        assert_eq!(cfg.lr_at_epoch(99), 1.0);
        assert_eq!(cfg.lr_at_epoch(100), 0.5);
        assert_eq!(cfg.lr_at_epoch(250), 0.25);
    }

    #[test]
    fn config_file_round_trip() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "# comment line").unwrap();
        writeln!(file, "lr = 0.001").unwrap();
        writeln!(file, "d_n=32  # inline comment").unwrap();
        writeln!(file, "ste_variant = long_tailed").unwrap();
        writeln!(file, "loss_reduction = per_point").unwrap();
        let cfg = TrainConfig::load_file(file.path()).unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.model.d_n, 32);
        assert_eq!(cfg.model.ste_variant, SteVariant::LongTailed);
        assert_eq!(cfg.loss_reduction, LossReduction::PerPoint);
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "lr = 0.001").unwrap();
        writeln!(file, "nonsense = 1").unwrap();
        let err = TrainConfig::load_file(file.path()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }
}
