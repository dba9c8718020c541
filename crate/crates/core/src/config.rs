//! `key=value` configuration files for the model and the training run.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; missing
//! keys keep their defaults. The same dialect is embedded in checkpoints.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::{AttentionVariant, OrderPolicy, SsaConfig, DEFAULT_SCALE};
use crate::error::ConfigError;
use crate::neuron::{LifParams, NeuronMode};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub time_steps: usize,
    pub in_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Whether each stem block ends in a 2×2 max-pool; its length is the
    /// number of stem blocks.
    pub sps_pool: Vec<bool>,
    pub attention: AttentionVariant,
    pub attn_scale: f64,
    pub attn_scale_learnable: bool,
    pub attn_order: OrderPolicy,
    pub neuron: LifParams,
    /// Threshold of the neuron right after the attention product.
    pub attn_v_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            time_steps: 4,
            in_channels: 1,
            image_height: 16,
            image_width: 16,
            embed_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
            sps_pool: vec![false, false, true, true],
            attention: AttentionVariant::Ssa,
            attn_scale: DEFAULT_SCALE,
            attn_scale_learnable: false,
            attn_order: OrderPolicy::Auto,
            neuron: LifParams::default(),
            attn_v_threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn sps_blocks(&self) -> usize {
        self.sps_pool.len()
    }

    /// Output channels of each stem block: `D/2^(k-1-i)` for `k` blocks.
    pub fn sps_channels(&self) -> Vec<usize> {
        let k = self.sps_blocks();
        (0..k).map(|i| self.embed_dim >> (k - 1 - i)).collect()
    }

    /// Token grid `(rows, cols)` after the stem.
    pub fn token_grid(&self) -> (usize, usize) {
        let p = self.sps_pool.iter().filter(|&&b| b).count();
        (self.image_height >> p, self.image_width >> p)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn ssa(&self) -> SsaConfig {
        SsaConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            scale: self.attn_scale,
            scale_learnable: self.attn_scale_learnable,
            order: self.attn_order,
        }
    }

    pub fn attn_neuron(&self) -> LifParams {
        self.neuron.with_threshold(self.attn_v_threshold)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("time_steps", self.time_steps),
            ("in_channels", self.in_channels),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(ConfigError::Value {
                    key: key.into(),
                    reason: "must be at least 1".into(),
                });
            }
        }
        if self.sps_pool.is_empty() {
            return Err(ConfigError::Value {
                key: "sps_pool".into(),
                reason: "the stem needs at least one block".into(),
            });
        }
        let k = self.sps_blocks();
        if k > 32 || self.embed_dim % (1 << (k - 1)) != 0 {
            return Err(ConfigError::Inconsistent(format!(
                "embed_dim {} cannot be halved across {k} stem blocks",
                self.embed_dim
            )));
        }
        let p = self.sps_pool.iter().filter(|&&b| b).count();
        if self.image_height % (1 << p) != 0 || self.image_width % (1 << p) != 0 {
            return Err(ConfigError::Inconsistent(format!(
                "image {}x{} is not divisible by 2^{p} for {p} pooled stem blocks",
                self.image_height, self.image_width
            )));
        }
        self.ssa().validate()?;
        self.neuron.validate()?;
        self.attn_neuron().validate().map_err(|_| ConfigError::Value {
            key: "attn_v_threshold".into(),
            reason: format!("{} does not exceed v_reset {}", self.attn_v_threshold, self.neuron.v_reset),
        })?;
        Ok(())
    }

    /// Serializes every key in the file dialect.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let pool: Vec<&str> = self.sps_pool.iter().map(|&b| if b { "1" } else { "0" }).collect();
        let mode = match self.neuron.mode {
            NeuronMode::Lif => "lif",
            NeuronMode::If => "if",
        };
        let _ = writeln!(s, "time_steps={}", self.time_steps);
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "image_height={}", self.image_height);
        let _ = writeln!(s, "image_width={}", self.image_width);
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "num_blocks={}", self.num_blocks);
        let _ = writeln!(s, "num_heads={}", self.num_heads);
        let _ = writeln!(s, "mlp_ratio={}", self.mlp_ratio);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "sps_pool={}", pool.join(","));
        let _ = writeln!(s, "attention={}", self.attention);
        let _ = writeln!(s, "attn_scale={:?}", self.attn_scale);
        let _ = writeln!(s, "attn_scale_learnable={}", self.attn_scale_learnable);
        let _ = writeln!(s, "attn_order={}", self.attn_order);
        let _ = writeln!(s, "attn_v_threshold={:?}", self.attn_v_threshold);
        let _ = writeln!(s, "neuron={mode}");
        let _ = writeln!(s, "tau={:?}", self.neuron.tau);
        let _ = writeln!(s, "v_threshold={:?}", self.neuron.v_threshold);
        let _ = writeln!(s, "v_reset={:?}", self.neuron.v_reset);
        let _ = writeln!(s, "surrogate_alpha={:?}", self.neuron.surrogate_alpha);
        s
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        match key {
            "time_steps" => self.time_steps = num(value)?,
            "in_channels" => self.in_channels = num(value)?,
            "image_height" => self.image_height = num(value)?,
            "image_width" => self.image_width = num(value)?,
            "image_size" => {
                let v = num(value)?;
                self.image_height = v;
                self.image_width = v;
            }
            "embed_dim" => self.embed_dim = num(value)?,
            "num_blocks" => self.num_blocks = num(value)?,
            "num_heads" => self.num_heads = num(value)?,
            "mlp_ratio" => self.mlp_ratio = num(value)?,
            "num_classes" => self.num_classes = num(value)?,
            "sps_pool" => {
                self.sps_pool = value
                    .split(',')
                    .map(|t| match t.trim() {
                        "1" | "true" => Ok(true),
                        "0" | "false" => Ok(false),
                        other => Err(format!("expected 0 or 1, got {other:?}")),
                    })
                    .collect::<Result<_, _>>()?
            }
            "attention" => self.attention = value.parse()?,
            "attn_scale" => self.attn_scale = num(value)?,
            "attn_scale_learnable" => self.attn_scale_learnable = boolean(value)?,
            "attn_order" => self.attn_order = value.parse()?,
            "attn_v_threshold" => self.attn_v_threshold = num(value)?,
            "neuron" => {
                self.neuron.mode = match value {
                    "lif" => NeuronMode::Lif,
                    "if" => NeuronMode::If,
                    _ => return Err(format!("expected lif or if, got {value:?}")),
                }
            }
            "tau" => self.neuron.tau = num(value)?,
            "v_threshold" => self.neuron.v_threshold = num(value)?,
            "v_reset" => self.neuron.v_reset = num(value)?,
            "surrogate_alpha" => self.neuron.surrogate_alpha = num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Record elapsed seconds in the metrics file. Off for byte-identical
    /// reruns.
    pub wall_clock: bool,
    /// Stop once test accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            base_lr: 5e-4,
            weight_decay: 0.02,
            seed: 0,
            wall_clock: true,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 {
            return Err(ConfigError::Value {
                key: "epochs".into(),
                reason: "must be at least 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Value {
                key: "batch_size".into(),
                reason: "must be at least 1".into(),
            });
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(ConfigError::Inconsistent("learning rate and weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "base_lr={:?}", self.base_lr);
        let _ = writeln!(s, "weight_decay={:?}", self.weight_decay);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "wall_clock={}", self.wall_clock);
        if let Some(t) = self.target_accuracy {
            let _ = writeln!(s, "target_accuracy={t:?}");
        }
        s
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        match key {
            "epochs" => self.epochs = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "base_lr" => self.base_lr = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "seed" => self.seed = num(value)?,
            "wall_clock" => self.wall_clock = boolean(value)?,
            "target_accuracy" => self.target_accuracy = Some(num(value)?),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// A parsed configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |reason: String| ConfigError::Line {
                line: i + 1,
                text: raw.to_string(),
                reason,
            };
            let Some((key, value)) = line.split_once('=') else {
                return Err(fail("expected key=value".into()));
            };
            let (key, value) = (key.trim(), value.trim());
            let known = cfg
                .model
                .set(key, value)
                .and_then(|hit| if hit { Ok(true) } else { cfg.train.set(key, value) })
                .map_err(|e| fail(e))?;
            if !known {
                return Err(fail(format!("unknown key {key:?}")));
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        self.model.to_kv() + &self.train.to_kv()
    }
}

impl ModelConfig {
    /// Parses a model-only blob, as stored in checkpoints.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(Config::parse(text)?.model)
    }
}

fn num<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("bad number {value:?}: {e}"))
}

fn boolean(value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = Config::default();
        cfg.model.embed_dim = 32;
        cfg.model.sps_pool = vec![true, true];
        cfg.model.attention = AttentionVariant::LeakyRelu;
        cfg.model.attn_scale = 0.3;
        cfg.train.target_accuracy = Some(0.97);
        cfg.train.seed = 11;
        let back = Config::parse(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_names_the_line() {
        let err = Config::parse("epochs=2\n\n# note\nbogus = 3\n").unwrap_err();
        match err {
            ConfigError::Line { line, text, .. } => {
                assert_eq!(line, 4);
                assert_eq!(text, "bogus = 3");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_value_and_inconsistency() {
        assert!(matches!(
            Config::parse("embed_dim=abc"),
            Err(ConfigError::Line { line: 1, .. })
        ));
        assert!(matches!(
            Config::parse("embed_dim=64\nnum_heads=3"),
            Err(ConfigError::Inconsistent(_))
        ));
        assert!(Config::parse("image_size=30\nsps_pool=1,1,0,0").is_err());
    }

    #[test]
    fn stem_geometry() {
        let cfg = ModelConfig {
            embed_dim: 384,
            image_height: 32,
            image_width: 32,
            ..Default::default()
        };
        assert_eq!(cfg.sps_channels(), vec![48, 96, 192, 384]);
        assert_eq!(cfg.num_tokens(), 64);
        let imagenet = ModelConfig {
            image_height: 224,
            image_width: 224,
            sps_pool: vec![true; 4],
            ..cfg
        };
        assert_eq!(imagenet.num_tokens(), 196);
    }
}
