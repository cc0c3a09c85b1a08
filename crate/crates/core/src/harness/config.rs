use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::condition::PromptDetail;
use crate::error::{Error, Result};
use crate::fusion::{CtTarget, FusionKind, ModalityMask};
use crate::nn::BackboneConfig;
use crate::seghead::DEFAULT_LAMBDA_COND;

/// Everything that defines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub fusion_kind: FusionKind,
    pub ct_target: CtTarget,
    pub ca2_heads: usize,
    /// One CAA weight head per pyramid level instead of a shared one.
    pub caa_per_level: bool,
    pub lambda_cond: f64,
    pub attribute_weight: f64,
    pub prompt_detail: PromptDetail,
    pub ct_dim: usize,
    pub text_layers: usize,
    pub modalities: ModalityMask,
    pub dropout: f64,
    pub shared_backbone: bool,
    pub freeze_backbone: bool,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            seed: 1,
            fusion_kind: FusionKind::Caa,
            ct_target: CtTarget::Q,
            ca2_heads: 1,
            caa_per_level: false,
            lambda_cond: DEFAULT_LAMBDA_COND,
            attribute_weight: 0.25,
            prompt_detail: PromptDetail::FullTemplate,
            ct_dim: 64,
            text_layers: 6,
            modalities: ModalityMask::default(),
            dropout: 0.2,
            shared_backbone: true,
            freeze_backbone: false,
            backbone: BackboneConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.epochs", self.epochs),
            ("train.batch_size", self.batch_size),
            ("fusion.heads", self.ca2_heads),
            ("condition.ct_dim", self.ct_dim),
            ("condition.text_layers", self.text_layers),
            ("model.blocks_per_level", self.backbone.blocks_per_level),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.lambda_cond < 0.0 || self.attribute_weight < 0.0 {
            return Err(Error::Config("rates and weights must be non-negative (learning rate positive)".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("train.dropout {} outside [0, 1]", self.dropout)));
        }
        if self.ct_dim % 2 != 0 {
            return Err(Error::Config("condition.ct_dim must be even (two attention heads)".into()));
        }
        self.modalities.validate()?;
        self.backbone.validate()?;
        if self.backbone.level_channels.iter().any(|c| c % 4 != 0) {
            return Err(Error::Config("model.channels must be multiples of 4".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "train.epochs" => self.epochs = parse_num(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.lr" => self.learning_rate = parse_num(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_num(key, v)?,
            "train.seed" => self.seed = parse_num(key, v)?,
            "train.dropout" => self.dropout = parse_num(key, v)?,
            "fusion.kind" => self.fusion_kind = FusionKind::parse(v)?,
            "fusion.ct_target" => self.ct_target = CtTarget::parse(v)?,
            "fusion.heads" => self.ca2_heads = parse_num(key, v)?,
            "fusion.per_level" => self.caa_per_level = parse_bool(key, v)?,
            "condition.lambda" => self.lambda_cond = parse_num(key, v)?,
            "condition.attribute_weight" => self.attribute_weight = parse_num(key, v)?,
            "condition.prompt" => {
                self.prompt_detail = match v {
                    "full" => PromptDetail::FullTemplate,
                    "single" => PromptDetail::SingleAttribute,
                    _ => return Err(Error::Config(format!("{key}: expected full or single, got '{v}'"))),
                }
            }
            "condition.ct_dim" => self.ct_dim = parse_num(key, v)?,
            "condition.text_layers" => self.text_layers = parse_num(key, v)?,
            "model.modalities" => self.modalities = ModalityMask::parse(v)?,
            "model.shared_backbone" => self.shared_backbone = parse_bool(key, v)?,
            "model.freeze_backbone" => self.freeze_backbone = parse_bool(key, v)?,
            "model.blocks_per_level" => self.backbone.blocks_per_level = parse_num(key, v)?,
            "model.channels" => {
                let parts: Vec<usize> = v.split(',').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?;
                self.backbone.level_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected four channel counts")))?;
            }
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `[section]` headers prefix later keys,
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    /// Applies `key=value` override strings such as command-line flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    /// Inverse of [`TrainConfig::parse`].
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let c = &self.backbone.level_channels;
        let prompt = match self.prompt_detail {
            PromptDetail::FullTemplate => "full",
            PromptDetail::SingleAttribute => "single",
        };
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.learning_rate);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "\n[fusion]");
        let _ = writeln!(s, "kind = {}", self.fusion_kind.name());
        let _ = writeln!(s, "ct_target = {}", self.ct_target.name());
        let _ = writeln!(s, "heads = {}", self.ca2_heads);
        let _ = writeln!(s, "per_level = {}", self.caa_per_level);
        let _ = writeln!(s, "\n[condition]");
        let _ = writeln!(s, "lambda = {}", self.lambda_cond);
        let _ = writeln!(s, "attribute_weight = {}", self.attribute_weight);
        let _ = writeln!(s, "prompt = {prompt}");
        let _ = writeln!(s, "ct_dim = {}", self.ct_dim);
        let _ = writeln!(s, "text_layers = {}", self.text_layers);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "modalities = {}", self.modalities.code());
        let _ = writeln!(s, "shared_backbone = {}", self.shared_backbone);
        let _ = writeln!(s, "freeze_backbone = {}", self.freeze_backbone);
        let _ = writeln!(s, "blocks_per_level = {}", self.backbone.blocks_per_level);
        let _ = writeln!(s, "channels = {},{},{},{}", c[0], c[1], c[2], c[3]);
        s
    }
}
