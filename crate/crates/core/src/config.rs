//! Model and training configuration with a flat `key = value` text format
//! (`model.d = 64`). Unknown keys are rejected; serialization lists every key
//! in sorted order so parse → serialize → parse is the identity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared hidden size of text, emotion and context vectors.
    pub d: usize,
    pub d_vision: usize,
    /// Patch grid side P (P×P patches per image).
    pub grid: usize,
    pub patch_width: usize,
    pub patch_size: usize,
    pub max_len: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub context_width: usize,
    pub context_layers: usize,
    pub context_heads: usize,
    pub cross_width: usize,
    pub cross_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub ffn_ratio: usize,
    pub ln_eps: f64,
    /// Swap query/key roles in the cross-modal encoder (ablation).
    pub qk_swap: bool,
    pub freeze_emotion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_vision: 64,
            grid: 4,
            patch_width: 16,
            patch_size: 16,
            max_len: 60,
            text_layers: 2,
            text_heads: 4,
            context_width: 64,
            context_layers: 2,
            context_heads: 4,
            cross_width: 64,
            cross_heads: 4,
            decoder_layers: 3,
            decoder_heads: 4,
            ffn_ratio: 4,
            ln_eps: 1e-12,
            qk_swap: false,
            freeze_emotion: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d", self.d),
            ("model.d_vision", self.d_vision),
            ("model.grid", self.grid),
            ("model.patch_width", self.patch_width),
            ("model.patch_size", self.patch_size),
            ("model.max_len", self.max_len),
            ("model.text_layers", self.text_layers),
            ("model.text_heads", self.text_heads),
            ("model.context_width", self.context_width),
            ("model.context_layers", self.context_layers),
            ("model.context_heads", self.context_heads),
            ("model.cross_width", self.cross_width),
            ("model.cross_heads", self.cross_heads),
            ("model.decoder_layers", self.decoder_layers),
            ("model.decoder_heads", self.decoder_heads),
            ("model.ffn_ratio", self.ffn_ratio),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        let divides = [
            ("model.text_heads", self.text_heads, "model.d", self.d),
            ("model.context_heads", self.context_heads, "model.context_width", self.context_width),
            ("model.context_heads", self.context_heads, "model.d", self.d),
            ("model.cross_heads", self.cross_heads, "model.cross_width", self.cross_width),
            ("model.cross_heads", self.cross_heads, "model.d", self.d),
            ("model.decoder_heads", self.decoder_heads, "model.d", self.d),
        ];
        for (hk, h, wk, w) in divides {
            if w % h != 0 {
                return Err(Error::Config(format!("{hk} = {h} does not divide {wk} = {w}")));
            }
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("model.ln_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionMode {
    Rule,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adamw: AdamWConfig,
    /// Scheduler first-cycle length in steps; 0 means one epoch.
    pub sched_t0: u64,
    pub sched_t_mult: u64,
    pub lr_min: f64,
    pub seed: u64,
    pub fraction: f64,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: u64,
    pub grad_clip: f64,
    pub bce_eps: f64,
    pub emotion_mode: EmotionMode,
    pub emotion_command: String,
    pub emotion_timeout_ms: u64,
    /// Evaluate validation ap50 every this many epochs (the last epoch always evaluates).
    pub eval_every: usize,
    pub vocab: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 6,
            batch_size: 16,
            lr: 1e-3,
            adamw: AdamWConfig::default(),
            sched_t0: 0,
            sched_t_mult: 2,
            lr_min: 0.0,
            seed: 0,
            fraction: 1.0,
            max_steps: 0,
            grad_clip: 5.0,
            bce_eps: 1e-7,
            emotion_mode: EmotionMode::Rule,
            emotion_command: String::new(),
            emotion_timeout_ms: 2000,
            eval_every: 1,
            vocab: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train.fraction must be in (0, 1], got {}",
                self.fraction
            )));
        }
        if self.sched_t_mult < 1 {
            return Err(Error::Config("train.sched_t_mult must be at least 1".into()));
        }
        if self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(Error::Config("train.lr_min must be in [0, train.lr]".into()));
        }
        if !(self.bce_eps > 0.0 && self.bce_eps < 0.5) {
            return Err(Error::Config("train.bce_eps must be in (0, 0.5)".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be positive".into()));
        }
        if self.emotion_mode == EmotionMode::External && self.emotion_command.trim().is_empty() {
            return Err(Error::Config(
                "emotion.command is required when emotion.mode = external".into(),
            ));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let v = value.trim();
        match key {
            "model.d" => m.d = parse_num(key, v)?,
            "model.d_vision" => m.d_vision = parse_num(key, v)?,
            "model.grid" => m.grid = parse_num(key, v)?,
            "model.patch_width" => m.patch_width = parse_num(key, v)?,
            "model.patch_size" => m.patch_size = parse_num(key, v)?,
            "model.max_len" => m.max_len = parse_num(key, v)?,
            "model.text_layers" => m.text_layers = parse_num(key, v)?,
            "model.text_heads" => m.text_heads = parse_num(key, v)?,
            "model.context_width" => m.context_width = parse_num(key, v)?,
            "model.context_layers" => m.context_layers = parse_num(key, v)?,
            "model.context_heads" => m.context_heads = parse_num(key, v)?,
            "model.cross_width" => m.cross_width = parse_num(key, v)?,
            "model.cross_heads" => m.cross_heads = parse_num(key, v)?,
            "model.decoder_layers" => m.decoder_layers = parse_num(key, v)?,
            "model.decoder_heads" => m.decoder_heads = parse_num(key, v)?,
            "model.ffn_ratio" => m.ffn_ratio = parse_num(key, v)?,
            "model.ln_eps" => m.ln_eps = parse_num(key, v)?,
            "model.qk_swap" => m.qk_swap = parse_bool(key, v)?,
            "model.freeze_emotion" => m.freeze_emotion = parse_bool(key, v)?,
            "train.epochs" => self.epochs = parse_num(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.lr" => self.lr = parse_num(key, v)?,
            "train.beta1" => self.adamw.beta1 = parse_num(key, v)?,
            "train.beta2" => self.adamw.beta2 = parse_num(key, v)?,
            "train.adam_eps" => self.adamw.eps = parse_num(key, v)?,
            "train.weight_decay" => self.adamw.weight_decay = parse_num(key, v)?,
            "train.sched_t0" => self.sched_t0 = parse_num(key, v)?,
            "train.sched_t_mult" => self.sched_t_mult = parse_num(key, v)?,
            "train.lr_min" => self.lr_min = parse_num(key, v)?,
            "train.seed" => self.seed = parse_num(key, v)?,
            "train.fraction" => self.fraction = parse_num(key, v)?,
            "train.max_steps" => self.max_steps = parse_num(key, v)?,
            "train.grad_clip" => self.grad_clip = parse_num(key, v)?,
            "train.bce_eps" => self.bce_eps = parse_num(key, v)?,
            "train.eval_every" => self.eval_every = parse_num(key, v)?,
            "train.vocab" => self.vocab = (!v.is_empty()).then(|| PathBuf::from(v)),
            "emotion.mode" => {
                self.emotion_mode = match v {
                    "rule" => EmotionMode::Rule,
                    "external" => EmotionMode::External,
                    _ => return Err(Error::Config(format!("{key}: expected rule or external"))),
                }
            }
            "emotion.command" => self.emotion_command = v.to_string(),
            "emotion.timeout_ms" => self.emotion_timeout_ms = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let mut out = BTreeMap::new();
        out.insert("model.d", m.d.to_string());
        out.insert("model.d_vision", m.d_vision.to_string());
        out.insert("model.grid", m.grid.to_string());
        out.insert("model.patch_width", m.patch_width.to_string());
        out.insert("model.patch_size", m.patch_size.to_string());
        out.insert("model.max_len", m.max_len.to_string());
        out.insert("model.text_layers", m.text_layers.to_string());
        out.insert("model.text_heads", m.text_heads.to_string());
        out.insert("model.context_width", m.context_width.to_string());
        out.insert("model.context_layers", m.context_layers.to_string());
        out.insert("model.context_heads", m.context_heads.to_string());
        out.insert("model.cross_width", m.cross_width.to_string());
        out.insert("model.cross_heads", m.cross_heads.to_string());
        out.insert("model.decoder_layers", m.decoder_layers.to_string());
        out.insert("model.decoder_heads", m.decoder_heads.to_string());
        out.insert("model.ffn_ratio", m.ffn_ratio.to_string());
        out.insert("model.ln_eps", format!("{:e}", m.ln_eps));
        out.insert("model.qk_swap", m.qk_swap.to_string());
        out.insert("model.freeze_emotion", m.freeze_emotion.to_string());
        out.insert("train.epochs", self.epochs.to_string());
        out.insert("train.batch_size", self.batch_size.to_string());
        out.insert("train.lr", format!("{:e}", self.lr));
        out.insert("train.beta1", self.adamw.beta1.to_string());
        out.insert("train.beta2", self.adamw.beta2.to_string());
        out.insert("train.adam_eps", format!("{:e}", self.adamw.eps));
        out.insert("train.weight_decay", self.adamw.weight_decay.to_string());
        out.insert("train.sched_t0", self.sched_t0.to_string());
        out.insert("train.sched_t_mult", self.sched_t_mult.to_string());
        out.insert("train.lr_min", self.lr_min.to_string());
        out.insert("train.seed", self.seed.to_string());
        out.insert("train.fraction", self.fraction.to_string());
        out.insert("train.max_steps", self.max_steps.to_string());
        out.insert("train.grad_clip", self.grad_clip.to_string());
        out.insert("train.bce_eps", format!("{:e}", self.bce_eps));
        out.insert("train.eval_every", self.eval_every.to_string());
        out.insert(
            "train.vocab",
            self.vocab
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        out.insert(
            "emotion.mode",
            match self.emotion_mode {
                EmotionMode::Rule => "rule",
                EmotionMode::External => "external",
            }
            .to_string(),
        );
        out.insert("emotion.command", self.emotion_command.clone());
        out.insert("emotion.timeout_ms", self.emotion_timeout_ms.to_string());
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses a config document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }
}
