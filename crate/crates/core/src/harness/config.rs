use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dfa::AugConfig;
use crate::error::{invalid, Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Baseline,
    Dfa,
    Constyx,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Dfa => "dfa",
            Method::Constyx => "constyx",
        }
    }

    pub fn augments(self) -> bool {
        self != Method::Baseline
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "dfa" => Ok(Method::Dfa),
            "constyx" => Ok(Method::Constyx),
            other => Err(invalid!(
                "unknown method '{other}' (expected baseline, dfa or constyx)"
            )),
        }
    }
}

/// When the current batch enters the class statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsOrder {
    #[default]
    BeforeAugment,
    AfterAugment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub aug: AugConfig,
    /// `model.seed` is replaced by the run seed at training time.
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    /// L2 penalty added to every parameter gradient.
    pub weight_decay: f64,
    pub source_domain: usize,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub stats_update_order: StatsOrder,
    /// Train on the augmented branch only, dropping the original-feature loss.
    pub aug_only: bool,
    /// Replace AFU weights by ones (constyx only).
    pub force_unit_weights: bool,
}

/// Reference schedule the desk-scale defaults are compared against.
pub const REFERENCE_EPOCHS: usize = 100;
pub const REFERENCE_IMAGE_SIZE: usize = 512;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Constyx,
            aug: AugConfig::default(),
            model: ModelConfig::default(),
            epochs: 40,
            batch_size: 8,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            source_domain: 0,
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/run"),
            seed: 0,
            stats_update_order: StatsOrder::BeforeAugment,
            aug_only: false,
            force_unit_weights: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.method.augments() {
            self.aug.validate(self.model.feature_channels)?;
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            ));
        }
        Ok(())
    }

    /// Applies a JSON object of overrides. Nested objects merge field by
    /// field; unknown keys are rejected.
    pub fn apply_json(&mut self, overrides: &Value) -> Result<()> {
        let mut base = serde_json::to_value(&*self)?;
        merge(&mut base, overrides, "")?;
        *self = serde_json::from_value(base)?;
        Ok(())
    }

    /// Applies a config document: a JSON object, or `key = value` lines with
    /// dotted keys for nested fields (`aug.k = 5`). `#` starts a comment line.
    pub fn apply_document(&mut self, text: &str) -> Result<()> {
        let trimmed = text.trim_start();
        let overrides = if trimmed.starts_with('{') {
            serde_json::from_str(trimmed)?
        } else {
            parse_key_values(text)?
        };
        self.apply_json(&overrides)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_document(&text)?;
        Ok(cfg)
    }

    /// Human-readable notes on where the run departs from the reference schedule.
    pub fn deviations(&self, image_size: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs != REFERENCE_EPOCHS {
            out.push(format!(
                "epochs {} (reference {REFERENCE_EPOCHS})",
                self.epochs
            ));
        }
        if image_size != REFERENCE_IMAGE_SIZE {
            out.push(format!(
                "image size {image_size} (reference {REFERENCE_IMAGE_SIZE})"
            ));
        }
        if self.batch_size != 8 {
            out.push(format!("batch size {} (reference 8)", self.batch_size));
        }
        if self.lr0 != 0.001 || self.momentum != 0.99 {
            out.push(format!(
                "lr0 {} momentum {} (reference 0.001, 0.99)",
                self.lr0, self.momentum
            ));
        }
        if self.weight_decay != 0.0 {
            out.push(format!(
                "weight decay {} (reference none)",
                self.weight_decay
            ));
        }
        out.push("encoder: 3x3 conv stack instead of a ResNet-34 U-Net".into());
        out
    }
}

fn merge(base: &mut Value, overrides: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(b), Value::Object(o)) = (&mut *base, overrides) else {
        return Err(invalid!("config overrides must be a JSON object"));
    };
    for (key, value) in o {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        let slot = b
            .get_mut(key)
            .ok_or_else(|| invalid!("unknown config key '{path}'"))?;
        if slot.is_object() && value.is_object() {
            merge(slot, value, &path)?;
        } else {
            *slot = value.clone();
        }
    }
    Ok(())
}

/// Drops a `#` comment that starts the line or follows whitespace.
fn strip_comment(line: &str) -> &str {
    let mut prev = ' ';
    for (i, ch) in line.char_indices() {
        if ch == '#' && prev.is_whitespace() {
            return &line[..i];
        }
        prev = ch;
    }
    line
}

fn parse_key_values(text: &str) -> Result<Value> {
    let mut root = Map::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = strip_comment(line).trim();
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| invalid!("config line {}: expected key = value", lineno + 1))?;
        let raw = raw.trim();
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .ok_or_else(|| invalid!("config line {}: '{part}' is not a section", lineno + 1))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(Value::Object(root))
}
