//! Flat `key = value` configuration covering every model and training field.

use std::fmt::Write as _;

use toml::Value;

use crate::backbone::AttentionLayer;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{Augmentation, TrainConfig};

pub const MODEL_KEYS: &[&str] = &[
    "input_channels",
    "input_size",
    "widths",
    "blocks_per_stage",
    "stage_strides",
    "residual",
    "num_classes",
    "attention_layer",
    "fin_depth",
    "use_fin",
];

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "base_lr",
    "momentum",
    "batch_size",
    "weight_decay",
    "seed",
    "augmentation",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn bad(key: &str, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {detail}"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(bad(key, format!("expected a non-negative integer, got {v}"))),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, format!("expected a number, got {v}"))),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, format!("expected true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, format!("expected a string, got {v}")))
}

fn as_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::Array(items) => items.iter().map(|i| as_usize(key, i)).collect(),
        Value::Integer(_) => Ok(vec![as_usize(key, v)?]),
        _ => Err(bad(key, format!("expected a list of integers, got {v}"))),
    }
}

fn list_text(items: &[usize]) -> String {
    let parts: Vec<String> = items.iter().map(usize::to_string).collect();
    format!("[{}]", parts.join(", "))
}

/// Reads a command-line value: TOML syntax when it parses, a bare string otherwise.
/// Comma-separated integers (`8,16,32`) are accepted as lists.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if let Ok(table) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    if raw.contains(',') {
        let ints: Option<Vec<Value>> = raw
            .split(',')
            .map(|p| p.trim().parse::<i64>().ok().map(Value::Integer))
            .collect();
        if let Some(ints) = ints {
            return Value::Array(ints);
        }
    }
    Value::String(raw.to_string())
}

impl ModelConfig {
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let b = &mut self.backbone;
        match key {
            "input_channels" => b.input_channels = as_usize(key, v)?,
            "input_size" => {
                b.input_size = match v {
                    Value::Integer(_) => {
                        let s = as_usize(key, v)?;
                        (s, s)
                    }
                    Value::Array(_) => match as_list(key, v)?.as_slice() {
                        [h, w] => (*h, *w),
                        _ => return Err(bad(key, "expected [h, w]")),
                    },
                    Value::String(s) => {
                        let (h, w) = s.split_once('x').ok_or_else(|| bad(key, "expected HxW"))?;
                        let p = |t: &str| t.trim().parse().map_err(|_| bad(key, format!("bad size `{s}`")));
                        (p(h)?, p(w)?)
                    }
                    _ => return Err(bad(key, format!("expected a size, got {v}"))),
                }
            }
            "widths" => b.widths = as_list(key, v)?,
            "blocks_per_stage" => b.blocks_per_stage = as_usize(key, v)?,
            "stage_strides" => b.stage_strides = as_list(key, v)?,
            "residual" => b.residual = as_bool(key, v)?,
            "num_classes" => b.num_classes = as_usize(key, v)?,
            "attention_layer" => b.attention_layer = as_str(key, v)?.parse::<AttentionLayer>()?,
            "fin_depth" => self.fin_depth = as_usize(key, v)?,
            "use_fin" => self.use_fin = as_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        let b = &self.backbone;
        let mut s = String::new();
        let _ = writeln!(s, "input_channels = {}", b.input_channels);
        let _ = writeln!(s, "input_size = [{}, {}]", b.input_size.0, b.input_size.1);
        let _ = writeln!(s, "widths = {}", list_text(&b.widths));
        let _ = writeln!(s, "blocks_per_stage = {}", b.blocks_per_stage);
        let _ = writeln!(s, "stage_strides = {}", list_text(&b.stage_strides));
        let _ = writeln!(s, "residual = {}", b.residual);
        let _ = writeln!(s, "num_classes = {}", b.num_classes);
        let _ = writeln!(s, "attention_layer = \"{}\"", b.attention_layer);
        let _ = writeln!(s, "fin_depth = {}", self.fin_depth);
        let _ = writeln!(s, "use_fin = {}", self.use_fin);
        s
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut cfg = ModelConfig::default();
        for (k, v) in &table {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "epochs" => self.epochs = as_usize(key, v)?,
            "base_lr" => self.base_lr = as_f64(key, v)?,
            "momentum" => self.momentum = as_f64(key, v)?,
            "batch_size" => self.batch_size = as_usize(key, v)?,
            "weight_decay" => self.weight_decay = as_f64(key, v)?,
            "seed" => self.seed = as_usize(key, v)? as u64,
            "augmentation" => self.augmentation = as_str(key, v)?.parse::<Augmentation>()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

impl RunConfig {
    /// Sets one field; `use_fin` is shared by the model and training halves.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        if key == "use_fin" {
            let on = as_bool(key, v)?;
            self.model.use_fin = on;
            self.train.use_fin = on;
            Ok(())
        } else if MODEL_KEYS.contains(&key) {
            self.model.set(key, v)
        } else if TRAIN_KEYS.contains(&key) {
            self.train.set(key, v)
        } else {
            Err(Error::Config(format!("unknown key `{key}`")))
        }
    }

    pub fn set_raw(&mut self, key: &str, raw: &str) -> Result<()> {
        self.set(key, &parse_value(raw))
    }

    /// Applies every assignment of a config file on top of `self`.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for (k, v) in &table {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
