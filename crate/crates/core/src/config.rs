//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments run to the end of the line
//! seed = 3
//! variant = raim2
//! model.hidden = 32
//! gen.delta = 0.5
//! ```
//!
//! Unknown keys and repeated keys are errors. [`RunConfig::resolved`] prints
//! every key with its effective value; feeding that text back reproduces the
//! same configuration.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Schema, Timeline};
use crate::model::{ModelConfig, Task, TrainConfig, Variant};
use crate::synthgen::GeneratorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimelinePreset {
    Fast,
    Paper,
}

impl TimelinePreset {
    pub fn timeline(self) -> Timeline {
        match self {
            TimelinePreset::Fast => Timeline::fast(),
            TimelinePreset::Paper => Timeline::paper(),
        }
    }
}

/// Model knobs left unset fall back to the profile.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelOverrides {
    pub d_emb: Option<usize>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub bidirectional: Option<bool>,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub beta_in_guided: Option<bool>,
    pub concat_step_input: Option<bool>,
    pub empty_fallback: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub task: Task,
    pub profile: Profile,
    pub timeline: TimelinePreset,
    pub ecg_hz: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: Option<usize>,
    pub train_fraction: f64,
    pub model: ModelOverrides,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: Variant::Raim3,
            task: Task::Decomp,
            profile: Profile::Desk,
            timeline: TimelinePreset::Fast,
            ecg_hz: 50.0,
            epochs: 6,
            batch_size: 32,
            lr: 3e-3,
            patience: None,
            train_fraction: 0.85,
            model: ModelOverrides::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

/// Generator fields that are set through top-level keys instead.
const GEN_SHARED: [&str; 3] = ["seed", "ecg_hz", "timeline"];

/// Splits `key = value` lines. Comments start with `#`.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if !seen.insert(k.to_string()) {
            return Err(Error::Config(format!("line {}: key `{k}` given twice", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn finite(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Config(format!("`{key}`: must be finite, got `{v}`")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Sets one key; the error names the key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = num(key, v)?,
            "variant" => self.variant = Variant::parse(v)?,
            "task" => self.task = Task::parse(v)?,
            "profile" => {
                self.profile = match v {
                    "desk" => Profile::Desk,
                    "paper" => Profile::Paper,
                    _ => return Err(Error::Config(format!("`profile`: expected desk or paper, got `{v}`"))),
                }
            }
            "timeline" => {
                self.timeline = match v {
                    "fast" => TimelinePreset::Fast,
                    "paper" => TimelinePreset::Paper,
                    _ => return Err(Error::Config(format!("`timeline`: expected fast or paper, got `{v}`"))),
                }
            }
            "ecg_hz" => self.ecg_hz = finite(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = finite(key, v)?,
            "patience" => self.patience = if v == "none" { None } else { Some(num(key, v)?) },
            "train_fraction" => self.train_fraction = finite(key, v)?,
            "model.d_emb" => m.d_emb = Some(num(key, v)?),
            "model.hidden" => m.hidden = Some(num(key, v)?),
            "model.layers" => m.layers = Some(num(key, v)?),
            "model.bidirectional" => m.bidirectional = Some(flag(key, v)?),
            "model.n1" => m.n1 = Some(num(key, v)?),
            "model.n2" => m.n2 = Some(num(key, v)?),
            "model.beta_in_guided" => m.beta_in_guided = Some(flag(key, v)?),
            "model.concat_step_input" => m.concat_step_input = Some(flag(key, v)?),
            "model.empty_fallback" => m.empty_fallback = Some(flag(key, v)?),
            _ => match key.strip_prefix("gen.") {
                Some(field) if !GEN_SHARED.contains(&field) => self.set_generator(key, field, v)?,
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            },
        }
        Ok(())
    }

    fn set_generator(&mut self, key: &str, field: &str, v: &str) -> Result<()> {
        let mut obj = serde_json::to_value(&self.generator)?;
        let map = obj.as_object_mut().expect("generator config is an object");
        let slot = map
            .get_mut(field)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        // Pairs may be written `13, 16`.
        let text = if slot.is_array() && !v.starts_with('[') {
            format!("[{v}]")
        } else {
            v.to_string()
        };
        *slot = serde_json::from_str(&text).map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))?;
        self.generator =
            serde_json::from_value(obj).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    pub fn timeline(&self) -> Timeline {
        self.timeline.timeline()
    }

    pub fn schema(&self) -> Schema {
        Schema::standard(self.ecg_hz)
    }

    /// Generator settings with the shared top-level keys applied.
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            ecg_hz: self.ecg_hz,
            timeline: self.timeline(),
            ..self.generator.clone()
        }
    }

    pub fn model_config(&self, schema: &Schema, timeline: &Timeline) -> ModelConfig {
        let mut c = match self.profile {
            Profile::Desk => ModelConfig::desk(schema, timeline, self.variant, self.task),
            Profile::Paper => ModelConfig::paper(schema, timeline, self.variant, self.task),
        };
        let m = &self.model;
        if let Some(d) = m.d_emb {
            c.embed.d_emb = d;
        }
        c.hidden = m.hidden.unwrap_or(c.hidden);
        c.layers = m.layers.unwrap_or(c.layers);
        c.bidirectional = m.bidirectional.unwrap_or(c.bidirectional);
        c.n1 = m.n1.unwrap_or(c.n1);
        c.n2 = m.n2.unwrap_or(c.n2);
        c.beta_in_guided = m.beta_in_guided.unwrap_or(c.beta_in_guided);
        c.concat_step_input = m.concat_step_input.unwrap_or(c.concat_step_input);
        c.empty_fallback = m.empty_fallback.unwrap_or(c.empty_fallback);
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            patience: self.patience,
            initial_loss: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "`train_fraction` must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("`batch_size` must be at least 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("`lr` must be >= 0, got {}", self.lr)));
        }
        self.generator().validate()?;
        let (s, t) = (self.schema(), self.timeline());
        self.model_config(&s, &t).validate()
    }

    /// Every key with its effective value, one per line.
    pub fn resolved(&self) -> String {
        let mc = self.model_config(&self.schema(), &self.timeline());
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("variant = {}", self.variant.as_str()),
            format!("task = {}", self.task.as_str()),
            format!("profile = {}", if self.profile == Profile::Desk { "desk" } else { "paper" }),
            format!(
                "timeline = {}",
                if self.timeline == TimelinePreset::Fast { "fast" } else { "paper" }
            ),
            format!("ecg_hz = {}", self.ecg_hz),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("lr = {}", self.lr),
            format!("patience = {}", self.patience.map_or("none".to_string(), |p| p.to_string())),
            format!("train_fraction = {}", self.train_fraction),
            format!("model.d_emb = {}", mc.embed.d_emb),
            format!("model.hidden = {}", mc.hidden),
            format!("model.layers = {}", mc.layers),
            format!("model.bidirectional = {}", mc.bidirectional),
            format!("model.n1 = {}", mc.n1),
            format!("model.n2 = {}", mc.n2),
            format!("model.beta_in_guided = {}", mc.beta_in_guided),
            format!("model.concat_step_input = {}", mc.concat_step_input),
            format!("model.empty_fallback = {}", mc.empty_fallback),
        ];
        let gen = serde_json::to_value(&self.generator).expect("generator config serializes");
        for (k, v) in gen.as_object().expect("object") {
            if GEN_SHARED.contains(&k.as_str()) {
                continue;
            }
            let text = match v {
                serde_json::Value::Array(items) => items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "),
                other => other.to_string(),
            };
            lines.push(format!("gen.{k} = {text}"));
        }
        lines.push(String::new());
        lines.join("\n")
    }
}
