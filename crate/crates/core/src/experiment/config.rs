use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderSpec, GroupKind};
use crate::error::{Error, Result};
use crate::hga::HgaConfig;
use crate::moec::Renormalization;
use crate::pipeline::{
    ConnectorKind, FusionKind, LossWeights, ModelConfig, OptimizerKind, Schedule, TaskConfig, TrainSettings,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub connector: ConnectorKind,
    pub fusion: FusionKind,
    /// Active groups; appended in the fixed group order whatever the order
    /// here.
    pub encoders: Vec<GroupKind>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            connector: ConnectorKind::Moec,
            fusion: FusionKind::Hga,
            encoders: GroupKind::APPEND_ORDER.to_vec(),
            input_dim: 16,
            output_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoecSection {
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub renormalization: Renormalization,
}

impl Default for MoecSection {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 2,
            hidden_dim: 8,
            renormalization: Renormalization::Softmax,
        }
    }
}

/// Per-group overrides; unset fields take the group's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl EncoderOverride {
    fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTable {
    #[serde(skip_serializing_if = "EncoderOverride::is_empty")]
    pub siglip: EncoderOverride,
    #[serde(skip_serializing_if = "EncoderOverride::is_empty")]
    pub dinov2: EncoderOverride,
    #[serde(skip_serializing_if = "EncoderOverride::is_empty")]
    pub convnext: EncoderOverride,
    #[serde(skip_serializing_if = "EncoderOverride::is_empty")]
    pub clip: EncoderOverride,
}

impl EncoderTable {
    pub fn get(&self, g: GroupKind) -> &EncoderOverride {
        match g {
            GroupKind::Siglip => &self.siglip,
            GroupKind::Dinov2 => &self.dinov2,
            GroupKind::Convnext => &self.convnext,
            GroupKind::Clip => &self.clip,
        }
    }

    pub fn spec(&self, g: GroupKind) -> EncoderSpec {
        let o = self.get(g);
        let d = EncoderSpec::default_for(g);
        EncoderSpec {
            group: g,
            token_count: o.tokens.unwrap_or(d.token_count),
            channel_dim: o.channels.unwrap_or(d.channel_dim),
            needs_channel_pooling: o.pool.unwrap_or(d.needs_channel_pooling),
            seed: o.seed.unwrap_or(d.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub schedule: Schedule,
    pub freeze_connector: bool,
    /// Write a metric record every this many steps (and after the last).
    pub metric_every: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        let t = TrainSettings::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            momentum: t.momentum,
            schedule: t.schedule,
            freeze_connector: t.freeze_connector,
            metric_every: 1,
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Values swept by the ablation matrix; an empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationAxes {
    pub connector: Vec<ConnectorKind>,
    pub fusion: Vec<FusionKind>,
    pub encoders: Vec<Vec<GroupKind>>,
    pub top_k: Vec<usize>,
}

/// A full experiment definition as read from a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub moec: MoecSection,
    pub hga: HgaConfig,
    pub loss: LossWeights,
    pub task: TaskConfig,
    pub encoders: EncoderTable,
    pub run: RunSection,
    pub ablation: AblationAxes,
}

impl ExperimentConfig {
    /// Experiment wrapper around [`ModelConfig::tiny`].
    pub fn tiny() -> Self {
        let mut c = Self::default();
        let m = ModelConfig::tiny();
        c.model.input_dim = m.input_dim;
        c.model.output_dim = m.output_dim;
        c.moec.hidden_dim = m.hidden_dim;
        for e in &m.encoders {
            let o = EncoderOverride {
                tokens: Some(e.token_count),
                channels: Some(e.channel_dim),
                pool: None,
                seed: None,
            };
            match e.group {
                GroupKind::Siglip => c.encoders.siglip = o,
                GroupKind::Dinov2 => c.encoders.dinov2 = o,
                GroupKind::Convnext => c.encoders.convnext = o,
                GroupKind::Clip => c.encoders.clip = o,
            }
        }
        c
    }

    pub fn model_config(&self) -> ModelConfig {
        let encoders = GroupKind::APPEND_ORDER
            .into_iter()
            .filter(|g| self.model.encoders.contains(g))
            .map(|g| self.encoders.spec(g))
            .collect();
        ModelConfig {
            seed: self.seed,
            encoders,
            connector: self.model.connector,
            fusion: self.model.fusion,
            input_dim: self.model.input_dim,
            output_dim: self.model.output_dim,
            num_experts: self.moec.num_experts,
            top_k: self.moec.top_k,
            hidden_dim: self.moec.hidden_dim,
            renormalization: self.moec.renormalization,
            hga: self.hga.clone(),
            loss: self.loss,
            task: self.task,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        let r = &self.run;
        TrainSettings {
            steps: r.steps,
            batch_size: r.batch_size,
            learning_rate: r.learning_rate,
            optimizer: r.optimizer,
            momentum: r.momentum,
            schedule: r.schedule,
            freeze_connector: r.freeze_connector,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.encoders.is_empty() {
            return Err(Error::config("model.encoders", "encoder subset must not be empty"));
        }
        let mut seen = Vec::new();
        for g in &self.model.encoders {
            if seen.contains(g) {
                return Err(Error::config("model.encoders", format!("`{g}` listed twice")));
            }
            seen.push(*g);
        }
        self.model_config().validate()?;
        self.train_settings().validate()?;
        if self.run.metric_every == 0 {
            return Err(Error::config("run.metric_every", "must be at least 1"));
        }
        for set in &self.ablation.encoders {
            if set.is_empty() {
                return Err(Error::config("ablation.encoders", "encoder subsets must not be empty"));
            }
        }
        for &k in &self.ablation.top_k {
            if k == 0 || k > self.moec.num_experts {
                return Err(Error::config(
                    "ablation.top_k",
                    format!("top_k={k} must lie in 1..={}", self.moec.num_experts),
                ));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    /// Parses and validates; errors carry the 1-based line of the offending
    /// key when it appears in `text`.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Like [`Self::from_toml`], with `key=value` overrides applied on top.
    /// A value that is not valid TOML is taken as a string.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg: Self = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| de_error(text, &e))?
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| de_error(text, &e))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            let merged = toml::to_string(&table).map_err(|e| Error::config("<override>", e.to_string()))?;
            toml::from_str(&merged).map_err(|e| {
                let mut err = de_error(&merged, &e);
                if let Error::Config { key, line, .. } = &mut err {
                    *line = locate(text, key);
                }
                err
            })?
        };
        cfg.validate().map_err(|e| match e {
            Error::Config { key, msg, .. } => Error::Config {
                line: locate(text, &key),
                key,
                msg,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like KEY=VALUE"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn de_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    let key = line.and_then(|l| key_on_line(text, l)).unwrap_or_else(|| "<config>".into());
    Error::Config {
        key,
        line,
        msg: e.message().trim().to_string(),
    }
}

/// Section header of a line like `[a.b]`, if it is one.
fn header(line: &str) -> Option<String> {
    let t = line.trim();
    let inner = t.strip_prefix("[[").and_then(|s| s.strip_suffix("]]"));
    let inner = inner.or_else(|| t.strip_prefix('[').and_then(|s| s.strip_suffix(']')))?;
    Some(inner.split('.').map(|p| p.trim().trim_matches('"')).collect::<Vec<_>>().join("."))
}

fn assignment(line: &str) -> Option<String> {
    let t = line.trim();
    if t.starts_with('#') {
        return None;
    }
    let (k, _) = t.split_once('=')?;
    Some(k.split('.').map(|p| p.trim().trim_matches('"')).collect::<Vec<_>>().join("."))
}

/// Dotted key assigned or opened on 1-based `line`.
fn key_on_line(text: &str, line: usize) -> Option<String> {
    let mut section = String::new();
    for (i, l) in text.lines().enumerate() {
        if let Some(h) = header(l) {
            section = h;
            if i + 1 == line {
                return Some(section);
            }
            continue;
        }
        if i + 1 == line {
            let k = assignment(l)?;
            return Some(if section.is_empty() { k } else { format!("{section}.{k}") });
        }
    }
    None
}

/// 1-based line where the dotted `key` is assigned, or where its nearest
/// enclosing section opens.
pub(crate) fn locate(text: &str, key: &str) -> Option<usize> {
    let mut section = String::new();
    let mut best: Option<(usize, usize)> = None;
    for (i, l) in text.lines().enumerate() {
        if let Some(h) = header(l) {
            section = h;
            if key == section || key.starts_with(&format!("{section}.")) {
                let depth = section.len();
                if best.is_none_or(|(d, _)| depth > d) {
                    best = Some((depth, i + 1));
                }
            }
            continue;
        }
        if let Some(k) = assignment(l) {
            let full = if section.is_empty() { k } else { format!("{section}.{k}") };
            if full == key {
                return Some(i + 1);
            }
        }
    }
    best.map(|(_, l)| l)
}
