//! Run and sweep configuration.
//!
//! Configurations are TOML documents whose keys, once flattened, form dotted
//! paths such as `optimizer.gate_lr_multiplier`. Tables and dotted keys are
//! interchangeable. Every key must be known; see [`RunConfig::known_keys`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::backbone::EncoderConfig;
use crate::data::TaskSpec;
use crate::diagnostics::Thresholds;
use crate::error::{LabError, Result};
use crate::objective::ObjectiveConfig;
use crate::optim::{OptimizerConfig, Phase};
use crate::variant::VariantSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub record_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seeds: vec![1, 2, 3],
            output_dir: None,
            record_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub encoder: EncoderConfig,
    pub task: TaskSpec,
    pub variant: VariantSpec,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub diagnostics: Thresholds,
}

/// Keys whose defaults are absent and therefore invisible when flattening.
const OPTIONAL_KEYS: [&str; 5] = [
    "run.output_dir",
    "optimizer.clip_max_norm",
    "optimizer.temperature.start",
    "optimizer.temperature.end",
    "optimizer.temperature.epochs",
];

/// Keys left out of the configuration hash: they do not change what a run
/// computes for a given seed.
const UNHASHED_KEYS: [&str; 2] = ["run.output_dir", "run.seeds"];

fn flatten_json(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn flatten_toml(prefix: &str, v: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_toml(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn toml_to_json(key: &str, v: &toml::Value) -> Result<Value> {
    Ok(match v {
        toml::Value::String(s) => Value::String(s.clone()),
        toml::Value::Integer(i) => Value::from(*i),
        toml::Value::Float(f) => {
            Value::from(serde_json::Number::from_f64(*f).ok_or_else(|| LabError::BadValue {
                key: key.into(),
                reason: "non-finite number".into(),
            })?)
        }
        toml::Value::Boolean(b) => Value::Bool(*b),
        toml::Value::Array(a) => Value::Array(a.iter().map(|x| toml_to_json(key, x)).collect::<Result<_>>()?),
        toml::Value::Datetime(_) | toml::Value::Table(_) => {
            return Err(LabError::BadValue {
                key: key.into(),
                reason: "unsupported value type".into(),
            })
        }
    })
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.get(*part).is_some_and(Value::is_object) {
            node[*part] = Value::Object(Map::new());
        }
        node = node.get_mut(*part).expect("just inserted");
    }
    node[parts[parts.len() - 1]] = value;
}

fn temperature_default() -> Value {
    serde_json::json!({ "start": 1.0, "end": 1.0, "epochs": 0.0 })
}

/// Normalizes special-cased values before they are merged.
fn prepare(key: &str, value: Value) -> Result<Value> {
    if key != "optimizer.phases" {
        return Ok(value);
    }
    match &value {
        Value::String(s) if s == "default" => Ok(serde_json::to_value(Phase::default_schedule())?),
        Value::String(s) if s == "none" => Ok(Value::Null),
        Value::Array(_) => Ok(value),
        _ => Err(LabError::BadValue {
            key: key.into(),
            reason: "expected \"default\", \"none\" or a list of `start..end:group,group` strings".into(),
        }),
    }
}

/// Renders a JSON leaf as a TOML value.
fn toml_literal(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => {
            let f = n.as_f64().expect("f64 number");
            let s = format!("{f:?}");
            if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
                s
            } else {
                format!("{s}.0")
            }
        }
        Value::Array(items) => format!("[{}]", items.iter().map(toml_literal).collect::<Vec<_>>().join(", ")),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Every accepted dotted key.
    pub fn known_keys() -> Vec<String> {
        let mut keys: Vec<String> = flat(&RunConfig::default())
            .into_keys()
            .filter(|k| k != "optimizer.temperature")
            .collect();
        keys.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
        keys.sort();
        keys.dedup();
        keys
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(LabError::BadValue {
                key: "run.seeds".into(),
                reason: "at least one seed is required".into(),
            });
        }
        if self.run.record_every == 0 {
            return Err(LabError::BadValue {
                key: "run.record_every".into(),
                reason: "must be at least 1".into(),
            });
        }
        self.encoder.validate()?;
        self.task.validate()?;
        self.variant.validate()?;
        self.objective.validate()?;
        self.optimizer.validate()?;
        if self.task.n_patch_tokens != self.encoder.n_patch_tokens || self.task.patch_dim != self.encoder.vision_width {
            return Err(LabError::Config(
                "task.n_patch_tokens/task.patch_dim must match encoder.n_patch_tokens/encoder.vision_width".into(),
            ));
        }
        Ok(())
    }

    /// Applies dotted-key overrides on top of `self`.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, Value)>) -> Result<Self> {
        let known = Self::known_keys();
        let mut root = serde_json::to_value(self)?;
        for (key, value) in pairs {
            if !known.iter().any(|k| k == key) {
                return Err(LabError::UnknownKey(key.to_string()));
            }
            if key.starts_with("optimizer.temperature.") && root["optimizer"]["temperature"].is_null() {
                root["optimizer"]["temperature"] = temperature_default();
            }
            set_path(&mut root, key, prepare(key, value)?);
            serde_json::from_value::<RunConfig>(root.clone()).map_err(|e| LabError::BadValue {
                key: key.to_string(),
                reason: e.to_string(),
            })?;
        }
        Ok(serde_json::from_value(root)?)
    }

    /// Parses TOML text over the defaults and validates the result.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        let mut pairs = Vec::new();
        flatten_toml("", &toml::Value::Table(doc), &mut pairs);
        let pairs = pairs
            .iter()
            .map(|(k, v)| Ok((k.as_str(), toml_to_json(k, v)?)))
            .collect::<Result<Vec<_>>>()?;
        let cfg = RunConfig::default().with_overrides(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Canonical `key = value` listing of every set key, sorted.
    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in flat(self) {
            if !v.is_null() {
                out.push_str(&format!("{k} = {}\n", toml_literal(&v)));
            }
        }
        out
    }

    /// SHA-256 over the canonical listing, without output location and seeds.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in flat(self) {
            if !UNHASHED_KEYS.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn flat(cfg: &RunConfig) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_json("", &serde_json::to_value(cfg).expect("configuration serializes"), &mut out);
    out
}

/// A grid of overrides expanded into one configuration per cell.
#[derive(Clone, Debug)]
pub struct Sweep {
    pub name: String,
    pub base: RunConfig,
    /// Cell label and its configuration, in grid order.
    pub cells: Vec<(String, RunConfig)>,
}

impl Sweep {
    /// Parses a sweep document:
    ///
    /// ```toml
    /// name = "strategies"
    /// base = "adaptive.toml"     # optional, relative to the sweep file
    /// [set]                      # optional, applied to every cell
    /// "run.seeds" = [1, 2, 3]
    /// [grid]
    /// "variant.strategy" = ["fixed-all-on", "per-token"]
    /// ```
    pub fn from_toml_str(text: &str, dir: &Path) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        for key in doc.keys() {
            if !["name", "base", "set", "grid"].contains(&key.as_str()) {
                return Err(LabError::UnknownKey(key.clone()));
            }
        }
        let name = match doc.get("name") {
            None => "sweep".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(LabError::Config("`name` must be a string".into())),
        };
        let mut base = match doc.get("base") {
            None => RunConfig::default(),
            Some(toml::Value::String(p)) => RunConfig::load(&dir.join(p))?,
            Some(_) => return Err(LabError::Config("`base` must be a path string".into())),
        };
        let table = |key: &str| -> Result<Vec<(String, toml::Value)>> {
            match doc.get(key) {
                None => Ok(Vec::new()),
                Some(toml::Value::Table(t)) => {
                    let mut pairs = Vec::new();
                    flatten_toml("", &toml::Value::Table(t.clone()), &mut pairs);
                    Ok(pairs)
                }
                Some(_) => Err(LabError::Config(format!("`{key}` must be a table"))),
            }
        };
        let set = table("set")?;
        let set_json = set
            .iter()
            .map(|(k, v)| Ok((k.as_str(), toml_to_json(k, v)?)))
            .collect::<Result<Vec<_>>>()?;
        base = base.with_overrides(set_json)?;

        let grid = table("grid")?;
        if grid.is_empty() {
            return Err(LabError::Config("sweep grid has no overrides".into()));
        }
        let mut axes: Vec<(String, Vec<Value>)> = Vec::new();
        for (k, v) in &grid {
            let values = match toml_to_json(k, v)? {
                Value::Array(items) => items,
                _ => return Err(LabError::BadValue {
                    key: k.clone(),
                    reason: "grid entries must be lists".into(),
                }),
            };
            if values.is_empty() {
                return Err(LabError::BadValue {
                    key: k.clone(),
                    reason: "empty override list".into(),
                });
            }
            axes.push((k.clone(), values));
        }

        let mut cells = vec![(Vec::<String>::new(), base.clone())];
        for (key, values) in &axes {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for (labels, cfg) in &cells {
                for v in values {
                    let cfg = cfg.with_overrides([(key.as_str(), v.clone())])?;
                    cfg.validate()?;
                    let mut labels = labels.clone();
                    let shown = match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    labels.push(format!("{}={shown}", key.rsplit('.').next().unwrap_or(key)));
                    next.push((labels, cfg));
                }
            }
            cells = next;
        }
        let cells = cells
            .into_iter()
            .map(|(labels, mut cfg)| {
                let label = labels.join(",");
                cfg.run.name = format!("{name}/{}", sanitize(&label));
                (label, cfg)
            })
            .collect();
        Ok(Sweep { name, base, cells })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Directory-safe form of a cell label.
pub fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}
