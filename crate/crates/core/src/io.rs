//! Versioned JSON files for corpora, models, configs and metrics.
//!
//! Every file is written canonically: object keys sorted, floats with 17
//! significant digits in exponent form, integers verbatim, two-space
//! indentation, arrays of scalars on one line. Loading then saving a
//! canonical file reproduces it byte for byte.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

use crate::demonstrations::{DemoCorpus, Demonstration, RewardThresholds};
use crate::dynamics::DynamicsKind;
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::learner::LearnConfig;
use crate::rbf::SafetyModel;

pub const SCHEMA_VERSION: u64 = 1;

/// On-disk corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoFileV1 {
    pub schema_version: u64,
    pub dynamics: DynamicsKind,
    #[serde(default, skip_serializing_if = "thresholds_unset")]
    pub thresholds: RewardThresholds,
    pub demos: Vec<Demonstration>,
}

fn thresholds_unset(t: &RewardThresholds) -> bool {
    *t == RewardThresholds::default()
}

impl From<&DemoCorpus> for DemoFileV1 {
    fn from(c: &DemoCorpus) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dynamics: c.dynamics,
            thresholds: c.thresholds,
            demos: c.demos.clone(),
        }
    }
}

impl From<DemoFileV1> for DemoCorpus {
    fn from(f: DemoFileV1) -> Self {
        Self {
            dynamics: f.dynamics,
            thresholds: f.thresholds,
            demos: f.demos,
        }
    }
}

/// On-disk learned model with the config and corpus that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFileV1 {
    pub schema_version: u64,
    pub dynamics: DynamicsKind,
    pub sigma: f64,
    pub bias: f64,
    pub centers: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub learn_config_echo: LearnConfig,
    /// Hex SHA-256 of the canonical corpus file.
    pub corpus_digest: String,
}

impl ModelFileV1 {
    pub fn new(model: &SafetyModel, dynamics: DynamicsKind, cfg: &LearnConfig, corpus: &DemoCorpus) -> Result<Self> {
        model.check()?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            dynamics,
            sigma: model.sigma,
            bias: model.bias,
            centers: model.centers.clone(),
            theta: model.theta.clone(),
            learn_config_echo: cfg.clone(),
            corpus_digest: corpus_digest(corpus)?,
        })
    }

    pub fn model(&self) -> Result<SafetyModel> {
        if self.centers.len() != self.theta.len() {
            return Err(Error::Dimension {
                expected: self.centers.len(),
                got: self.theta.len(),
            });
        }
        SafetyModel::new(self.centers.clone(), self.theta.clone(), self.bias, self.sigma)
    }
}

/// Canonical text of any serializable value.
pub fn to_canonical<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&mut out, &v, 0)?;
    out.push('\n');
    Ok(out)
}

fn write_value(out: &mut String, v: &Value, indent: usize) -> Result<()> {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => write_number(out, n)?,
        Value::String(s) => out.push_str(&serde_json::to_string(s)?),
        Value::Array(items) => {
            if items.iter().all(|i| !i.is_array() && !i.is_object()) {
                out.push('[');
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, item, indent)?;
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (k, item) in items.iter().enumerate() {
                    pad(out, indent + 1);
                    write_value(out, item, indent + 1)?;
                    out.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
                }
                pad(out, indent);
                out.push(']');
            }
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return Ok(());
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (k, key) in keys.iter().enumerate() {
                pad(out, indent + 1);
                out.push_str(&serde_json::to_string(key)?);
                out.push_str(": ");
                write_value(out, &map[*key], indent + 1)?;
                out.push_str(if k + 1 < keys.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push('}');
        }
    }
    Ok(())
}

fn pad(out: &mut String, indent: usize) {
    for _ in 0..indent {
        out.push_str("  ");
    }
}

fn write_number(out: &mut String, n: &Number) -> Result<()> {
    if let Some(i) = n.as_u64() {
        write!(out, "{i}").ok();
    } else if let Some(i) = n.as_i64() {
        write!(out, "{i}").ok();
    } else {
        let f = n.as_f64().ok_or_else(|| Error::Format(format!("unrepresentable number {n}")))?;
        if !f.is_finite() {
            return Err(Error::Format("non-finite number".into()));
        }
        write!(out, "{f:.16e}").ok();
    }
    Ok(())
}

/// Writes `text` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, text: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(text)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Parses `text` and checks its `schema_version`. `required` makes a missing
/// version an error.
fn parse_versioned(text: &str, required: bool) -> Result<Map<String, Value>> {
    let v: Value = serde_json::from_str(text)?;
    let Value::Object(mut map) = v else {
        return Err(Error::Format("expected a JSON object".into()));
    };
    match map.remove("schema_version") {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => {}
        Some(Value::Number(n)) => return Err(Error::SchemaVersion(n.as_u64().unwrap_or(0))),
        Some(_) => return Err(Error::Format("schema_version must be an integer".into())),
        None if required => return Err(Error::Format("missing schema_version".into())),
        None => {}
    }
    Ok(map)
}

fn versioned<T: Serialize>(value: &T) -> Result<Value> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(map) = &mut v {
        map.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    }
    Ok(v)
}

fn check_number(v: &Value, what: &dyn Fn() -> String) -> Result<()> {
    match v {
        Value::Number(n) if n.as_f64().is_some_and(f64::is_finite) => Ok(()),
        Value::Array(items) => items.iter().try_for_each(|i| check_number(i, what)),
        _ => Err(Error::Format(format!("{} is not a finite number", what()))),
    }
}

/// Parses a corpus file. Non-numeric or non-finite rewards and coordinates
/// (for example the strings `"NaN"` or `"Infinity"`) are rejected with the
/// offending demo's id.
pub fn corpus_from_str(text: &str) -> Result<DemoCorpus> {
    let mut map = parse_versioned(text, true)?;
    if let Some(Value::Array(demos)) = map.get("demos") {
        for (k, d) in demos.iter().enumerate() {
            let id = d
                .get("id")
                .and_then(Value::as_str)
                .map(str::to_string)
                .unwrap_or_else(|| format!("#{k}"));
            if let Some(r) = d.get("reward") {
                check_number(r, &|| format!("demo '{id}': reward"))?;
            }
            if let Some(Value::Array(points)) = d.get("points") {
                for (i, p) in points.iter().enumerate() {
                    for key in ["x", "u"] {
                        if let Some(v) = p.get(key) {
                            check_number(v, &|| format!("demo '{id}' point {i}: {key}"))?;
                        }
                    }
                }
            }
        }
    }
    map.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    let file: DemoFileV1 = serde_json::from_value(Value::Object(map))?;
    Ok(file.into())
}

pub fn corpus_to_string(corpus: &DemoCorpus) -> Result<String> {
    to_canonical(&DemoFileV1::from(corpus))
}

/// Hex SHA-256 of the canonical corpus text.
pub fn corpus_digest(corpus: &DemoCorpus) -> Result<String> {
    Ok(hex::encode(Sha256::digest(corpus_to_string(corpus)?.as_bytes())))
}

pub fn model_from_str(text: &str) -> Result<ModelFileV1> {
    let mut map = parse_versioned(text, true)?;
    map.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    let file: ModelFileV1 = serde_json::from_value(Value::Object(map))?;
    file.model()?;
    Ok(file)
}

pub fn model_to_string(file: &ModelFileV1) -> Result<String> {
    file.model()?;
    to_canonical(file)
}

/// Config files may omit `schema_version` and any field left at its default.
pub fn config_from_str(text: &str) -> Result<LearnConfig> {
    let map = parse_versioned(text, false)?;
    let cfg: LearnConfig = serde_json::from_value(Value::Object(map))?;
    cfg.check()?;
    Ok(cfg)
}

pub fn config_to_string(cfg: &LearnConfig) -> Result<String> {
    to_canonical(&versioned(cfg)?)
}

pub fn metrics_from_str(text: &str) -> Result<MetricsReport> {
    let map = parse_versioned(text, true)?;
    Ok(serde_json::from_value(Value::Object(map))?)
}

pub fn metrics_to_string(m: &MetricsReport) -> Result<String> {
    to_canonical(&versioned(m)?)
}

/// Any other serializable value, stamped with the schema version.
pub fn versioned_to_string<T: Serialize>(value: &T) -> Result<String> {
    to_canonical(&versioned(value)?)
}

/// Any other versioned file.
pub fn versioned_from_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let map = parse_versioned(text, false)?;
    Ok(serde_json::from_value(Value::Object(map))?)
}

fn read(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

pub fn load_corpus(path: &Path) -> Result<DemoCorpus> {
    corpus_from_str(&read(path)?)
}

pub fn save_corpus(path: &Path, corpus: &DemoCorpus) -> Result<()> {
    write_atomic(path, corpus_to_string(corpus)?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<ModelFileV1> {
    model_from_str(&read(path)?)
}

pub fn save_model(path: &Path, file: &ModelFileV1) -> Result<()> {
    write_atomic(path, model_to_string(file)?.as_bytes())
}

pub fn load_config(path: &Path) -> Result<LearnConfig> {
    config_from_str(&read(path)?)
}

pub fn save_config(path: &Path, cfg: &LearnConfig) -> Result<()> {
    write_atomic(path, config_to_string(cfg)?.as_bytes())
}

pub fn load_metrics(path: &Path) -> Result<MetricsReport> {
    metrics_from_str(&read(path)?)
}

pub fn save_metrics(path: &Path, m: &MetricsReport) -> Result<()> {
    write_atomic(path, metrics_to_string(m)?.as_bytes())
}
