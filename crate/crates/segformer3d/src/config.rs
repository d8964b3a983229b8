//! Run configuration: one JSON document covering model, data, training, and
//! paths, with dotted-key overrides layered on top.
//!
//! A config file may be partial — missing sections and fields fall back to
//! defaults — but unknown keys anywhere are rejected, so typos fail loudly
//! before any work starts. Overrides are `key.path=value` strings whose value
//! part is parsed as JSON when possible (`train.epochs=20`,
//! `model.widths=[32,64,160,256]`) and as a bare string otherwise
//! (`paths.out_dir=runs/a`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Environment variable consulted for the default output directory when
/// neither a CLI flag nor `paths.out_dir` provides one.
pub const OUT_DIR_ENV: &str = "SEGFORMER3D_OUT_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Where training runs write metrics and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Dataset directory for the training split.
    pub train_dir: Option<PathBuf>,
    /// Dataset directory for the held-out split.
    pub eval_dir: Option<PathBuf>,
    /// Checkpoint directory for evaluation.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Validate every section; schedule step counts are checked again at
    /// train time once the dataset size is known.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Load a config file (or start from defaults when `path` is `None`),
    /// then apply `key.path=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut doc = match path {
            Some(p) => {
                let bytes = std::fs::read(p)?;
                let v: Value = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Config(format!("unparseable config {}: {e}", p.display())))?;
                if !v.is_object() {
                    return Err(Error::Config(format!(
                        "config {} must hold a JSON object",
                        p.display()
                    )));
                }
                v
            }
            None => Value::Object(Default::default()),
        };
        for spec in overrides {
            apply_override(&mut doc, spec)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }
}

/// Set `doc[key.path] = value` for one `key.path=value` override, creating
/// intermediate objects as needed.
fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {spec:?} has an empty key segment")));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut node = doc;
    let mut segments = key.split('.').peekable();
    while let Some(seg) = segments.next() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override {spec:?} descends into non-object key {seg:?}"))
        })?;
        if segments.peek().is_none() {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        node = obj.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split('.') yields at least one segment");
}
