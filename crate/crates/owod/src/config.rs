//! Experiment configuration: one JSON document namespaced by module,
//! validated against the bundled schema before it is deserialised.

use std::fmt;
use std::path::Path;

use owod_core::detector::ModelConfig;
use owod_core::etop::EtopConfig;
use owod_core::eval::EvalOptions;
use owod_core::loss::LossConfig;
use owod_core::protocol::{ObjectnessConfig, OptimConfig, Phase, StepConfig, TrainSession};
use owod_core::shapeworld::ProtocolSpec;
use owod_core::tdqi::TdqiConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: String,
    pub protocol: ProtocolSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExemplarConfig {
    /// Scenes kept per class.
    pub k: usize,
    /// Times the exemplar scenes are repeated in a fine-tuning epoch.
    pub replay: usize,
    /// Fine-tune on the current task's training scenes as well.
    pub include_current: bool,
}

impl Default for ExemplarConfig {
    fn default() -> Self {
        Self {
            k: 25,
            replay: 1,
            include_current: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub optim: OptimConfig,
    pub sessions: Vec<TrainSession>,
    pub exemplars: ExemplarConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub shapeworld_data: DataConfig,
    pub detector_core: ModelConfig,
    pub tdqi: TdqiConfig,
    pub objectness: ObjectnessConfig,
    pub etop: EtopConfig,
    pub matching_loss: LossConfig,
    pub owod_protocol: ProtocolConfig,
    pub evaluation: EvalOptions,
}

/// One schema or consistency problem, located by JSON pointer.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub pointer: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "{at}: {}", self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config failed validation:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),
    #[error("bad override `{0}`: expected dotted.path=value")]
    Override(String),
}

fn diag(pointer: &str, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

/// Default training sessions: each task trains for `train.0` epochs with a
/// drop at `train.1`; later tasks then fine-tune for `ft.0` epochs, drop at `ft.1`.
pub fn default_sessions(tasks: usize, lr: f64, train: (usize, usize), ft: (usize, usize), seed: u64) -> Vec<TrainSession> {
    let mut out = Vec::new();
    for t in 1..=tasks {
        out.push(TrainSession {
            task_id: t,
            phase: Phase::Train,
            epochs: train.0,
            base_lr: lr,
            lr_drop_epoch: train.1,
            lr_drop_factor: 0.1,
            batch_size: 4,
            seed: seed.wrapping_add(t as u64 * 1000),
            flip: true,
        });
        if t > 1 {
            out.push(TrainSession {
                task_id: t,
                phase: Phase::Finetune,
                epochs: ft.0,
                base_lr: lr,
                lr_drop_epoch: ft.1,
                lr_drop_factor: 0.1,
                batch_size: 4,
                seed: seed.wrapping_add(t as u64 * 1000 + 1),
                flip: true,
            });
        }
    }
    out
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let protocol = ProtocolSpec::default();
        let tasks = protocol.class_groups.len();
        Self {
            seed: 0,
            shapeworld_data: DataConfig {
                root: "data".to_string(),
                protocol,
            },
            detector_core: ModelConfig {
                embed_dim: 32,
                ffn_dim: 64,
                ..ModelConfig::default()
            },
            tdqi: TdqiConfig::default(),
            // Ridge scaled to the unit per-dimension variance of layer-normed
            // embeddings; early batches hold fewer matches than dimensions.
            objectness: ObjectnessConfig {
                eps: 1e-2,
                ..ObjectnessConfig::default()
            },
            etop: EtopConfig::default(),
            matching_loss: LossConfig::default(),
            owod_protocol: ProtocolConfig {
                optim: OptimConfig::default(),
                sessions: default_sessions(tasks, 1e-3, (20, 15), (10, 7), 0),
                exemplars: ExemplarConfig::default(),
            },
            evaluation: EvalOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with(path, &[])
    }

    /// Reads `path`, applies `key=value` overrides, then validates.
    pub fn load_with(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut value: Value = serde_json::from_str(&text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        let schema: Value = serde_json::from_str(SCHEMA).expect("bundled schema is JSON");
        let compiled = jsonschema::JSONSchema::compile(&schema).expect("bundled schema compiles");
        if let Err(errors) = compiled.validate(&value) {
            let mut diags: Vec<Diagnostic> = errors.map(|e| diag(&e.instance_path.to_string(), e.to_string())).collect();
            diags.sort_by(|a, b| a.pointer.cmp(&b.pointer));
            return Err(ConfigError::Invalid(diags));
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| ConfigError::Invalid(vec![diag("", e.to_string())]))?;
        let diags = cfg.check();
        if diags.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(diags))
        }
    }

    /// Cross-field constraints the schema cannot express.
    pub fn check(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let m = &self.detector_core;
        if let Err(e) = m.validate() {
            out.push(diag("/detector_core", e.to_string()));
        }
        let p = &self.shapeworld_data.protocol;
        if m.num_classes != p.num_classes {
            out.push(diag("/detector_core/num_classes", format!("{} differs from protocol num_classes {}", m.num_classes, p.num_classes)));
        }
        if m.image_width != p.scene.width || m.image_height != p.scene.height {
            out.push(diag("/detector_core/image_width", "image size differs from the protocol scene size"));
        }
        if self.tdqi.total() != m.num_queries {
            out.push(diag(
                "/tdqi",
                format!("n_qs + n_lq = {} but num_queries = {}", self.tdqi.total(), m.num_queries),
            ));
        }
        if self.tdqi.selected() > m.tokens() {
            out.push(diag("/tdqi/n_qs", format!("{} exceeds the {} encoder tokens", self.tdqi.n_qs, m.tokens())));
        }
        if let Err(e) = self.etop.validate(m.decoder_layers) {
            out.push(diag("/etop", e.to_string()));
        }
        if let Some(l) = self.objectness.stats_layer {
            if l > m.decoder_layers {
                out.push(diag("/objectness/stats_layer", format!("{l} exceeds {} decoder layers", m.decoder_layers)));
            }
        }
        let tasks = p.class_groups.len();
        for (i, s) in self.owod_protocol.sessions.iter().enumerate() {
            let at = format!("/owod_protocol/sessions/{i}");
            if let Err(e) = s.validate() {
                out.push(diag(&at, e.to_string()));
            }
            if s.task_id > tasks {
                out.push(diag(&format!("{at}/task_id"), format!("protocol has {tasks} tasks")));
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        hex(&Sha256::digest(serde_json::to_vec(&value).expect("value serialises")))
    }

    pub fn sessions_for(&self, task_id: usize) -> Vec<&TrainSession> {
        self.owod_protocol.sessions.iter().filter(|s| s.task_id == task_id).collect()
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            loss: self.matching_loss.clone(),
            etop: self.etop.clone(),
            objectness: self.objectness.clone(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets `a.b.c=value` in a JSON tree. The value is parsed as JSON when
/// possible and taken as a string otherwise; numeric path segments index
/// arrays.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    if path.is_empty() {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| ConfigError::Override(spec.to_string()))?;
                let slot = items.get_mut(idx).ok_or_else(|| ConfigError::Override(spec.to_string()))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(ConfigError::Override(spec.to_string())),
        };
    }
    unreachable!("loop returns on the last segment")
}
