//! JSON checkpoints for trained runs and bare policies.
//!
//! Parameters are stored nested (tabular rows, or featurized blocks) next to
//! the digest of the prompt space they were trained on. Loading checks the
//! format version before anything else, then the digest.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::PromptSpace;
use crate::error::{Error, Result};
use crate::eval::MetricsRow;
use crate::objectives::ValueTable;
use crate::optim::OptimizerState;
use crate::policy::{Policy, PolicyClass, PolicyKind};
use crate::trainer::{TrainConfig, TrainResult};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerBlock {
    policy: OptimizerState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u64,
    class: PolicyClass,
    parameters: Vec<Vec<f64>>,
    space_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value_table: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metrics: Option<Vec<MetricsRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wall_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oracle_kl_ref: Option<f64>,
}

impl CheckpointFile {
    fn policy_only(policy: &Policy) -> Self {
        Self {
            version: CHECKPOINT_VERSION.into(),
            class: policy.class(),
            parameters: policy.nested_params(),
            space_digest: policy.space().digest(),
            value_table: None,
            optimizer: None,
            metrics: None,
            config: None,
            wall_ms: None,
            oracle_kl_ref: None,
        }
    }

    fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::MalformedDocument(format!("checkpoint: {e}")))?;
        let version = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::MalformedDocument("checkpoint has no version".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        serde_json::from_value(value)
            .map_err(|e| Error::MalformedDocument(format!("checkpoint: {e}")))
    }

    fn policy(&self, space: &Arc<PromptSpace>) -> Result<Policy> {
        let digest = space.digest();
        if self.space_digest != digest {
            return Err(Error::DigestMismatch {
                expected: digest,
                found: self.space_digest.clone(),
            });
        }
        let kind = match self.class {
            PolicyClass::Tabular => PolicyKind::Tabular,
            PolicyClass::Featurized => PolicyKind::Featurized {
                hidden: self.parameters.len().checked_sub(3).ok_or_else(|| {
                    Error::MalformedDocument("featurized checkpoint is too short".into())
                })?,
            },
        };
        Policy::from_nested(space.clone(), kind, &self.parameters)
    }
}

fn write(path: &Path, file: &CheckpointFile) -> Result<()> {
    let text = serde_json::to_string_pretty(file)
        .map_err(|e| Error::MalformedDocument(format!("checkpoint: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<CheckpointFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CheckpointFile::parse(&text)
}

pub fn save_policy(policy: &Policy, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &CheckpointFile::policy_only(policy))
}

/// Loads the parameters of any checkpoint, full or policy-only.
pub fn load_policy(path: impl AsRef<Path>, space: &Arc<PromptSpace>) -> Result<Policy> {
    read(path.as_ref())?.policy(space)
}

pub fn save_checkpoint(result: &TrainResult, path: impl AsRef<Path>) -> Result<()> {
    let mut file = CheckpointFile::policy_only(&result.policy);
    file.value_table = result.values.as_ref().map(|v| v.values.clone());
    file.optimizer = Some(OptimizerBlock {
        policy: result.optimizer.clone(),
        value: result.value_optimizer.clone(),
    });
    file.metrics = Some(result.rows.clone());
    file.config = Some(result.config.clone());
    file.wall_ms = Some(result.wall_ms);
    file.oracle_kl_ref = Some(result.oracle_kl_ref);
    write(path.as_ref(), &file)
}

/// Restores a full training result.
pub fn load_checkpoint(path: impl AsRef<Path>, space: &Arc<PromptSpace>) -> Result<TrainResult> {
    let path = path.as_ref();
    let file = read(path)?;
    let policy = file.policy(space)?;
    let missing = |what: &str| {
        Error::MalformedDocument(format!(
            "{} is a policy-only checkpoint (no {what})",
            path.display()
        ))
    };
    let config = file.config.ok_or_else(|| missing("config"))?;
    if config.policy_class != policy.class() {
        return Err(Error::ClassMismatch {
            expected: config.policy_class.as_str(),
            found: policy.class().as_str(),
        });
    }
    let values = match file.value_table {
        Some(values) if values.len() != space.len() => {
            return Err(Error::DimensionMismatch {
                expected: space.len(),
                found: values.len(),
            })
        }
        Some(values) => Some(ValueTable { values }),
        None => None,
    };
    let optimizer = file.optimizer.ok_or_else(|| missing("optimizer"))?;
    let rows = file.metrics.ok_or_else(|| missing("metrics"))?;
    if rows.is_empty() {
        return Err(missing("metric rows"));
    }
    Ok(TrainResult {
        config,
        rows,
        policy,
        values,
        optimizer: optimizer.policy,
        value_optimizer: optimizer.value,
        wall_ms: file.wall_ms.unwrap_or(0),
        oracle_kl_ref: file.oracle_kl_ref.ok_or_else(|| missing("oracle_kl_ref"))?,
    })
}
