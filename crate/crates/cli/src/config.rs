//! Run configuration, file layout and the error kinds that map to exit codes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Result;
use omnitft::ingest::PrepConfig;
use omnitft::labeler::DeltaTable;
use omnitft::model::ModelConfig;
use omnitft::schema::{DatasetSchema, Schema};
use omnitft::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const EVENTS_FILE: &str = "events.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const REGIMES_FILE: &str = "regimes.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_SCHEMA_MISMATCH: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("training diverged at epoch {0}; the last good model was saved")]
    Diverged(usize),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::SchemaMismatch(_) => EXIT_SCHEMA_MISMATCH,
            Failure::Diverged(_) => EXIT_DIVERGED,
        }
    }
}

/// Everything `train` needs besides data and schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prep: PrepConfig,
    /// Window stride in grid steps.
    pub stride: Stride,
    /// Per-target cutoffs; targets not listed use the training 75th percentile.
    pub deltas: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Stride(pub usize);

impl Default for Stride {
    fn default() -> Self {
        Stride(1)
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let bad = |m: String| -> Result<()> { Err(Failure::Config(m).into()) };
        if let Err(e) = self.model.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return bad(e.to_string());
        }
        if self.train.quantiles != self.model.quantiles {
            return bad("train.quantiles and model.quantiles differ".into());
        }
        if self.stride.0 == 0 {
            return bad("stride must be at least 1".into());
        }
        for name in self.deltas.keys() {
            match schema.feature_index(name) {
                Ok(i) if schema.targets().contains(&i) => {}
                _ => return bad(format!("delta given for {name:?}, which is not a target")),
            }
        }
        Ok(())
    }

    pub fn delta_table(&self) -> DeltaTable {
        DeltaTable {
            delta: self.deltas.clone(),
        }
    }
}

/// Reads and validates a schema document; a missing or malformed file is a config error.
pub fn load_schema(path: &Path) -> Result<Schema> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read schema {}: {e}", path.display())))?;
    let doc = DatasetSchema::from_json(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let schema = doc
        .validate()
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(schema)
}

pub fn load_delta_table(path: Option<&Path>) -> Result<DeltaTable> {
    let Some(path) = path else {
        return Ok(DeltaTable::default());
    };
    let text = fs::read_to_string(path).map_err(|e| {
        Failure::Config(format!("cannot read delta config {}: {e}", path.display()))
    })?;
    Ok(DeltaTable::from_json(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?)
}
