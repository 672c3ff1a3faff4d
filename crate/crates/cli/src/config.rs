//! The JSON configuration document accepted by `simulate` and `sweep`.

use std::path::{Path, PathBuf};

use fusillade::network::{validate, CycleSchedule, NetworkConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub schema_version: String,
    pub network: NetworkConfig,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub format: Format,
    #[serde(default)]
    pub trace: bool,
    /// Summary destination; standard output when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl ConfigDocument {
    /// Parses a document, reporting schema violations with the path of the
    /// offending field.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let doc: ConfigDocument = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                CliError::Config(inner.to_string())
            } else {
                CliError::Config(format!("{path}: {inner}"))
            }
        })?;
        de.end().map_err(|e| CliError::Config(e.to_string()))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version: unsupported version {:?}, expected {SCHEMA_VERSION:?}",
                doc.schema_version
            )));
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Structural checks on the network plus the derived timing.
    pub fn check(&self) -> CliResult<CycleSchedule> {
        Ok(validate(&self.network)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config documents always serialize")
    }
}
