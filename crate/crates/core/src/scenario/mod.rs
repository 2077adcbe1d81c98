//! Node configuration and epoch-file generation.

pub mod config;
pub mod format;
pub mod generate;

use thiserror::Error;

use crate::linkmodel::LinkModelError;
use crate::orbit::OrbitError;

pub use config::{merge_common_config, assign_addresses, AddressPlan, MatchRule, NodeConfig, NodeType};
pub use format::{EpochFile, FilePattern, LinkEndpoints, LinkKey, LinkRecord};
pub use generate::{
    diff_snapshots, GeneratorConfig, LinkSet, QuantizationPolicy, SatConfig, ScenarioModel,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("node `{node}` is missing mandatory field `{field}`")]
    MissingField { node: String, field: String },
    #[error(
        "super-CIDR {super_cidr} exhausted: /{prefix_len} slices fit {capacity} nodes, {requested} requested"
    )]
    CidrExhausted {
        super_cidr: String,
        prefix_len: u8,
        capacity: u128,
        requested: usize,
    },
    #[error(transparent)]
    Orbit(#[from] OrbitError),
    #[error(transparent)]
    Link(#[from] LinkModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl ScenarioError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        ScenarioError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        ScenarioError::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
