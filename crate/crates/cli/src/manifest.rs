use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Written next to every set of outputs as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the input file bytes (data CSV or study config).
    pub input_digest: String,
    pub seed: Option<u64>,
    pub options: BTreeMap<String, String>,
    pub tool_version: String,
    /// RFC 3339; taken from `SOURCE_DATE_EPOCH` when that is set.
    pub timestamp: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, input_digest: String, seed: Option<u64>, options: BTreeMap<String, String>) -> Self {
        Self {
            command: command.to_string(),
            input_digest,
            seed,
            options,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: timestamp(),
            outputs: Vec::new(),
        }
    }
}

fn timestamp() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0));
    fixed.unwrap_or_else(Utc::now).to_rfc3339_opts(SecondsFormat::Secs, true)
}
