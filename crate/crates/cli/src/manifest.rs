//! Per-command run manifest: config echo, content hashes of every input,
//! outputs written, wall time and a timestamp.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Git-style object hash: `sha256("blob <len>\0" ++ content)`, hex encoded.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct InputEntry {
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: serde_json::Value,
    pub inputs: Vec<InputEntry>,
    /// Hash over the sorted `hash path` lines of all inputs.
    pub input_hash: String,
    pub outputs: Vec<String>,
    pub wall_ms: u64,
    pub timestamp_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            input_hash: String::new(),
            outputs: Vec::new(),
            wall_ms: 0,
            timestamp_unix: 0,
        }
    }

    pub fn add_input(&mut self, path: &Path, content: &[u8]) {
        self.inputs.push(InputEntry {
            path: path.display().to_string(),
            hash: blob_hash(content),
        });
    }

    /// Stamps the input hash and timestamp and serializes.
    pub fn finish(&mut self) -> serde_json::Result<Vec<u8>> {
        let mut lines: Vec<String> = self.inputs.iter().map(|i| format!("{} {}\n", i.hash, i.path)).collect();
        lines.sort();
        self.input_hash = blob_hash(lines.concat().as_bytes());
        self.timestamp_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }
}
