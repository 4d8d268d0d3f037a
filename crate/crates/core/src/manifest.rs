//! Run manifest: what produced a set of output files. Its hash covers
//! everything except the timestamps and is stamped into every output header.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::sha256_hex;
use crate::error::Result;
use crate::io::{Table, TIMESTAMP_KEY};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileRef {
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    /// Flags that change the data, in command-line order.
    pub flags: Vec<String>,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_unix_s: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_unix_s: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            tool: "cavity-vacuum".into(),
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            flags: Vec::new(),
            config_sha256: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix_s: Some(unix_now()),
            finished_unix_s: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(FileRef {
            path: path.display().to_string(),
            sha256: Some(sha256_hex(&bytes)),
        });
        Ok(())
    }

    /// Hash of the manifest with both timestamps removed.
    pub fn hash(&self) -> String {
        let stripped = RunManifest {
            started_unix_s: None,
            finished_unix_s: None,
            ..self.clone()
        };
        sha256_hex(serde_json::to_string(&stripped).expect("manifest serializes").as_bytes())
    }

    /// Standard header lines for an output table.
    pub fn stamp(&self, table: Table) -> Table {
        let mut t = table
            .meta("tool", format!("{} {}", self.tool, self.tool_version))
            .meta("command", &self.command)
            .meta("manifest_sha256", self.hash());
        if let Some(h) = &self.config_sha256 {
            t = t.meta("config_sha256", h);
        }
        if let Some(s) = self.seed {
            t = t.meta("seed", s);
        }
        t.meta(TIMESTAMP_KEY, self.started_unix_s.unwrap_or(0))
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_unix_s = Some(unix_now());
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.manifest.json", self.command));
        let mut v = serde_json::to_value(&self)?;
        v["manifest_sha256"] = self.hash().into();
        std::fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}
