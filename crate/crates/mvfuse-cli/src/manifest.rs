//! Run manifests: every command freezes its fully resolved configuration and
//! artifact paths into one JSON file, so a run can be reproduced from the
//! manifest alone.

use std::collections::BTreeMap;
use std::path::Path;

use mvfuse_core::Result;
use serde::Serialize;

#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: String,
    pub started_at: String,
    pub finished_at: String,
    /// The command's resolved configuration, no unset fields.
    pub config: serde_json::Value,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn begin(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: "mvfuse",
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: String::new(),
            config,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.artifacts
            .insert(name.to_string(), path.display().to_string());
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_at = chrono::Utc::now().to_rfc3339();
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| mvfuse_core::Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
