//! Run manifests: a text record of the command, build, config hash, seeds
//! and the content hash of every artifact a command wrote.

use std::path::Path;

use mdif_core::io::sha256_hex;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Identifier of this build (package version plus `git describe`).
pub const BUILD_ID: &str = env!("MDIF_BUILD_ID");

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<(String, u64)>,
    pub deterministic: bool,
    /// `(relative path, sha256)` in write order.
    pub artifacts: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, deterministic: bool) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            seeds: cfg.seeds().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            deterministic,
            artifacts: Vec::new(),
        }
    }

    /// Writes `bytes` to `dir/name` and records its hash.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
        crate::write_bytes(&dir.join(name), bytes)?;
        self.artifacts.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "command={}\nbuild={}\nconfig_hash={}\ndeterministic={}\n",
            self.command, BUILD_ID, self.config_hash, self.deterministic
        );
        for (k, v) in &self.seeds {
            s.push_str(&format!("seed.{k}={v}\n"));
        }
        for (name, hash) in &self.artifacts {
            s.push_str(&format!("artifact={name} sha256={hash}\n"));
        }
        s
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        crate::write_bytes(&dir.join(MANIFEST_FILE), self.render().as_bytes())
    }

    /// Artifact entries of a manifest file.
    pub fn read_artifacts(dir: &Path) -> CliResult<Vec<(String, String)>> {
        let text = crate::read_text(&dir.join(MANIFEST_FILE))?;
        text.lines()
            .filter_map(|l| l.strip_prefix("artifact="))
            .map(|rest| {
                let (name, hash) = rest
                    .split_once(" sha256=")
                    .ok_or_else(|| CliError::Integrity(format!("malformed manifest line `{rest}`")))?;
                Ok((name.to_string(), hash.to_string()))
            })
            .collect()
    }

    /// Reads `dir/name`, checking it against the hash a manifest recorded.
    pub fn read_verified(dir: &Path, name: &str, hash: &str) -> CliResult<Vec<u8>> {
        let bytes = crate::read_bytes(&dir.join(name))?;
        if sha256_hex(&bytes) != hash {
            return Err(CliError::Integrity(format!("{name} does not match its manifest hash")));
        }
        Ok(bytes)
    }
}
