//! Run manifests: resolved configuration plus digests of every input file,
//! written before a command starts producing outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use dsgkd::io::{parse_key_values, write_atomic};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<(String, String)>,
    pub version: String,
    pub timestamp: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read input {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: Vec<(String, String)>, inputs: &[PathBuf]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(RunManifest {
            command: command.to_string(),
            config,
            inputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("command = {}\nversion = {}\ntimestamp = {}\n", self.command, self.version, self.timestamp);
        for (k, v) in &self.config {
            s += &format!("config.{k} = {v}\n");
        }
        for (p, d) in &self.inputs {
            s += &format!("input.{p} = sha256:{d}\n");
        }
        s
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let kv = parse_key_values(text, path)?;
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .with_context(|| format!("{path}: missing {k}"))
        };
        let config = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let inputs = kv
            .iter()
            .filter_map(|(k, v)| {
                let p = k.strip_prefix("input.")?;
                Some((p.to_string(), v.strip_prefix("sha256:").unwrap_or(v).to_string()))
            })
            .collect();
        Ok(RunManifest {
            command: get("command")?,
            config,
            inputs,
            version: get("version")?,
            timestamp: get("timestamp")?.parse().context("bad timestamp")?,
        })
    }

    /// Same command, configuration and input digests.
    pub fn same_run(&self, other: &RunManifest) -> bool {
        self.command == other.command && self.config == other.config && self.inputs == other.inputs
    }
}

/// Policy for writing into an output location that may already hold results.
#[derive(Clone, Copy, Debug)]
pub struct Overwrite {
    pub force: bool,
    pub resume: bool,
}

/// Refuses to clobber earlier outputs unless `--force` is given, or
/// `--resume` is given and the earlier manifest describes the same run.
/// On success the new manifest is written to `manifest_path`.
pub fn claim_output(manifest_path: &Path, outputs: &[PathBuf], manifest: &RunManifest, how: Overwrite) -> Result<()> {
    if manifest_path.exists() && how.resume && !how.force {
        let text = fs::read_to_string(manifest_path)?;
        let old = RunManifest::parse(&text, &manifest_path.display().to_string())?;
        if !old.same_run(manifest) {
            let changed: Vec<&str> = manifest
                .inputs
                .iter()
                .filter(|i| !old.inputs.contains(i))
                .map(|(p, _)| p.as_str())
                .collect();
            bail!(
                "refusing to resume into {}: inputs or configuration differ from the recorded run (changed inputs: {})",
                manifest_path.display(),
                if changed.is_empty() { "none".to_string() } else { changed.join(", ") }
            );
        }
    } else if !how.force {
        if let Some(p) = outputs.iter().chain([&manifest_path.to_path_buf()]).find(|p| p.exists()) {
            bail!("{} already exists; pass --force to overwrite", p.display());
        }
    }
    write_atomic(manifest_path, manifest.to_text().as_bytes())?;
    Ok(())
}
