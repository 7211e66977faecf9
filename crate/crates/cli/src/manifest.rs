// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-invocation run manifest: resolved parameters, input and output
//! digests. The manifest digest covers the subcommand, parameters and input
//! digests, so two runs with the same digest must write the same outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use langconf::container::write_atomic;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub name: String,
    pub out_dir: PathBuf,
    pub params: Map<String, Value>,
    pub seed: Option<u64>,
    /// Path to sha256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// File name to sha256 of every file written.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub digest: String,
}

pub struct Run {
    subcommand: String,
    name: String,
    out_dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: u64,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| langconf::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Run {
    pub fn start(subcommand: &str, out_dir: &Path, name: &str) -> CliResult<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| langconf::Error::Io {
            path: out_dir.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            subcommand: subcommand.into(),
            name: name.into(),
            out_dir: out_dir.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: now(),
        })
    }

    /// Register an input file; fails if it cannot be read.
    pub fn input(&mut self, path: &Path) -> CliResult<PathBuf> {
        let d = file_digest(path)?;
        self.inputs.insert(path.display().to_string(), d);
        Ok(path.to_path_buf())
    }

    /// `<out>/<name>.<suffix>`
    pub fn path(&self, suffix: &str) -> PathBuf {
        self.out_dir.join(format!("{}.{suffix}", self.name))
    }

    /// Record a file some library call already wrote atomically.
    pub fn record(&mut self, path: &Path) -> CliResult<()> {
        let d = file_digest(path)?;
        let key = path
            .strip_prefix(&self.out_dir)
            .unwrap_or(path)
            .display()
            .to_string();
        self.outputs.insert(key, d);
        Ok(())
    }

    pub fn write_bytes(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        write_atomic(path, bytes)?;
        self.record(path)
    }

    pub fn write_text(&mut self, suffix: &str, text: &str) -> CliResult<PathBuf> {
        let p = self.path(suffix);
        self.write_bytes(&p, text.as_bytes())?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, suffix: &str, value: &T) -> CliResult<PathBuf> {
        let p = self.path(suffix);
        langconf::io::write_json(&p, value)?;
        self.record(&p)?;
        Ok(p)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, suffix: &str, items: &[T]) -> CliResult<PathBuf> {
        let p = self.path(suffix);
        langconf::io::write_jsonl(&p, items)?;
        self.record(&p)?;
        Ok(p)
    }

    pub fn finish(self, params: &Map<String, Value>, seed: Option<u64>) -> CliResult<RunManifest> {
        let identity = serde_json::json!({
            "subcommand": self.subcommand,
            "params": params,
            "inputs": self.inputs,
        });
        let digest = hex::encode(Sha256::digest(identity.to_string().as_bytes()));
        let m = RunManifest {
            subcommand: self.subcommand,
            name: self.name.clone(),
            out_dir: self.out_dir.clone(),
            params: params.clone(),
            seed,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started,
            finished_unix: now(),
            digest,
        };
        let p = self.out_dir.join(format!("{}.manifest.json", self.name));
        langconf::io::write_json(&p, &m)?;
        Ok(m)
    }
}
