//! Artifact writers. Every JSON artifact wraps its payload with the config
//! hash and seed; CSV files get a `.meta.json` sidecar carrying the same.

use anyhow::{Context, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct Artifact<T: Serialize> {
    pub schema: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub payload: T,
}

pub struct Writer {
    out_dir: PathBuf,
    config_hash: String,
    seed: u64,
}

impl Writer {
    pub fn new(out_dir: &Path, config_hash: &str, seed: u64) -> Result<Writer> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
        Ok(Writer {
            out_dir: out_dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            seed,
        })
    }

    pub fn json<T: Serialize>(
        &self,
        name: &str,
        schema: &str,
        command: &str,
        payload: T,
    ) -> Result<PathBuf> {
        let artifact = Artifact {
            schema: schema.to_string(),
            command: command.to_string(),
            config_sha256: self.config_hash.clone(),
            seed: self.seed,
            payload,
        };
        let path = self.out_dir.join(name);
        let mut text = serde_json::to_string_pretty(&artifact)?;
        text.push('\n');
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    pub fn csv(&self, name: &str, schema: &str, command: &str, body: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, body)
            .with_context(|| format!("cannot write {}", path.display()))?;
        #[derive(Serialize)]
        struct Meta<'a> {
            schema: &'a str,
            command: &'a str,
            config_sha256: &'a str,
            seed: u64,
            csv_file: &'a str,
        }
        let meta_path = self.out_dir.join(format!("{name}.meta.json"));
        let mut text = serde_json::to_string_pretty(&Meta {
            schema,
            command,
            config_sha256: &self.config_hash,
            seed: self.seed,
            csv_file: name,
        })?;
        text.push('\n');
        std::fs::write(&meta_path, text)
            .with_context(|| format!("cannot write {}", meta_path.display()))?;
        Ok(path)
    }

    pub fn raw(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
