//! Run context: path resolution, hashed inputs, atomic outputs and the
//! per-invocation manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, config or missing inputs.
    Config(anyhow::Error),
    /// Anything that went wrong while doing the work.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait Classify<T> {
    fn config(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub subcommand: String,
    pub config_hash: Option<String>,
    pub dataset_hashes: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub code_version: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

pub struct Context {
    workdir: PathBuf,
    command: String,
    pub default_seed: u64,
    subcommand: String,
    config_hash: Option<String>,
    dataset_hashes: BTreeMap<String, String>,
    seed: Option<u64>,
    started: Instant,
    started_unix: u64,
    outputs: Vec<(String, PathBuf)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

impl Context {
    pub fn new(workdir: &Path, command: String, default_seed: u64) -> Self {
        Self {
            workdir: workdir.to_path_buf(),
            command,
            default_seed,
            subcommand: String::new(),
            config_hash: None,
            dataset_hashes: BTreeMap::new(),
            seed: None,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            outputs: Vec::new(),
        }
    }

    pub fn begin(&mut self, subcommand: &str) {
        self.subcommand = subcommand.to_string();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    pub fn seed(&mut self, explicit: Option<u64>) -> u64 {
        let s = explicit.unwrap_or(self.default_seed);
        self.seed = Some(s);
        s
    }

    pub fn record_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn record_config<C: Serialize>(&mut self, cfg: &C) -> CmdResult {
        let bytes = serde_json::to_vec(cfg).runtime()?;
        self.config_hash = Some(sha256_hex(&bytes));
        Ok(())
    }

    /// Reads an input file and records its hash. A missing file is a config error.
    pub fn read_input(&mut self, p: &Path) -> CmdResult<Vec<u8>> {
        let full = self.resolve(p);
        let bytes = fs::read(&full)
            .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", full.display()))
            .config()?;
        self.dataset_hashes.insert(p.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn write_output(&mut self, p: &Path, bytes: &[u8]) -> CmdResult {
        let full = self.resolve(p);
        write_atomic(&full, bytes)
            .map_err(|e| anyhow::anyhow!("cannot write {}: {e}", full.display()))
            .runtime()?;
        self.outputs.push((p.display().to_string(), full));
        Ok(())
    }

    pub fn write_json<V: Serialize>(&mut self, p: &Path, value: &V) -> CmdResult {
        let mut bytes = serde_json::to_vec_pretty(value).runtime()?;
        bytes.push(b'\n');
        self.write_output(p, &bytes)
    }

    pub fn write_jsonl<V: Serialize>(&mut self, p: &Path, values: impl IntoIterator<Item = V>) -> CmdResult {
        let mut bytes = Vec::new();
        for v in values {
            serde_json::to_writer(&mut bytes, &v).runtime()?;
            bytes.push(b'\n');
        }
        self.write_output(p, &bytes)
    }

    /// Writes the manifest next to the first output.
    pub fn finish(&mut self) -> CmdResult {
        let Some((first, _)) = self.outputs.first().cloned() else {
            return Ok(());
        };
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: self.command.clone(),
            subcommand: self.subcommand.clone(),
            config_hash: self.config_hash.clone(),
            dataset_hashes: self.dataset_hashes.clone(),
            seed: self.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs.iter().map(|(p, _)| p.clone()).collect(),
        };
        let path = PathBuf::from(format!("{first}.manifest.json"));
        self.write_json(&path, &manifest)
    }

    /// Removes every output this invocation already committed.
    pub fn rollback(&mut self) {
        for (_, full) in self.outputs.drain(..) {
            if let Err(e) = fs::remove_file(&full) {
                log::warn!("could not remove partial output {}: {e}", full.display());
            }
        }
    }
}
