//! Append-only run manifest (`manifest.jsonl`), one JSON record per line.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vitsplice::metrics::TransferReport;

pub const FILE_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum RunRecord {
    Start {
        command: String,
        code_version: String,
        timestamp: u64,
        seed: u64,
        ablation: Vec<String>,
        deterministic: bool,
        config: String,
        inputs: BTreeMap<String, InputRecord>,
        #[serde(default)]
        extra: BTreeMap<String, String>,
    },
    Finish {
        timestamp: u64,
        iterations: usize,
        seconds: f64,
    },
    Failure {
        timestamp: u64,
        message: String,
    },
    Metrics {
        timestamp: u64,
        report: TransferReport,
    },
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunRecord {
    pub fn start(command: &str, config: String, seed: u64, ablation: Vec<&str>, deterministic: bool) -> Self {
        RunRecord::Start {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: now(),
            seed,
            ablation: ablation.into_iter().map(String::from).collect(),
            deterministic,
            config,
            inputs: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn finish(iterations: usize, seconds: f64) -> Self {
        RunRecord::Finish {
            timestamp: now(),
            iterations,
            seconds,
        }
    }

    pub fn failure(message: &str) -> Self {
        RunRecord::Failure {
            timestamp: now(),
            message: message.to_string(),
        }
    }

    pub fn metrics(report: TransferReport) -> Self {
        RunRecord::Metrics {
            timestamp: now(),
            report,
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path, hash: String) {
        if let RunRecord::Start { inputs, .. } = self {
            let path = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
            inputs.insert(name.to_string(), InputRecord { path, hash });
        }
    }

    pub fn extra(&mut self, key: &str, value: String) {
        if let RunRecord::Start { extra, .. } = self {
            extra.insert(key.to_string(), value);
        }
    }

    pub fn input(&self, name: &str) -> Option<PathBuf> {
        match self {
            RunRecord::Start { inputs, .. } => inputs.get(name).map(|i| i.path.clone()),
            _ => None,
        }
    }
}

pub struct Manifest {
    path: PathBuf,
}

impl Manifest {
    pub fn open(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(FILE_NAME);
        if !path.is_file() {
            return Err(anyhow!(vitsplice::Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no run manifest")
            )));
        }
        Ok(Self { path })
    }

    pub fn open_or_create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
        Ok(Self {
            path: dir.join(FILE_NAME),
        })
    }

    pub fn append(&mut self, record: &RunRecord) -> anyhow::Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .with_context(|| self.path.display().to_string())?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    pub fn records(&self) -> anyhow::Result<Vec<RunRecord>> {
        let text = fs::read_to_string(&self.path).with_context(|| self.path.display().to_string())?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).context("malformed manifest record"))
            .collect()
    }

    pub fn first_run(&self) -> anyhow::Result<RunRecord> {
        self.records()?
            .into_iter()
            .find(|r| matches!(r, RunRecord::Start { .. }))
            .ok_or_else(|| anyhow!("manifest has no start record"))
    }
}

pub fn file_hash(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| path.display().to_string())?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
