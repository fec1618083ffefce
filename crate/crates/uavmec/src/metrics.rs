//! Line-delimited metric records and their single writer.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uavmec_core::agents::{AgentKind, EpisodeSummary};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Periodic evaluation during training.
    Train,
    /// Capacity sweep over trained checkpoints.
    Sweep,
}

/// One evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub phase: Phase,
    pub agent: AgentKind,
    /// Training seed of the evaluated model.
    pub seed: u64,
    pub task_seed: u64,
    /// UAV CPU capacity of the evaluation task, cycles/s.
    pub uav_cpu_cap: f64,
    /// Environment slots of training behind the evaluated model.
    pub train_steps: u64,
    pub env_index: usize,
    /// Episode index within the evaluation, `env_index * episodes + k`.
    pub episode: usize,
    pub mean_reward: f64,
    pub total_reward: f64,
    /// End-of-episode computed-task efficiency, bits per second.
    pub efficiency: f64,
    /// Time-averaged backlog per tier and device, bits.
    pub queue_local: f64,
    pub queue_uav: f64,
    pub queue_cloud: f64,
    pub audit_ok: bool,
}

/// Identity fields shared by the records of one evaluation.
#[derive(Debug, Clone)]
pub struct RecordKey {
    pub config_hash: String,
    pub phase: Phase,
    pub agent: AgentKind,
    pub seed: u64,
    pub train_steps: u64,
}

impl MetricsRecord {
    pub fn new(key: &RecordKey, task_seed: u64, cap: f64, env_index: usize, episode: usize, s: &EpisodeSummary) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: key.config_hash.clone(),
            phase: key.phase,
            agent: key.agent,
            seed: key.seed,
            task_seed,
            uav_cpu_cap: cap,
            train_steps: key.train_steps,
            env_index,
            episode,
            mean_reward: s.mean_reward,
            total_reward: s.total_reward,
            efficiency: s.efficiency,
            queue_local: s.avg_queue.local,
            queue_uav: s.avg_queue.uav,
            queue_cloud: s.avg_queue.cloud,
            audit_ok: s.audit_ok,
        }
    }
}

/// Appends JSON lines to one file.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    /// Opens `path`, truncating it unless `append`.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        let line = serde_json::to_string(rec).expect("records serialize");
        writeln!(self.out, "{line}").map_err(|e| HarnessError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

impl Drop for JsonlWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Reads every line of a JSONL file; a missing file reads as empty.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(HarnessError::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| HarnessError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads metric records and rejects unknown schema versions.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let recs: Vec<MetricsRecord> = read_jsonl(path)?;
    if let Some((i, r)) = recs.iter().enumerate().find(|(_, r)| r.schema_version != SCHEMA_VERSION) {
        return Err(HarnessError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            reason: format!("schema version {} (expected {SCHEMA_VERSION})", r.schema_version),
        });
    }
    Ok(recs)
}

/// `metrics-{agent}.jsonl`: training-time evaluations.
pub fn train_metrics_path(out: &Path, agent: AgentKind) -> PathBuf {
    out.join(format!("metrics-{}.jsonl", agent.name()))
}

/// Per-episode records behind `sweep.csv`.
pub fn sweep_metrics_path(out: &Path) -> PathBuf {
    out.join("sweep-metrics.jsonl")
}

/// Wall-clock sidecar; kept apart so metric files stay reproducible.
pub fn timing_path(out: &Path) -> PathBuf {
    out.join("timing.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub command: String,
    pub agent: Option<AgentKind>,
    pub seed: Option<u64>,
    pub uav_cpu_cap: Option<f64>,
    pub seconds: f64,
}
