//! Per-slot evaluation traces and their replay audit.
//!
//! A trace file holds one `episode` line followed by its `slot` lines,
//! repeated. Raw actions are stored, so replaying them through a fresh
//! environment must reproduce every recorded outcome exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use uavmec_core::compute::QueueTriple;
use uavmec_core::env::{MecEnv, SystemConfig, TaskSpec};

use crate::error::Result;
use crate::metrics::read_jsonl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceLine {
    Episode {
        label: String,
        system: SystemConfig,
        task: TaskSpec,
        episode_seed: u64,
    },
    Slot {
        slot: usize,
        raw: Vec<f64>,
        reward: f64,
        uav_xy: [f64; 2],
        queues: Vec<QueueTriple>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub episodes: usize,
    pub slots: usize,
    /// Slots whose projected action violates a constraint.
    pub violations: usize,
    /// Slots whose replayed outcome differs from the record.
    pub mismatches: usize,
    pub messages: Vec<String>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.violations == 0 && self.mismatches == 0
    }

    pub fn merge(&mut self, other: AuditReport) {
        self.episodes += other.episodes;
        self.slots += other.slots;
        self.violations += other.violations;
        self.mismatches += other.mismatches;
        self.messages.extend(other.messages);
    }
}

const MAX_MESSAGES: usize = 20;

/// Replays every episode of a trace file and checks constraints and
/// outcomes slot by slot.
pub fn audit_trace(path: &Path) -> Result<AuditReport> {
    let lines: Vec<TraceLine> = read_jsonl(path)?;
    let mut rep = AuditReport::default();
    let mut env: Option<(String, MecEnv)> = None;
    let note = |rep: &mut AuditReport, msg: String| {
        if rep.messages.len() < MAX_MESSAGES {
            rep.messages.push(format!("{}: {msg}", path.display()));
        }
    };
    for line in lines {
        match line {
            TraceLine::Episode {
                label,
                system,
                task,
                episode_seed,
            } => {
                let mut e = MecEnv::new(system, task, episode_seed)?;
                e.reset(episode_seed);
                env = Some((label, e));
                rep.episodes += 1;
            }
            TraceLine::Slot {
                slot,
                raw,
                reward,
                uav_xy,
                queues,
            } => {
                let Some((label, e)) = env.as_mut() else {
                    rep.mismatches += 1;
                    note(&mut rep, "slot line before any episode line".into());
                    continue;
                };
                rep.slots += 1;
                if e.done() || e.state().slot != slot {
                    rep.mismatches += 1;
                    note(&mut rep, format!("{label} slot {slot}: out of sequence"));
                    continue;
                }
                let action = e.project(&raw)?;
                let audit = e.audit(&action);
                if let Err(v) = &audit {
                    rep.violations += 1;
                    note(&mut rep, format!("{label} slot {slot}: {v}"));
                }
                let out = e.step(&action)?;
                if out.reward != reward || out.uav_xy != uav_xy || out.queues != queues {
                    rep.mismatches += 1;
                    note(&mut rep, format!("{label} slot {slot}: replay differs from record"));
                }
            }
        }
    }
    Ok(rep)
}
