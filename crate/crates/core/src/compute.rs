//! Computation latencies, computed-bit accounting and the per-device queue
//! dynamics at the local, UAV and cloud tiers.
//!
//! Queues are fluid bit volumes. Every update uses the backlogs at the start
//! of the slot on its right-hand side.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Backlogs (bits) held for one device at each tier.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueueTriple {
    pub local: f64,
    pub uav: f64,
    pub cloud: f64,
}

impl QueueTriple {
    pub const ZERO: Self = Self {
        local: 0.0,
        uav: 0.0,
        cloud: 0.0,
    };

    pub fn new(local: f64, uav: f64, cloud: f64) -> Self {
        Self { local, uav, cloud }
    }

    pub fn total(&self) -> f64 {
        self.local + self.uav + self.cloud
    }

    pub fn sum_sq(&self) -> f64 {
        self.local * self.local + self.uav * self.uav + self.cloud * self.cloud
    }
}

/// Offloading and computing fractions chosen for one device in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OffloadDecision {
    /// Share of the local backlog sent to the UAV.
    pub to_uav: f64,
    /// Share of the UAV backlog re-offloaded to the cloud.
    pub to_cloud: f64,
    /// Share of the non-offloaded local backlog computed on the device.
    pub compute_local: f64,
    /// Share of the non-relayed UAV backlog computed on the UAV.
    pub compute_uav: f64,
    /// Share of the cloud backlog computed in the cloud.
    pub compute_cloud: f64,
}

impl OffloadDecision {
    pub const IDLE: Self = Self {
        to_uav: 0.0,
        to_cloud: 0.0,
        compute_local: 0.0,
        compute_uav: 0.0,
        compute_cloud: 0.0,
    };

    pub fn fractions(&self) -> [f64; 5] {
        [
            self.to_uav,
            self.to_cloud,
            self.compute_local,
            self.compute_uav,
            self.compute_cloud,
        ]
    }

    /// Bits computed at each tier this slot: `(local, uav, cloud)`.
    pub fn work(&self, q: &QueueTriple) -> (f64, f64, f64) {
        (
            self.compute_local * (1.0 - self.to_uav) * q.local,
            self.compute_uav * (1.0 - self.to_cloud) * q.uav,
            self.compute_cloud * q.cloud,
        )
    }
}

/// CPU frequencies (cycles/s) assigned to one device's task at each tier.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComputeAlloc {
    pub local: f64,
    pub uav: f64,
    pub cloud: f64,
}

/// Computing capacities of the three tiers and the task's cycle density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpuLimits {
    /// Per-device local CPU cap, cycles/s.
    pub local_max: f64,
    /// UAV CPU shared by all devices, cycles/s.
    pub uav_max: f64,
    /// Cloud CPU shared by all devices, cycles/s.
    pub cloud_max: f64,
    pub cycles_per_bit: f64,
}

impl Default for CpuLimits {
    fn default() -> Self {
        Self {
            local_max: 1e9,
            uav_max: 10e9,
            cloud_max: 50e9,
            cycles_per_bit: 1e3,
        }
    }
}

impl CpuLimits {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(Error::InvalidConfig {
                field,
                reason: reason.into(),
            })
        };
        if !(self.local_max >= 0.0) {
            return bad("cpu.local_max", "must be >= 0");
        }
        if !(self.uav_max >= 0.0) {
            return bad("cpu.uav_max", "must be >= 0");
        }
        if !(self.cloud_max >= 0.0) {
            return bad("cpu.cloud_max", "must be >= 0");
        }
        if !(self.cycles_per_bit > 0.0) {
            return bad("cpu.cycles_per_bit", "must be > 0");
        }
        Ok(())
    }
}

fn comp_latency(bits: f64, cycles_per_bit: f64, cpu: f64, cap: f64) -> f64 {
    if bits > 0.0 {
        if cpu > 0.0 {
            (bits * cycles_per_bit / cpu).min(cap)
        } else {
            cap
        }
    } else {
        0.0
    }
}

/// Computation latencies `(local, uav, cloud)` in seconds, each saturating at
/// `cap`. Zero work costs nothing even with zero CPU.
pub fn comp_latencies(
    dec: &OffloadDecision,
    q: &QueueTriple,
    alloc: &ComputeAlloc,
    cycles_per_bit: f64,
    cap: f64,
) -> (f64, f64, f64) {
    let (wl, wu, wc) = dec.work(q);
    (
        comp_latency(wl, cycles_per_bit, alloc.local, cap),
        comp_latency(wu, cycles_per_bit, alloc.uav, cap),
        comp_latency(wc, cycles_per_bit, alloc.cloud, cap),
    )
}

/// Bits of this device's task computed across all tiers in the slot.
pub fn computed_bits(dec: &OffloadDecision, q: &QueueTriple) -> f64 {
    let (l, u, c) = dec.work(q);
    l + u + c
}

/// Task completion latency: local compute overlaps the uplink, the UAV
/// compute overlaps the cloud relay, and the cloud compute sits in between.
pub fn total_completion_latency(
    local_comp: f64,
    uav_comp: f64,
    cloud_comp: f64,
    uplink: f64,
    relay: f64,
) -> f64 {
    local_comp.max(uplink) + cloud_comp + uav_comp.max(relay)
}

/// One-slot queue transition for a single device.
pub fn step_queues(q: &QueueTriple, dec: &OffloadDecision, arrival: f64) -> QueueTriple {
    let offloaded = dec.to_uav * q.local;
    let relayed = dec.to_cloud * q.uav;
    let (wl, wu, wc) = dec.work(q);
    QueueTriple {
        local: (q.local - offloaded - wl).max(0.0) + arrival,
        uav: (q.uav - wu - relayed).max(0.0) + offloaded,
        cloud: (q.cloud - wc).max(0.0) + relayed,
    }
}

/// I.i.d. uniform arrivals on `[0, i_max_k]` for every device.
pub fn draw_arrivals<R: rand::Rng + ?Sized>(rng: &mut R, i_max: &[f64]) -> Vec<f64> {
    i_max.iter().map(|&m| rng.random::<f64>() * m).collect()
}

/// Time-averaged backlog per device and tier over a history of slots
/// (`history[slot][device]`).
pub fn time_avg_backlog(history: &[Vec<QueueTriple>]) -> Result<Vec<QueueTriple>> {
    let first = history.first().ok_or(Error::Empty("queue history"))?;
    let mut acc = alloc::vec![QueueTriple::ZERO; first.len()];
    for slot in history {
        crate::error::check_len("queue history row", acc.len(), slot.len())?;
        for (a, q) in acc.iter_mut().zip(slot) {
            a.local += q.local;
            a.uav += q.uav;
            a.cloud += q.cloud;
        }
    }
    let n = history.len() as f64;
    for a in &mut acc {
        a.local /= n;
        a.uav /= n;
        a.cloud /= n;
    }
    Ok(acc)
}
