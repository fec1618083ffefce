//! Slot-level decision process: configuration, action projection onto the
//! feasible set, the slot transition, and the task distribution used for
//! meta-training.
//!
//! A slot runs in a fixed order: move the UAV, draw block-fading channels at
//! the new geometry, compute rates, latencies and computed bits, score the
//! slot against the trackers from previous slots, update the queues with
//! fresh arrivals, fold this slot into the trackers, and advance the clock.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::compute::{
    comp_latencies, computed_bits, draw_arrivals, step_queues, total_completion_latency,
    ComputeAlloc, CpuLimits, OffloadDecision, QueueTriple,
};
use crate::objective::{
    device_reward, dinkelbach_surrogate, drift_term, p2_objective, slot_fit_eta, ProbeSample,
    ProbeSource, RatioTracker, RewardWeights,
};
use crate::radio::{
    comm_latencies, draw_scatter, offload_rate, rician_gain, slant_distance, uplink_sinr,
    ChannelParams, InterferenceModel,
};
use crate::{Error, Result, Rng, BITS_PER_MB};

/// Raw action entries per device.
pub const DEVICE_ACTION_DIM: usize = 9;
/// Raw action entries for the UAV displacement (speed, heading).
pub const UAV_ACTION_DIM: usize = 2;

/// Physical, protocol and reward constants of one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub num_devices: usize,
    pub num_slots: usize,
    /// Slot length in seconds.
    pub slot_tau: f64,
    /// Service area `[width, height]` in meters, anchored at the origin.
    pub area: [f64; 2],
    pub uav_start: [f64; 2],
    pub uav_end: [f64; 2],
    pub uav_altitude: f64,
    /// Maximum UAV speed in m/s.
    pub vmax: f64,
    pub channel: ChannelParams,
    pub cpu: CpuLimits,
    /// Device transmit power budget in watts.
    pub p_max: f64,
    /// Per-device arrival bound per slot, in megabytes.
    pub arrival_max_mb: f64,
    pub weights: RewardWeights,
    /// Saturation value for every latency, seconds.
    pub latency_cap: f64,
    /// Backlog normalization for observations, in megabytes; `None` uses
    /// ten times `arrival_max_mb`.
    pub queue_scale_mb: Option<f64>,
    pub interference: InterferenceModel,
    /// Drop the queue movement of devices whose completion time exceeds the slot.
    pub strict_latency: bool,
    /// Append UAV position and device distances to the observation.
    pub extended_obs: bool,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let tau = 1.0;
        Self {
            num_devices: 5,
            num_slots: 100,
            slot_tau: tau,
            area: [1000.0, 1000.0],
            uav_start: [500.0, 500.0],
            uav_end: [500.0, 500.0],
            uav_altitude: 100.0,
            vmax: 25.0,
            channel: ChannelParams::default(),
            cpu: CpuLimits::default(),
            p_max: 0.5,
            arrival_max_mb: 50.0,
            weights: RewardWeights::default(),
            latency_cap: 10.0 * tau,
            queue_scale_mb: None,
            interference: InterferenceModel::CrossGain,
            strict_latency: false,
            extended_obs: false,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(invalid("system.num_devices", "must be >= 1"));
        }
        if self.num_slots == 0 {
            return Err(invalid("system.num_slots", "must be >= 1"));
        }
        if !(self.slot_tau > 0.0) {
            return Err(invalid("system.slot_tau", "must be > 0"));
        }
        if !(self.area[0] > 0.0 && self.area[1] > 0.0) {
            return Err(invalid("system.area", "must be positive"));
        }
        if !self.in_area(self.uav_start) {
            return Err(invalid("system.uav_start", "outside the service area"));
        }
        if !self.in_area(self.uav_end) {
            return Err(invalid("system.uav_end", "outside the service area"));
        }
        if !(self.uav_altitude > 0.0) {
            return Err(invalid("system.uav_altitude", "must be > 0"));
        }
        if !(self.vmax > 0.0) {
            return Err(invalid("system.vmax", "must be > 0"));
        }
        let reach = self.vmax * self.slot_tau * self.num_slots as f64;
        if dist2(self.uav_start, self.uav_end) > reach * (1.0 + 1e-12) {
            return Err(invalid(
                "system.uav_end",
                format!("unreachable from uav_start within {} slots", self.num_slots),
            ));
        }
        self.channel.validate()?;
        self.cpu.validate()?;
        if !(self.p_max >= 0.0) {
            return Err(invalid("system.p_max", "must be >= 0"));
        }
        if !(self.arrival_max_mb >= 0.0) {
            return Err(invalid("system.arrival_max_mb", "must be >= 0"));
        }
        let w = &self.weights;
        if !(w.v >= 0.0 && w.v1 >= 0.0 && w.v2 >= 0.0) {
            return Err(invalid("system.weights", "weights must be >= 0"));
        }
        if !(self.latency_cap > 0.0) {
            return Err(invalid("system.latency_cap", "must be > 0"));
        }
        if !(self.queue_scale_bits() > 0.0 && self.queue_scale_bits().is_finite()) {
            return Err(invalid("system.queue_scale_mb", "must be > 0; set it when arrival_max_mb is 0"));
        }
        Ok(())
    }

    pub fn in_area(&self, p: [f64; 2]) -> bool {
        (0.0..=self.area[0]).contains(&p[0]) && (0.0..=self.area[1]).contains(&p[1])
    }

    pub fn arrival_max_bits(&self) -> f64 {
        self.arrival_max_mb * BITS_PER_MB
    }

    pub fn queue_scale_bits(&self) -> f64 {
        match self.queue_scale_mb {
            Some(mb) => mb * BITS_PER_MB,
            None => 10.0 * self.arrival_max_bits(),
        }
    }

    pub fn action_dim(&self) -> usize {
        DEVICE_ACTION_DIM * self.num_devices + UAV_ACTION_DIM
    }

    pub fn obs_dim(&self) -> usize {
        let base = 1 + 3 * self.num_devices;
        if self.extended_obs {
            base + 2 + self.num_devices
        } else {
            base
        }
    }

    /// Largest UAV displacement in one slot.
    pub fn max_step(&self) -> f64 {
        self.vmax * self.slot_tau
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

/// One draw from the task distribution: a device layout plus the traffic,
/// propagation and UAV-capacity parameters that vary between tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub device_xy: Vec<[f64; 2]>,
    /// Per-device arrival bound, bits per slot.
    pub arrival_max_bits: Vec<f64>,
    pub pathloss_exp: f64,
    pub rician_k: f64,
    /// UAV CPU capacity, cycles/s.
    pub uav_cpu_cap: f64,
    pub seed: u64,
}

impl TaskSpec {
    /// The configuration's own task with devices placed uniformly at random.
    pub fn from_config(cfg: &SystemConfig, placement_seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(placement_seed);
        let device_xy = (0..cfg.num_devices)
            .map(|_| {
                [
                    rng.random::<f64>() * cfg.area[0],
                    rng.random::<f64>() * cfg.area[1],
                ]
            })
            .collect();
        Self {
            device_xy,
            arrival_max_bits: vec![cfg.arrival_max_bits(); cfg.num_devices],
            pathloss_exp: cfg.channel.pathloss_exp,
            rician_k: cfg.channel.rician_k,
            uav_cpu_cap: cfg.cpu.uav_max,
            seed: placement_seed,
        }
    }

    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        crate::error::check_len("task devices", cfg.num_devices, self.device_xy.len())?;
        crate::error::check_len(
            "task arrival bounds",
            cfg.num_devices,
            self.arrival_max_bits.len(),
        )?;
        if !self.device_xy.iter().all(|p| cfg.in_area(*p)) {
            return Err(invalid("task.device_xy", "device outside the service area"));
        }
        if !self.arrival_max_bits.iter().all(|&m| m >= 0.0) {
            return Err(invalid("task.arrival_max_bits", "must be >= 0"));
        }
        if !(self.pathloss_exp >= 2.0) {
            return Err(invalid("task.pathloss_exp", "must be >= 2"));
        }
        if !(self.rician_k >= 0.0) {
            return Err(invalid("task.rician_k", "must be >= 0"));
        }
        if !(self.uav_cpu_cap >= 0.0) {
            return Err(invalid("task.uav_cpu_cap", "must be >= 0"));
        }
        Ok(())
    }
}

/// Sampling ranges of the task distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRanges {
    pub arrival_mb: [f64; 2],
    pub pathloss_exp: [f64; 2],
    pub rician_k: [f64; 2],
    /// UAV capacities (cycles/s) a task may draw from, uniformly.
    pub uav_cpu_grid: Vec<f64>,
}

impl Default for TaskRanges {
    fn default() -> Self {
        Self {
            arrival_mb: [25.0, 75.0],
            pathloss_exp: [2.2, 3.0],
            rician_k: [5.0, 15.0],
            uav_cpu_grid: (5..=15).map(|g| g as f64 * 1e9).collect(),
        }
    }
}

impl TaskRanges {
    pub fn validate(&self) -> Result<()> {
        for (field, r) in [
            ("tasks.arrival_mb", self.arrival_mb),
            ("tasks.pathloss_exp", self.pathloss_exp),
            ("tasks.rician_k", self.rician_k),
        ] {
            if !(r[0] <= r[1]) {
                return Err(invalid(field, "lower bound exceeds upper bound"));
            }
        }
        if self.arrival_mb[0] < 0.0 || self.rician_k[0] < 0.0 || self.pathloss_exp[0] < 2.0 {
            return Err(invalid("tasks", "range outside the physical domain"));
        }
        if self.uav_cpu_grid.is_empty() {
            return Err(invalid("tasks.uav_cpu_grid", "must not be empty"));
        }
        Ok(())
    }
}

fn uniform_in<R: rand::Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    r[0] + rng.random::<f64>() * (r[1] - r[0])
}

/// Draws one task: uniform placements, arrival bound, path-loss exponent and
/// Rician factor, and a UAV capacity from the grid.
pub fn sample_task<R: rand::Rng + ?Sized>(
    rng: &mut R,
    cfg: &SystemConfig,
    ranges: &TaskRanges,
) -> TaskSpec {
    let device_xy = (0..cfg.num_devices)
        .map(|_| {
            [
                rng.random::<f64>() * cfg.area[0],
                rng.random::<f64>() * cfg.area[1],
            ]
        })
        .collect();
    let arrival_max_bits = (0..cfg.num_devices)
        .map(|_| uniform_in(rng, ranges.arrival_mb) * BITS_PER_MB)
        .collect();
    let pathloss_exp = uniform_in(rng, ranges.pathloss_exp);
    let rician_k = uniform_in(rng, ranges.rician_k);
    let uav_cpu_cap = ranges.uav_cpu_grid[rng.random_range(0..ranges.uav_cpu_grid.len())];
    TaskSpec {
        device_xy,
        arrival_max_bits,
        pathloss_exp,
        rician_k,
        uav_cpu_cap,
        seed: rng.random(),
    }
}

/// Control of one device for one slot, already inside its feasible box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviceAction {
    pub power: f64,
    pub decision: OffloadDecision,
    pub cpu: ComputeAlloc,
}

/// Projected joint action for one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotAction {
    pub devices: Vec<DeviceAction>,
    /// UAV displacement in meters.
    pub uav_move: [f64; 2],
}

fn unit(raw: f64) -> f64 {
    (0.5 * (raw.clamp(-1.0, 1.0) + 1.0)).clamp(0.0, 1.0)
}

/// Maps a raw vector in `[-1, 1]^(9K+2)` onto the constraint set.
///
/// Per device the raw layout is `power, to_uav, to_cloud, compute_local,
/// compute_uav, compute_cloud, cpu_local, cpu_uav, cpu_cloud`; each maps
/// affinely onto its box, with a device allowed to request the whole UAV or
/// cloud CPU. Shared CPU vectors whose sum exceeds the cap are scaled down
/// proportionally. The final two entries are UAV speed (as a fraction of the
/// maximum step) and heading. The resulting position is clipped to the area,
/// replaced by a direct move toward the end point whenever the end point
/// would otherwise become unreachable, and forced onto the end point in the
/// final slot.
pub fn project_action(
    raw: &[f64],
    cfg: &SystemConfig,
    cpu: &CpuLimits,
    uav_xy: [f64; 2],
    slot: usize,
) -> Result<SlotAction> {
    crate::error::check_len("raw action", cfg.action_dim(), raw.len())?;
    let mut devices: Vec<DeviceAction> = raw
        .chunks_exact(DEVICE_ACTION_DIM)
        .take(cfg.num_devices)
        .map(|r| DeviceAction {
            power: unit(r[0]) * cfg.p_max,
            decision: OffloadDecision {
                to_uav: unit(r[1]),
                to_cloud: unit(r[2]),
                compute_local: unit(r[3]),
                compute_uav: unit(r[4]),
                compute_cloud: unit(r[5]),
            },
            cpu: ComputeAlloc {
                local: unit(r[6]) * cpu.local_max,
                uav: unit(r[7]) * cpu.uav_max,
                cloud: unit(r[8]) * cpu.cloud_max,
            },
        })
        .collect();

    let uav_sum: f64 = devices.iter().map(|d| d.cpu.uav).sum();
    if uav_sum > cpu.uav_max {
        let s = cpu.uav_max / uav_sum;
        devices.iter_mut().for_each(|d| d.cpu.uav *= s);
    }
    let cloud_sum: f64 = devices.iter().map(|d| d.cpu.cloud).sum();
    if cloud_sum > cpu.cloud_max {
        let s = cpu.cloud_max / cloud_sum;
        devices.iter_mut().for_each(|d| d.cpu.cloud *= s);
    }

    let m = &raw[DEVICE_ACTION_DIM * cfg.num_devices..];
    let step = cfg.max_step();
    let speed = unit(m[0]) * step;
    let heading = core::f64::consts::PI * m[1].clamp(-1.0, 1.0);
    let mut target = [
        (uav_xy[0] + speed * libm::cos(heading)).clamp(0.0, cfg.area[0]),
        (uav_xy[1] + speed * libm::sin(heading)).clamp(0.0, cfg.area[1]),
    ];
    let remaining = cfg.num_slots.saturating_sub(slot + 1);
    if remaining == 0 {
        target = cfg.uav_end;
    } else if dist2(target, cfg.uav_end) > step * remaining as f64 {
        let to_end = dist2(uav_xy, cfg.uav_end);
        if to_end > 0.0 {
            let d = step.min(to_end) / to_end;
            target = [
                uav_xy[0] + d * (cfg.uav_end[0] - uav_xy[0]),
                uav_xy[1] + d * (cfg.uav_end[1] - uav_xy[1]),
            ];
        } else {
            target = uav_xy;
        }
    }
    Ok(SlotAction {
        devices,
        uav_move: [target[0] - uav_xy[0], target[1] - uav_xy[1]],
    })
}

/// A violated constraint found by [`audit_action`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("device {0}: transmit power outside [0, P_max]")]
    Power(usize),
    #[error("device {0}: offloading or computing fraction outside [0, 1]")]
    Fraction(usize),
    #[error("device {0}: local CPU outside [0, C_max]")]
    LocalCpu(usize),
    #[error("UAV CPU allocation exceeds its capacity")]
    UavCpu,
    #[error("cloud CPU allocation exceeds its capacity")]
    CloudCpu,
    #[error("UAV displacement exceeds the speed limit")]
    Speed,
    #[error("UAV left the service area")]
    Area,
    #[error("UAV does not start at the configured start point")]
    Start,
    #[error("UAV does not end at the configured end point")]
    End,
    #[error("non-finite action entry")]
    NonFinite,
}

const AUDIT_RTOL: f64 = 1e-9;

/// Checks power, fraction, CPU, speed, area and trajectory end-point
/// constraints for the action taken in `slot` from `uav_before`.
pub fn audit_action(
    cfg: &SystemConfig,
    cpu: &CpuLimits,
    uav_before: [f64; 2],
    action: &SlotAction,
    slot: usize,
) -> core::result::Result<(), Violation> {
    let tol = |cap: f64| cap * (1.0 + AUDIT_RTOL) + 1e-300;
    if slot == 0 && uav_before != cfg.uav_start {
        return Err(Violation::Start);
    }
    let mut uav_sum = 0.0;
    let mut cloud_sum = 0.0;
    for (k, d) in action.devices.iter().enumerate() {
        let c = &d.cpu;
        let finite = d.power.is_finite()
            && d.decision.fractions().iter().all(|f| f.is_finite())
            && c.local.is_finite()
            && c.uav.is_finite()
            && c.cloud.is_finite();
        if !finite {
            return Err(Violation::NonFinite);
        }
        if d.power < 0.0 || d.power > tol(cfg.p_max) {
            return Err(Violation::Power(k));
        }
        if d.decision.fractions().iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(Violation::Fraction(k));
        }
        if c.local < 0.0 || c.local > tol(cpu.local_max) {
            return Err(Violation::LocalCpu(k));
        }
        if c.uav < 0.0 {
            return Err(Violation::UavCpu);
        }
        if c.cloud < 0.0 {
            return Err(Violation::CloudCpu);
        }
        uav_sum += c.uav;
        cloud_sum += c.cloud;
    }
    if uav_sum > tol(cpu.uav_max) {
        return Err(Violation::UavCpu);
    }
    if cloud_sum > tol(cpu.cloud_max) {
        return Err(Violation::CloudCpu);
    }
    let mv = action.uav_move;
    if !(mv[0].is_finite() && mv[1].is_finite()) {
        return Err(Violation::NonFinite);
    }
    if libm::hypot(mv[0], mv[1]) > tol(cfg.max_step()) {
        return Err(Violation::Speed);
    }
    let after = [uav_before[0] + mv[0], uav_before[1] + mv[1]];
    let slack = 1e-9 * cfg.area[0].max(cfg.area[1]);
    if after[0] < -slack
        || after[1] < -slack
        || after[0] > cfg.area[0] + slack
        || after[1] > cfg.area[1] + slack
    {
        return Err(Violation::Area);
    }
    if slot + 1 == cfg.num_slots && after != cfg.uav_end {
        return Err(Violation::End);
    }
    Ok(())
}

/// Environment state between slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub slot: usize,
    pub queues: Vec<QueueTriple>,
    pub uav_xy: [f64; 2],
    /// System-wide running sums behind the efficiency estimate.
    pub system: RatioTracker,
    /// Per-device running sums.
    pub devices: Vec<RatioTracker>,
}

/// Random quantities of one slot, drawn before the action is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDraws {
    /// Scattered fading component per device.
    pub scatter: Vec<Complex64>,
    /// Bits arriving at each device at the end of the slot.
    pub arrivals: Vec<f64>,
}

/// Per-device breakdown of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviceOutcome {
    pub sinr: f64,
    pub rate: f64,
    pub uplink_s: f64,
    pub relay_s: f64,
    pub local_s: f64,
    pub uav_s: f64,
    pub cloud_s: f64,
    /// Transmission latency (uplink plus relay setup).
    pub comm_latency: f64,
    pub total_latency: f64,
    pub bits: f64,
    pub drift: f64,
    pub eta: f64,
    /// Device efficiency from previous slots.
    pub z: f64,
    pub reward: f64,
    pub arrival: f64,
}

/// Everything produced by one slot transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotOutcome {
    pub slot: usize,
    pub reward: f64,
    pub system_bits: f64,
    pub system_comm_latency: f64,
    /// System efficiency from previous slots.
    pub ratio: f64,
    pub surrogate: f64,
    pub drift: f64,
    pub p2_objective: f64,
    /// Every device finished within the slot.
    pub feasible: bool,
    pub uav_xy: [f64; 2],
    pub queues: Vec<QueueTriple>,
    pub devices: Vec<DeviceOutcome>,
}

/// One environment instance. Single owner; all randomness comes from its
/// own seeded generator.
#[derive(Debug, Clone)]
pub struct MecEnv {
    cfg: SystemConfig,
    task: TaskSpec,
    channel: ChannelParams,
    cpu: CpuLimits,
    rng: Rng,
    state: EnvState,
}

impl MecEnv {
    pub fn new(cfg: SystemConfig, task: TaskSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        task.validate(&cfg)?;
        let channel = ChannelParams {
            pathloss_exp: task.pathloss_exp,
            rician_k: task.rician_k,
            ..cfg.channel
        };
        let cpu = CpuLimits {
            uav_max: task.uav_cpu_cap,
            ..cfg.cpu
        };
        let state = Self::initial_state(&cfg);
        Ok(Self {
            rng: Rng::seed_from_u64(seed),
            cfg,
            task,
            channel,
            cpu,
            state,
        })
    }

    fn initial_state(cfg: &SystemConfig) -> EnvState {
        EnvState {
            slot: 0,
            queues: vec![QueueTriple::ZERO; cfg.num_devices],
            uav_xy: cfg.uav_start,
            system: RatioTracker::default(),
            devices: vec![RatioTracker::default(); cfg.num_devices],
        }
    }

    /// Empties every queue and tracker, returns the UAV to its start point
    /// and reseeds the generator.
    pub fn reset(&mut self, seed: u64) -> &EnvState {
        self.rng = Rng::seed_from_u64(seed);
        self.state = Self::initial_state(&self.cfg);
        &self.state
    }

    /// Like [`reset`](Self::reset) but keeps the generator's stream going.
    pub fn restart_episode(&mut self) -> &EnvState {
        self.state = Self::initial_state(&self.cfg);
        &self.state
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn cpu_limits(&self) -> &CpuLimits {
        &self.cpu
    }

    pub fn channel(&self) -> &ChannelParams {
        &self.channel
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn set_state(&mut self, state: EnvState) -> Result<()> {
        crate::error::check_len("state queues", self.cfg.num_devices, state.queues.len())?;
        crate::error::check_len("state trackers", self.cfg.num_devices, state.devices.len())?;
        self.state = state;
        Ok(())
    }

    pub fn done(&self) -> bool {
        self.state.slot >= self.cfg.num_slots
    }

    pub fn obs_dim(&self) -> usize {
        self.cfg.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.cfg.action_dim()
    }

    /// `[n/N, Q^L/s, Q^U/s, Q^C/s for each device]`, optionally extended with
    /// the UAV position and device distances.
    pub fn observation(&self) -> Vec<f64> {
        let scale = self.cfg.queue_scale_bits();
        let mut obs = Vec::with_capacity(self.obs_dim());
        obs.push(self.state.slot as f64 / self.cfg.num_slots as f64);
        for q in &self.state.queues {
            obs.extend([q.local / scale, q.uav / scale, q.cloud / scale]);
        }
        if self.cfg.extended_obs {
            let [w, h] = self.cfg.area;
            obs.push(self.state.uav_xy[0] / w);
            obs.push(self.state.uav_xy[1] / h);
            let diag = libm::hypot(w, h);
            for d in &self.task.device_xy {
                obs.push(dist2(*d, self.state.uav_xy) / diag);
            }
        }
        obs
    }

    pub fn project(&self, raw: &[f64]) -> Result<SlotAction> {
        project_action(raw, &self.cfg, &self.cpu, self.state.uav_xy, self.state.slot)
    }

    pub fn audit(&self, action: &SlotAction) -> core::result::Result<(), Violation> {
        audit_action(&self.cfg, &self.cpu, self.state.uav_xy, action, self.state.slot)
    }

    /// Draws the fading and arrivals for the next slot, advancing the generator.
    pub fn draw_slot(&mut self) -> SlotDraws {
        let k = self.cfg.num_devices;
        let scatter = (0..k).map(|_| draw_scatter(&mut self.rng)).collect();
        let arrivals = draw_arrivals(&mut self.rng, &self.task.arrival_max_bits);
        SlotDraws { scatter, arrivals }
    }

    /// Scores `action` against the current state under fixed draws without
    /// changing anything.
    pub fn evaluate(&self, action: &SlotAction, draws: &SlotDraws) -> Result<SlotOutcome> {
        let cfg = &self.cfg;
        let k_dev = cfg.num_devices;
        crate::error::check_len("action devices", k_dev, action.devices.len())?;
        crate::error::check_len("fading draws", k_dev, draws.scatter.len())?;
        crate::error::check_len("arrival draws", k_dev, draws.arrivals.len())?;
        if self.done() {
            return Err(Error::EpisodeOver {
                slot: self.state.slot,
                slots: cfg.num_slots,
            });
        }
        let st = &self.state;
        let uav_xy = [st.uav_xy[0] + action.uav_move[0], st.uav_xy[1] + action.uav_move[1]];

        let gains: Vec<f64> = self
            .task
            .device_xy
            .iter()
            .zip(&draws.scatter)
            .map(|(xy, s)| {
                let d = slant_distance(*xy, uav_xy, cfg.uav_altitude);
                rician_gain(d, &self.channel, *s).norm_sqr()
            })
            .collect();
        let powers: Vec<f64> = action.devices.iter().map(|d| d.power).collect();
        let sinr = uplink_sinr(&gains, &powers, self.channel.noise_var, cfg.interference);

        let j_prev = st.system.ratio();
        let mut devices = Vec::with_capacity(k_dev);
        let mut decisions = Vec::with_capacity(k_dev);
        for k in 0..k_dev {
            let act = &action.devices[k];
            let q = &st.queues[k];
            let rate = offload_rate(sinr[k], self.channel.bandwidth_hz);
            let mut dec = act.decision;
            let mut out = self.device_slot(q, &dec, &act.cpu, rate);
            if cfg.strict_latency && out.total_latency > cfg.slot_tau {
                dec = OffloadDecision::IDLE;
                out = self.device_slot(q, &dec, &act.cpu, rate);
            }
            out.sinr = sinr[k];
            out.z = st.devices[k].ratio();
            out.reward = device_reward(out.drift, out.bits, out.comm_latency, out.z, out.eta, &cfg.weights);
            out.arrival = draws.arrivals[k];
            devices.push(out);
            decisions.push(dec);
        }

        let system_bits: f64 = devices.iter().map(|d| d.bits).sum();
        let system_comm_latency: f64 = devices.iter().map(|d| d.comm_latency).sum();
        let drift: f64 = devices.iter().map(|d| d.drift).sum();
        let surrogate = dinkelbach_surrogate(system_bits, system_comm_latency, j_prev);
        let queues = st
            .queues
            .iter()
            .zip(&decisions)
            .zip(&draws.arrivals)
            .map(|((q, d), a)| step_queues(q, d, *a))
            .collect();
        Ok(SlotOutcome {
            slot: st.slot,
            reward: devices.iter().map(|d| d.reward).sum(),
            system_bits,
            system_comm_latency,
            ratio: j_prev,
            surrogate,
            drift,
            p2_objective: p2_objective(drift, surrogate, cfg.weights.v),
            feasible: devices.iter().all(|d| d.total_latency <= cfg.slot_tau),
            uav_xy,
            queues,
            devices,
        })
    }

    fn device_slot(
        &self,
        q: &QueueTriple,
        dec: &OffloadDecision,
        cpu: &ComputeAlloc,
        rate: f64,
    ) -> DeviceOutcome {
        let cfg = &self.cfg;
        let cap = cfg.latency_cap;
        let (uplink_s, relay_s) = comm_latencies(
            dec.to_uav,
            dec.to_cloud,
            q.local,
            rate,
            self.channel.relay_setup_s,
            cap,
        );
        let (local_s, uav_s, cloud_s) = comp_latencies(dec, q, cpu, self.cpu.cycles_per_bit, cap);
        let total_latency = total_completion_latency(local_s, uav_s, cloud_s, uplink_s, relay_s);
        DeviceOutcome {
            rate,
            uplink_s,
            relay_s,
            local_s,
            uav_s,
            cloud_s,
            comm_latency: uplink_s + relay_s,
            total_latency,
            bits: computed_bits(dec, q),
            drift: drift_term(q, dec),
            eta: slot_fit_eta(total_latency, cfg.slot_tau),
            ..DeviceOutcome::default()
        }
    }

    /// Applies an outcome produced by [`evaluate`](Self::evaluate) on the
    /// current state.
    pub fn commit(&mut self, outcome: &SlotOutcome) {
        let st = &mut self.state;
        st.queues.clone_from(&outcome.queues);
        st.uav_xy = outcome.uav_xy;
        st.system
            .record(outcome.system_bits, outcome.system_comm_latency);
        for (t, d) in st.devices.iter_mut().zip(&outcome.devices) {
            t.record(d.bits, d.comm_latency);
        }
        st.slot += 1;
    }

    /// Runs one slot with an already projected action.
    pub fn step(&mut self, action: &SlotAction) -> Result<SlotOutcome> {
        if self.done() {
            return Err(Error::EpisodeOver {
                slot: self.state.slot,
                slots: self.cfg.num_slots,
            });
        }
        let draws = self.draw_slot();
        self.step_with(action, &draws)
    }

    pub fn step_with(&mut self, action: &SlotAction, draws: &SlotDraws) -> Result<SlotOutcome> {
        let out = self.evaluate(action, draws)?;
        self.commit(&out);
        Ok(out)
    }

    /// Projects a raw action and runs one slot.
    pub fn step_raw(&mut self, raw: &[f64]) -> Result<(SlotAction, SlotOutcome)> {
        let action = self.project(raw)?;
        let out = self.step(&action)?;
        Ok((action, out))
    }
}

/// Uniform raw action in `[-1, 1]^dim`.
pub fn random_raw_action<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Drives an environment with uniform random actions, restarting episodes
/// as they end, for weight calibration.
pub struct RandomProbe<'a> {
    pub env: &'a mut MecEnv,
    pub rng: Rng,
}

impl ProbeSource for RandomProbe<'_> {
    fn probe(&mut self) -> ProbeSample {
        if self.env.done() {
            self.env.restart_episode();
        }
        let raw = random_raw_action(&mut self.rng, self.env.action_dim());
        let (_, out) = self
            .env
            .step_raw(&raw)
            .expect("raw action has the environment's dimension");
        ProbeSample {
            drift: out.drift,
            surrogate: out.surrogate,
            devices: out
                .devices
                .iter()
                .map(|d| (d.drift, d.bits, d.z * d.comm_latency))
                .collect(),
        }
    }
}

/// Calibrates reward weights on a copy of `env` under a random policy.
pub fn calibrate_env_weights(env: &MecEnv, n_probe: usize, seed: u64) -> RewardWeights {
    let mut probe_env = env.clone();
    probe_env.reset(seed);
    let mut probe = RandomProbe {
        env: &mut probe_env,
        rng: Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
    };
    crate::objective::calibrate_weights(&mut probe, n_probe)
}

/// Raw grid value `i` of `res` intervals on `[-1, 1]`.
fn grid_point(i: usize, res: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / res as f64
}

/// Exhaustive grid search of the single-device slot problem: maximize
/// `−A + v·W` subject to completing within the slot, with the running
/// efficiency frozen and the fading of `draws` fixed.
///
/// The fractions and the UAV move (speed, heading) are enumerated on a grid
/// of `grid_res` intervals per raw dimension. Power and the three CPU shares
/// stay at their maxima: with one device there is no interference, and
/// raising any of them only lowers latencies, which never lowers the
/// objective (the running efficiency is non-negative) and never breaks the
/// slot deadline. Returns the best action and its objective.
pub fn oracle_best_slot_action(
    env: &MecEnv,
    draws: &SlotDraws,
    grid_res: usize,
) -> Result<(SlotAction, f64)> {
    if env.config().num_devices != 1 {
        return Err(Error::Unsupported(format!(
            "grid oracle supports one device, got {}",
            env.config().num_devices
        )));
    }
    if !(1..=8).contains(&grid_res) {
        return Err(invalid("grid_res", "must be in 1..=8"));
    }
    let n = grid_res + 1;
    let mut raw = vec![1.0; env.action_dim()];
    let mut best: Option<(SlotAction, f64)> = None;
    let total = n.pow(7);
    for code in 0..total {
        let mut c = code;
        for dim in [1usize, 2, 3, 4, 5, 9, 10] {
            raw[dim] = grid_point(c % n, grid_res);
            c /= n;
        }
        let action = env.project(&raw)?;
        let out = env.evaluate(&action, draws)?;
        if !out.feasible {
            continue;
        }
        if best.as_ref().map_or(true, |(_, v)| out.p2_objective > *v) {
            best = Some((action, out.p2_objective));
        }
    }
    // The idle point is on the grid and always feasible.
    best.ok_or(Error::Unsupported("no feasible grid point".into()))
}

/// Objective achieved by `action` for the slot problem: `−A + v·W` when it
/// completes within the slot, otherwise the idle action's value of zero.
pub fn realized_slot_objective(env: &MecEnv, action: &SlotAction, draws: &SlotDraws) -> Result<f64> {
    let out = env.evaluate(action, draws)?;
    Ok(if out.feasible { out.p2_objective } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(k: usize, n: usize) -> SystemConfig {
        SystemConfig {
            num_devices: k,
            num_slots: n,
            ..SystemConfig::default()
        }
    }

    fn env(cfg: SystemConfig, seed: u64) -> MecEnv {
        let task = TaskSpec::from_config(&cfg, 17);
        MecEnv::new(cfg, task, seed).unwrap()
    }

    #[test]
    fn reset_zeroes_everything() {
        let mut e = env(small_cfg(3, 20), 1);
        let dim = e.action_dim();
        e.step_raw(&vec![0.3; dim]).unwrap();
        e.reset(2);
        assert!(e.observation().iter().all(|&x| x == 0.0));
        assert_eq!(e.observation().len(), 10);
        assert_eq!(e.state().uav_xy, [500.0, 500.0]);
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let mut a = env(small_cfg(2, 30), 5);
        let mut b = env(small_cfg(2, 30), 5);
        let mut rng = Rng::seed_from_u64(0);
        while !a.done() {
            let raw = random_raw_action(&mut rng, a.action_dim());
            assert_eq!(a.step_raw(&raw).unwrap(), b.step_raw(&raw).unwrap());
        }
    }

    #[test]
    fn projection_minima() {
        let cfg = small_cfg(2, 10);
        let a = project_action(&vec![-1.0; cfg.action_dim()], &cfg, &cfg.cpu, [500.0, 500.0], 0).unwrap();
        for d in &a.devices {
            assert_eq!(*d, DeviceAction::default());
        }
        assert_eq!(a.uav_move, [0.0, 0.0]);
    }

    #[test]
    fn projection_scales_shared_cpu() {
        let mut cfg = small_cfg(2, 10);
        cfg.cpu.uav_max = 6e9;
        let a = project_action(&vec![1.0; cfg.action_dim()], &cfg, &cfg.cpu, [500.0, 500.0], 0).unwrap();
        let s: f64 = a.devices.iter().map(|d| d.cpu.uav).sum();
        assert!((s - 6e9).abs() <= 1e-6);
        assert_eq!(a.devices[0].cpu.uav, 3e9);
        let c: f64 = a.devices.iter().map(|d| d.cpu.cloud).sum();
        assert!((c - cfg.cpu.cloud_max).abs() <= 1e-3);
    }

    #[test]
    fn final_slot_lands_on_end_point() {
        let cfg = small_cfg(1, 3);
        let mut e = env(cfg.clone(), 3);
        let mut rng = Rng::seed_from_u64(8);
        while !e.done() {
            let raw = random_raw_action(&mut rng, e.action_dim());
            let a = e.project(&raw).unwrap();
            e.audit(&a).unwrap();
            e.step(&a).unwrap();
        }
        assert_eq!(e.state().uav_xy, cfg.uav_end);
    }

    #[test]
    fn idle_first_slot_rewards_nothing() {
        let mut e = env(small_cfg(3, 10), 4);
        let (_, out) = e.step_raw(&vec![-1.0; e.action_dim()]).unwrap();
        assert_eq!(out.reward, 0.0);
        for (q, d) in out.queues.iter().zip(&out.devices) {
            assert_eq!(q.local, d.arrival);
            assert_eq!(q.uav, 0.0);
        }
        assert!(e.step(&e.project(&vec![0.0; e.action_dim()]).unwrap()).is_ok());
    }

    #[test]
    fn stepping_past_horizon_fails() {
        let mut e = env(small_cfg(1, 2), 4);
        let raw = vec![0.0; e.action_dim()];
        e.step_raw(&raw).unwrap();
        e.step_raw(&raw).unwrap();
        assert!(matches!(e.step_raw(&raw), Err(Error::EpisodeOver { .. })));
    }

    #[test]
    fn wrong_action_length_rejected() {
        let e = env(small_cfg(2, 5), 0);
        assert!(e.project(&[0.0; 3]).is_err());
    }

    #[test]
    fn task_sampling() {
        let cfg = small_cfg(4, 10);
        let degenerate = TaskRanges {
            arrival_mb: [30.0, 30.0],
            pathloss_exp: [2.5, 2.5],
            rician_k: [7.0, 7.0],
            uav_cpu_grid: vec![8e9],
        };
        let mut rng = Rng::seed_from_u64(1);
        let t = sample_task(&mut rng, &cfg, &degenerate);
        assert!(t.arrival_max_bits.iter().all(|&m| m == 30.0 * BITS_PER_MB));
        assert_eq!((t.pathloss_exp, t.rician_k, t.uav_cpu_cap), (2.5, 7.0, 8e9));

        let ranges = TaskRanges::default();
        let a = sample_task(&mut Rng::seed_from_u64(9), &cfg, &ranges);
        let b = sample_task(&mut Rng::seed_from_u64(9), &cfg, &ranges);
        assert_eq!(a, b);
        a.validate(&cfg).unwrap();

        let mut sum = [0.0f64; 2];
        let mut count = 0.0;
        for _ in 0..10_000 {
            for p in sample_task(&mut rng, &cfg, &ranges).device_xy {
                sum[0] += p[0];
                sum[1] += p[1];
                count += 1.0;
            }
        }
        assert!((sum[0] / count - 500.0).abs() < 10.0);
        assert!((sum[1] / count - 500.0).abs() < 10.0);
    }

    #[test]
    fn oracle_rejects_multiple_devices() {
        let mut e = env(small_cfg(2, 5), 0);
        let d = e.draw_slot();
        assert!(oracle_best_slot_action(&e, &d, 2).is_err());
    }

    #[test]
    fn oracle_zero_queues() {
        let mut e = env(small_cfg(1, 5), 0);
        let d = e.draw_slot();
        let (_, v) = oracle_best_slot_action(&e, &d, 2).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn oracle_refinement_and_loaded_local_queue() {
        let mut cfg = small_cfg(1, 10);
        // generous local CPU so the whole local backlog fits in the slot
        cfg.cpu.local_max = 1e12;
        let mut e = env(cfg, 0);
        let mut st = e.state().clone();
        st.queues[0] = QueueTriple::new(2e7, 0.0, 0.0);
        e.set_state(st).unwrap();
        let d = e.draw_slot();
        let (a4, v4) = oracle_best_slot_action(&e, &d, 4).unwrap();
        let (a8, v8) = oracle_best_slot_action(&e, &d, 8).unwrap();
        assert!(v8 >= v4);
        assert!(v4 > 0.0);
        // all local work is cheap, so the oracle computes (or ships) it all
        let dec = a8.devices[0].decision;
        assert_eq!(dec.compute_local.max(dec.to_uav), 1.0);
        let dec4 = a4.devices[0].decision;
        assert_eq!(dec4.compute_local.max(dec4.to_uav), 1.0);
    }
}
