//! Long-term computed-task efficiency, its per-slot Dinkelbach surrogate, the
//! Lyapunov drift bound and the per-device reward built from them.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::compute::{OffloadDecision, QueueTriple};

/// Running sums of computed bits and transmission latency.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RatioTracker {
    pub cum_bits: f64,
    pub cum_latency: f64,
}

impl RatioTracker {
    pub fn record(&mut self, bits: f64, latency: f64) {
        self.cum_bits += bits;
        self.cum_latency += latency;
    }

    /// Efficiency so far; zero while no latency has accumulated.
    pub fn ratio(&self) -> f64 {
        ratio_value(self)
    }
}

pub fn ratio_value(tracker: &RatioTracker) -> f64 {
    if tracker.cum_latency > 0.0 {
        tracker.cum_bits / tracker.cum_latency
    } else {
        0.0
    }
}

/// `B − J·t`: zero exactly when this slot matches the running ratio.
pub fn dinkelbach_surrogate(bits_now: f64, latency_now: f64, j_prev: f64) -> f64 {
    bits_now - j_prev * latency_now
}

/// Per-device drift-bound term `A_k` of the quadratic Lyapunov function.
pub fn drift_term(q: &QueueTriple, dec: &OffloadDecision) -> f64 {
    let (ql, qu, qc) = (q.local, q.uav, q.cloud);
    let xu = dec.to_uav;
    let xc = dec.to_cloud;
    xu * ql * qu + xc * qu * qc
        - (dec.compute_local * (1.0 - xu) + xu) * ql * ql
        - dec.compute_cloud * qc * qc
        - (dec.compute_uav * (1.0 - xc) + xc) * qu * qu
}

/// Drift-plus-penalty slot objective `−A + v·W`.
pub fn p2_objective(drift_sum: f64, surrogate: f64, v: f64) -> f64 {
    -drift_sum + v * surrogate
}

/// Share of the slot left after the task completes, clamped to `[0, 1]`.
pub fn slot_fit_eta(total_latency: f64, slot_tau: f64) -> f64 {
    (1.0 - total_latency / slot_tau).clamp(0.0, 1.0)
}

/// Trade-off weights of the drift-plus-penalty objective and the reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    /// Weight of the surrogate in the slot objective.
    pub v: f64,
    /// Weight of computed bits in the reward.
    pub v1: f64,
    /// Weight of efficiency-scaled latency in the reward.
    pub v2: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            v: 1.0,
            v1: 1.0,
            v2: 1.0,
        }
    }
}

/// `η_k (−A_k + v₁ B_k − v₂ Z_k t_k)`.
pub fn device_reward(
    drift: f64,
    bits: f64,
    latency: f64,
    z: f64,
    eta: f64,
    w: &RewardWeights,
) -> f64 {
    eta * (-drift + w.v1 * bits - w.v2 * z * latency)
}

/// Magnitudes observed in one probe slot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeSample {
    /// System drift `Σ A_k`.
    pub drift: f64,
    /// System surrogate `W`.
    pub surrogate: f64,
    /// Per-device `(A_k, B_k, Z_k t_k)`.
    pub devices: Vec<(f64, f64, f64)>,
}

/// Anything that can produce probe slots, typically an environment driven
/// by a random policy.
pub trait ProbeSource {
    fn probe(&mut self) -> ProbeSample;
}

/// Median of absolute values; `None` when empty.
fn median_abs(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.map(f64::abs).filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn balance(anchor: Option<f64>, term: Option<f64>) -> f64 {
    match (anchor, term) {
        (Some(a), Some(t)) if a > 0.0 && t > 0.0 => a / t,
        _ => 1.0,
    }
}

/// Chooses weights so each term's median magnitude matches the median drift.
pub fn calibrate_weights_from(samples: &[ProbeSample]) -> RewardWeights {
    let drift = median_abs(samples.iter().map(|s| s.drift));
    let surrogate = median_abs(samples.iter().map(|s| s.surrogate));
    let dev_drift = median_abs(samples.iter().flat_map(|s| s.devices.iter().map(|d| d.0)));
    let dev_bits = median_abs(samples.iter().flat_map(|s| s.devices.iter().map(|d| d.1)));
    let dev_lat = median_abs(samples.iter().flat_map(|s| s.devices.iter().map(|d| d.2)));
    RewardWeights {
        v: balance(drift, surrogate),
        v1: balance(dev_drift, dev_bits),
        v2: balance(dev_drift, dev_lat),
    }
}

/// Runs `n_probe` probe slots and calibrates the weights from them.
pub fn calibrate_weights<S: ProbeSource + ?Sized>(source: &mut S, n_probe: usize) -> RewardWeights {
    let samples: Vec<ProbeSample> = (0..n_probe).map(|_| source.probe()).collect();
    calibrate_weights_from(&samples)
}
