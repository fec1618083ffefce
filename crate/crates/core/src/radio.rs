//! Uplink communication model: air-to-ground geometry, Rician block fading,
//! SINR under shared-band interference, Shannon rate and the resulting
//! transmission latencies.

use alloc::vec::Vec;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Large-scale and small-scale channel constants shared by all devices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    /// Power gain at the 1 m reference distance (linear).
    pub ref_gain: f64,
    pub pathloss_exp: f64,
    /// Rician factor (linear). `f64::INFINITY` collapses fading to pure LoS.
    pub rician_k: f64,
    /// Receiver noise power in watts.
    pub noise_var: f64,
    pub bandwidth_hz: f64,
    /// Fixed UAV-to-cloud link setup time in seconds.
    pub relay_setup_s: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            ref_gain: 1e-5,
            pathloss_exp: 2.6,
            rician_k: 10.0,
            noise_var: 1e-13,
            bandwidth_hz: 1e6,
            relay_setup_s: 0.05,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error::InvalidConfig;
        let bad = |field, reason: &str| {
            Err(InvalidConfig {
                field,
                reason: reason.into(),
            })
        };
        if !(self.ref_gain > 0.0) {
            return bad("channel.ref_gain", "must be > 0");
        }
        if !(self.pathloss_exp >= 2.0) {
            return bad("channel.pathloss_exp", "must be >= 2");
        }
        if !(self.rician_k >= 0.0) {
            return bad("channel.rician_k", "must be >= 0");
        }
        if !(self.noise_var > 0.0) {
            return bad("channel.noise_var", "must be > 0");
        }
        if !(self.bandwidth_hz > 0.0) {
            return bad("channel.bandwidth_hz", "must be > 0");
        }
        if !(self.relay_setup_s >= 0.0) {
            return bad("channel.relay_setup_s", "must be >= 0");
        }
        Ok(())
    }

    /// Mean power gain `η₀ / d^θ` at distance `dist`.
    pub fn mean_gain(&self, dist: f64) -> f64 {
        self.ref_gain / libm::pow(dist, self.pathloss_exp)
    }

    /// Amplitude weights of the LoS and scattered components.
    fn rician_weights(&self) -> (f64, f64) {
        if self.rician_k.is_infinite() {
            (1.0, 0.0)
        } else {
            let k = self.rician_k;
            (libm::sqrt(k / (k + 1.0)), libm::sqrt(1.0 / (k + 1.0)))
        }
    }
}

/// Horizontal positions of the devices and the UAV, plus the UAV altitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub device_xy: Vec<[f64; 2]>,
    pub uav_xy: [f64; 2],
    pub uav_alt: f64,
}

impl Placement {
    pub fn distances(&self) -> Vec<f64> {
        self.device_xy
            .iter()
            .map(|d| slant_distance(*d, self.uav_xy, self.uav_alt))
            .collect()
    }
}

/// 3-D distance between a ground device and the UAV hovering at `alt`.
pub fn slant_distance(device_xy: [f64; 2], uav_xy: [f64; 2], alt: f64) -> f64 {
    let dx = device_xy[0] - uav_xy[0];
    let dy = device_xy[1] - uav_xy[1];
    libm::sqrt(dx * dx + dy * dy + alt * alt)
}

/// Zero-mean, unit-variance circularly-symmetric complex Gaussian draw.
pub fn draw_scatter<R: rand::Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * core::f64::consts::FRAC_1_SQRT_2
}

/// Channel coefficient for a given scattered component. The LoS phasor is
/// fixed at phase zero.
pub fn rician_gain(dist: f64, params: &ChannelParams, scatter: Complex64) -> Complex64 {
    let (los, nlos) = params.rician_weights();
    let path = libm::sqrt(params.mean_gain(dist));
    (Complex64::new(los, 0.0) + scatter * nlos) * path
}

/// Draws one block-fading channel coefficient at distance `dist`.
pub fn draw_channel_gain<R: rand::Rng + ?Sized>(
    dist: f64,
    params: &ChannelParams,
    rng: &mut R,
) -> Complex64 {
    rician_gain(dist, params, draw_scatter(rng))
}

/// How interference from other devices is weighted in the SINR denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterferenceModel {
    /// Each interferer contributes through its own channel, `|h_i|² p_i`.
    #[default]
    CrossGain,
    /// Every interferer is weighted by the victim's own gain, `|h_k|² p_i`.
    OwnGain,
}

/// Per-device SINR at the UAV receiver given power gains `|h_k|²`.
pub fn uplink_sinr(
    gains: &[f64],
    powers: &[f64],
    noise_var: f64,
    model: InterferenceModel,
) -> Vec<f64> {
    debug_assert_eq!(gains.len(), powers.len());
    (0..gains.len())
        .map(|k| {
            let interference: f64 = (0..gains.len())
                .filter(|&i| i != k)
                .map(|i| match model {
                    InterferenceModel::CrossGain => gains[i] * powers[i],
                    InterferenceModel::OwnGain => gains[k] * powers[i],
                })
                .sum();
            gains[k] * powers[k] / (interference + noise_var)
        })
        .collect()
}

/// Shannon-Hartley rate in bits per second.
pub fn offload_rate(sinr: f64, bandwidth_hz: f64) -> f64 {
    bandwidth_hz * libm::log2(1.0 + sinr)
}

/// Uplink and relay latencies for one device in one slot.
///
/// Returns `(device→UAV, UAV→cloud)` seconds. The uplink time saturates at
/// `cap` (also used when the rate is zero but bits must move).
pub fn comm_latencies(
    frac_to_uav: f64,
    frac_to_cloud: f64,
    local_backlog: f64,
    rate: f64,
    relay_setup: f64,
    cap: f64,
) -> (f64, f64) {
    let bits = frac_to_uav * local_backlog;
    let uplink = if bits > 0.0 {
        if rate > 0.0 {
            (bits / rate).min(cap)
        } else {
            cap
        }
    } else {
        0.0
    };
    let relay = if frac_to_cloud > 0.0 { relay_setup } else { 0.0 };
    (uplink, relay)
}
