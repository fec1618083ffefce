//! Trained-agent checkpoints.
//!
//! Layout: the 8-byte magic `UAVMECK\x01`, a CBOR-encoded
//! [`Checkpoint`], then a little-endian CRC-32 of everything before it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uavmec_core::agents::{AgentKind, MetaState, RewardScale, Td3Learner};
use uavmec_core::nn::DenseNet;
use uavmec_core::objective::RewardWeights;

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"UAVMECK\x01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub agent: AgentKind,
    pub seed: u64,
    /// Capacity every training task used, if it was forced.
    pub uav_cpu_cap: Option<f64>,
    /// Reward weights the agent was trained under.
    pub weights: RewardWeights,
    pub scale: RewardScale,
    pub env_steps: u64,
    pub updates: u64,
    pub meta_iters: u64,
    pub learner: Td3Learner,
    pub meta: Option<MetaState>,
}

/// `checkpoints/{agent}[-cu{cap}]-s{seed}.ckpt` under `out`.
pub fn checkpoint_path(out: &Path, agent: AgentKind, cap: Option<f64>, seed: u64) -> PathBuf {
    let cap = cap.map(|c| format!("-cu{c:e}")).unwrap_or_default();
    out.join("checkpoints").join(format!("{}{cap}-s{seed}.ckpt", agent.name()))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn check_net(path: &Path, net: &DenseNet) -> Result<()> {
    DenseNet::from_params(net.widths(), net.out_act(), net.params().to_vec())
        .map_err(|e| corrupt(path, e.to_string()))?;
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = MAGIC.to_vec();
        ciborium::into_writer(self, &mut buf).expect("checkpoint serializes");
        let crc = crc32fast::hash(&buf);
        buf.extend(crc.to_le_bytes());
        buf
    }

    /// Decodes and checks integrity and network shapes; `path` is only
    /// used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt(path, "not a checkpoint (bad magic or version)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let want = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != want {
            return Err(corrupt(path, "checksum mismatch"));
        }
        let ck: Checkpoint =
            ciborium::from_reader(&body[MAGIC.len()..]).map_err(|e| corrupt(path, e.to_string()))?;
        let l = &ck.learner;
        for net in [&l.actor, &l.actor_target].into_iter().chain(&l.critics).chain(&l.critic_targets) {
            check_net(path, net)?;
        }
        if l.critics.len() != l.critic_targets.len() || l.critics.len() != l.critic_opts.len() {
            return Err(corrupt(path, "critic count mismatch"));
        }
        if l.actor.widths() != l.actor_target.widths() {
            return Err(corrupt(path, "actor and target shapes differ"));
        }
        Ok(ck)
    }

    /// Writes through a temporary file so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use uavmec_core::agents::AgentHyperparams;

    fn sample() -> Checkpoint {
        let hp = AgentHyperparams {
            hidden: vec![4],
            ..AgentHyperparams::default()
        };
        let mut rng = uavmec_core::Rng::seed_from_u64(1);
        let learner = Td3Learner::new(3, 2, 2, &hp, &mut rng).unwrap();
        Checkpoint {
            config_hash: "abc".into(),
            agent: AgentKind::Td3,
            seed: 7,
            uav_cpu_cap: Some(2e9),
            weights: RewardWeights::default(),
            scale: RewardScale::default(),
            env_steps: 10,
            updates: 3,
            meta_iters: 0,
            learner,
            meta: None,
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let ck = sample();
        let p = Path::new("x.ckpt");
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes, p).unwrap(), ck);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..6], p).is_err());
    }

    #[test]
    fn path_layout() {
        let p = checkpoint_path(Path::new("o"), AgentKind::Mtd3, Some(2e9), 3);
        assert_eq!(p, Path::new("o/checkpoints/mtd3-cu2e9-s3.ckpt"));
        let p = checkpoint_path(Path::new("o"), AgentKind::Ddpg, None, 0);
        assert_eq!(p, Path::new("o/checkpoints/ddpg-s0.ckpt"));
    }
}
