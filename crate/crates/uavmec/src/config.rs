//! Experiment configuration: a flat file of dotted keys layered over the
//! in-code defaults.
//!
//! ```toml
//! agent_kind = "td3"
//! seeds = [1, 2, 3]
//! system.num_devices = 3
//! system.channel.bandwidth_hz = 2e6
//! agent.hidden = [64, 64]
//! agent.reward_clip = "none"
//! ```
//!
//! Keys may also be grouped under `[section]` headers. Every key must name
//! a default field; optional fields take the string `"none"` to unset them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use uavmec_core::agents::{AgentHyperparams, AgentKind};
use uavmec_core::env::{SystemConfig, TaskRanges};
use uavmec_core::nn::OptimizerKind;

use crate::error::{HarnessError, Result};

/// Full-scale evaluation: parallel environments and realizations each.
pub const FULL_SCALE_ENVS: usize = 50;
pub const FULL_SCALE_EPISODES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub agent: AgentHyperparams,
    pub agent_kind: AgentKind,
    /// Training seeds; one run per seed.
    pub seeds: Vec<u64>,
    /// Seed for device placement of the base task and for task sampling.
    pub placement_seed: u64,
    pub parallel_envs: usize,
    /// Episodes per parallel environment in each evaluation.
    pub eval_episodes: usize,
    /// Environment slots of training per run.
    pub train_steps: u64,
    /// Slots between periodic evaluations; 0 evaluates only before and
    /// after training.
    pub eval_every: u64,
    /// UAV CPU capacities (cycles/s). When nonempty, one model is trained
    /// per capacity and every task uses that capacity.
    pub uav_cpu_sweep: Vec<f64>,
    /// Replace `system.weights` by the median-ratio calibration on the
    /// base task before training.
    pub calibrate_weights: bool,
    pub calibration_probe_slots: usize,
    pub tasks: TaskRanges,
    /// Train on `agent.task_pool` sampled tasks instead of the base task.
    pub randomize_tasks: bool,
    /// Sampled tasks kept out of training and used for evaluation. Zero
    /// evaluates on the base task.
    pub heldout_tasks: usize,
    /// Grid resolution of the per-slot oracle used by `validate`.
    pub oracle_grid: usize,
    /// Episodes per seed compared against the oracle by `validate`.
    pub validate_episodes: usize,
    /// Evaluate over 50 × 1000 realizations instead of
    /// `parallel_envs × eval_episodes`.
    pub full_scale: bool,
    /// Parallel evaluation threads; 0 uses every core.
    pub threads: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            agent: AgentHyperparams::default(),
            agent_kind: AgentKind::Td3,
            seeds: vec![0],
            placement_seed: 0,
            parallel_envs: 8,
            eval_episodes: 50,
            train_steps: 100_000,
            eval_every: 10_000,
            uav_cpu_sweep: Vec::new(),
            calibrate_weights: true,
            calibration_probe_slots: 2000,
            tasks: TaskRanges::default(),
            randomize_tasks: false,
            heldout_tasks: 0,
            oracle_grid: 4,
            validate_episodes: 4,
            full_scale: false,
            threads: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.agent.validate()?;
        self.tasks.validate()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::config("seeds", "must be nonempty"));
        }
        if self.parallel_envs == 0 {
            return Err(HarnessError::config("parallel_envs", "must be >= 1"));
        }
        if self.eval_episodes == 0 {
            return Err(HarnessError::config("eval_episodes", "must be >= 1"));
        }
        if self.calibrate_weights && self.calibration_probe_slots == 0 {
            return Err(HarnessError::config("calibration_probe_slots", "must be >= 1"));
        }
        for (i, c) in self.uav_cpu_sweep.iter().enumerate() {
            if !(c.is_finite() && *c > 0.0) {
                return Err(HarnessError::config(format!("uav_cpu_sweep[{i}]"), "must be finite and > 0"));
            }
        }
        if self.validate_episodes == 0 {
            return Err(HarnessError::config("validate_episodes", "must be >= 1"));
        }
        if !(1..=8).contains(&self.oracle_grid) {
            return Err(HarnessError::config("oracle_grid", "must be in 1..=8"));
        }
        Ok(())
    }

    /// `(parallel environments, episodes per environment)` for evaluation.
    pub fn eval_shape(&self) -> (usize, usize) {
        if self.full_scale {
            (FULL_SCALE_ENVS, FULL_SCALE_EPISODES)
        } else {
            (self.parallel_envs, self.eval_episodes)
        }
    }

    /// Parses a config file and layers it over the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::config("<file>", e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten_toml("", &toml::Value::Table(table), &mut flat);
        cfg.apply(flat)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies `key=value` overrides; the value is read as a TOML value,
    /// with bare words taken as strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut flat = BTreeMap::new();
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::config(o, "override must be key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let value = parse_toml_value(v).unwrap_or_else(|| toml::Value::String(v.to_string()));
            flatten_toml(k, &value, &mut flat);
        }
        self.apply(flat)
    }

    fn apply(&mut self, flat: BTreeMap<String, toml::Value>) -> Result<()> {
        let mut json = serde_json::to_value(&*self).expect("config serializes");
        let defaults = json.clone();
        let mut leaves = BTreeMap::new();
        flatten_json("", &defaults, &mut leaves);
        // Switching an optimizer variant resets its sibling fields first.
        for (key, value) in &flat {
            if let (Some(prefix), toml::Value::String(kind)) = (key.strip_suffix(".kind"), value) {
                if leaves.contains_key(key) {
                    let fresh = optimizer_variant(kind).ok_or_else(|| {
                        HarnessError::config(key.clone(), format!("unknown optimizer `{kind}`; expected adam or sgd"))
                    })?;
                    *pointer_mut(&mut json, prefix).expect("known prefix") = fresh;
                }
            }
        }
        let mut variants = BTreeMap::new();
        flatten_json("", &json, &mut variants);
        for (key, value) in flat {
            let known = variants.get(&key).or_else(|| leaves.get(&key)).ok_or_else(|| {
                HarnessError::config(key.clone(), "unknown key")
            })?;
            let v = toml_to_json(&key, &value)?;
            check_kind(&key, known, &v)?;
            let slot = pointer_mut(&mut json, &key)
                .ok_or_else(|| HarnessError::config(key.clone(), "not valid for the selected variant"))?;
            *slot = v;
        }
        let de = serde_path_to_error::deserialize(json);
        let cfg: Self = de.map_err(|e| HarnessError::config(e.path().to_string(), e.inner().to_string()))?;
        *self = cfg;
        Ok(())
    }

    /// The effective configuration as a flat dotted-key file; every field
    /// is listed, defaults included.
    pub fn dump(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut leaves = BTreeMap::new();
        flatten_json("", &json, &mut leaves);
        let mut s = String::new();
        for (k, v) in leaves {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&json_to_toml_text(&v));
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of [`Self::dump`], leaving out the output directory and
    /// thread count, which do not affect results, and the seed list and
    /// agent kind, which every record carries itself.
    pub fn hash(&self) -> String {
        let c = Self {
            out: PathBuf::new(),
            threads: 0,
            seeds: vec![0],
            agent_kind: AgentKind::Td3,
            ..self.clone()
        };
        hex::encode(Sha256::digest(c.dump().as_bytes()))
    }
}

fn optimizer_variant(kind: &str) -> Option<Value> {
    let v = match kind {
        "adam" => OptimizerKind::default(),
        "sgd" => OptimizerKind::Sgd,
        _ => return None,
    };
    Some(serde_json::to_value(v).expect("optimizer serializes"))
}

fn parse_toml_value(text: &str) -> Option<toml::Value> {
    let t: toml::Table = format!("v = {text}").parse().ok()?;
    t.get("v").cloned()
}

fn join(prefix: &str, k: &str) -> String {
    if prefix.is_empty() {
        k.to_string()
    } else {
        format!("{prefix}.{k}")
    }
}

fn flatten_toml(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten_toml(&join(prefix, k), v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn flatten_json(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                flatten_json(&join(prefix, k), v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn pointer_mut<'a>(v: &'a mut Value, dotted: &str) -> Option<&'a mut Value> {
    let mut cur = v;
    for part in dotted.split('.') {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    Some(cur)
}

fn toml_to_json(key: &str, v: &toml::Value) -> Result<Value> {
    Ok(match v {
        toml::Value::String(s) if s == "none" => Value::Null,
        toml::Value::String(s) => Value::String(s.clone()),
        toml::Value::Integer(i) => Value::from(*i),
        toml::Value::Float(f) => serde_json::Number::from_f64(*f)
            .map(Value::Number)
            .ok_or_else(|| HarnessError::config(key, "must be finite"))?,
        toml::Value::Boolean(b) => Value::Bool(*b),
        toml::Value::Array(a) => Value::Array(
            a.iter()
                .enumerate()
                .map(|(i, x)| toml_to_json(&format!("{key}[{i}]"), x))
                .collect::<Result<_>>()?,
        ),
        toml::Value::Datetime(_) | toml::Value::Table(_) => {
            return Err(HarnessError::config(key, "unsupported value type"))
        }
    })
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "none",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "table",
    }
}

/// Checks the new value against the default's type. Optional fields
/// (default none) accept anything and are checked on deserialization.
fn check_kind(key: &str, default: &Value, new: &Value) -> Result<()> {
    let ok = match (default, new) {
        (Value::Null, _) | (_, Value::Null) => true,
        (a, b) => type_name(a) == type_name(b),
    };
    if ok {
        Ok(())
    } else {
        Err(HarnessError::config(
            key,
            format!("expected {}, got {}", type_name(default), type_name(new)),
        ))
    }
}

fn json_to_toml_text(v: &Value) -> String {
    match v {
        Value::Null => "\"none\"".into(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => u.to_string(),
            (_, Some(i), _) => i.to_string(),
            (_, _, Some(f)) => format!("{f:?}"),
            _ => unreachable!("json numbers are u64, i64 or f64"),
        },
        Value::String(s) => toml::Value::String(s.clone()).to_string(),
        Value::Array(a) => {
            let items: Vec<String> = a.iter().map(json_to_toml_text).collect();
            format!("[{}]", items.join(", "))
        }
        Value::Object(_) => unreachable!("objects are flattened"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut c = ExperimentConfig::default();
        c.system.channel.ref_gain = 1.234_567_890_123e-7;
        c.agent.reward_clip = Some(5.0);
        c.uav_cpu_sweep = vec![1e9, 2.5e9];
        let back = ExperimentConfig::from_toml_str(&c.dump()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn dotted_keys_and_sections_agree() {
        let a = ExperimentConfig::from_toml_str("system.num_devices = 3\nagent.hidden = [8, 8]").unwrap();
        let b = ExperimentConfig::from_toml_str("[system]\nnum_devices = 3\n[agent]\nhidden = [8, 8]").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.system.num_devices, 3);
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::from_toml_str("system.chanel.bandwidth_hz = 1").unwrap_err();
        assert!(e.to_string().contains("system.chanel.bandwidth_hz"), "{e}");
        let e = ExperimentConfig::from_toml_str("system.num_devices = \"three\"").unwrap_err();
        assert!(e.to_string().contains("system.num_devices"), "{e}");
        let e = ExperimentConfig::from_toml_str("system.num_devices = 2.5").unwrap_err();
        assert!(e.to_string().contains("system.num_devices"), "{e}");
        for bad in ["nan", "inf"] {
            let e = ExperimentConfig::from_toml_str(&format!("agent.actor_lr = {bad}")).unwrap_err();
            assert!(e.to_string().contains("agent.actor_lr"), "{e}");
        }
    }

    #[test]
    fn overrides_and_variants() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&["agent.optimizer.kind=sgd", "agent_kind=mtd3", "agent.reward_clip=3"])
            .unwrap();
        assert_eq!(c.agent.optimizer, OptimizerKind::Sgd);
        assert_eq!(c.agent_kind, AgentKind::Mtd3);
        assert_eq!(c.agent.reward_clip, Some(3.0));
        c.apply_overrides(&["agent.reward_clip=none", "agent.optimizer.kind=adam"]).unwrap();
        assert_eq!(c.agent.reward_clip, None);
        assert_eq!(c.agent.optimizer, OptimizerKind::default());
        assert!(c.apply_overrides(&["agent.optimizer.kind=rmsprop"]).is_err());
        assert!(c.apply_overrides(&["seeds"]).is_err());
    }
}
