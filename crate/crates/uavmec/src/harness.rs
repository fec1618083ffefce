//! Training runs, capacity sweeps, plot data and oracle validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uavmec_core::agents::{adapt_to, run_episode, AgentKind, EpisodeSummary, RewardScale, Td3Learner, Trainer};
use uavmec_core::env::{
    calibrate_env_weights, oracle_best_slot_action, random_raw_action, realized_slot_objective, sample_task, MecEnv,
    SystemConfig, TaskSpec,
};
use uavmec_core::nn::DenseNet;
use uavmec_core::objective::RewardWeights;
use uavmec_core::Rng;

use crate::checkpoint::{checkpoint_path, Checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{
    read_metrics, sweep_metrics_path, timing_path, train_metrics_path, JsonlWriter, MetricsRecord, Phase, RecordKey,
    TimingRecord,
};
use crate::stats::{mean, spearman, std_err};
use crate::trace::{audit_trace, AuditReport, TraceLine};

const TASK_STREAM: u64 = 0x7a5c_0e11_d4b2_93a1;
const EVAL_STREAM: u64 = 0x3c6e_f372_fe94_f82b;
const ADAPT_STREAM: u64 = 0xbb67_ae85_84ca_a73b;
const ENV_STREAM: u64 = 0xa54f_f53a_5f1d_36f1;

/// Denominator guard of the relative oracle gap.
pub const GAP_EPS: f64 = 1e-9;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    splitmix(splitmix(splitmix(a) ^ b) ^ c)
}

/// Seed of evaluation episode `episode` on parallel environment `env`.
/// It depends on neither agent nor training seed, so every model is
/// evaluated on the same realizations.
pub fn episode_seed(placement_seed: u64, env: usize, episode: usize) -> u64 {
    mix(placement_seed ^ EVAL_STREAM, env as u64, episode as u64)
}

/// Tasks and calibrated weights derived from a configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// The configuration with `system.weights` replaced by the calibrated
    /// weights when calibration is enabled.
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub base_task: TaskSpec,
    pub train_tasks: Vec<TaskSpec>,
    pub eval_tasks: Vec<TaskSpec>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let mut eff = cfg.clone();
    let base_task = TaskSpec::from_config(&cfg.system, cfg.placement_seed);
    if cfg.calibrate_weights {
        let env = MecEnv::new(cfg.system.clone(), base_task.clone(), cfg.placement_seed)?;
        eff.system.weights = calibrate_env_weights(&env, cfg.calibration_probe_slots, cfg.placement_seed);
    }
    let mut rng = Rng::seed_from_u64(cfg.placement_seed ^ TASK_STREAM);
    let train_tasks = if cfg.randomize_tasks {
        (0..cfg.agent.task_pool)
            .map(|_| sample_task(&mut rng, &cfg.system, &cfg.tasks))
            .collect()
    } else {
        vec![base_task.clone()]
    };
    let heldout: Vec<TaskSpec> = (0..cfg.heldout_tasks)
        .map(|_| sample_task(&mut rng, &cfg.system, &cfg.tasks))
        .collect();
    let eval_tasks = if heldout.is_empty() { train_tasks.clone() } else { heldout };
    Ok(Prepared {
        hash: cfg.hash(),
        cfg: eff,
        base_task,
        train_tasks,
        eval_tasks,
    })
}

/// Capacities a command iterates: the sweep list, or the tasks' own.
pub fn capacities(cfg: &ExperimentConfig) -> Vec<Option<f64>> {
    if cfg.uav_cpu_sweep.is_empty() {
        vec![None]
    } else {
        cfg.uav_cpu_sweep.iter().copied().map(Some).collect()
    }
}

fn at_capacity(tasks: &[TaskSpec], cap: Option<f64>) -> Vec<TaskSpec> {
    tasks
        .iter()
        .map(|t| TaskSpec {
            uav_cpu_cap: cap.unwrap_or(t.uav_cpu_cap),
            ..t.clone()
        })
        .collect()
}

fn thread_pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| HarnessError::config("threads", e.to_string()))
}

/// How evaluation chooses actions.
#[derive(Debug, Clone)]
pub enum Policy {
    /// Deterministic actor per evaluation task.
    Actors(Vec<DenseNet>),
    Random,
}

/// One evaluation: `envs × episodes` episodes, environment `i` running
/// task `i mod tasks.len()`. Results come back in (environment, episode)
/// order regardless of scheduling.
pub struct Evaluation {
    pub records: Vec<MetricsRecord>,
    /// Slot traces of each environment's first episode, if requested.
    pub traces: Vec<TraceLine>,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    pool: &rayon::ThreadPool,
    system: &SystemConfig,
    tasks: &[TaskSpec],
    policy: &Policy,
    key: &RecordKey,
    shape: (usize, usize),
    placement_seed: u64,
    trace: bool,
) -> Result<Evaluation> {
    let (envs, episodes) = shape;
    let per_env = pool.install(|| {
        (0..envs)
            .into_par_iter()
            .map(|i| -> Result<(Vec<MetricsRecord>, Vec<TraceLine>)> {
                let ti = i % tasks.len();
                let task = &tasks[ti];
                let mut env = MecEnv::new(system.clone(), task.clone(), 0)?;
                let mut recs = Vec::with_capacity(episodes);
                let mut lines = Vec::new();
                for k in 0..episodes {
                    let seed = episode_seed(placement_seed, i, k);
                    let record_trace = trace && k == 0;
                    if record_trace {
                        lines.push(TraceLine::Episode {
                            label: format!("{}-s{}-env{i}", key.agent.name(), key.seed),
                            system: system.clone(),
                            task: task.clone(),
                            episode_seed: seed,
                        });
                    }
                    let mut rng = Rng::seed_from_u64(seed ^ EVAL_STREAM);
                    let dim = env.action_dim();
                    let mut on_step = |raw: &[f64], _: &_, out: &uavmec_core::env::SlotOutcome| {
                        if record_trace {
                            lines.push(TraceLine::Slot {
                                slot: out.slot,
                                raw: raw.to_vec(),
                                reward: out.reward,
                                uav_xy: out.uav_xy,
                                queues: out.queues.clone(),
                            });
                        }
                    };
                    let s: EpisodeSummary = match policy {
                        Policy::Actors(actors) => run_episode(&mut env, seed, |o| actors[ti].forward(o), &mut on_step)?,
                        Policy::Random => {
                            run_episode(&mut env, seed, |_| Ok(random_raw_action(&mut rng, dim)), &mut on_step)?
                        }
                    };
                    recs.push(MetricsRecord::new(key, task.seed, task.uav_cpu_cap, i, i * episodes + k, &s));
                }
                Ok((recs, lines))
            })
            .collect::<Vec<_>>()
    });
    let mut out = Evaluation {
        records: Vec::new(),
        traces: Vec::new(),
    };
    for r in per_env {
        let (recs, lines) = r?;
        out.records.extend(recs);
        out.traces.extend(lines);
    }
    Ok(out)
}

/// Deployable actors for each task: the learner's own actor, or for MTD3
/// a copy adapted to the task for `inner_steps` slots.
fn deploy(
    pool: &rayon::ThreadPool,
    kind: AgentKind,
    learner: &Td3Learner,
    scale: &RewardScale,
    cfg: &ExperimentConfig,
    tasks: &[TaskSpec],
    seed: u64,
) -> Result<Vec<DenseNet>> {
    match kind {
        AgentKind::Ddpg | AgentKind::Td3 => Ok(vec![learner.actor.clone(); tasks.len()]),
        AgentKind::Mtd3 => pool.install(|| {
            tasks
                .par_iter()
                .enumerate()
                .map(|(i, t)| {
                    let env = MecEnv::new(cfg.system.clone(), t.clone(), 0)?;
                    let s = mix(seed ^ ADAPT_STREAM, i as u64, t.seed);
                    Ok(adapt_to(learner, scale, &cfg.agent, &env, s)?.actor)
                })
                .collect()
        }),
    }
}

/// Outcome of one (agent, capacity, seed) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub agent: AgentKind,
    pub seed: u64,
    pub uav_cpu_cap: Option<f64>,
    pub env_steps: u64,
    pub updates: u64,
    pub meta_iters: u64,
    pub audit_failures: u64,
    pub final_mean_reward: f64,
    pub final_efficiency: f64,
    pub checkpoint: PathBuf,
}

/// Written to `run-{agent}.json` after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub agent: AgentKind,
    pub weights: RewardWeights,
    pub runs: Vec<RunSummary>,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("reports serialize");
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))
}

fn trace_path(out: &Path, agent: AgentKind, cap: Option<f64>, seed: u64) -> PathBuf {
    let cap = cap.map(|c| format!("-cu{c:e}")).unwrap_or_default();
    out.join("traces").join(format!("{}{cap}-s{seed}.jsonl", agent.name()))
}

/// Trains `cfg.agent_kind` once per seed and capacity, evaluating every
/// `eval_every` slots into `metrics-{agent}.jsonl`.
///
/// With `resume`, existing checkpoints restore the learner, reward scale
/// and counters; replay buffers and worker environments start fresh, and
/// metrics are appended. Fails with an audit error after all runs finish
/// if any training or evaluation slot violated a constraint.
pub fn run_training(cfg: &ExperimentConfig, resume: bool) -> Result<TrainReport> {
    let prep = prepare(cfg)?;
    let cfg = &prep.cfg;
    let kind = cfg.agent_kind;
    let out = cfg.out.as_path();
    create_out(out)?;
    std::fs::write(out.join("config.toml"), prep_dump(&prep)).map_err(|e| HarnessError::io(out, e))?;
    let pool = thread_pool(cfg)?;
    let mut metrics = JsonlWriter::open(&train_metrics_path(out, kind), resume)?;
    let mut timing = JsonlWriter::open(&timing_path(out), true)?;
    let mut report = TrainReport {
        config_hash: prep.hash.clone(),
        agent: kind,
        weights: cfg.system.weights,
        runs: Vec::new(),
    };
    let mut failures = Vec::new();

    for &seed in &cfg.seeds {
        for cap in capacities(cfg) {
            let started = Instant::now();
            let train_tasks = at_capacity(&prep.train_tasks, cap);
            let eval_tasks = at_capacity(&prep.eval_tasks, cap);
            let envs = train_tasks
                .iter()
                .enumerate()
                .map(|(i, t)| MecEnv::new(cfg.system.clone(), t.clone(), mix(seed ^ ENV_STREAM, i as u64, 0)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let mut trainer = Trainer::new(kind, cfg.agent.clone(), envs, seed)?;
            let ck_path = checkpoint_path(out, kind, cap, seed);
            let resumed = resume && ck_path.exists();
            if resumed {
                let ck = Checkpoint::load(&ck_path)?;
                if ck.agent != kind {
                    return Err(HarnessError::Checkpoint {
                        path: ck_path,
                        reason: format!("holds a {} agent, not {}", ck.agent.name(), kind.name()),
                    });
                }
                if ck.learner.obs_dim() != trainer.learner.obs_dim() || ck.learner.act_dim() != trainer.learner.act_dim() {
                    return Err(HarnessError::Checkpoint {
                        path: ck_path,
                        reason: "network shapes do not match the configuration".into(),
                    });
                }
                trainer.learner = ck.learner;
                trainer.scale = ck.scale;
                trainer.meta = ck.meta.or(trainer.meta);
                trainer.env_steps = ck.env_steps;
                trainer.updates = ck.updates;
                trainer.meta_iters = ck.meta_iters;
            }

            let total = cfg.train_steps;
            let per = match kind {
                AgentKind::Mtd3 => trainer.meta_iter_steps().max(1),
                _ => 1,
            };
            let finished = |t: &Trainer| total.saturating_sub(t.env_steps) < per;
            let mut eval_now = |trainer: &Trainer, trace: bool| -> Result<(f64, f64, bool)> {
                let key = RecordKey {
                    config_hash: prep.hash.clone(),
                    phase: Phase::Train,
                    agent: kind,
                    seed,
                    train_steps: trainer.env_steps,
                };
                let actors = deploy(&pool, kind, &trainer.learner, &trainer.scale, cfg, &eval_tasks, seed)?;
                let ev = evaluate(
                    &pool,
                    &cfg.system,
                    &eval_tasks,
                    &Policy::Actors(actors),
                    &key,
                    cfg.eval_shape(),
                    cfg.placement_seed,
                    trace,
                )?;
                for r in &ev.records {
                    metrics.write(r)?;
                }
                metrics.flush()?;
                if trace {
                    let mut tw = JsonlWriter::open(&trace_path(out, kind, cap, seed), false)?;
                    for l in &ev.traces {
                        tw.write(l)?;
                    }
                    tw.flush()?;
                }
                let rewards: Vec<f64> = ev.records.iter().map(|r| r.mean_reward).collect();
                let effs: Vec<f64> = ev.records.iter().map(|r| r.efficiency).collect();
                Ok((mean(&rewards), mean(&effs), ev.records.iter().all(|r| r.audit_ok)))
            };

            let mut eval_audit_ok = true;
            let mut last = None;
            if !(resumed && trainer.env_steps > 0) {
                let e = eval_now(&trainer, finished(&trainer))?;
                eval_audit_ok &= e.2;
                last = Some(e);
            }
            while !finished(&trainer) {
                let remaining = total - trainer.env_steps;
                let chunk = if cfg.eval_every == 0 { remaining } else { cfg.eval_every.min(remaining) };
                trainer.train_steps(chunk.max(per))?;
                let e = eval_now(&trainer, finished(&trainer))?;
                eval_audit_ok &= e.2;
                last = Some(e);
            }
            let (final_mean_reward, final_efficiency, _) = match last {
                Some(e) => e,
                // resumed at or past the budget: still emit a final traced evaluation
                None => {
                    let e = eval_now(&trainer, true)?;
                    eval_audit_ok &= e.2;
                    e
                }
            };

            Checkpoint {
                config_hash: prep.hash.clone(),
                agent: kind,
                seed,
                uav_cpu_cap: cap,
                weights: cfg.system.weights,
                scale: trainer.scale,
                env_steps: trainer.env_steps,
                updates: trainer.updates,
                meta_iters: trainer.meta_iters,
                learner: trainer.learner.clone(),
                meta: trainer.meta.clone(),
            }
            .save(&ck_path)?;
            let audit_failures = trainer.audit_failures();
            if audit_failures > 0 || !eval_audit_ok {
                failures.push(format!(
                    "{} seed {seed}{}: {audit_failures} training slots violated constraints{}",
                    kind.name(),
                    cap.map(|c| format!(" capacity {c:e}")).unwrap_or_default(),
                    if eval_audit_ok { "" } else { "; evaluation episodes failed the audit" }
                ));
            }
            report.runs.push(RunSummary {
                agent: kind,
                seed,
                uav_cpu_cap: cap,
                env_steps: trainer.env_steps,
                updates: trainer.updates,
                meta_iters: trainer.meta_iters,
                audit_failures,
                final_mean_reward,
                final_efficiency,
                checkpoint: ck_path,
            });
            timing.write(&TimingRecord {
                command: "train".into(),
                agent: Some(kind),
                seed: Some(seed),
                uav_cpu_cap: cap,
                seconds: started.elapsed().as_secs_f64(),
            })?;
        }
    }
    write_json(&out.join(format!("run-{}.json", kind.name())), &report)?;
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(HarnessError::Audit(failures.join("; ")))
    }
}

/// Effective configuration file written next to results, with the
/// calibrated weights noted.
fn prep_dump(prep: &Prepared) -> String {
    let w = prep.cfg.system.weights;
    let mut s = format!("# config hash {}\n", prep.hash);
    if prep.cfg.calibrate_weights {
        s.push_str(&format!("# calibrated weights: v = {:?}, v1 = {:?}, v2 = {:?}\n", w.v, w.v1, w.v2));
    }
    // The dump holds the configuration as given, so reloading it
    // recalibrates to the same weights.
    let mut given = prep.cfg.clone();
    if prep.cfg.calibrate_weights {
        given.system.weights = SystemConfig::default().weights;
    }
    s.push_str(&given.dump());
    s
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agg {
    pub mean: f64,
    pub se: f64,
}

impl Agg {
    pub fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            se: std_err(xs),
        }
    }
}

/// One row of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub agent: AgentKind,
    pub uav_cpu_cap: f64,
    pub episodes: usize,
    pub mean_reward: Agg,
    pub efficiency: Agg,
    pub queue_local: Agg,
    pub queue_uav: Agg,
    pub queue_cloud: Agg,
    pub audit_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Agents whose efficiency falls somewhere along ascending capacity.
    pub warnings: Vec<String>,
}

impl SweepResult {
    /// Spearman correlation of `metric` with capacity for `agent`.
    pub fn trend(&self, agent: AgentKind, metric: impl Fn(&SweepRow) -> f64) -> f64 {
        let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.agent == agent).collect();
        let caps: Vec<f64> = rows.iter().map(|r| r.uav_cpu_cap).collect();
        let ys: Vec<f64> = rows.iter().map(|r| metric(r)).collect();
        spearman(&caps, &ys)
    }
}

/// Groups records by agent and capacity into table rows, agents in
/// declaration order and capacities ascending.
pub fn sweep_rows(records: &[MetricsRecord]) -> Vec<SweepRow> {
    let mut groups: BTreeMap<(usize, u64), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        let a = AgentKind::ALL.iter().position(|k| *k == r.agent).expect("known agent");
        // positive finite capacities order like their bit patterns
        groups.entry((a, r.uav_cpu_cap.to_bits())).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let col = |f: fn(&MetricsRecord) -> f64| Agg::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            SweepRow {
                agent: g[0].agent,
                uav_cpu_cap: g[0].uav_cpu_cap,
                episodes: g.len(),
                mean_reward: col(|r| r.mean_reward),
                efficiency: col(|r| r.efficiency),
                queue_local: col(|r| r.queue_local),
                queue_uav: col(|r| r.queue_uav),
                queue_cloud: col(|r| r.queue_cloud),
                audit_ok: g.iter().all(|r| r.audit_ok),
            }
        })
        .collect()
}

/// Checkpoint for `(agent, cap, seed)`: the capacity's own, else one
/// trained without a forced capacity.
pub fn find_checkpoint(out: &Path, agent: AgentKind, cap: Option<f64>, seed: u64) -> Result<PathBuf> {
    let own = checkpoint_path(out, agent, cap, seed);
    if own.exists() {
        return Ok(own);
    }
    let shared = checkpoint_path(out, agent, None, seed);
    if shared.exists() {
        return Ok(shared);
    }
    Err(HarnessError::MissingCheckpoint {
        what: format!(
            "{} seed {seed}{}",
            agent.name(),
            cap.map(|c| format!(" at capacity {c:e}")).unwrap_or_default()
        ),
        path: own,
    })
}

/// Evaluates every agent's checkpoints at every sweep capacity and writes
/// `sweep-metrics.jsonl`, `sweep.csv` and `sweep.jsonl`.
pub fn run_sweep(cfg: &ExperimentConfig, agents: &[AgentKind]) -> Result<SweepResult> {
    let prep = prepare(cfg)?;
    let cfg = &prep.cfg;
    let out = cfg.out.as_path();
    let mut caps: Vec<Option<f64>> = capacities(cfg);
    caps.sort_by(|a, b| a.unwrap_or(0.0).total_cmp(&b.unwrap_or(0.0)));
    // Every checkpoint must exist before any evaluation starts.
    let mut plan = Vec::new();
    for &agent in agents {
        for &cap in &caps {
            for &seed in &cfg.seeds {
                plan.push((agent, cap, seed, find_checkpoint(out, agent, cap, seed)?));
            }
        }
    }
    let pool = thread_pool(cfg)?;
    let mut writer = JsonlWriter::open(&sweep_metrics_path(out), false)?;
    let mut timing = JsonlWriter::open(&timing_path(out), true)?;
    let started = Instant::now();
    let mut records = Vec::new();
    for (agent, cap, seed, path) in plan {
        let ck = Checkpoint::load(&path)?;
        let mut c = cfg.clone();
        c.system.weights = ck.weights;
        let tasks = at_capacity(&prep.eval_tasks, cap);
        let actors = deploy(&pool, agent, &ck.learner, &ck.scale, &c, &tasks, seed)?;
        let key = RecordKey {
            config_hash: prep.hash.clone(),
            phase: Phase::Sweep,
            agent,
            seed,
            train_steps: ck.env_steps,
        };
        let ev = evaluate(
            &pool,
            &c.system,
            &tasks,
            &Policy::Actors(actors),
            &key,
            c.eval_shape(),
            c.placement_seed,
            false,
        )?;
        for r in &ev.records {
            writer.write(r)?;
        }
        records.extend(ev.records);
    }
    writer.flush()?;
    let rows = sweep_rows(&records);
    let mut warnings = Vec::new();
    for &agent in agents {
        let effs: Vec<&SweepRow> = rows.iter().filter(|r| r.agent == agent).collect();
        for w in effs.windows(2) {
            if w[1].efficiency.mean < w[0].efficiency.mean {
                warnings.push(format!(
                    "{}: efficiency falls from {:.6e} to {:.6e} between capacities {:e} and {:e}",
                    agent.name(),
                    w[0].efficiency.mean,
                    w[1].efficiency.mean,
                    w[0].uav_cpu_cap,
                    w[1].uav_cpu_cap
                ));
            }
        }
    }
    let result = SweepResult { rows, warnings };
    write_sweep_csv(&out.join("sweep.csv"), &result.rows)?;
    let mut jw = JsonlWriter::open(&out.join("sweep.jsonl"), false)?;
    for r in &result.rows {
        jw.write(r)?;
    }
    jw.flush()?;
    timing.write(&TimingRecord {
        command: "sweep".into(),
        agent: None,
        seed: None,
        uav_cpu_cap: None,
        seconds: started.elapsed().as_secs_f64(),
    })?;
    Ok(result)
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::io(path, std::io::Error::other(e))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let header = [
        "agent",
        "uav_cpu_cap",
        "episodes",
        "mean_reward",
        "mean_reward_se",
        "efficiency",
        "efficiency_se",
        "queue_local",
        "queue_local_se",
        "queue_uav",
        "queue_uav_se",
        "queue_cloud",
        "queue_cloud_se",
        "audit_ok",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.agent.name().to_string(), r.uav_cpu_cap.to_string(), r.episodes.to_string()];
            for a in [r.mean_reward, r.efficiency, r.queue_local, r.queue_uav, r.queue_cloud] {
                v.push(a.mean.to_string());
                v.push(a.se.to_string());
            }
            v.push(r.audit_ok.to_string());
            v
        })
        .collect();
    write_csv(path, &header, &body)
}

/// Files written by [`emit_plot_data`], all under `plots/`.
pub const PLOT_FILES: [&str; 5] = [
    "fig_reward.csv",
    "fig_efficiency.csv",
    "fig_queue_local.csv",
    "fig_queue_uav.csv",
    "fig_queue_cloud.csv",
];

/// Writes plot-ready CSV files from the metric files under `out`.
///
/// `fig_reward.csv`: `agent, train_steps, n, mean_reward, mean_reward_se`
/// over training-time evaluations. The other four hold
/// `agent, uav_cpu_cap, n, <metric>, <metric>_se` from the sweep records,
/// with efficiency in bits/s and queues in bits.
pub fn emit_plot_data(out: &Path) -> Result<Vec<PathBuf>> {
    let mut train = Vec::new();
    for a in AgentKind::ALL {
        train.extend(read_metrics(&train_metrics_path(out, a))?);
    }
    let sweep = read_metrics(&sweep_metrics_path(out))?;
    let dir = out.join("plots");
    let mut written = Vec::new();

    let mut by_step: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
    for r in &train {
        let a = AgentKind::ALL.iter().position(|k| *k == r.agent).expect("known agent");
        by_step.entry((a, r.train_steps)).or_default().push(r.mean_reward);
    }
    let rows: Vec<Vec<String>> = by_step
        .iter()
        .map(|((a, steps), xs)| {
            let g = Agg::of(xs);
            vec![
                AgentKind::ALL[*a].name().to_string(),
                steps.to_string(),
                xs.len().to_string(),
                g.mean.to_string(),
                g.se.to_string(),
            ]
        })
        .collect();
    let p = dir.join(PLOT_FILES[0]);
    write_csv(&p, &["agent", "train_steps", "n", "mean_reward", "mean_reward_se"], &rows)?;
    written.push(p);

    let table = sweep_rows(&sweep);
    let columns: [(&str, fn(&SweepRow) -> Agg); 4] = [
        ("efficiency", |r| r.efficiency),
        ("queue_local", |r| r.queue_local),
        ("queue_uav", |r| r.queue_uav),
        ("queue_cloud", |r| r.queue_cloud),
    ];
    for (file, (name, pick)) in PLOT_FILES[1..].iter().zip(columns) {
        let rows: Vec<Vec<String>> = table
            .iter()
            .map(|r| {
                let g = pick(r);
                vec![
                    r.agent.name().to_string(),
                    r.uav_cpu_cap.to_string(),
                    r.episodes.to_string(),
                    g.mean.to_string(),
                    g.se.to_string(),
                ]
            })
            .collect();
        let p = dir.join(file);
        let se = format!("{name}_se");
        write_csv(&p, &["agent", "uav_cpu_cap", "n", name, &se], &rows)?;
        written.push(p);
    }
    Ok(written)
}

/// Relative gap `(O* − O) / (|O*| + ε)` between the oracle optimum and an
/// achieved slot objective.
pub fn relative_gap(oracle: f64, achieved: f64) -> f64 {
    (oracle - achieved) / (oracle.abs() + GAP_EPS)
}

/// Who acts during an oracle comparison.
pub enum GapPolicy<'a> {
    Actor(&'a DenseNet),
    Random(u64),
    /// The oracle's own action; its gap is zero by construction.
    Oracle,
}

/// Per-slot relative gaps of one episode. The environment follows the
/// policy's actions; each slot's fading draw is shared with the oracle.
pub fn episode_gaps(env: &mut MecEnv, episode_seed: u64, policy: GapPolicy, grid: usize) -> Result<Vec<f64>> {
    env.reset(episode_seed);
    let mut rng = match policy {
        GapPolicy::Random(s) => Rng::seed_from_u64(s),
        _ => Rng::seed_from_u64(0),
    };
    let mut gaps = Vec::with_capacity(env.config().num_slots);
    while !env.done() {
        let draws = env.draw_slot();
        let (best, best_value) = oracle_best_slot_action(env, &draws, grid)?;
        let action = match &policy {
            GapPolicy::Actor(net) => env.project(&net.forward(&env.observation())?)?,
            GapPolicy::Random(_) => env.project(&random_raw_action(&mut rng, env.action_dim()))?,
            GapPolicy::Oracle => best,
        };
        let achieved = realized_slot_objective(env, &action, &draws)?;
        gaps.push(relative_gap(best_value, achieved));
        env.step_with(&action, &draws)?;
    }
    Ok(gaps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedGap {
    pub seed: u64,
    pub policy_gap: f64,
    pub random_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub agent: AgentKind,
    pub uav_cpu_cap: Option<f64>,
    pub seeds: Vec<SeedGap>,
    pub policy_gap: Agg,
    pub random_gap: Agg,
    /// Mean of `random − policy` over seeds (over episodes when there is
    /// one seed), in its standard errors; zero when the spread is zero.
    pub margin_in_se: f64,
    /// The policy's gap is below random's by at least three standard errors.
    pub passed: bool,
}

/// Compares each seed's trained policy with the grid oracle slot by slot
/// over `validate_episodes` episodes, and a uniform random policy on the
/// same realizations.
pub fn validate_against_oracle(cfg: &ExperimentConfig, agent: AgentKind) -> Result<ValidationReport> {
    if cfg.system.num_devices != 1 {
        return Err(HarnessError::config(
            "system.num_devices",
            format!("oracle validation needs exactly one device, got {}", cfg.system.num_devices),
        ));
    }
    let prep = prepare(cfg)?;
    let cfg = &prep.cfg;
    let cap = capacities(cfg)[0];
    let task = at_capacity(&prep.eval_tasks, cap)[0].clone();
    let pool = thread_pool(cfg)?;
    let started = Instant::now();
    let mut seeds = Vec::new();
    let mut episode_diffs = Vec::new();
    for &seed in &cfg.seeds {
        let ck = Checkpoint::load(&find_checkpoint(&cfg.out, agent, cap, seed)?)?;
        let mut c = cfg.clone();
        c.system.weights = ck.weights;
        let actor = deploy(&pool, agent, &ck.learner, &ck.scale, &c, std::slice::from_ref(&task), seed)?.remove(0);
        let per_episode: Vec<(f64, f64)> = pool.install(|| {
            (0..cfg.validate_episodes)
                .into_par_iter()
                .map(|k| -> Result<(f64, f64)> {
                    let es = episode_seed(cfg.placement_seed, 0, k);
                    let mut env = MecEnv::new(c.system.clone(), task.clone(), es)?;
                    let p = episode_gaps(&mut env, es, GapPolicy::Actor(&actor), cfg.oracle_grid)?;
                    let r = episode_gaps(&mut env, es, GapPolicy::Random(es ^ EVAL_STREAM), cfg.oracle_grid)?;
                    Ok((mean(&p), mean(&r)))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let p: Vec<f64> = per_episode.iter().map(|x| x.0).collect();
        let r: Vec<f64> = per_episode.iter().map(|x| x.1).collect();
        episode_diffs.extend(per_episode.iter().map(|x| x.1 - x.0));
        seeds.push(SeedGap {
            seed,
            policy_gap: mean(&p),
            random_gap: mean(&r),
        });
    }
    let p: Vec<f64> = seeds.iter().map(|s| s.policy_gap).collect();
    let r: Vec<f64> = seeds.iter().map(|s| s.random_gap).collect();
    // With a single seed the spread comes from its episodes instead.
    let d: Vec<f64> = if seeds.len() >= 2 {
        seeds.iter().map(|s| s.random_gap - s.policy_gap).collect()
    } else {
        episode_diffs
    };
    let (dm, dse) = (mean(&d), std_err(&d));
    let margin_in_se = if dse > 0.0 { dm / dse } else { 0.0 };
    let report = ValidationReport {
        agent,
        uav_cpu_cap: cap,
        policy_gap: Agg::of(&p),
        random_gap: Agg::of(&r),
        margin_in_se,
        passed: dm > 0.0 && margin_in_se >= 3.0,
        seeds,
    };
    create_out(&cfg.out)?;
    write_json(&cfg.out.join(format!("validate-{}.json", agent.name())), &report)?;
    let mut timing = JsonlWriter::open(&timing_path(&cfg.out), true)?;
    timing.write(&TimingRecord {
        command: "validate".into(),
        agent: Some(agent),
        seed: None,
        uav_cpu_cap: cap,
        seconds: started.elapsed().as_secs_f64(),
    })?;
    Ok(report)
}

/// Replays every trace under `out/traces`.
pub fn audit_outputs(out: &Path) -> Result<AuditReport> {
    let dir = out.join("traces");
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect(),
        Err(e) => return Err(HarnessError::io(dir, e)),
    };
    files.sort();
    let mut rep = AuditReport::default();
    for f in files {
        rep.merge(audit_trace(&f)?);
    }
    Ok(rep)
}
