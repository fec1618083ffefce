//! Deterministic actor-critic agents: DDPG, TD3 and the meta-learned MTD3,
//! their replay buffers, and the interaction loops that feed them.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compute::QueueTriple;
use crate::env::{random_raw_action, MecEnv, SlotAction, SlotOutcome};
use crate::error::check_len;
use crate::nn::{polyak_update, DenseNet, Gradients, Optimizer, OptimizerKind, OutputAct};
use crate::{Error, Result, Rng};

/// Which learner to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Ddpg,
    Td3,
    Mtd3,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Ddpg, AgentKind::Td3, AgentKind::Mtd3];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Ddpg => "ddpg",
            AgentKind::Td3 => "td3",
            AgentKind::Mtd3 => "mtd3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ddpg" => Some(AgentKind::Ddpg),
            "td3" => Some(AgentKind::Td3),
            "mtd3" => Some(AgentKind::Mtd3),
            _ => None,
        }
    }
}

/// Which adapted critics the meta target networks are blended with after a
/// meta-iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaTargetBlend {
    /// The most recently adapted task.
    #[default]
    LastTask,
    /// The average over the iteration's tasks.
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentHyperparams {
    pub discount: f64,
    pub polyak_rate: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub meta_lr: f64,
    pub batch: usize,
    pub policy_delay: usize,
    /// Exploration noise std, in units of the `[-1, 1]` action range.
    pub explore_sigma: f64,
    pub target_sigma: f64,
    pub target_clip: f64,
    pub inner_steps: usize,
    pub tasks_per_iter: usize,
    /// Number of persistent meta-training tasks, each with its own buffer.
    pub task_pool: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub meta_optimizer: OptimizerKind,
    pub meta_target_blend: MetaTargetBlend,
    /// Uniform-random steps taken on a fresh buffer before the policy acts.
    pub warmup_steps: usize,
    /// Random-policy slots used to fix the reward normalization scale.
    pub scale_probe_steps: usize,
    /// Symmetric clip applied to normalized rewards, if any.
    pub reward_clip: Option<f64>,
    pub final_layer_scale: f64,
}

impl Default for AgentHyperparams {
    fn default() -> Self {
        Self {
            discount: 0.99,
            polyak_rate: 0.005,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            meta_lr: 1e-4,
            batch: 256,
            policy_delay: 2,
            explore_sigma: 0.1,
            target_sigma: 0.2,
            target_clip: 0.5,
            inner_steps: 1000,
            tasks_per_iter: 4,
            task_pool: 8,
            buffer_capacity: 100_000,
            hidden: vec![256, 256],
            optimizer: OptimizerKind::default(),
            meta_optimizer: OptimizerKind::Sgd,
            meta_target_blend: MetaTargetBlend::LastTask,
            warmup_steps: 1000,
            scale_probe_steps: 1000,
            reward_clip: None,
            final_layer_scale: 1e-3,
        }
    }
}

fn invalid(field: &'static str, reason: &str) -> Error {
    Error::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

impl AgentHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(invalid("agent.discount", "must be in (0, 1)"));
        }
        if !(self.polyak_rate > 0.0 && self.polyak_rate <= 1.0) {
            return Err(invalid("agent.polyak_rate", "must be in (0, 1]"));
        }
        for (f, v) in [
            ("agent.actor_lr", self.actor_lr),
            ("agent.critic_lr", self.critic_lr),
            ("agent.meta_lr", self.meta_lr),
            ("agent.explore_sigma", self.explore_sigma),
            ("agent.target_sigma", self.target_sigma),
            ("agent.target_clip", self.target_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(f, "must be finite and >= 0"));
            }
        }
        if self.batch == 0 {
            return Err(invalid("agent.batch", "must be >= 1"));
        }
        if self.policy_delay == 0 {
            return Err(invalid("agent.policy_delay", "must be >= 1"));
        }
        if self.tasks_per_iter == 0 {
            return Err(invalid("agent.tasks_per_iter", "must be >= 1"));
        }
        if self.task_pool == 0 {
            return Err(invalid("agent.task_pool", "must be >= 1"));
        }
        if self.buffer_capacity == 0 {
            return Err(invalid("agent.buffer_capacity", "must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("agent.hidden", "widths must be >= 1"));
        }
        if let Some(c) = self.reward_clip {
            if !(c > 0.0) {
                return Err(invalid("agent.reward_clip", "must be > 0"));
            }
        }
        Ok(())
    }

    /// Number of critics used by `kind`.
    pub fn critics_for(kind: AgentKind) -> usize {
        match kind {
            AgentKind::Ddpg => 1,
            AgentKind::Td3 | AgentKind::Mtd3 => 2,
        }
    }
}

/// Sampled transitions, stored row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub reward: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl Batch {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn push(&mut self, obs: &[f64], act: &[f64], reward: f64, next_obs: &[f64], terminal: bool) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(act.len(), self.act_dim);
        debug_assert_eq!(next_obs.len(), self.obs_dim);
        self.obs.extend_from_slice(obs);
        self.act.extend_from_slice(act);
        self.reward.push(reward);
        self.next_obs.extend_from_slice(next_obs);
        self.terminal.push(terminal);
    }

    pub fn obs(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn act(&self, i: usize) -> &[f64] {
        &self.act[i * self.act_dim..(i + 1) * self.act_dim]
    }

    pub fn next_obs(&self, i: usize) -> &[f64] {
        &self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    cursor: usize,
    data: Batch,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            cursor: 0,
            data: Batch::new(obs_dim, act_dim),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(&mut self, obs: &[f64], act: &[f64], reward: f64, next_obs: &[f64], terminal: bool) {
        let d = &mut self.data;
        if d.len() < self.capacity {
            d.push(obs, act, reward, next_obs, terminal);
        } else {
            let (o, a, i) = (d.obs_dim, d.act_dim, self.cursor);
            d.obs[i * o..(i + 1) * o].copy_from_slice(obs);
            d.act[i * a..(i + 1) * a].copy_from_slice(act);
            d.reward[i] = reward;
            d.next_obs[i * o..(i + 1) * o].copy_from_slice(next_obs);
            d.terminal[i] = terminal;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Draws `m` transitions uniformly with replacement from the filled part.
    pub fn sample<R: rand::Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::Empty("replay buffer"));
        }
        let d = &self.data;
        let mut b = Batch::new(d.obs_dim, d.act_dim);
        for _ in 0..m {
            let i = rng.random_range(0..d.len());
            b.push(d.obs(i), d.act(i), d.reward[i], d.next_obs(i), d.terminal[i]);
        }
        Ok(b)
    }

    pub fn contents(&self) -> &Batch {
        &self.data
    }
}

/// Fixed divisor applied to rewards before learning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScale {
    pub scale: f64,
    pub clip: Option<f64>,
}

impl Default for RewardScale {
    fn default() -> Self {
        Self {
            scale: 1.0,
            clip: None,
        }
    }
}

impl RewardScale {
    /// Root-mean-square of `rewards`; falls back to 1 when it is not positive.
    pub fn from_rewards(rewards: &[f64], clip: Option<f64>) -> Self {
        let n = rewards.len().max(1) as f64;
        let rms = libm::sqrt(rewards.iter().map(|r| r * r).sum::<f64>() / n);
        Self {
            scale: if rms > 0.0 && rms.is_finite() { rms } else { 1.0 },
            clip,
        }
    }

    /// Runs a uniform-random policy on a copy of `env` for `steps` slots.
    pub fn estimate(env: &MecEnv, steps: usize, seed: u64, clip: Option<f64>) -> Self {
        let mut env = env.clone();
        env.reset(seed);
        let mut rng = Rng::seed_from_u64(seed.wrapping_add(1));
        let mut rewards = Vec::with_capacity(steps);
        for _ in 0..steps {
            if env.done() {
                env.restart_episode();
            }
            let raw = random_raw_action(&mut rng, env.action_dim());
            let (_, out) = env.step_raw(&raw).expect("dimension matches the environment");
            rewards.push(out.reward);
        }
        Self::from_rewards(&rewards, clip)
    }

    pub fn apply(&self, r: f64) -> f64 {
        let x = r / self.scale;
        match self.clip {
            Some(c) => x.clamp(-c, c),
            None => x,
        }
    }
}

/// Adds zero-mean Gaussian noise of std `sigma` and clips to `[-1, 1]`.
/// No random numbers are drawn when `sigma` is zero.
pub fn perturb<R: rand::Rng + ?Sized>(action: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        for a in action.iter_mut() {
            *a += n.sample(rng);
        }
    }
    action.iter_mut().for_each(|a| *a = a.clamp(-1.0, 1.0));
}

/// Actor, one or two critics, their target copies and optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Td3Learner {
    pub actor: DenseNet,
    pub critics: Vec<DenseNet>,
    pub actor_target: DenseNet,
    pub critic_targets: Vec<DenseNet>,
    pub actor_opt: Optimizer,
    pub critic_opts: Vec<Optimizer>,
    /// Critic updates performed so far; drives the policy delay.
    pub critic_steps: u64,
}

/// Losses reported by one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    /// Mean `Q1(s, π(s))` when the actor was updated.
    pub actor_objective: Option<f64>,
}

impl Td3Learner {
    pub fn new<R: rand::Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        n_critics: usize,
        hp: &AgentHyperparams,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=2).contains(&n_critics) {
            return Err(invalid("agent.critics", "one or two critics"));
        }
        let mut aw = vec![obs_dim];
        aw.extend(&hp.hidden);
        aw.push(act_dim);
        let mut cw = vec![obs_dim + act_dim];
        cw.extend(&hp.hidden);
        cw.push(1);
        let actor = DenseNet::new(&aw, OutputAct::Tanh, hp.final_layer_scale, rng)?;
        let critics = (0..n_critics)
            .map(|_| DenseNet::new(&cw, OutputAct::Identity, 1.0, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_nets(actor, critics, hp.optimizer))
    }

    /// Builds a learner whose targets equal the online networks.
    pub fn from_nets(actor: DenseNet, critics: Vec<DenseNet>, opt: OptimizerKind) -> Self {
        let critic_opts = critics
            .iter()
            .map(|c| Optimizer::new(opt, c.param_count()))
            .collect();
        Self {
            actor_opt: Optimizer::new(opt, actor.param_count()),
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor,
            critics,
            critic_opts,
            critic_steps: 0,
        }
    }

    /// Replaces the optimizer state with fresh moments.
    pub fn reset_optimizers(&mut self, opt: OptimizerKind) {
        self.actor_opt = Optimizer::new(opt, self.actor.param_count());
        self.critic_opts = self
            .critics
            .iter()
            .map(|c| Optimizer::new(opt, c.param_count()))
            .collect();
        self.critic_steps = 0;
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    /// Policy output plus exploration noise, clipped to `[-1, 1]`.
    pub fn act<R: rand::Rng + ?Sized>(&self, obs: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut a = self.actor.forward(obs)?;
        perturb(&mut a, sigma, rng);
        Ok(a)
    }

    fn critic_input(obs: &[f64], act: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(obs.len() + act.len());
        v.extend_from_slice(obs);
        v.extend_from_slice(act);
        v
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        check_len("batch observation", self.obs_dim(), batch.obs_dim)?;
        check_len("batch action", self.act_dim(), batch.act_dim)?;
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        Ok(())
    }

    /// Smoothed clipped double-Q targets `r + γ min_j Q'_j(s', π'(s') + ε)`.
    pub fn td3_targets<R: rand::Rng + ?Sized>(
        &self,
        batch: &Batch,
        hp: &AgentHyperparams,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let noise = if hp.target_sigma > 0.0 {
            Some(Normal::new(0.0, hp.target_sigma).expect("finite sigma"))
        } else {
            None
        };
        (0..batch.len())
            .map(|i| {
                let s2 = batch.next_obs(i);
                let mut a2 = self.actor_target.forward(s2)?;
                if let Some(n) = &noise {
                    for a in a2.iter_mut() {
                        let e: f64 = n.sample(rng);
                        *a += e.clamp(-hp.target_clip, hp.target_clip);
                    }
                }
                a2.iter_mut().for_each(|a| *a = a.clamp(-1.0, 1.0));
                let x = Self::critic_input(s2, &a2);
                let mut q = f64::INFINITY;
                for c in &self.critic_targets {
                    q = q.min(c.forward(&x)?[0]);
                }
                let cont = if batch.terminal[i] { 0.0 } else { 1.0 };
                Ok(batch.reward[i] + hp.discount * cont * q)
            })
            .collect()
    }

    /// Summed squared error of every critic against `targets`, with its
    /// gradient for each critic. The loss is `Σ_j Σ_i (y_i − Q_j)²`.
    pub fn critic_sq_error(&self, batch: &Batch, targets: &[f64]) -> Result<(f64, Vec<Gradients>)> {
        self.check_batch(batch)?;
        check_len("critic targets", batch.len(), targets.len())?;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(self.critics.len());
        for c in &self.critics {
            let mut g = Gradients::zeros_like(c);
            for (i, &y) in targets.iter().enumerate() {
                let x = Self::critic_input(batch.obs(i), batch.act(i));
                let tape = c.forward_tape(&x)?;
                let err = tape.output()[0] - y;
                total += err * err;
                c.backward_into(&tape, &[2.0 * err], Some(&mut g))?;
            }
            grads.push(g);
        }
        Ok((total, grads))
    }

    fn regress_critics(&mut self, batch: &Batch, targets: &[f64], lr: f64) -> Result<f64> {
        let m = batch.len() as f64;
        let (sq, mut grads) = self.critic_sq_error(batch, targets)?;
        for ((c, opt), g) in self.critics.iter_mut().zip(&mut self.critic_opts).zip(&mut grads) {
            g.scale(1.0 / m);
            opt.step(c.params_mut(), &g.0, lr);
        }
        Ok(sq / (m * self.critics.len() as f64))
    }

    /// Critic regression toward the shared min-target. Returns the mean
    /// squared error over the batch and the critics.
    pub fn td3_critic_update<R: rand::Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        hp: &AgentHyperparams,
        rng: &mut R,
    ) -> Result<f64> {
        self.check_batch(batch)?;
        let y = self.td3_targets(batch, hp, rng)?;
        let loss = self.regress_critics(batch, &y, hp.critic_lr)?;
        self.critic_steps += 1;
        Ok(loss)
    }

    /// Gradient of `−mean_i Q1(s_i, π(s_i))` with respect to the actor, and
    /// the mean Q value.
    pub fn actor_gradient(&self, batch: &Batch) -> Result<(f64, Gradients)> {
        self.check_batch(batch)?;
        let m = batch.len() as f64;
        let obs_dim = self.obs_dim();
        let critic = &self.critics[0];
        let mut g = Gradients::zeros_like(&self.actor);
        let mut q_sum = 0.0;
        for i in 0..batch.len() {
            let s = batch.obs(i);
            let a_tape = self.actor.forward_tape(s)?;
            let x = Self::critic_input(s, a_tape.output());
            let c_tape = critic.forward_tape(&x)?;
            q_sum += c_tape.output()[0];
            let dx = critic.backward_into(&c_tape, &[-1.0 / m], None)?;
            self.actor.backward_into(&a_tape, &dx[obs_dim..], Some(&mut g))?;
        }
        Ok((q_sum / m, g))
    }

    /// Ascends the mean of `Q1(s, π(s))`, then soft-updates all targets.
    pub fn td3_actor_update(&mut self, batch: &Batch, hp: &AgentHyperparams) -> Result<f64> {
        let (obj, g) = self.actor_gradient(batch)?;
        self.actor_opt.step(self.actor.params_mut(), &g.0, hp.actor_lr);
        self.soft_update_targets(hp.polyak_rate);
        Ok(obj)
    }

    pub fn soft_update_targets(&mut self, rate: f64) {
        polyak_update(self.actor_target.params_mut(), self.actor.params(), rate);
        for (t, c) in self.critic_targets.iter_mut().zip(&self.critics) {
            polyak_update(t.params_mut(), c.params(), rate);
        }
    }

    /// One TD3 step: a critic update, and every `policy_delay` critic updates
    /// an actor update with target soft-updates.
    pub fn td3_update<R: rand::Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        hp: &AgentHyperparams,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        let critic_loss = self.td3_critic_update(batch, hp, rng)?;
        let actor_objective = if self.critic_steps % hp.policy_delay as u64 == 0 {
            Some(self.td3_actor_update(batch, hp)?)
        } else {
            None
        };
        Ok(UpdateStats {
            critic_loss,
            actor_objective,
        })
    }

    /// One DDPG step on the first critic: regression toward
    /// `r + γ Q'(s', π'(s'))`, an actor step, then target soft-updates.
    pub fn ddpg_update(&mut self, batch: &Batch, hp: &AgentHyperparams) -> Result<UpdateStats> {
        self.check_batch(batch)?;
        let m = batch.len() as f64;
        let mut y = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let s2 = batch.next_obs(i);
            let a2 = self.actor_target.forward(s2)?;
            let q = self.critic_targets[0].forward(&Self::critic_input(s2, &a2))?[0];
            let cont = if batch.terminal[i] { 0.0 } else { 1.0 };
            y.push(batch.reward[i] + hp.discount * cont * q);
        }
        let critic = &self.critics[0];
        let mut g = Gradients::zeros_like(critic);
        let mut sq = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let tape = critic.forward_tape(&Self::critic_input(batch.obs(i), batch.act(i)))?;
            let err = tape.output()[0] - yi;
            sq += err * err;
            critic.backward_into(&tape, &[2.0 * err], Some(&mut g))?;
        }
        g.scale(1.0 / m);
        self.critic_opts[0].step(self.critics[0].params_mut(), &g.0, hp.critic_lr);
        self.critic_steps += 1;

        let (obj, ga) = self.actor_gradient(batch)?;
        self.actor_opt.step(self.actor.params_mut(), &ga.0, hp.actor_lr);
        polyak_update(self.actor_target.params_mut(), self.actor.params(), hp.polyak_rate);
        polyak_update(
            self.critic_targets[0].params_mut(),
            self.critics[0].params(),
            hp.polyak_rate,
        );
        Ok(UpdateStats {
            critic_loss: sq / m,
            actor_objective: Some(obj),
        })
    }

    /// The update rule of `kind`.
    pub fn update<R: rand::Rng + ?Sized>(
        &mut self,
        kind: AgentKind,
        batch: &Batch,
        hp: &AgentHyperparams,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        match kind {
            AgentKind::Ddpg => self.ddpg_update(batch, hp),
            AgentKind::Td3 | AgentKind::Mtd3 => self.td3_update(batch, hp, rng),
        }
    }
}

/// Per-task environment plus the generator for its exploration noise.
#[derive(Debug, Clone)]
pub struct TaskWorker {
    pub env: MecEnv,
    pub rng: Rng,
    obs: Vec<f64>,
    /// Steps taken in this worker since creation.
    pub steps: u64,
    pub audit_failures: u64,
}

/// One interaction step as seen by a learner.
#[derive(Debug, Clone)]
pub struct Interaction {
    pub obs: Vec<f64>,
    pub raw: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
    pub action: SlotAction,
    pub outcome: SlotOutcome,
}

impl TaskWorker {
    pub fn new(mut env: MecEnv, seed: u64) -> Self {
        env.reset(seed);
        let obs = env.observation();
        Self {
            env,
            rng: Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d),
            obs,
            steps: 0,
            audit_failures: 0,
        }
    }

    /// Takes one slot with a random action (`actor = None`) or the actor's
    /// action plus noise; restarts the episode after its last slot.
    pub fn step(&mut self, actor: Option<&DenseNet>, sigma: f64) -> Result<Interaction> {
        if self.env.done() {
            self.env.restart_episode();
            self.obs = self.env.observation();
        }
        let raw = match actor {
            None => random_raw_action(&mut self.rng, self.env.action_dim()),
            Some(net) => {
                let mut a = net.forward(&self.obs)?;
                perturb(&mut a, sigma, &mut self.rng);
                a
            }
        };
        let action = self.env.project(&raw)?;
        if self.env.audit(&action).is_err() {
            self.audit_failures += 1;
        }
        let outcome = self.env.step(&action)?;
        let next_obs = self.env.observation();
        let obs = core::mem::replace(&mut self.obs, next_obs.clone());
        self.steps += 1;
        Ok(Interaction {
            obs,
            raw,
            next_obs,
            terminal: self.env.done(),
            action,
            outcome,
        })
    }
}

/// Pushes an interaction into `buffer` with the normalized reward.
pub fn store(buffer: &mut ReplayBuffer, it: &Interaction, scale: &RewardScale) {
    buffer.push(
        &it.obs,
        &it.raw,
        scale.apply(it.outcome.reward),
        &it.next_obs,
        it.terminal,
    );
}

/// Result of adapting a copy of the meta learner to one task.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub learner: Td3Learner,
    /// `Σ_j Σ_i (y_i − Q_j(s_i, a_i))² / M` on a fresh batch.
    pub meta_loss: f64,
    pub critic_grads: Vec<Gradients>,
    pub actor_grad: Gradients,
}

/// Adapts a copy of `meta` to one task for `hp.inner_steps` interaction
/// and update steps, then evaluates the meta loss and first-order meta
/// gradients at the adapted parameters on a fresh batch.
///
/// The adapted learner works against the meta target networks, which it
/// soft-updates in place as it trains.
pub fn mtd3_inner_adapt(
    meta: &mut Td3Learner,
    worker: &mut TaskWorker,
    buffer: &mut ReplayBuffer,
    scale: &RewardScale,
    hp: &AgentHyperparams,
    rng: &mut Rng,
) -> Result<Adapted> {
    let mut learner = meta.clone();
    learner.reset_optimizers(hp.optimizer);
    for _ in 0..hp.inner_steps {
        let random = worker.steps < hp.warmup_steps as u64;
        let it = worker.step(
            if random { None } else { Some(&learner.actor) },
            hp.explore_sigma,
        )?;
        store(buffer, &it, scale);
        if !random && buffer.len() >= hp.batch {
            let batch = buffer.sample(hp.batch, rng)?;
            learner.td3_update(&batch, hp, rng)?;
        }
    }
    meta.actor_target = learner.actor_target.clone();
    meta.critic_targets = learner.critic_targets.clone();
    let batch = buffer.sample(hp.batch, rng)?;
    meta_loss_and_grads(learner, &batch, hp, rng)
}

/// Meta loss and first-order gradients of `learner` on `batch`.
pub fn meta_loss_and_grads(
    learner: Td3Learner,
    batch: &Batch,
    hp: &AgentHyperparams,
    rng: &mut Rng,
) -> Result<Adapted> {
    let m = batch.len() as f64;
    let y = learner.td3_targets(batch, hp, rng)?;
    let (sq, mut critic_grads) = learner.critic_sq_error(batch, &y)?;
    critic_grads.iter_mut().for_each(|g| g.scale(1.0 / m));
    let (_, actor_grad) = learner.actor_gradient(batch)?;
    Ok(Adapted {
        learner,
        meta_loss: sq / m,
        critic_grads,
        actor_grad,
    })
}

/// Meta optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub actor_opt: Optimizer,
    pub critic_opts: Vec<Optimizer>,
}

impl MetaState {
    pub fn new(learner: &Td3Learner, kind: OptimizerKind) -> Self {
        Self {
            actor_opt: Optimizer::new(kind, learner.actor.param_count()),
            critic_opts: learner
                .critics
                .iter()
                .map(|c| Optimizer::new(kind, c.param_count()))
                .collect(),
        }
    }
}

/// Applies summed first-order meta gradients to `meta` and blends its
/// targets with the adapted learners.
pub fn mtd3_meta_step(
    meta: &mut Td3Learner,
    state: &mut MetaState,
    adapted: &[Adapted],
    hp: &AgentHyperparams,
) -> Result<()> {
    let last = adapted.last().ok_or(Error::Empty("adapted tasks"))?;
    let mut ga = Gradients::zeros_like(&meta.actor);
    let mut gc: Vec<Gradients> = meta.critics.iter().map(Gradients::zeros_like).collect();
    for a in adapted {
        ga.add(&a.actor_grad);
        for (g, t) in gc.iter_mut().zip(&a.critic_grads) {
            g.add(t);
        }
    }
    state.actor_opt.step(meta.actor.params_mut(), &ga.0, hp.meta_lr);
    for ((c, opt), g) in meta.critics.iter_mut().zip(&mut state.critic_opts).zip(&gc) {
        opt.step(c.params_mut(), &g.0, hp.meta_lr);
    }

    let rate = hp.polyak_rate;
    match hp.meta_target_blend {
        MetaTargetBlend::LastTask => {
            polyak_update(meta.actor_target.params_mut(), last.learner.actor.params(), rate);
            for (t, c) in meta.critic_targets.iter_mut().zip(&last.learner.critics) {
                polyak_update(t.params_mut(), c.params(), rate);
            }
        }
        MetaTargetBlend::Average => {
            let n = adapted.len() as f64;
            let avg = |pick: &dyn Fn(&Adapted) -> &[f64], len: usize| {
                let mut v = vec![0.0; len];
                for a in adapted {
                    v.iter_mut().zip(pick(a)).for_each(|(x, p)| *x += p / n);
                }
                v
            };
            let actor_avg = avg(&|a| a.learner.actor.params(), meta.actor.param_count());
            polyak_update(meta.actor_target.params_mut(), &actor_avg, rate);
            for j in 0..meta.critics.len() {
                let c_avg = avg(&|a| a.learner.critics[j].params(), meta.critics[j].param_count());
                polyak_update(meta.critic_targets[j].params_mut(), &c_avg, rate);
            }
        }
    }
    Ok(())
}

/// Aggregates of one evaluation episode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub slots: usize,
    pub total_reward: f64,
    pub mean_reward: f64,
    /// End-of-episode computed-task efficiency, bits per second.
    pub efficiency: f64,
    /// Time-averaged backlog per tier, averaged over devices, in bits.
    pub avg_queue: QueueTriple,
    pub audit_ok: bool,
}

/// Runs one full episode from a fresh reset, calling `policy` on each
/// observation and `on_step` on each slot.
pub fn run_episode<P, F>(env: &mut MecEnv, seed: u64, mut policy: P, mut on_step: F) -> Result<EpisodeSummary>
where
    P: FnMut(&[f64]) -> Result<Vec<f64>>,
    F: FnMut(&[f64], &SlotAction, &SlotOutcome),
{
    env.reset(seed);
    let k = env.config().num_devices as f64;
    let mut s = EpisodeSummary {
        audit_ok: true,
        ..EpisodeSummary::default()
    };
    let mut q = QueueTriple::ZERO;
    while !env.done() {
        let raw = policy(&env.observation())?;
        let action = env.project(&raw)?;
        s.audit_ok &= env.audit(&action).is_ok();
        let out = env.step(&action)?;
        s.total_reward += out.reward;
        for d in &out.queues {
            q.local += d.local;
            q.uav += d.uav;
            q.cloud += d.cloud;
        }
        s.slots += 1;
        on_step(&raw, &action, &out);
    }
    let denom = s.slots.max(1) as f64;
    s.mean_reward = s.total_reward / denom;
    s.efficiency = env.state().system.ratio();
    s.avg_queue = QueueTriple::new(q.local / (denom * k), q.uav / (denom * k), q.cloud / (denom * k));
    Ok(s)
}

/// Deterministic-policy episode.
pub fn evaluate_actor(actor: &DenseNet, env: &mut MecEnv, seed: u64) -> Result<EpisodeSummary> {
    run_episode(env, seed, |o| actor.forward(o), |_, _, _| {})
}

/// Uniform-random-policy episode.
pub fn evaluate_random(env: &mut MecEnv, seed: u64) -> Result<EpisodeSummary> {
    let mut rng = Rng::seed_from_u64(seed ^ 0x2545_f491_4f6c_dd1d);
    let dim = env.action_dim();
    run_episode(env, seed, |_| Ok(random_raw_action(&mut rng, dim)), |_, _, _| {})
}

/// A training run of one agent kind over a set of task environments.
///
/// DDPG and TD3 keep one buffer and cycle through the tasks episode by
/// episode. MTD3 keeps one buffer per task and alternates inner adaptation
/// on `tasks_per_iter` sampled tasks with a meta step.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub kind: AgentKind,
    pub hp: AgentHyperparams,
    pub learner: Td3Learner,
    pub scale: RewardScale,
    pub workers: Vec<TaskWorker>,
    pub buffers: Vec<ReplayBuffer>,
    pub meta: Option<MetaState>,
    pub rng: Rng,
    /// Environment slots consumed so far.
    pub env_steps: u64,
    pub updates: u64,
    pub meta_iters: u64,
    pub last_meta_loss: f64,
    current: usize,
}

impl Trainer {
    /// `envs` are the training tasks; the reward scale is fixed from random
    /// play on the first one.
    pub fn new(kind: AgentKind, hp: AgentHyperparams, envs: Vec<MecEnv>, seed: u64) -> Result<Self> {
        hp.validate()?;
        let first = envs.first().ok_or(Error::Empty("training environments"))?;
        let (obs_dim, act_dim) = (first.obs_dim(), first.action_dim());
        for e in &envs {
            check_len("task observation", obs_dim, e.obs_dim())?;
            check_len("task action", act_dim, e.action_dim())?;
        }
        let mut rng = Rng::seed_from_u64(seed);
        let learner = Td3Learner::new(
            obs_dim,
            act_dim,
            AgentHyperparams::critics_for(kind),
            &hp,
            &mut rng,
        )?;
        let scale = RewardScale::estimate(first, hp.scale_probe_steps, seed ^ 0xa076_1d64_78bd_642f, hp.reward_clip);
        let n_buffers = if kind == AgentKind::Mtd3 { envs.len() } else { 1 };
        let buffers = (0..n_buffers)
            .map(|_| ReplayBuffer::new(hp.buffer_capacity, obs_dim, act_dim))
            .collect();
        let workers = envs
            .into_iter()
            .enumerate()
            .map(|(i, e)| TaskWorker::new(e, seed.wrapping_add(1 + i as u64)))
            .collect();
        let meta = (kind == AgentKind::Mtd3).then(|| MetaState::new(&learner, hp.meta_optimizer));
        Ok(Self {
            kind,
            hp,
            learner,
            scale,
            workers,
            buffers,
            meta,
            rng,
            env_steps: 0,
            updates: 0,
            meta_iters: 0,
            last_meta_loss: 0.0,
            current: 0,
        })
    }

    /// Environment slots one meta-iteration consumes.
    pub fn meta_iter_steps(&self) -> u64 {
        (self.hp.inner_steps * self.hp.tasks_per_iter.min(self.workers.len())) as u64
    }

    /// Trains for about `steps` environment slots. MTD3 runs whole
    /// meta-iterations while their cost fits in the remaining budget.
    pub fn train_steps(&mut self, steps: u64) -> Result<()> {
        match self.kind {
            AgentKind::Ddpg | AgentKind::Td3 => {
                for _ in 0..steps {
                    self.single_step()?;
                }
            }
            AgentKind::Mtd3 => {
                let per = self.meta_iter_steps();
                if per == 0 {
                    return Err(invalid("agent.inner_steps", "must be >= 1 for mtd3"));
                }
                let mut left = steps;
                while left >= per {
                    self.meta_iteration()?;
                    left -= per;
                }
            }
        }
        Ok(())
    }

    fn single_step(&mut self) -> Result<()> {
        let random = self.env_steps < self.hp.warmup_steps as u64;
        let w = &mut self.workers[self.current];
        let it = w.step(
            if random { None } else { Some(&self.learner.actor) },
            self.hp.explore_sigma,
        )?;
        store(&mut self.buffers[0], &it, &self.scale);
        self.env_steps += 1;
        if it.terminal {
            self.current = (self.current + 1) % self.workers.len();
        }
        if !random && self.buffers[0].len() >= self.hp.batch {
            let batch = self.buffers[0].sample(self.hp.batch, &mut self.rng)?;
            self.learner
                .update(self.kind, &batch, &self.hp, &mut self.rng)?;
            self.updates += 1;
        }
        Ok(())
    }

    /// Sampled task indices for the next meta-iteration, without replacement.
    fn sample_tasks(&mut self) -> Vec<usize> {
        let n = self.workers.len();
        let want = self.hp.tasks_per_iter.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..want {
            let j = self.rng.random_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(want);
        idx
    }

    fn meta_iteration(&mut self) -> Result<()> {
        let tasks = self.sample_tasks();
        let mut adapted = Vec::with_capacity(tasks.len());
        for t in tasks {
            let a = mtd3_inner_adapt(
                &mut self.learner,
                &mut self.workers[t],
                &mut self.buffers[t],
                &self.scale,
                &self.hp,
                &mut self.rng,
            )?;
            self.env_steps += self.hp.inner_steps as u64;
            adapted.push(a);
        }
        self.last_meta_loss = adapted.iter().map(|a| a.meta_loss).sum();
        let meta = self.meta.as_mut().expect("mtd3 trainer has meta state");
        mtd3_meta_step(&mut self.learner, meta, &adapted, &self.hp)?;
        self.meta_iters += 1;
        Ok(())
    }

    pub fn audit_failures(&self) -> u64 {
        self.workers.iter().map(|w| w.audit_failures).sum()
    }

    /// The policy to deploy on `env`. DDPG and TD3 return their actor;
    /// MTD3 first adapts a copy for `inner_steps` slots on `env`.
    pub fn deployable_actor(&self, env: &MecEnv, seed: u64) -> Result<DenseNet> {
        match self.kind {
            AgentKind::Ddpg | AgentKind::Td3 => Ok(self.learner.actor.clone()),
            AgentKind::Mtd3 => Ok(adapt_to(&self.learner, &self.scale, &self.hp, env, seed)?.actor),
        }
    }
}

/// Fine-tunes a copy of `learner` on a new task for `hp.inner_steps` slots,
/// acting with the policy (plus exploration noise) from the first slot.
pub fn adapt_to(
    learner: &Td3Learner,
    scale: &RewardScale,
    hp: &AgentHyperparams,
    env: &MecEnv,
    seed: u64,
) -> Result<Td3Learner> {
    let mut l = learner.clone();
    l.reset_optimizers(hp.optimizer);
    let mut worker = TaskWorker::new(env.clone(), seed);
    let mut buffer = ReplayBuffer::new(hp.buffer_capacity.min(hp.inner_steps.max(1)), env.obs_dim(), env.action_dim());
    let mut rng = Rng::seed_from_u64(seed ^ 0x1405_7b7e_f767_814f);
    for _ in 0..hp.inner_steps {
        let it = worker.step(Some(&l.actor), hp.explore_sigma)?;
        store(&mut buffer, &it, scale);
        if buffer.len() >= hp.batch {
            let batch = buffer.sample(hp.batch, &mut rng)?;
            l.td3_update(&batch, hp, &mut rng)?;
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{SystemConfig, TaskSpec};

    fn tiny_hp() -> AgentHyperparams {
        AgentHyperparams {
            batch: 8,
            hidden: vec![8, 8],
            warmup_steps: 16,
            scale_probe_steps: 32,
            buffer_capacity: 256,
            inner_steps: 12,
            tasks_per_iter: 2,
            task_pool: 3,
            ..AgentHyperparams::default()
        }
    }

    fn tiny_env(seed: u64) -> MecEnv {
        let cfg = SystemConfig {
            num_devices: 1,
            num_slots: 10,
            ..SystemConfig::default()
        };
        let task = TaskSpec::from_config(&cfg, seed);
        MecEnv::new(cfg, task, seed).unwrap()
    }

    #[test]
    fn ring_buffer_wraps() {
        let mut b = ReplayBuffer::new(3, 1, 1);
        for i in 0..5 {
            b.push(&[i as f64], &[0.0], i as f64, &[0.0], false);
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.cursor(), 2);
        assert_eq!(b.contents().reward, [3.0, 4.0, 2.0]);
        let mut rng = Rng::seed_from_u64(0);
        let s = b.sample(50, &mut rng).unwrap();
        assert!(s.reward.iter().all(|r| [2.0, 3.0, 4.0].contains(r)));
        assert!(ReplayBuffer::new(3, 1, 1).sample(1, &mut rng).is_err());
    }

    #[test]
    fn deterministic_act_without_noise() {
        let mut rng = Rng::seed_from_u64(3);
        let l = Td3Learner::new(4, 3, 2, &tiny_hp(), &mut rng).unwrap();
        let o = [0.1, 0.2, 0.3, 0.4];
        let a = l.act(&o, 0.0, &mut rng).unwrap();
        assert_eq!(a, l.act(&o, 0.0, &mut rng).unwrap());
        assert!(a.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn policy_delay_holds_actor() {
        let hp = tiny_hp();
        let mut rng = Rng::seed_from_u64(5);
        let mut l = Td3Learner::new(2, 1, 2, &hp, &mut rng).unwrap();
        let mut b = Batch::new(2, 1);
        for i in 0..8 {
            let x = i as f64 / 8.0;
            b.push(&[x, 1.0 - x], &[x - 0.5], x, &[x, x], i % 3 == 0);
        }
        let before = l.actor.clone();
        let s = l.td3_update(&b, &hp, &mut rng).unwrap();
        assert!(s.actor_objective.is_none());
        assert_eq!(l.actor, before);
        let s = l.td3_update(&b, &hp, &mut rng).unwrap();
        assert!(s.actor_objective.is_some());
        assert_ne!(l.actor, before);
    }

    #[test]
    fn trainers_run_and_count_steps() {
        for kind in AgentKind::ALL {
            let envs = (0..3).map(tiny_env).collect();
            let mut t = Trainer::new(kind, tiny_hp(), envs, 1).unwrap();
            t.train_steps(48).unwrap();
            assert_eq!(t.env_steps, 48);
            assert_eq!(t.audit_failures(), 0);
            assert!(t.learner.actor.is_finite());
            let env = tiny_env(9);
            let actor = t.deployable_actor(&env, 4).unwrap();
            let s = evaluate_actor(&actor, &mut env.clone(), 2).unwrap();
            assert_eq!(s.slots, 10);
            assert!(s.audit_ok);
        }
    }
}
