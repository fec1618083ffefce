use rand::{Rng, SeedableRng};
use uavmec_core::agents::{
    meta_loss_and_grads, mtd3_inner_adapt, mtd3_meta_step, perturb, AgentHyperparams, AgentKind,
    Batch, MetaState, ReplayBuffer, RewardScale, TaskWorker, Td3Learner, Trainer,
};
use uavmec_core::env::{MecEnv, SystemConfig, TaskSpec};
use uavmec_core::nn::{DenseNet, OptimizerKind, OutputAct};

type R = rand_chacha::ChaCha8Rng;

fn hp() -> AgentHyperparams {
    AgentHyperparams {
        batch: 16,
        hidden: vec![16, 16],
        warmup_steps: 32,
        scale_probe_steps: 64,
        buffer_capacity: 1000,
        inner_steps: 20,
        tasks_per_iter: 2,
        task_pool: 3,
        ..AgentHyperparams::default()
    }
}

fn toy_env(seed: u64) -> MecEnv {
    let cfg = SystemConfig {
        num_devices: 1,
        num_slots: 20,
        ..SystemConfig::default()
    };
    MecEnv::new(cfg.clone(), TaskSpec::from_config(&cfg, seed), seed).unwrap()
}

fn random_batch(r: &mut R, m: usize, obs: usize, act: usize) -> Batch {
    let mut b = Batch::new(obs, act);
    for i in 0..m {
        let o: Vec<f64> = (0..obs).map(|_| r.random()).collect();
        let a: Vec<f64> = (0..act).map(|_| r.random_range(-1.0..1.0)).collect();
        let o2: Vec<f64> = (0..obs).map(|_| r.random()).collect();
        b.push(&o, &a, r.random_range(-1.0..1.0), &o2, i % 5 == 4);
    }
    b
}

#[test]
fn exploration_noise_has_requested_spread() {
    let mut r = R::seed_from_u64(1);
    let n = 10_000;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let mut a = [0.0];
        perturb(&mut a, 0.1, &mut r);
        sum += a[0];
        sq += a[0] * a[0];
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).sqrt();
    assert!((std - 0.1).abs() < 0.005, "std {std}");
}

#[test]
fn replay_is_deterministic() {
    let fill = |seed| {
        let mut r = R::seed_from_u64(seed);
        let mut b = ReplayBuffer::new(50, 2, 1);
        for _ in 0..80 {
            b.push(&[r.random(), r.random()], &[r.random()], r.random(), &[0.0, 1.0], false);
        }
        let s = b.sample(10, &mut r).unwrap();
        (b, s)
    };
    assert_eq!(fill(3), fill(3));
}

/// Two critics regressed with zero discount fit the rewards.
#[test]
fn zero_discount_fits_rewards() {
    let mut r = R::seed_from_u64(2);
    let h = AgentHyperparams {
        discount: 1e-12,
        critic_lr: 1e-2,
        ..hp()
    };
    let mut l = Td3Learner::new(2, 1, 2, &h, &mut r).unwrap();
    let b = random_batch(&mut r, 8, 2, 1);
    let first = l.td3_critic_update(&b, &h, &mut r).unwrap();
    let mut last = first;
    for _ in 0..2000 {
        last = l.td3_critic_update(&b, &h, &mut r).unwrap();
    }
    assert!(last < 1e-2 * first.max(1e-3), "{first} -> {last}");
}

/// Loss on a hand-built two-transition batch against a scripted evaluation.
#[test]
fn critic_loss_matches_script() {
    let mut r = R::seed_from_u64(3);
    let h = AgentHyperparams {
        target_sigma: 0.0,
        discount: 0.9,
        critic_lr: 0.0,
        ..hp()
    };
    let l = Td3Learner::new(2, 1, 2, &h, &mut r).unwrap();
    let mut b = Batch::new(2, 1);
    b.push(&[0.1, 0.2], &[0.3], 1.5, &[0.4, 0.5], false);
    b.push(&[0.6, 0.7], &[-0.8], -0.5, &[0.9, 1.0], true);
    let q = |n: &DenseNet, s: &[f64], a: &[f64]| n.forward(&[s[0], s[1], a[0]]).unwrap()[0];
    let mut want = 0.0;
    for i in 0..2 {
        let s2 = b.next_obs(i);
        let a2 = l.actor_target.forward(s2).unwrap();
        let qmin = q(&l.critic_targets[0], s2, &a2).min(q(&l.critic_targets[1], s2, &a2));
        let y = b.reward[i] + if b.terminal[i] { 0.0 } else { 0.9 * qmin };
        for c in &l.critics {
            want += (q(c, b.obs(i), b.act(i)) - y).powi(2);
        }
    }
    want /= 4.0;
    let mut l2 = l.clone();
    let got = l2.td3_critic_update(&b, &h, &mut r).unwrap();
    assert!((got - want).abs() <= 1e-12 * want.max(1e-12));

    // the DDPG loss uses one critic and its own target
    let mut single = Td3Learner::from_nets(l.actor.clone(), vec![l.critics[0].clone()], h.optimizer);
    let mut want1 = 0.0;
    for i in 0..2 {
        let s2 = b.next_obs(i);
        let a2 = l.actor.forward(s2).unwrap();
        let y = b.reward[i] + if b.terminal[i] { 0.0 } else { 0.9 * q(&l.critics[0], s2, &a2) };
        want1 += (q(&l.critics[0], b.obs(i), b.act(i)) - y).powi(2);
    }
    want1 /= 2.0;
    let got1 = single.ddpg_update(&b, &AgentHyperparams { actor_lr: 0.0, ..h.clone() }).unwrap();
    assert!((got1.critic_loss - want1).abs() <= 1e-12 * want1.max(1e-12));
}

#[test]
fn identical_twins_make_min_either_critic() {
    let mut r = R::seed_from_u64(4);
    let h = AgentHyperparams { target_sigma: 0.0, ..hp() };
    let l1 = Td3Learner::new(3, 2, 1, &h, &mut r).unwrap();
    let twin = Td3Learner::from_nets(
        l1.actor.clone(),
        vec![l1.critics[0].clone(), l1.critics[0].clone()],
        h.optimizer,
    );
    let b = random_batch(&mut r, 10, 3, 2);
    let y1 = l1.td3_targets(&b, &h, &mut r).unwrap();
    let y2 = twin.td3_targets(&b, &h, &mut r).unwrap();
    assert_eq!(y1, y2);
}

#[test]
fn constant_critic_gives_zero_actor_gradient() {
    let mut r = R::seed_from_u64(5);
    let h = hp();
    let mut l = Td3Learner::new(3, 2, 2, &h, &mut r).unwrap();
    let n = l.critics[0].param_count();
    let mut p = vec![0.0; n];
    p[n - 1] = 4.2; // output bias only
    l.critics[0] = DenseNet::from_params(l.critics[0].widths(), OutputAct::Identity, p).unwrap();
    let b = random_batch(&mut r, 8, 3, 2);
    let (q, g) = l.actor_gradient(&b).unwrap();
    assert_eq!(q, 4.2);
    assert!(g.0.iter().all(|&x| x == 0.0));
}

/// Fitting a critic to `−‖a‖²` and then running actor updates shrinks the
/// policy output.
#[test]
fn actor_update_follows_fitted_critic() {
    let mut r = R::seed_from_u64(7);
    let (obs, act) = (2, 2);
    let h = AgentHyperparams {
        hidden: vec![32, 32],
        actor_lr: 3e-3,
        critic_lr: 3e-3,
        final_layer_scale: 1.0,
        polyak_rate: 1.0,
        ..hp()
    };
    let mut l = Td3Learner::new(obs, act, 1, &h, &mut r).unwrap();
    // shift the policy away from the optimum
    let n = l.actor.param_count();
    l.actor.params_mut()[n - act..].iter_mut().for_each(|b| *b += 0.8);
    let mut b = Batch::new(obs, act);
    for _ in 0..256 {
        let s: Vec<f64> = (0..obs).map(|_| r.random()).collect();
        let a: Vec<f64> = (0..act).map(|_| r.random_range(-1.0..1.0)).collect();
        let rew = -a.iter().map(|x| x * x).sum::<f64>();
        b.push(&s, &a, rew, &s, true);
    }
    for _ in 0..1500 {
        let y: Vec<f64> = b.reward.clone();
        let (_, grads) = l.critic_sq_error(&b, &y).unwrap();
        let mut g = grads[0].clone();
        g.scale(1.0 / b.len() as f64);
        l.critic_opts[0].step(l.critics[0].params_mut(), &g.0, h.critic_lr);
    }
    let norm = |l: &Td3Learner| -> f64 {
        (0..b.len())
            .map(|i| l.actor.forward(b.obs(i)).unwrap().iter().map(|a| a * a).sum::<f64>())
            .sum::<f64>()
            / b.len() as f64
    };
    let start = norm(&l);
    for _ in 0..500 {
        l.td3_actor_update(&b, &h).unwrap();
    }
    let end = norm(&l);
    assert!(end < 0.5 * start, "{start} -> {end}");
}

#[test]
fn td3_reduces_to_ddpg() {
    let h = AgentHyperparams {
        policy_delay: 1,
        target_sigma: 0.0,
        ..hp()
    };
    let mut r = R::seed_from_u64(8);
    let base = Td3Learner::new(4, 3, 1, &h, &mut r).unwrap();
    let mut a = base.clone();
    let mut b = base.clone();
    let mut ra = R::seed_from_u64(9);
    let rb = R::seed_from_u64(9);
    for _ in 0..200 {
        let batch = random_batch(&mut r, 16, 4, 3);
        a.td3_update(&batch, &h, &mut ra).unwrap();
        b.ddpg_update(&batch, &h).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(ra, rb);
}

#[test]
fn soft_update_contracts_toward_online() {
    let mut r = R::seed_from_u64(10);
    let h = AgentHyperparams { policy_delay: 1, polyak_rate: 0.05, ..hp() };
    let mut l = Td3Learner::new(3, 2, 2, &h, &mut r).unwrap();
    for c in &mut l.critics {
        c.params_mut().iter_mut().for_each(|p| *p += 0.3);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let before = dist(l.critic_targets[0].params(), l.critics[0].params());
    l.soft_update_targets(h.polyak_rate);
    let after = dist(l.critic_targets[0].params(), l.critics[0].params());
    assert!(after <= (1.0 - h.polyak_rate) * before * (1.0 + 1e-12));
}

#[test]
fn targets_bounded_by_clipped_rewards() {
    let mut r = R::seed_from_u64(11);
    let h = AgentHyperparams { discount: 0.9, critic_lr: 1e-3, ..hp() };
    let mut l = Td3Learner::new(3, 2, 2, &h, &mut r).unwrap();
    let scale = RewardScale { scale: 1.0, clip: Some(1.0) };
    let r_max = 1.0;
    let mut batch = Batch::new(3, 2);
    for i in 0..64 {
        let s: Vec<f64> = (0..3).map(|_| r.random()).collect();
        let a: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
        let raw = r.random_range(-50.0..50.0);
        batch.push(&s, &a, scale.apply(raw), &s, i % 10 == 0);
    }
    for _ in 0..2000 {
        let y = l.td3_targets(&batch, &h, &mut r).unwrap();
        assert!(y.iter().all(|v| v.abs() <= r_max / (1.0 - h.discount)));
        l.td3_update(&batch, &h, &mut r).unwrap();
    }
}

fn workers(h: &AgentHyperparams) -> (Vec<TaskWorker>, Vec<ReplayBuffer>) {
    let w: Vec<TaskWorker> = (0..2).map(|i| TaskWorker::new(toy_env(i), 100 + i)).collect();
    let b = w
        .iter()
        .map(|w| ReplayBuffer::new(h.buffer_capacity, w.env.obs_dim(), w.env.action_dim()))
        .collect();
    (w, b)
}

fn prefill(w: &mut TaskWorker, b: &mut ReplayBuffer, n: usize) {
    for _ in 0..n {
        let it = w.step(None, 0.0).unwrap();
        uavmec_core::agents::store(b, &it, &RewardScale::default());
    }
}

#[test]
fn zero_inner_steps_keep_meta_copy() {
    let h = AgentHyperparams { inner_steps: 0, ..hp() };
    let (mut ws, mut bs) = workers(&h);
    prefill(&mut ws[0], &mut bs[0], 40);
    let mut r = R::seed_from_u64(12);
    let meta = Td3Learner::new(4, 11, 2, &h, &mut r).unwrap();
    let mut r1 = r.clone();
    let a = mtd3_inner_adapt(&mut meta.clone(), &mut ws[0], &mut bs[0], &RewardScale::default(), &h, &mut r1).unwrap();
    assert_eq!(a.learner.actor, meta.actor);
    assert_eq!(a.learner.critics, meta.critics);
    // meta loss = summed critic MSE of the unadapted nets on the same batch
    let mut r2 = r.clone();
    let batch = bs[0].sample(h.batch, &mut r2).unwrap();
    let y = meta.td3_targets(&batch, &h, &mut r2).unwrap();
    let mut want = 0.0;
    for c in &meta.critics {
        for i in 0..batch.len() {
            let mut x = batch.obs(i).to_vec();
            x.extend_from_slice(batch.act(i));
            want += (y[i] - c.forward(&x).unwrap()[0]).powi(2);
        }
    }
    want /= h.batch as f64;
    assert!((a.meta_loss - want).abs() <= 1e-12 * want);
}

#[test]
fn inner_adaptation_is_deterministic() {
    let h = hp();
    let run = || {
        let (mut ws, mut bs) = workers(&h);
        let mut r = R::seed_from_u64(13);
        let mut meta = Td3Learner::new(4, 11, 2, &h, &mut r).unwrap();
        mtd3_inner_adapt(&mut meta, &mut ws[0], &mut bs[0], &RewardScale::default(), &h, &mut r)
            .unwrap()
            .meta_loss
    };
    assert_eq!(run(), run());
}

fn adapted_pair(h: &AgentHyperparams) -> (Td3Learner, uavmec_core::agents::Adapted) {
    let (mut ws, mut bs) = workers(h);
    prefill(&mut ws[0], &mut bs[0], 40);
    let mut r = R::seed_from_u64(14);
    let meta = Td3Learner::new(4, 11, 2, h, &mut r).unwrap();
    let batch = bs[0].sample(h.batch, &mut r).unwrap();
    let a = meta_loss_and_grads(meta.clone(), &batch, h, &mut r).unwrap();
    (meta, a)
}

#[test]
fn zero_meta_rate_keeps_meta_parameters() {
    let h = AgentHyperparams { meta_lr: 0.0, ..hp() };
    let (meta, a) = adapted_pair(&h);
    let mut m = meta.clone();
    let mut st = MetaState::new(&m, OptimizerKind::Sgd);
    mtd3_meta_step(&mut m, &mut st, &[a], &h).unwrap();
    assert_eq!(m.actor, meta.actor);
    assert_eq!(m.critics, meta.critics);
}

#[test]
fn single_task_meta_step_applies_its_gradient() {
    let h = AgentHyperparams { meta_lr: 1e-3, ..hp() };
    let (meta, a) = adapted_pair(&h);
    let mut m = meta.clone();
    let mut st = MetaState::new(&m, OptimizerKind::Sgd);
    mtd3_meta_step(&mut m, &mut st, &[a.clone()], &h).unwrap();
    for (j, c) in m.critics.iter().enumerate() {
        for ((new, old), g) in c.params().iter().zip(meta.critics[j].params()).zip(&a.critic_grads[j].0) {
            assert_eq!(*new, old - 1e-3 * g);
        }
    }
    for ((new, old), g) in m.actor.params().iter().zip(meta.actor.params()).zip(&a.actor_grad.0) {
        assert_eq!(*new, old - 1e-3 * g);
    }
}

#[test]
fn identical_tasks_double_the_meta_gradient() {
    let h = AgentHyperparams { meta_lr: 1e-3, ..hp() };
    let (meta, a) = adapted_pair(&h);
    let mut one = meta.clone();
    let mut st = MetaState::new(&one, OptimizerKind::Sgd);
    mtd3_meta_step(&mut one, &mut st, &[a.clone()], &h).unwrap();
    let mut two = meta.clone();
    let mut st = MetaState::new(&two, OptimizerKind::Sgd);
    mtd3_meta_step(&mut two, &mut st, &[a.clone(), a], &h).unwrap();
    for (p2, (p1, p0)) in two.critics[0]
        .params()
        .iter()
        .zip(one.critics[0].params().iter().zip(meta.critics[0].params()))
    {
        let d1 = p1 - p0;
        let d2 = p2 - p0;
        // differences of parameters carry rounding of the parameter itself
        assert!((d2 - 2.0 * d1).abs() <= 4.0 * f64::EPSILON * p0.abs().max(p2.abs()) + 1e-12 * d1.abs());
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    for kind in AgentKind::ALL {
        let run = || {
            let envs = (0..3).map(toy_env).collect();
            let mut t = Trainer::new(kind, hp(), envs, 21).unwrap();
            t.train_steps(120).unwrap();
            t.learner
        };
        assert_eq!(run(), run());
    }
}
