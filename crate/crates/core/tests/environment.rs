use proptest::prelude::*;
use rand::SeedableRng;
use uavmec_core::env::{
    audit_action, project_action, random_raw_action, MecEnv, SystemConfig, TaskRanges, TaskSpec,
};
use uavmec_core::Rng;

fn cfg(k: usize, n: usize) -> SystemConfig {
    SystemConfig {
        num_devices: k,
        num_slots: n,
        ..SystemConfig::default()
    }
}

#[test]
fn default_start_is_area_center() {
    let c = SystemConfig::default();
    let e = MecEnv::new(c.clone(), TaskSpec::from_config(&c, 0), 0).unwrap();
    assert_eq!(e.state().uav_xy, [500.0, 500.0]);
    assert_eq!(c.area, [1000.0, 1000.0]);
}

#[test]
fn long_fuzz_keeps_every_invariant() {
    let c = cfg(3, 100);
    let mut e = MecEnv::new(c.clone(), TaskSpec::from_config(&c, 4), 4).unwrap();
    let mut rng = Rng::seed_from_u64(4);
    let step = c.max_step();
    for _ in 0..10_000 {
        if e.done() {
            assert_eq!(e.state().uav_xy, c.uav_end);
            e.restart_episode();
        }
        let before = e.state().clone();
        let raw = random_raw_action(&mut rng, e.action_dim());
        let a = e.project(&raw).unwrap();
        e.audit(&a).unwrap();
        let out = e.step(&a).unwrap();
        assert!(a.uav_move[0].hypot(a.uav_move[1]) <= step * (1.0 + 1e-9));
        for ((q0, q1), d) in before.queues.iter().zip(&out.queues).zip(&out.devices) {
            assert!(q1.local >= 0.0 && q1.uav >= 0.0 && q1.cloud >= 0.0);
            // bits are only removed by computing and only added by arrivals
            let lhs = q1.total();
            let rhs = q0.total() - d.bits + d.arrival;
            assert!((lhs - rhs).abs() <= 1e-9 * (q0.total() + d.arrival).max(1.0));
        }
        let obs = e.observation();
        assert!(obs.iter().all(|v| v.is_finite() && *v >= 0.0));
        let rsum: f64 = out.devices.iter().map(|d| d.reward).sum();
        assert_eq!(rsum, out.reward);
    }
}

#[test]
fn replay_reproduces_outcomes_bit_for_bit() {
    let c = cfg(2, 40);
    let mut a = MecEnv::new(c.clone(), TaskSpec::from_config(&c, 1), 77).unwrap();
    let mut rng = Rng::seed_from_u64(5);
    let mut log = Vec::new();
    while !a.done() {
        let raw = random_raw_action(&mut rng, a.action_dim());
        log.push((raw.clone(), a.step_raw(&raw).unwrap().1));
    }
    let mut b = MecEnv::new(c.clone(), TaskSpec::from_config(&c, 1), 0).unwrap();
    b.reset(77);
    for (raw, out) in log {
        assert_eq!(b.step_raw(&raw).unwrap().1, out);
    }
}

#[test]
fn strict_mode_idles_violators() {
    let mut c = cfg(1, 10);
    c.strict_latency = true;
    c.cpu.local_max = 1e6; // a full local backlog cannot finish within a slot
    let mut e = MecEnv::new(c.clone(), TaskSpec::from_config(&c, 0), 0).unwrap();
    let mut st = e.state().clone();
    st.queues[0].local = 1e8;
    e.set_state(st).unwrap();
    let mut raw = vec![-1.0; e.action_dim()];
    raw[3] = 1.0; // compute everything locally
    raw[6] = 1.0;
    let (_, out) = e.step_raw(&raw).unwrap();
    assert_eq!(out.devices[0].bits, 0.0);
    assert_eq!(out.queues[0].local, 1e8 + out.devices[0].arrival);
}

#[test]
fn extended_observation_layout() {
    let mut c = cfg(2, 10);
    c.extended_obs = true;
    let e = MecEnv::new(c.clone(), TaskSpec::from_config(&c, 0), 0).unwrap();
    let o = e.observation();
    assert_eq!(o.len(), c.obs_dim());
    assert_eq!(o.len(), 1 + 6 + 2 + 2);
    assert_eq!(&o[7..9], &[0.5, 0.5]);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = cfg(1, 10);
    c.uav_end = [2000.0, 0.0];
    assert!(c.validate().is_err());
    let mut c = cfg(1, 2);
    c.uav_end = [0.0, 0.0]; // 707 m away, 50 m reachable
    assert!(c.validate().is_err());
    let c = cfg(0, 10);
    assert!(c.validate().is_err());
    let mut r = TaskRanges::default();
    r.uav_cpu_grid.clear();
    assert!(r.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projected_actions_pass_audit(
        seed in any::<u64>(),
        k in 1usize..5,
        n in 1usize..30,
        slot_frac in 0.0..1.0f64,
        x in 0.0..1000.0f64,
        y in 0.0..1000.0f64,
    ) {
        let c = cfg(k, n);
        let slot = ((n as f64) * slot_frac) as usize;
        let mut rng = Rng::seed_from_u64(seed);
        // positions from which the end point is still reachable
        let reach = c.max_step() * (n - slot) as f64;
        let mut pos = [x, y];
        let d = ((x - 500.0).powi(2) + (y - 500.0).powi(2)).sqrt();
        if d > reach {
            let s = reach / d;
            pos = [500.0 + (x - 500.0) * s, 500.0 + (y - 500.0) * s];
        }
        let pos = if slot == 0 { c.uav_start } else { pos };
        let raw = random_raw_action(&mut rng, c.action_dim());
        let a = project_action(&raw, &c, &c.cpu, pos, slot).unwrap();
        prop_assert!(audit_action(&c, &c.cpu, pos, &a, slot).is_ok());
        let after = [pos[0] + a.uav_move[0], pos[1] + a.uav_move[1]];
        let left = (n - slot - 1) as f64 * c.max_step();
        let gap = ((after[0] - 500.0).powi(2) + (after[1] - 500.0).powi(2)).sqrt();
        prop_assert!(gap <= left * (1.0 + 1e-9) + 1e-9);
    }

    #[test]
    fn episodes_end_at_the_end_point(seed in any::<u64>(), n in 1usize..40) {
        let c = cfg(1, n);
        let mut e = MecEnv::new(c.clone(), TaskSpec::from_config(&c, seed), seed).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        while !e.done() {
            let raw: Vec<f64> = random_raw_action(&mut rng, e.action_dim())
                .into_iter()
                .map(|v| v.signum())
                .collect();
            e.step_raw(&raw).unwrap();
        }
        prop_assert_eq!(e.state().uav_xy, c.uav_end);
    }
}
