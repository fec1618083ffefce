use rand::{Rng, SeedableRng};
use uavmec_core::nn::{polyak_update, DenseNet, Optimizer, OptimizerKind, OutputAct};

type R = rand_chacha::ChaCha8Rng;

fn random_net(r: &mut R, max_width: usize, max_hidden: usize) -> DenseNet {
    let hidden = r.random_range(0..=max_hidden);
    let mut widths = vec![r.random_range(1..=max_width)];
    for _ in 0..hidden {
        widths.push(r.random_range(1..=max_width));
    }
    widths.push(r.random_range(1..=8));
    let act = if r.random::<bool>() { OutputAct::Tanh } else { OutputAct::Identity };
    DenseNet::new(&widths, act, 1.0, r).unwrap()
}

/// Independent forward pass over the flat parameter layout.
fn scripted_forward(widths: &[usize], act: OutputAct, p: &[f64], x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut h = x.to_vec();
    let mut pre = Vec::new();
    let mut off = 0;
    for l in 0..widths.len() - 1 {
        let (fi, fo) = (widths[l], widths[l + 1]);
        let mut z = vec![0.0; fo];
        for o in 0..fo {
            let mut s = p[off + fi * fo + o];
            for i in 0..fi {
                s += p[off + o * fi + i] * h[i];
            }
            z[o] = s;
        }
        off += (fi + 1) * fo;
        pre.push(z.clone());
        let last = l + 2 == widths.len();
        h = z
            .iter()
            .map(|&v| match (last, act) {
                (false, _) => v.max(0.0),
                (true, OutputAct::Tanh) => v.tanh(),
                (true, OutputAct::Identity) => v,
            })
            .collect();
    }
    (h, pre)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn forward_matches_script() {
    let mut r = R::seed_from_u64(11);
    for _ in 0..50 {
        let net = random_net(&mut r, 16, 2);
        let x: Vec<f64> = (0..net.input_dim()).map(|_| r.random_range(-2.0..2.0)).collect();
        let (want, _) = scripted_forward(net.widths(), net.out_act(), net.params(), &x);
        let got = net.forward(&x).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }
}

fn kink_pattern(net: &DenseNet, p: &[f64], x: &[f64]) -> Vec<bool> {
    let (_, pre) = scripted_forward(net.widths(), net.out_act(), p, x);
    let hidden = pre.len() - 1;
    pre.into_iter().take(hidden).flatten().map(|z| z > 0.0).collect()
}

/// Max relative error of `backward` against central differences with
/// step 1e-5, over parameters and inputs. Entries whose perturbation flips a
/// rectifier are skipped, since the derivative is undefined across the kink.
fn gradient_check(net: &DenseNet, x: &[f64], u: &[f64]) -> (f64, usize) {
    const H: f64 = 1e-5;
    let (g, dx) = net.backward(x, u).unwrap();
    let f = |p: &[f64], xx: &[f64]| {
        let (y, _) = scripted_forward(net.widths(), net.out_act(), p, xx);
        dot(&y, u)
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut p = net.params().to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + H;
        let kp = kink_pattern(net, &p, x);
        let fp = f(&p, x);
        p[i] = orig - H;
        let km = kink_pattern(net, &p, x);
        let fm = f(&p, x);
        p[i] = orig;
        if kp != km {
            skipped += 1;
            continue;
        }
        worst = worst.max(rel(g.0[i], (fp - fm) / (2.0 * H)));
    }
    let mut xx = x.to_vec();
    for i in 0..xx.len() {
        let orig = xx[i];
        xx[i] = orig + H;
        let kp = kink_pattern(net, &p, &xx);
        let fp = f(&p, &xx);
        xx[i] = orig - H;
        let km = kink_pattern(net, &p, &xx);
        let fm = f(&p, &xx);
        xx[i] = orig;
        if kp != km {
            skipped += 1;
            continue;
        }
        worst = worst.max(rel(dx[i], (fp - fm) / (2.0 * H)));
    }
    (worst, skipped)
}

#[test]
fn backward_matches_finite_differences() {
    let mut r = R::seed_from_u64(12);
    for _ in 0..20 {
        let net = random_net(&mut r, 24, 3);
        let x: Vec<f64> = (0..net.input_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..net.output_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let (worst, _) = gradient_check(&net, &x, &u);
        assert!(worst <= 1e-4, "relative error {worst}");
    }
}

#[test]
fn zero_upstream_zero_gradients() {
    let mut r = R::seed_from_u64(13);
    let net = random_net(&mut r, 10, 2);
    let x = vec![0.5; net.input_dim()];
    let (g, dx) = net.backward(&x, &vec![0.0; net.output_dim()]).unwrap();
    assert!(g.0.iter().chain(&dx).all(|&v| v == 0.0));
}

#[test]
fn outputs_stay_finite_on_bounded_inputs() {
    let mut r = R::seed_from_u64(14);
    for _ in 0..200 {
        let net = random_net(&mut r, 32, 3);
        let x: Vec<f64> = (0..net.input_dim()).map(|_| r.random_range(-1e3..1e3)).collect();
        assert!(net.forward(&x).unwrap().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn adam_descends_a_quadratic() {
    // f(θ) = ½ Σ a_i (θ_i − c_i)²
    let mut r = R::seed_from_u64(15);
    let n = 10;
    let a: Vec<f64> = (0..n).map(|_| r.random_range(0.5..5.0)).collect();
    let c: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    let loss = |t: &[f64]| (0..n).map(|i| 0.5 * a[i] * (t[i] - c[i]).powi(2)).sum::<f64>();
    let mut theta = vec![0.0; n];
    let mut opt = Optimizer::new(OptimizerKind::default(), n);
    let mut prev = loss(&theta);
    let start = prev;
    for step in 0..100 {
        let g: Vec<f64> = (0..n).map(|i| a[i] * (theta[i] - c[i])).collect();
        opt.step(&mut theta, &g, 0.01);
        let l = loss(&theta);
        if step >= 5 {
            assert!(l < prev, "step {step}: {l} >= {prev}");
        }
        prev = l;
    }
    assert!(prev < 0.5 * start);
}

#[test]
fn polyak_is_convex_combination() {
    let mut r = R::seed_from_u64(16);
    for _ in 0..100 {
        let n = r.random_range(1..20);
        let t0: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let o: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let rate = r.random::<f64>();
        let mut t = t0.clone();
        polyak_update(&mut t, &o, rate);
        for i in 0..n {
            let lo = t0[i].min(o[i]) - 1e-12;
            let hi = t0[i].max(o[i]) + 1e-12;
            assert!((lo..=hi).contains(&t[i]));
            assert!((t[i] - (rate * o[i] + (1.0 - rate) * t0[i])).abs() <= 1e-12);
        }
        let once = t.clone();
        polyak_update(&mut t, &o, 0.0);
        assert_eq!(t, once);
    }
}
