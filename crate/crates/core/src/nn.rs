//! Dense feed-forward networks with hand-written reverse mode, Adam/SGD and
//! soft target updates.
//!
//! Parameters live in one flat vector. Each layer stores its weight matrix
//! row-major (`fan_out × fan_in`) followed by its bias.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::check_len;
use crate::{Error, Result};

/// Activation applied to the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputAct {
    /// `tanh`, keeps actor outputs in `(-1, 1)`.
    Tanh,
    Identity,
}

impl OutputAct {
    pub fn code(self) -> u8 {
        match self {
            OutputAct::Tanh => 1,
            OutputAct::Identity => 0,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(OutputAct::Identity),
            1 => Some(OutputAct::Tanh),
            _ => None,
        }
    }
}

/// Rectifier hidden layers and a configurable output activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    widths: Vec<usize>,
    out_act: OutputAct,
    params: Vec<f64>,
}

/// Parameter-shaped buffer of partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self(vec![0.0; net.param_count()])
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add(&mut self, other: &Gradients) {
        debug_assert_eq!(self.0.len(), other.0.len());
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a += b);
    }

    pub fn clear(&mut self) {
        self.0.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Layer outputs kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[l+1]` the activated output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape holds at least the input")
    }
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl DenseNet {
    /// Fan-in uniform initialization `U(±1/√fan_in)`; the last layer is
    /// further multiplied by `final_scale`.
    pub fn new<R: rand::Rng + ?Sized>(
        widths: &[usize],
        out_act: OutputAct,
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig {
                field: "net.widths",
                reason: "need at least two positive widths".into(),
            });
        }
        let layers = widths.len() - 1;
        let mut params = Vec::with_capacity(param_count(widths));
        for (l, w) in widths.windows(2).enumerate() {
            let bound = 1.0 / libm::sqrt(w[0] as f64);
            let s = if l + 1 == layers { final_scale } else { 1.0 };
            for _ in 0..(w[0] + 1) * w[1] {
                params.push(s * bound * rng.random_range(-1.0..=1.0));
            }
        }
        Ok(Self {
            widths: widths.to_vec(),
            out_act,
            params,
        })
    }

    pub fn from_params(widths: &[usize], out_act: OutputAct, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig {
                field: "net.widths",
                reason: "need at least two positive widths".into(),
            });
        }
        check_len("net parameters", param_count(widths), params.len())?;
        Ok(Self {
            widths: widths.to_vec(),
            out_act,
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn out_act(&self) -> OutputAct {
        self.out_act
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.widths.windows(2).map(move |w| {
            let o = offset;
            offset += (w[0] + 1) * w[1];
            (o, w[0], w[1])
        })
    }

    pub fn forward_tape(&self, input: &[f64]) -> Result<Tape> {
        check_len("net input", self.input_dim(), input.len())?;
        let n_layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        for (l, (off, fin, fout)) in self.layers().enumerate() {
            let x = &acts[l];
            let w = &self.params[off..off + fin * fout];
            let b = &self.params[off + fin * fout..off + (fin + 1) * fout];
            let last = l + 1 == n_layers;
            let y: Vec<f64> = (0..fout)
                .map(|o| {
                    let row = &w[o * fin..(o + 1) * fin];
                    let z = row.iter().zip(x).fold(b[o], |s, (wi, xi)| s + wi * xi);
                    if !last {
                        z.max(0.0)
                    } else {
                        match self.out_act {
                            OutputAct::Tanh => libm::tanh(z),
                            OutputAct::Identity => z,
                        }
                    }
                })
                .collect();
            acts.push(y);
        }
        Ok(Tape { acts })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut tape = self.forward_tape(input)?;
        Ok(tape.acts.pop().expect("tape holds the output"))
    }

    /// Accumulates `∂(output·upstream)/∂params` into `grads` (when given) and
    /// returns the gradient with respect to the input.
    pub fn backward_into(
        &self,
        tape: &Tape,
        upstream: &[f64],
        mut grads: Option<&mut Gradients>,
    ) -> Result<Vec<f64>> {
        check_len("net upstream", self.output_dim(), upstream.len())?;
        if let Some(g) = grads.as_deref() {
            check_len("gradient buffer", self.param_count(), g.0.len())?;
        }
        let n_layers = self.widths.len() - 1;
        let layers: Vec<_> = self.layers().collect();
        let out = tape.output();
        let mut delta: Vec<f64> = match self.out_act {
            OutputAct::Tanh => upstream
                .iter()
                .zip(out)
                .map(|(u, y)| u * (1.0 - y * y))
                .collect(),
            OutputAct::Identity => upstream.to_vec(),
        };
        for l in (0..n_layers).rev() {
            let (off, fin, fout) = layers[l];
            let x = &tape.acts[l];
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = g.0[off..off + (fin + 1) * fout].split_at_mut(fin * fout);
                for o in 0..fout {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    gw[o * fin..(o + 1) * fin]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(g, xi)| *g += d * xi);
                }
            }
            let w = &self.params[off..off + fin * fout];
            let mut prev = vec![0.0; fin];
            for o in 0..fout {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                prev.iter_mut()
                    .zip(&w[o * fin..(o + 1) * fin])
                    .for_each(|(p, wi)| *p += d * wi);
            }
            if l > 0 {
                // rectifier derivative, taken as 0 at the kink
                prev.iter_mut()
                    .zip(x)
                    .for_each(|(p, a)| if *a <= 0.0 { *p = 0.0 });
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Gradient of `output·upstream` for a single input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let tape = self.forward_tape(input)?;
        let mut g = Gradients::zeros_like(self);
        let dx = self.backward_into(&tape, upstream, Some(&mut g))?;
        Ok((g, dx))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Update rule used by [`Optimizer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// `θ ← θ − lr·g`.
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one parameter vector. Minimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One step. Adam uses bias-corrected moments
    /// `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)` and moves by `lr·m̂/(√v̂+ε)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - libm::pow(beta1, self.t as f64);
                let c2 = 1.0 - libm::pow(beta2, self.t as f64);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (libm::sqrt(vh) + eps);
                }
            }
        }
    }
}

/// `target ← rate·online + (1 − rate)·target`, elementwise.
pub fn polyak_update(target: &mut [f64], online: &[f64], rate: f64) {
    debug_assert_eq!(target.len(), online.len());
    if rate == 0.0 {
        return;
    }
    if rate == 1.0 {
        target.copy_from_slice(online);
        return;
    }
    target
        .iter_mut()
        .zip(online)
        .for_each(|(t, o)| *t = rate * o + (1.0 - rate) * *t);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::from_params(&[3, 4, 2], OutputAct::Identity, vec![0.0; 26]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let p = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let net = DenseNet::from_params(&[2, 2], OutputAct::Identity, p).unwrap();
        assert_eq!(net.forward(&[0.3, -7.0]).unwrap(), [0.3, -7.0]);
    }

    #[test]
    fn scalar_linear_gradient() {
        let net = DenseNet::from_params(&[1, 1], OutputAct::Identity, vec![2.5, 0.0]).unwrap();
        let (g, dx) = net.backward(&[3.0], &[0.5]).unwrap();
        assert_eq!(g.0, [1.5, 0.5]);
        assert_eq!(dx, [1.25]);
        let (g, dx) = net.backward(&[3.0], &[0.0]).unwrap();
        assert!(g.0.iter().chain(&dx).all(|&x| x == 0.0));
    }

    #[test]
    fn param_count_and_actor_range() {
        let mut rng = crate::Rng::seed_from_u64(0);
        let net = DenseNet::new(&[5, 8, 8, 3], OutputAct::Tanh, 1.0, &mut rng).unwrap();
        assert_eq!(net.param_count(), 6 * 8 + 9 * 8 + 9 * 3);
        let y = net.forward(&[100.0, -50.0, 3.0, 0.0, 9.0]).unwrap();
        assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(DenseNet::new(&[5], OutputAct::Tanh, 1.0, &mut rng).is_err());
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn small_final_layer_gives_near_zero_policy() {
        let mut rng = crate::Rng::seed_from_u64(1);
        let net = DenseNet::new(&[4, 16, 16, 6], OutputAct::Tanh, 1e-3, &mut rng).unwrap();
        let y = net.forward(&[0.5, 0.1, 0.2, 0.9]).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn optimizer_examples() {
        let mut p = vec![1.0, -2.0];
        let mut adam = Optimizer::new(OptimizerKind::default(), 2);
        adam.step(&mut p, &[0.0, 0.0], 0.1);
        assert_eq!(p, [1.0, -2.0]);
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, 2);
        sgd.step(&mut p, &[0.5, -1.0], 0.1);
        assert_eq!(p, [1.0 - 0.05, -2.0 + 0.1]);
        // first Adam step moves every coordinate by lr against the gradient sign
        let mut q = vec![0.0, 0.0];
        let mut adam = Optimizer::new(OptimizerKind::default(), 2);
        adam.step(&mut q, &[3.0, -0.01], 0.1);
        assert!((q[0] + 0.1).abs() < 1e-6 && (q[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn polyak_examples() {
        let mut t = vec![0.0, 4.0];
        polyak_update(&mut t, &[2.0, 2.0], 0.0);
        assert_eq!(t, [0.0, 4.0]);
        polyak_update(&mut t, &[2.0, 2.0], 0.5);
        assert_eq!(t, [1.0, 3.0]);
        polyak_update(&mut t, &[2.0, 2.0], 1.0);
        assert_eq!(t, [2.0, 2.0]);
    }
}
