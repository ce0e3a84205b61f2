//! Small dense-network toolkit with hand-written backpropagation.
//!
//! Batches are row-major `Array2<f64>` with one sample per row. Layers cache
//! what they need on the training-mode forward pass and accumulate parameter
//! gradients on `backward`; callers zero gradients between steps.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Anything with trainable parameters. `visit_params` must enumerate
/// `(parameter, gradient)` slices in a fixed order.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64]));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p, _| n += p.len());
        n
    }

    fn flat_params(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |p, _| out.extend_from_slice(p));
        out
    }

    fn set_flat_params(&mut self, values: &[f64]) {
        let mut off = 0;
        self.visit_params(&mut |p, _| {
            p.copy_from_slice(&values[off..off + p.len()]);
            off += p.len();
        });
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    fn flat_grads(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, g| out.extend_from_slice(g));
        out
    }

    fn grad_norm(&mut self) -> f64 {
        let mut s = 0.0;
        self.visit_params(&mut |_, g| s += g.iter().map(|v| v * v).sum::<f64>());
        s.sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            self.visit_params(&mut |_, g| g.iter_mut().for_each(|v| *v *= s));
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output.
    pub fn backprop(self, output: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => grad.zip_mut_with(output, |g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(output, |g, &y| *g *= 1.0 - y * y),
            Activation::Identity => {}
        }
    }
}

fn ensure_shape2(a: &mut Array2<f64>, shape: (usize, usize)) {
    if a.dim() != shape {
        *a = Array2::zeros(shape);
    }
}

fn ensure_shape1(a: &mut Array1<f64>, len: usize) {
    if a.len() != len {
        *a = Array1::zeros(len);
    }
}

/// Fully connected layer `y = x W + b` with `W` shaped `(in, out)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    #[serde(skip)]
    grad_weight: Array2<f64>,
    #[serde(skip)]
    grad_bias: Array1<f64>,
    #[serde(skip)]
    input: Option<Array2<f64>>,
}

impl Dense {
    /// Uniform init with limit `gain * sqrt(6 / (fan_in + fan_out))`.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let limit = gain * (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let weight =
            Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..=limit));
        Dense {
            weight,
            bias: Array1::zeros(fan_out),
            grad_weight: Array2::zeros((fan_in, fan_out)),
            grad_bias: Array1::zeros(fan_out),
            input: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array2<f64> {
        let x = self
            .input
            .as_ref()
            .expect("Dense::backward called without a training forward pass");
        ensure_shape2(&mut self.grad_weight, self.weight.dim());
        ensure_shape1(&mut self.grad_bias, self.bias.len());
        self.grad_weight += &x.t().dot(grad_out);
        self.grad_bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight.t())
    }
}

impl Parameterized for Dense {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        ensure_shape2(&mut self.grad_weight, self.weight.dim());
        ensure_shape1(&mut self.grad_bias, self.bias.len());
        f(
            self.weight.as_slice_mut().expect("contiguous weight"),
            self.grad_weight.as_slice_mut().expect("contiguous grad"),
        );
        f(
            self.bias.as_slice_mut().expect("contiguous bias"),
            self.grad_bias.as_slice_mut().expect("contiguous grad"),
        );
    }
}

/// Per-feature batch normalization. Training mode normalizes with batch
/// statistics and updates the running estimates; inference uses the
/// running estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    #[serde(skip)]
    grad_gamma: Array1<f64>,
    #[serde(skip)]
    grad_beta: Array1<f64>,
    #[serde(skip)]
    cache: Option<(Array2<f64>, Array1<f64>)>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum: 0.1,
            eps: 1e-5,
            grad_gamma: Array1::zeros(features),
            grad_beta: Array1::zeros(features),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let x_hat = &centered * &inv_std;
        let y = &x_hat * &self.gamma + &self.beta;

        let m = self.momentum;
        let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
        self.running_mean = &self.running_mean * (1.0 - m) + &mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &unbiased * m;
        self.cache = Some((x_hat, inv_std));
        y
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let scale = &self.gamma * &inv_std;
        let shift = &self.beta - &(&self.running_mean * &scale);
        x * &scale + &shift
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array2<f64> {
        let (x_hat, inv_std) = self
            .cache
            .as_ref()
            .expect("BatchNorm::backward called without a training forward pass");
        let n = grad_out.nrows() as f64;
        ensure_shape1(&mut self.grad_gamma, self.gamma.len());
        ensure_shape1(&mut self.grad_beta, self.beta.len());
        self.grad_gamma += &(grad_out * x_hat).sum_axis(Axis(0));
        self.grad_beta += &grad_out.sum_axis(Axis(0));

        let g_hat = grad_out * &self.gamma;
        let sum_g = g_hat.sum_axis(Axis(0));
        let sum_gx = (&g_hat * x_hat).sum_axis(Axis(0));
        let mut dx = &g_hat * n - &sum_g - &(x_hat * &sum_gx);
        dx *= &(inv_std / n);
        dx
    }
}

impl Parameterized for BatchNorm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        ensure_shape1(&mut self.grad_gamma, self.gamma.len());
        ensure_shape1(&mut self.grad_beta, self.beta.len());
        f(
            self.gamma.as_slice_mut().unwrap(),
            self.grad_gamma.as_slice_mut().unwrap(),
        );
        f(
            self.beta.as_slice_mut().unwrap(),
            self.grad_beta.as_slice_mut().unwrap(),
        );
    }
}

/// Plain multilayer perceptron: `hidden` activation between layers, linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    #[serde(skip)]
    outputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes` lists layer widths from input to output. The last layer's
    /// init is scaled by `output_gain`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { output_gain } else { 1.0 };
                Dense::new(w[0], w[1], gain, rng)
            })
            .collect();
        Mlp {
            layers,
            hidden,
            outputs: Vec::new(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].fan_in()];
        s.extend(self.layers.iter().map(Dense::fan_out));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.outputs.clear();
        let n = self.layers.len();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(&h);
            if i + 1 < n {
                self.hidden.apply(&mut h);
                self.outputs.push(h.clone());
            }
        }
        h
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let n = self.layers.len();
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h);
            if i + 1 < n {
                self.hidden.apply(&mut h);
            }
        }
        h
    }

    pub fn infer_one(&self, x: &[f64]) -> Vec<f64> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        self.infer(&row).into_raw_vec_and_offset().0
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array2<f64> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                self.hidden.backprop(&self.outputs[i], &mut g);
            }
            g = self.layers[i].backward(&g);
        }
        g
    }
}

impl Parameterized for Mlp {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }
}

/// Adam optimizer; moment buffers follow the visiting order of the model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, model: &mut dyn Parameterized) {
        self.steps += 1;
        let t = self.steps as f64;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let lr_t = self.lr * (1.0 - b2.powf(t)).sqrt() / (1.0 - b1.powf(t));
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        model.visit_params(&mut |p, g| {
            if ms.len() <= k {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
            k += 1;
        });
    }
}

/// Finite-difference gradient checking.
pub mod gradcheck {
    use super::Parameterized;

    /// Central finite-difference check on a subset of parameter indices.
    /// Returns the worst relative error.
    pub fn max_fd_error<M: Parameterized>(
        model: &mut M,
        indices: &[usize],
        h: f64,
        mut loss: impl FnMut(&mut M) -> f64,
        analytic: &[f64],
    ) -> f64 {
        let base = model.flat_params();
        let mut worst: f64 = 0.0;
        for &i in indices {
            let mut p = base.clone();
            p[i] = base[i] + h;
            model.set_flat_params(&p);
            let up = loss(model);
            p[i] = base[i] - h;
            model.set_flat_params(&p);
            let down = loss(model);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        model.set_flat_params(&base);
        worst
    }

    pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
        use rand::seq::index::sample;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, n, k.min(n)).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in [Activation::Tanh, Activation::Relu] {
            let mut net = Mlp::new(&[5, 8, 7, 3], act, 1.0, &mut rng);
            let x = batch(6, 5, 2);
            let target = batch(6, 3, 3);
            let loss = |m: &mut Mlp| {
                let y = m.forward(&x);
                (&y - &target).mapv(|v| v * v).sum() / 6.0
            };
            net.zero_grad();
            let y = net.forward(&x);
            net.backward(&((&y - &target) * (2.0 / 6.0)));
            let g = net.flat_grads();
            let idx = sample_indices(g.len(), 100, 4);
            let err = max_fd_error(&mut net, &idx, 1e-6, loss, &g);
            assert!(err < 1e-4, "{act:?}: {err}");
        }
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut bn = BatchNorm::new(4);
        bn.gamma = Array1::from_vec(vec![0.5, 1.5, -0.7, 1.1]);
        bn.beta = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let x = batch(7, 4, 5);
        let w = batch(7, 4, 6);
        let loss = |b: &mut BatchNorm| (b.forward(&x) * &w).sum();
        bn.zero_grad();
        bn.forward(&x);
        let dx = bn.backward(&w);
        let g = bn.flat_grads();
        let idx: Vec<usize> = (0..g.len()).collect();
        assert!(max_fd_error(&mut bn, &idx, 1e-6, loss, &g) < 1e-4);

        // input gradient
        let h = 1e-6;
        for (r, c) in [(0, 0), (3, 2), (6, 3)] {
            let mut xp = x.clone();
            xp[(r, c)] += h;
            let up = (bn.clone().forward(&xp) * &w).sum();
            xp[(r, c)] -= 2.0 * h;
            let down = (bn.clone().forward(&xp) * &w).sum();
            let num = (up - down) / (2.0 * h);
            assert!((num - dx[(r, c)]).abs() / num.abs().max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let mut bn = BatchNorm::new(2);
        bn.momentum = 1.0;
        let x = batch(50, 2, 8);
        let train_out = bn.forward(&x);
        // With momentum 1 the running stats equal the batch stats (up to Bessel).
        let infer_out = bn.infer(&x);
        let n = 50.0_f64;
        let ratio = ((n - 1.0) / n).sqrt();
        for (a, b) in train_out.iter().zip(infer_out.iter()) {
            assert!((a * ratio - b).abs() < 1e-3);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Dense::new(1, 1, 1.0, &mut rng);
        let mut opt = Adam::new(0.05);
        let x = Array2::from_shape_vec((4, 1), vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
        let y = x.mapv(|v| 3.0 * v - 1.0);
        for _ in 0..2000 {
            layer.zero_grad();
            let out = layer.forward(&x);
            layer.backward(&((&out - &y) * 0.5));
            opt.step(&mut layer);
        }
        assert!((layer.weight[(0, 0)] - 3.0).abs() < 1e-3);
        assert!((layer.bias[0] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(&[3, 4, 2], Activation::Tanh, 0.1, &mut rng);
        let p = net.flat_params();
        assert_eq!(p.len(), net.param_count());
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        net.set_flat_params(&shifted);
        assert_eq!(net.flat_params(), shifted);
    }
}
