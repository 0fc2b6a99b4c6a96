//! Small fully-connected networks over flat parameter vectors, with a manual
//! reverse pass and an Adam optimizer.
//!
//! Layout per layer: weights `[out][in]` row-major followed by `out` biases.
//! Hidden layers use `tanh`; the output layer is linear.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpShape {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Self {
            input,
            hidden: hidden.to_vec(),
            output,
        }
    }

    /// `(fan_in, fan_out)` for each layer in order.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(i, o)| i * o + o).sum()
    }

    /// Weights drawn from `N(0, gain^2 / fan_in)` with gain 1 on hidden layers
    /// and `output_gain` on the last layer. Biases start at zero.
    pub fn init(&self, output_gain: f64, rng: &mut Rng) -> Vec<f64> {
        let layers = self.layers();
        let mut params = Vec::with_capacity(self.param_count());
        for (k, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let gain = if k + 1 == layers.len() { output_gain } else { 1.0 };
            let std = gain / (fan_in as f64).sqrt();
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("positive std");
                params.extend((0..fan_in * fan_out).map(|_| normal.sample(rng)));
            } else {
                params.extend(std::iter::repeat_n(0.0, fan_in * fan_out));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }
}

/// Layer inputs saved by [`forward_cached`] for the reverse pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
}

fn affine(params: &[f64], fan_in: usize, fan_out: usize, x: &[f64]) -> Vec<f64> {
    let (w, b) = params.split_at(fan_in * fan_out);
    (0..fan_out)
        .map(|o| {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

pub fn forward(shape: &MlpShape, params: &[f64], x: &[f64]) -> Vec<f64> {
    let layers = shape.layers();
    let mut offset = 0;
    let mut h = x.to_vec();
    for (k, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let n = fan_in * fan_out + fan_out;
        h = affine(&params[offset..offset + n], fan_in, fan_out, &h);
        if k + 1 < layers.len() {
            h.iter_mut().for_each(|v| *v = v.tanh());
        }
        offset += n;
    }
    h
}

pub fn forward_cached(shape: &MlpShape, params: &[f64], x: &[f64], cache: &mut MlpCache) -> Vec<f64> {
    let layers = shape.layers();
    cache.inputs.clear();
    let mut offset = 0;
    let mut h = x.to_vec();
    for (k, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let n = fan_in * fan_out + fan_out;
        let out = affine(&params[offset..offset + n], fan_in, fan_out, &h);
        cache.inputs.push(h);
        h = out;
        if k + 1 < layers.len() {
            h.iter_mut().for_each(|v| *v = v.tanh());
        }
        offset += n;
    }
    h
}

/// Accumulates `d(out · grad_out)/d(params)` into `grad` using the activations
/// saved by the matching [`forward_cached`] call.
pub fn backward(shape: &MlpShape, params: &[f64], cache: &MlpCache, grad_out: &[f64], grad: &mut [f64]) {
    let layers = shape.layers();
    let mut offsets = Vec::with_capacity(layers.len());
    let mut offset = 0;
    for &(fan_in, fan_out) in &layers {
        offsets.push(offset);
        offset += fan_in * fan_out + fan_out;
    }

    let mut delta = grad_out.to_vec();
    for k in (0..layers.len()).rev() {
        let (fan_in, fan_out) = layers[k];
        let base = offsets[k];
        let input = &cache.inputs[k];
        for o in 0..fan_out {
            let d = delta[o];
            if d != 0.0 {
                let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
                row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
            }
            grad[base + fan_in * fan_out + o] += d;
        }
        if k > 0 {
            let w = &params[base..base + fan_in * fan_out];
            // `input` here is the tanh output of the previous layer.
            delta = (0..fan_in)
                .map(|i| {
                    let s: f64 = (0..fan_out).map(|o| w[o * fan_in + i] * delta[o]).sum();
                    s * (1.0 - input[i] * input[i])
                })
                .collect();
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Scales `grad` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Random unit-scale vector, used by gradient checks in tests.
pub fn random_vector(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn param_count_matches_layout() {
        let shape = MlpShape::new(3, &[4, 5], 2);
        assert_eq!(shape.param_count(), 3 * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2);
        let mut rng = rng_from_seed(1);
        assert_eq!(shape.init(0.01, &mut rng).len(), shape.param_count());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from_seed(3);
        for hidden in [vec![], vec![6], vec![5, 4]] {
            let shape = MlpShape::new(3, &hidden, 2);
            let params = shape.init(1.0, &mut rng);
            let x = random_vector(3, 1.0, &mut rng);
            let w = random_vector(2, 1.0, &mut rng);
            let f = |p: &[f64]| -> f64 {
                forward(&shape, p, &x).iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let mut cache = MlpCache::default();
            forward_cached(&shape, &params, &x, &mut cache);
            let mut grad = vec![0.0; params.len()];
            backward(&shape, &params, &cache, &w, &mut grad);
            let h = 1e-5;
            for i in 0..params.len() {
                let mut p = params.clone();
                p[i] += h;
                let up = f(&p);
                p[i] -= 2.0 * h;
                let down = f(&p);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-7 + 1e-5 * fd.abs(), "{i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn adam_with_zero_lr_keeps_params() {
        let mut adam = Adam::new(3, 0.0);
        let mut p = vec![1.0, 2.0, 3.0];
        adam.step(&mut p, &[0.5, -0.5, 1.0]);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn grad_clip_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
