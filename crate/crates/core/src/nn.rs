//! Dense layers with closed-form backward passes and a small trait for walking
//! named parameter tensors (used by the optimizer, gradient checking and
//! checkpoints).

use rand::Rng;

use crate::error::{Error, Result};

/// Walks the named trainable tensors of a model in a fixed order.
///
/// A gradient is represented by a value of the same type as the model, so
/// flattening both gives index-aligned vectors.
pub trait Params: Clone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, t| out.extend_from_slice(t));
        out
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.copy_from_slice(&flat[at..at + n]);
            at += n;
        });
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }

    /// `(name, len)` for every tensor, in visiting order.
    fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.len())));
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(0.0));
        z
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let flat = other.flatten();
        let mut at = 0;
        self.visit_mut("", &mut |_, t| {
            for v in t.iter_mut() {
                *v += scale * flat[at];
                at += 1;
            }
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `y = W x + b`, `W` stored row-major as `out_dim x in_dim`.
/// The bias is optional (recurrent transforms carry none).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    in_dim: usize,
    out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: Some(vec![0.0; out_dim]),
        }
    }

    pub fn zeros_no_bias(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            bias: None,
            ..Linear::zeros(in_dim, out_dim)
        }
    }

    /// Uniform in `[-s, s]` with `s = 1/sqrt(in_dim)`, bias included.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut l = Linear::zeros(in_dim, out_dim);
        l.randomize(rng);
        l
    }

    pub fn init_no_bias(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut l = Linear::zeros_no_bias(in_dim, out_dim);
        l.randomize(rng);
        l
    }

    fn randomize(&mut self, rng: &mut impl Rng) {
        let s = 1.0 / (self.in_dim.max(1) as f64).sqrt();
        for w in self.weight.iter_mut() {
            *w = rng.gen_range(-s..=s);
        }
        if let Some(b) = self.bias.as_mut() {
            for v in b.iter_mut() {
                *v = rng.gen_range(-s..=s);
            }
        }
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.as_ref().is_some_and(|b| b.len() != out_dim) {
            return Err(Error::Input(format!(
                "linear layer {in_dim}->{out_dim} given {} weights",
                weight.len()
            )));
        }
        Ok(Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn check_input(&self, x: &[f64], what: &str) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(Error::Input(format!(
                "{what}: expected input of length {}, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = match &self.bias {
            Some(b) => b.clone(),
            None => vec![0.0; self.out_dim],
        };
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += dot(row, x);
        }
        y
    }

    /// Accumulates `dL/dW`, `dL/db` into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Linear) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
        if let Some(gb) = grads.bias.as_mut() {
            for (b, g) in gb.iter_mut().zip(grad_out) {
                *b += g;
            }
        }
        gx
    }

    /// Like [`Linear::backward`] but skips the input gradient.
    pub fn backward_params(&self, x: &[f64], grad_out: &[f64], grads: &mut Linear) {
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (gw, xi) in grow.iter_mut().zip(x) {
                *gw += g * xi;
            }
        }
        if let Some(gb) = grads.bias.as_mut() {
            for (b, g) in gb.iter_mut().zip(grad_out) {
                *b += g;
            }
        }
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_forward_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::init(3, 2, &mut rng);
        let x = [0.5, -1.0, 2.0];
        let y = l.forward(&x);
        for o in 0..2 {
            let mut acc = l.bias.as_ref().unwrap()[o];
            for i in 0..3 {
                acc += l.weight[o * 3 + i] * x[i];
            }
            assert!((y[o] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn flatten_round_trip_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Linear::init(4, 3, &mut rng);
        let mut z = l.zeros_like();
        assert!(z.flatten().iter().all(|&v| v == 0.0));
        z.unflatten(&l.flatten());
        assert_eq!(z, l);
        let layout = l.layout();
        assert_eq!(layout, vec![("weight".to_string(), 12), ("bias".to_string(), 3)]);
        assert_eq!(Linear::zeros_no_bias(4, 3).num_params(), 12);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let a = softmax(&[0.3, -1.2, 2.0]);
        let b = softmax(&[5.3, 3.8, 7.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid(-700.0) > 0.0 && sigmoid(800.0) == 1.0 && sigmoid(-800.0) == 0.0);
    }
}
