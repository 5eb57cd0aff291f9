//! Gated graph neural network over the predicate graph.
//!
//! Every node starts from its scalar predicate logit zero-padded to the hidden
//! width, then runs `T` GRU updates driven by the adjacency-weighted sum of
//! its neighbours' states plus a shared bias. A shared affine output network
//! reads `[h_v | r_pred_v]` and emits one scalar per node.

use rand::Rng;

use crate::anchor_graph::PredicateGraph;
use crate::error::{Error, Result};
use crate::nn::{join, sigmoid, Linear, Params};

/// Gated recurrent unit with input `a` (message) and hidden state `h`:
///
/// ```text
/// z  = sigmoid(Wz a + Uz h)
/// r  = sigmoid(Wr a + Ur h)
/// c  = tanh(Wc a + Uc (r * h))
/// h' = (1 - z) * h + z * c
/// ```
///
/// The `W` maps carry the biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub w_update: Linear,
    pub u_update: Linear,
    pub w_reset: Linear,
    pub u_reset: Linear,
    pub w_cand: Linear,
    pub u_cand: Linear,
}

struct GruTrace {
    z: Vec<f64>,
    r: Vec<f64>,
    rh: Vec<f64>,
    c: Vec<f64>,
}

impl Gru {
    fn init(d: usize, rng: &mut impl Rng) -> Self {
        Gru {
            w_update: Linear::init(d, d, rng),
            u_update: Linear::init_no_bias(d, d, rng),
            w_reset: Linear::init(d, d, rng),
            u_reset: Linear::init_no_bias(d, d, rng),
            w_cand: Linear::init(d, d, rng),
            u_cand: Linear::init_no_bias(d, d, rng),
        }
    }

    fn zeros(d: usize) -> Self {
        Gru {
            w_update: Linear::zeros(d, d),
            u_update: Linear::zeros_no_bias(d, d),
            w_reset: Linear::zeros(d, d),
            u_reset: Linear::zeros_no_bias(d, d),
            w_cand: Linear::zeros(d, d),
            u_cand: Linear::zeros_no_bias(d, d),
        }
    }

    fn step(&self, a: &[f64], h: &[f64]) -> (Vec<f64>, GruTrace) {
        let add = |p: Vec<f64>, q: Vec<f64>| p.into_iter().zip(q).map(|(x, y)| x + y).collect::<Vec<_>>();
        let z: Vec<f64> = add(self.w_update.forward(a), self.u_update.forward(h))
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = add(self.w_reset.forward(a), self.u_reset.forward(h))
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(r, h)| r * h).collect();
        let c: Vec<f64> = add(self.w_cand.forward(a), self.u_cand.forward(&rh))
            .into_iter()
            .map(f64::tanh)
            .collect();
        let out = (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();
        (out, GruTrace { z, r, rh, c })
    }

    /// Returns `(dL/da, dL/dh)` and accumulates parameter gradients.
    fn step_backward(&self, a: &[f64], h: &[f64], t: &GruTrace, g_out: &[f64], grads: &mut Gru) -> (Vec<f64>, Vec<f64>) {
        let d = h.len();
        let mut g_h: Vec<f64> = (0..d).map(|i| g_out[i] * (1.0 - t.z[i])).collect();
        let g_z_pre: Vec<f64> = (0..d)
            .map(|i| g_out[i] * (t.c[i] - h[i]) * t.z[i] * (1.0 - t.z[i]))
            .collect();
        let g_c_pre: Vec<f64> = (0..d)
            .map(|i| g_out[i] * t.z[i] * (1.0 - t.c[i] * t.c[i]))
            .collect();

        let mut g_a = self.w_cand.backward(a, &g_c_pre, &mut grads.w_cand);
        let g_rh = self.u_cand.backward(&t.rh, &g_c_pre, &mut grads.u_cand);
        let g_r_pre: Vec<f64> = (0..d)
            .map(|i| g_rh[i] * h[i] * t.r[i] * (1.0 - t.r[i]))
            .collect();
        for i in 0..d {
            g_h[i] += g_rh[i] * t.r[i];
        }

        let acc = |dst: &mut Vec<f64>, src: Vec<f64>| dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
        acc(&mut g_a, self.w_update.backward(a, &g_z_pre, &mut grads.w_update));
        acc(&mut g_h, self.u_update.backward(h, &g_z_pre, &mut grads.u_update));
        acc(&mut g_a, self.w_reset.backward(a, &g_r_pre, &mut grads.w_reset));
        acc(&mut g_h, self.u_reset.backward(h, &g_r_pre, &mut grads.u_reset));
        (g_a, g_h)
    }
}

impl Params for Gru {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.w_update.visit(&join(prefix, "w_update"), f);
        self.u_update.visit(&join(prefix, "u_update"), f);
        self.w_reset.visit(&join(prefix, "w_reset"), f);
        self.u_reset.visit(&join(prefix, "u_reset"), f);
        self.w_cand.visit(&join(prefix, "w_cand"), f);
        self.u_cand.visit(&join(prefix, "u_cand"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.w_update.visit_mut(&join(prefix, "w_update"), f);
        self.u_update.visit_mut(&join(prefix, "u_update"), f);
        self.w_reset.visit_mut(&join(prefix, "w_reset"), f);
        self.u_reset.visit_mut(&join(prefix, "u_reset"), f);
        self.w_cand.visit_mut(&join(prefix, "w_cand"), f);
        self.u_cand.visit_mut(&join(prefix, "u_cand"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GgnnParams {
    steps: usize,
    pub gru: Gru,
    /// Shared message bias `b`.
    pub bias: Vec<f64>,
    /// Affine map `[h_v | r_pred_v] -> o_v`.
    pub output: Linear,
}

impl GgnnParams {
    pub fn init(hidden_dim: usize, steps: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::check_shape(hidden_dim, steps)?;
        let s = 1.0 / (hidden_dim as f64).sqrt();
        let gru = Gru::init(hidden_dim, rng);
        let bias = (0..hidden_dim).map(|_| rng.gen_range(-s..=s)).collect();
        Ok(GgnnParams {
            steps,
            gru,
            bias,
            output: Linear::init(hidden_dim + 1, 1, rng),
        })
    }

    pub fn zeros(hidden_dim: usize, steps: usize) -> Result<Self> {
        Self::check_shape(hidden_dim, steps)?;
        Ok(GgnnParams {
            steps,
            gru: Gru::zeros(hidden_dim),
            bias: vec![0.0; hidden_dim],
            output: Linear::zeros(hidden_dim + 1, 1),
        })
    }

    fn check_shape(hidden_dim: usize, steps: usize) -> Result<()> {
        if hidden_dim == 0 || steps == 0 {
            return Err(Error::Config(format!(
                "GGNN needs hidden_dim >= 1 and steps >= 1 (got {hidden_dim}, {steps})"
            )));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

impl Params for GgnnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.gru.visit(&join(prefix, "gru"), f);
        f(&join(prefix, "bias"), &self.bias);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.gru.visit_mut(&join(prefix, "gru"), f);
        f(&join(prefix, "bias"), &mut self.bias);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Node states, row-major `|V| x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    dim: usize,
    h: Vec<f64>,
}

impl NodeStates {
    pub fn from_rows(dim: usize, h: Vec<f64>) -> Result<Self> {
        if dim == 0 || h.len() % dim != 0 {
            return Err(Error::Input(format!("{} values do not form rows of width {dim}", h.len())));
        }
        Ok(NodeStates { dim, h })
    }

    pub fn num_nodes(&self) -> usize {
        self.h.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.h[v * self.dim..(v + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.h
    }
}

/// Row `v` is `[r_pred[v], 0, ..., 0]` of width `dim`.
pub fn init_nodes(r_pred: &[f64], dim: usize) -> NodeStates {
    assert!(dim >= 1, "node state width must be positive");
    let mut h = vec![0.0; r_pred.len() * dim];
    for (v, &x) in r_pred.iter().enumerate() {
        h[v * dim] = x;
    }
    NodeStates { dim, h }
}

fn messages(graph: &PredicateGraph, states: &[f64], d: usize, bias: &[f64]) -> Vec<f64> {
    let n = graph.num_nodes();
    let mut a = Vec::with_capacity(n * d);
    for v in 0..n {
        let mut m = bias.to_vec();
        for (u, &w) in graph.row(v).iter().enumerate() {
            if w != 0.0 {
                for (mi, hi) in m.iter_mut().zip(&states[u * d..(u + 1) * d]) {
                    *mi += w * hi;
                }
            }
        }
        a.extend(m);
    }
    a
}

struct StepTrace {
    h_prev: Vec<f64>,
    msg: Vec<f64>,
    gru: Vec<GruTrace>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct GgnnTrace {
    steps: Vec<StepTrace>,
    h_final: Vec<f64>,
    r_pred: Vec<f64>,
}

fn check_dims(states: &NodeStates, graph: &PredicateGraph, params: &GgnnParams) -> Result<()> {
    if states.num_nodes() != graph.num_nodes() {
        return Err(Error::Input(format!(
            "{} node states for a {}-node graph",
            states.num_nodes(),
            graph.num_nodes()
        )));
    }
    if states.dim() != params.hidden_dim() {
        return Err(Error::Input(format!(
            "node states of width {} for hidden size {}",
            states.dim(),
            params.hidden_dim()
        )));
    }
    Ok(())
}

fn run(states: &NodeStates, graph: &PredicateGraph, params: &GgnnParams) -> Result<(Vec<f64>, Vec<StepTrace>)> {
    check_dims(states, graph, params)?;
    let d = params.hidden_dim();
    let n = graph.num_nodes();
    let mut h = states.h.clone();
    let mut trace = Vec::with_capacity(params.steps);
    for _ in 0..params.steps {
        let msg = messages(graph, &h, d, &params.bias);
        let mut next = Vec::with_capacity(n * d);
        let mut gru = Vec::with_capacity(n);
        for v in 0..n {
            let (hv, t) = params.gru.step(&msg[v * d..(v + 1) * d], &h[v * d..(v + 1) * d]);
            next.extend(hv);
            gru.push(t);
        }
        trace.push(StepTrace {
            h_prev: std::mem::replace(&mut h, next),
            msg,
            gru,
        });
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("GGNN propagation produced a non-finite state".into()));
    }
    Ok((h, trace))
}

/// Runs the `T` propagation steps.
pub fn propagate(states: &NodeStates, graph: &PredicateGraph, params: &GgnnParams) -> Result<NodeStates> {
    let (h, _) = run(states, graph, params)?;
    Ok(NodeStates {
        dim: params.hidden_dim(),
        h,
    })
}

/// Per-node output `o_v = O([h_v | r_pred_v])`.
pub fn graph_output(states: &NodeStates, r_pred: &[f64], params: &GgnnParams) -> Result<Vec<f64>> {
    if states.num_nodes() != r_pred.len() || states.dim() != params.hidden_dim() {
        return Err(Error::Input(format!(
            "graph output over {} nodes of width {} with {} logits and hidden size {}",
            states.num_nodes(),
            states.dim(),
            r_pred.len(),
            params.hidden_dim()
        )));
    }
    Ok(output_rows(&states.h, r_pred, params))
}

fn output_rows(h: &[f64], r_pred: &[f64], params: &GgnnParams) -> Vec<f64> {
    let d = params.hidden_dim();
    let mut x = vec![0.0; d + 1];
    r_pred
        .iter()
        .enumerate()
        .map(|(v, &r)| {
            x[..d].copy_from_slice(&h[v * d..(v + 1) * d]);
            x[d] = r;
            params.output.forward(&x)[0]
        })
        .collect()
}

impl GgnnParams {
    /// `init_nodes -> propagate -> graph_output` in one pass, keeping the trace
    /// for [`GgnnParams::backward`].
    pub fn forward(&self, graph: &PredicateGraph, r_pred: &[f64]) -> Result<(Vec<f64>, GgnnTrace)> {
        let init = init_nodes(r_pred, self.hidden_dim());
        let (h_final, steps) = run(&init, graph, self)?;
        let out = output_rows(&h_final, r_pred, self);
        Ok((
            out,
            GgnnTrace {
                steps,
                h_final,
                r_pred: r_pred.to_vec(),
            },
        ))
    }

    /// Given `dL/do`, accumulates parameter gradients into `grads` and returns
    /// `dL/dr_pred`.
    pub fn backward(&self, graph: &PredicateGraph, trace: &GgnnTrace, g_out: &[f64], grads: &mut GgnnParams) -> Vec<f64> {
        let d = self.hidden_dim();
        let n = trace.r_pred.len();
        let mut g_r = vec![0.0; n];
        let mut g_h = vec![0.0; n * d];
        let mut x = vec![0.0; d + 1];
        for v in 0..n {
            x[..d].copy_from_slice(&trace.h_final[v * d..(v + 1) * d]);
            x[d] = trace.r_pred[v];
            let gx = self.output.backward(&x, &[g_out[v]], &mut grads.output);
            g_h[v * d..(v + 1) * d].copy_from_slice(&gx[..d]);
            g_r[v] += gx[d];
        }
        for step in trace.steps.iter().rev() {
            let mut g_prev = vec![0.0; n * d];
            for v in 0..n {
                let (g_a, g_hv) = self.gru.step_backward(
                    &step.msg[v * d..(v + 1) * d],
                    &step.h_prev[v * d..(v + 1) * d],
                    &step.gru[v],
                    &g_h[v * d..(v + 1) * d],
                    &mut grads.gru,
                );
                for i in 0..d {
                    g_prev[v * d + i] += g_hv[i];
                    grads.bias[i] += g_a[i];
                }
                for (u, &w) in graph.row(v).iter().enumerate() {
                    if w != 0.0 {
                        for i in 0..d {
                            g_prev[u * d + i] += w * g_a[i];
                        }
                    }
                }
            }
            g_h = g_prev;
        }
        for v in 0..n {
            g_r[v] += g_h[v * d];
        }
        g_r
    }
}
