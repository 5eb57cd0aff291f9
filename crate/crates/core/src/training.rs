//! Two-stage training (rating head first, then the predicate model with the
//! rating head frozen) and finite-difference gradient checking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchor_graph::PredicateGraph;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::pair_rating::{OrmHead, OrmSample};
use crate::predicate_recognition::{PredicateModel, PrmSample};

/// Per-sample gradients are accumulated in fixed-size chunks and reduced in
/// chunk order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the rating loss in the first stage.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Heavy-ball momentum; `0` gives plain mini-batch gradient descent.
    pub momentum: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            learning_rate: 0.01,
            epochs: 100,
            seed: 0,
            batch_size: 32,
            momentum: 0.9,
            lr_decay: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// Mini-batch gradient descent with optional momentum.
///
/// `batch_grad(params, batch, grads)` returns the batch's mean loss and adds
/// the matching mean gradient into `grads`. The returned curve holds the
/// sample-weighted mean loss of every epoch.
fn descend<P, F>(mut params: P, num_samples: usize, cfg: &TrainConfig, batch_grad: F) -> Result<(P, Vec<f64>)>
where
    P: Params,
    F: Fn(&P, &[usize], &mut P) -> Result<f64>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut velocity = params.zeros_like();
    let mut lr = cfg.learning_rate;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            let loss = batch_grad(&params, batch, &mut grads)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite loss or gradient in epoch {epoch}")));
            }
            total += loss * batch.len() as f64;
            if cfg.momentum > 0.0 {
                let mut v = velocity.flatten();
                let g = grads.flatten();
                v.iter_mut().zip(&g).for_each(|(v, g)| *v = cfg.momentum * *v + g);
                velocity.unflatten(&v);
                params.add_scaled(&velocity, -lr);
            } else {
                params.add_scaled(&grads, -lr);
            }
        }
        curve.push(total / num_samples.max(1) as f64);
        lr *= cfg.lr_decay;
    }
    Ok((params, curve))
}

/// Sums per-chunk `(loss, grads)` in chunk order.
fn reduce_chunks<P: Params>(parts: Vec<(f64, P)>, grads: &mut P) -> f64 {
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grads.add_scaled(&g, 1.0);
    }
    loss
}

/// First stage: fits the rating head on labelled pairs by minimizing
/// `lambda * BCE`.
pub fn train_stage1(samples: &[OrmSample], head: OrmHead, cfg: &TrainConfig) -> Result<(OrmHead, Vec<f64>)> {
    let pos = samples.iter().filter(|s| s.positive).count();
    if pos == 0 || pos == samples.len() {
        return Err(Error::Config(format!(
            "rating data needs both classes ({pos} positive of {})",
            samples.len()
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.input.as_slice().len() != head.input_dim()) {
        return Err(Error::Input(format!(
            "rating sample of length {} for a head expecting {}",
            s.input.as_slice().len(),
            head.input_dim()
        )));
    }
    let lambda = cfg.lambda;
    descend(head, samples.len(), cfg, |h, batch, grads| {
        let n = batch.len() as f64;
        let parts: Vec<(f64, OrmHead)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = h.zeros_like();
                let refs: Vec<&OrmSample> = chunk.iter().map(|&i| &samples[i]).collect();
                // loss_and_grad averages over its chunk; rescale to the batch mean.
                let l = h.loss_and_grad(&refs, &mut g)?;
                let w = lambda * chunk.len() as f64 / n;
                let mut scaled = h.zeros_like();
                scaled.add_scaled(&g, w);
                Ok((l * w, scaled))
            })
            .collect::<Result<_>>()?;
        Ok(reduce_chunks(parts, grads))
    })
}

/// Second stage: fits the fusion layers and GGNN by minimizing the mean
/// predicate cross-entropy. Inputs come from the frozen first-stage features.
pub fn train_stage2(
    samples: &[PrmSample],
    graph: &PredicateGraph,
    model: PredicateModel,
    cfg: &TrainConfig,
) -> Result<(PredicateModel, Vec<f64>)> {
    let n_pred = model.num_predicates();
    if let Some(s) = samples.iter().find(|s| s.label >= n_pred) {
        return Err(Error::Input(format!("predicate label {} with {n_pred} predicates", s.label)));
    }
    if samples.is_empty() {
        return Err(Error::Config("no predicate training samples".into()));
    }
    descend(model, samples.len(), cfg, |m, batch, grads| {
        let w = 1.0 / batch.len() as f64;
        let parts: Vec<(f64, PredicateModel)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = m.zeros_like();
                let mut l = 0.0;
                for &i in chunk {
                    l += w * m.loss_and_grad(&samples[i], graph, w, &mut g)?;
                }
                Ok((l, g))
            })
            .collect::<Result<_>>()?;
        Ok(reduce_chunks(parts, grads))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter with the largest error, e.g. `hidden.weight[12]`.
    pub worst_param: String,
    pub checked: usize,
    pub pass: bool,
}

/// Denominator floor for the relative error, so that entries where both
/// gradients vanish compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `loss` around `params`,
/// entry by entry. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<P, F>(params: &P, analytic: &P, loss: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    P: Params,
    F: Fn(&P) -> Result<f64>,
{
    if !(1e-6..=1e-2).contains(&step) {
        return Err(Error::Config(format!("finite-difference step {step} outside [1e-6, 1e-2]")));
    }
    let names: Vec<String> = params
        .layout()
        .into_iter()
        .flat_map(|(name, len)| (0..len).map(move |i| format!("{name}[{i}]")))
        .collect();
    let base = params.flatten();
    let grad = analytic.flatten();
    if grad.len() != base.len() {
        return Err(Error::Input("analytic gradient does not match the parameter layout".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite analytic gradient at {}", names[i])));
    }
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut worst = (0.0f64, String::new());
    for i in 0..base.len() {
        flat[i] = base[i] + step;
        probe.unflatten(&flat);
        let up = loss(&probe)?;
        flat[i] = base[i] - step;
        probe.unflatten(&flat);
        let down = loss(&probe)?;
        flat[i] = base[i];
        let numeric = (up - down) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(Error::Numeric(format!("non-finite numerical gradient at {}", names[i])));
        }
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, names[i].clone());
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst.0,
        worst_param: worst.1,
        checked: base.len(),
        pass: worst.0 <= tol,
    })
}

/// Seeded random instances for every trainable composition, shared by the
/// test suites and the `gradcheck` command.
pub mod instances {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde::{Deserialize, Serialize};

    use super::{grad_check, GradCheckReport};
    use crate::anchor_graph::PredicateGraph;
    use crate::error::Result;
    use crate::geometry::{encode_relative_location, BBox};
    use crate::ggnn::GgnnParams;
    use crate::nn::{join, Params};
    use crate::pair_rating::{assemble_orm_input, OrmHead, OrmSample};
    use crate::predicate_recognition::{
        encode_language, EmbeddingTable, FusionMode, FusionParams, FusionShape, PredicateModel, PrmInput, PrmSample,
    };

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(rename_all = "lowercase")]
    pub enum Component {
        /// Rating head with binary cross-entropy.
        Orm,
        /// Fusion layers and predicate logits with cross-entropy, no GGNN.
        Fusion,
        /// GGNN alone, including the gradient to its node inputs.
        Ggnn,
        /// Fusion, GGNN and cross-entropy end to end.
        Prm,
    }

    pub fn random_box(rng: &mut impl Rng) -> BBox {
        BBox::new(
            rng.gen_range(0.0..50.0),
            rng.gen_range(0.0..50.0),
            rng.gen_range(2.0..30.0),
            rng.gen_range(2.0..30.0),
        )
        .expect("positive size")
    }

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Random graph: each unordered pair connected with probability 1/2,
    /// then row-normalized.
    pub fn random_graph(rng: &mut impl Rng, n: usize) -> PredicateGraph {
        let mut w = vec![0.0; n * n];
        for v in 0..n {
            for u in (v + 1)..n {
                if rng.gen_bool(0.5) {
                    w[v * n + u] = 1.0;
                    w[u * n + v] = 1.0;
                }
            }
        }
        PredicateGraph::from_weights((0..n).map(|i| format!("p{i}")).collect(), w).expect("valid weights")
    }

    fn random_prm_samples(rng: &mut impl Rng, shape: FusionShape, count: usize) -> Vec<PrmSample> {
        let mut table = EmbeddingTable::new(shape.lang_dim / 2);
        for w in ["a", "b", "c"] {
            table.insert(w, random_vec(rng, shape.lang_dim / 2)).unwrap();
        }
        let words = ["a", "b", "c"];
        (0..count)
            .map(|_| {
                let (s, o) = (random_box(rng), random_box(rng));
                PrmSample {
                    input: PrmInput {
                        vis: random_vec(rng, shape.vis_dim),
                        lang: encode_language(words[rng.gen_range(0..3)], words[rng.gen_range(0..3)], &table).unwrap(),
                        loc: encode_relative_location(&s, &o),
                    },
                    label: rng.gen_range(0..shape.num_predicates),
                }
            })
            .collect()
    }

    fn check_prm(rng: &mut ChaCha8Rng, mode: FusionMode, with_ggnn: bool, step: f64, tol: f64) -> Result<GradCheckReport> {
        let num_predicates = rng.gen_range(2..=5);
        let shape = FusionShape {
            vis_dim: rng.gen_range(2..=5),
            lang_dim: 2 * rng.gen_range(2..=4),
            fused_dim: rng.gen_range(2..=6),
            num_predicates,
        };
        let ggnn = if with_ggnn {
            Some(GgnnParams::init(rng.gen_range(1..=4), rng.gen_range(1..=3), rng)?)
        } else {
            None
        };
        let model = PredicateModel {
            fusion: FusionParams::init(shape, mode, rng),
            ggnn,
        };
        let graph = random_graph(rng, num_predicates);
        let samples = random_prm_samples(rng, shape, 3);
        let w = 1.0 / samples.len() as f64;
        let mut grads = model.zeros_like();
        for s in &samples {
            model.loss_and_grad(s, &graph, w, &mut grads)?;
        }
        let loss = |m: &PredicateModel| -> Result<f64> {
            let mut scratch = m.zeros_like();
            let mut l = 0.0;
            for s in &samples {
                l += w * m.loss_and_grad(s, &graph, w, &mut scratch)?;
            }
            Ok(l)
        };
        grad_check(&model, &grads, loss, step, tol)
    }

    /// GGNN parameters together with the node inputs, so both get checked.
    #[derive(Debug, Clone)]
    struct GgnnWithInput {
        params: GgnnParams,
        r_pred: Vec<f64>,
    }

    impl Params for GgnnWithInput {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
            self.params.visit(prefix, f);
            f(&join(prefix, "r_pred"), &self.r_pred);
        }

        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
            self.params.visit_mut(prefix, f);
            f(&join(prefix, "r_pred"), &mut self.r_pred);
        }
    }

    fn check_ggnn(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
        let n = rng.gen_range(2..=6);
        let d = rng.gen_range(1..=4);
        let t = rng.gen_range(1..=3);
        let graph = random_graph(rng, n);
        let x = GgnnWithInput {
            params: GgnnParams::init(d, t, rng)?,
            r_pred: random_vec(rng, n),
        };
        // Scalar objective: a fixed random projection of the outputs.
        let proj = random_vec(rng, n);
        let (_, trace) = x.params.forward(&graph, &x.r_pred)?;
        let mut grads = x.zeros_like();
        grads.r_pred = x.params.backward(&graph, &trace, &proj, &mut grads.params);
        let loss = |y: &GgnnWithInput| -> Result<f64> {
            let (o, _) = y.params.forward(&graph, &y.r_pred)?;
            Ok(o.iter().zip(&proj).map(|(a, b)| a * b).sum())
        };
        grad_check(&x, &grads, loss, step, tol)
    }

    const KINK_MARGIN: f64 = 1e-2;

    fn check_orm(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
        let n = rng.gen_range(1..=4);
        let head = OrmHead::init(n, rng.gen_range(2..=6), rng);
        // Central differences straddling a ReLU kink are meaningless, so
        // inputs that put a hidden unit within `KINK_MARGIN` of zero are redrawn.
        let samples: Vec<OrmSample> = (0..4)
            .map(|_| loop {
                let (s, o) = (random_box(rng), random_box(rng));
                let sample = OrmSample {
                    input: assemble_orm_input(&random_vec(rng, n), &random_vec(rng, n), &encode_relative_location(&s, &o))
                        .unwrap(),
                    positive: rng.gen_bool(0.5),
                };
                if head.hidden_preactivations(&sample.input).iter().all(|z| z.abs() > KINK_MARGIN) {
                    break sample;
                }
            })
            .collect();
        let refs: Vec<&OrmSample> = samples.iter().collect();
        let mut grads = head.zeros_like();
        head.loss_and_grad(&refs, &mut grads)?;
        let loss = |h: &OrmHead| -> Result<f64> {
            let mut scratch = h.zeros_like();
            h.loss_and_grad(&refs, &mut scratch)
        };
        grad_check(&head, &grads, loss, step, tol)
    }

    /// Builds the `seed`-th random instance of `component` and checks it.
    /// `Fusion` cycles through the three fusion modes by seed.
    pub fn check(component: Component, seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match component {
            Component::Orm => check_orm(&mut rng, step, tol),
            Component::Ggnn => check_ggnn(&mut rng, step, tol),
            Component::Fusion => {
                let mode = [FusionMode::Product, FusionMode::Concat, FusionMode::Average][(seed % 3) as usize];
                check_prm(&mut rng, mode, false, step, tol)
            }
            Component::Prm => check_prm(&mut rng, FusionMode::Product, true, step, tol),
        }
    }
}
