//! Predicate recognition: visual, language and location features are mapped to
//! a common width and fused, a linear layer turns the fused vector into one
//! logit per predicate, and the GGNN output over the predicate graph is added
//! to those logits before the softmax.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchor_graph::PredicateGraph;
use crate::error::{Error, Result};
use crate::geometry::{RelLocEncoding, REL_LOC_DIM};
use crate::ggnn::GgnnParams;
use crate::nn::{join, log_sum_exp, softmax, Linear, Params};

/// Word vectors keyed by word.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, v: Vec<f64>) -> Result<()> {
        let word = word.into();
        if v.len() != self.dim {
            return Err(Error::Input(format!(
                "embedding for `{word}` has length {}, table dimension is {}",
                v.len(),
                self.dim
            )));
        }
        self.vectors.insert(word, v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    /// Words in lexicographic order.
    pub fn words(&self) -> Vec<&str> {
        let mut w: Vec<&str> = self.vectors.keys().map(String::as_str).collect();
        w.sort_unstable();
        w
    }

    /// Unit-norm vector for a label. A label present verbatim is used as is;
    /// otherwise its whitespace-separated words are averaged.
    pub fn label_vector(&self, label: &str) -> Result<Vec<f64>> {
        let mut v = match self.vectors.get(label) {
            Some(v) => v.clone(),
            None => {
                let words: Vec<&str> = label.split_whitespace().collect();
                if words.is_empty() {
                    return Err(Error::Lookup(label.to_string()));
                }
                let mut acc = vec![0.0; self.dim];
                for w in &words {
                    let wv = self.vectors.get(*w).ok_or_else(|| Error::Lookup(label.to_string()))?;
                    acc.iter_mut().zip(wv).for_each(|(a, x)| *a += x);
                }
                acc.iter_mut().for_each(|a| *a /= words.len() as f64);
                acc
            }
        };
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric(format!("embedding for `{label}` has zero or non-finite norm")));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// `[embed(sub) | embed(ob)]`, each half unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEncoding(Vec<f64>);

impl LanguageEncoding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn halves(&self) -> (&[f64], &[f64]) {
        self.0.split_at(self.0.len() / 2)
    }
}

pub fn encode_language(sub_label: &str, ob_label: &str, embeddings: &EmbeddingTable) -> Result<LanguageEncoding> {
    let mut v = embeddings.label_vector(sub_label)?;
    v.extend(embeddings.label_vector(ob_label)?);
    Ok(LanguageEncoding(v))
}

/// How the three mapped modalities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Elementwise product of the three mapped vectors.
    #[default]
    Product,
    /// Concatenation followed by one affine layer back to the fused width.
    Concat,
    /// Elementwise mean.
    Average,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub mode: FusionMode,
    pub map_vis: Linear,
    pub map_lang: Linear,
    pub map_loc: Linear,
    /// Only present for [`FusionMode::Concat`].
    pub map_concat: Option<Linear>,
    pub to_pred: Linear,
}

/// Layer sizes of the predicate model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionShape {
    pub vis_dim: usize,
    pub lang_dim: usize,
    pub fused_dim: usize,
    pub num_predicates: usize,
}

impl FusionParams {
    pub fn init(shape: FusionShape, mode: FusionMode, rng: &mut impl Rng) -> Self {
        let m = shape.fused_dim;
        FusionParams {
            mode,
            map_vis: Linear::init(shape.vis_dim, m, rng),
            map_lang: Linear::init(shape.lang_dim, m, rng),
            map_loc: Linear::init(REL_LOC_DIM, m, rng),
            map_concat: (mode == FusionMode::Concat).then(|| Linear::init(3 * m, m, rng)),
            to_pred: Linear::init(m, shape.num_predicates, rng),
        }
    }

    pub fn zeros(shape: FusionShape, mode: FusionMode) -> Self {
        let m = shape.fused_dim;
        FusionParams {
            mode,
            map_vis: Linear::zeros(shape.vis_dim, m),
            map_lang: Linear::zeros(shape.lang_dim, m),
            map_loc: Linear::zeros(REL_LOC_DIM, m),
            map_concat: (mode == FusionMode::Concat).then(|| Linear::zeros(3 * m, m)),
            to_pred: Linear::zeros(m, shape.num_predicates),
        }
    }

    pub fn shape(&self) -> FusionShape {
        FusionShape {
            vis_dim: self.map_vis.in_dim(),
            lang_dim: self.map_lang.in_dim(),
            fused_dim: self.map_vis.out_dim(),
            num_predicates: self.to_pred.out_dim(),
        }
    }
}

impl Params for FusionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.map_vis.visit(&join(prefix, "map_vis"), f);
        self.map_lang.visit(&join(prefix, "map_lang"), f);
        self.map_loc.visit(&join(prefix, "map_loc"), f);
        if let Some(c) = &self.map_concat {
            c.visit(&join(prefix, "map_concat"), f);
        }
        self.to_pred.visit(&join(prefix, "to_pred"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.map_vis.visit_mut(&join(prefix, "map_vis"), f);
        self.map_lang.visit_mut(&join(prefix, "map_lang"), f);
        self.map_loc.visit_mut(&join(prefix, "map_loc"), f);
        if let Some(c) = self.map_concat.as_mut() {
            c.visit_mut(&join(prefix, "map_concat"), f);
        }
        self.to_pred.visit_mut(&join(prefix, "to_pred"), f);
    }
}

struct FuseTrace {
    v: Vec<f64>,
    l: Vec<f64>,
    o: Vec<f64>,
    cat: Vec<f64>,
    fused: Vec<f64>,
}

fn fuse_traced(vis: &[f64], lang: &[f64], loc: &[f64], p: &FusionParams) -> Result<FuseTrace> {
    p.map_vis.check_input(vis, "visual feature")?;
    p.map_lang.check_input(lang, "language encoding")?;
    p.map_loc.check_input(loc, "relative location")?;
    let v = p.map_vis.forward(vis);
    let l = p.map_lang.forward(lang);
    let o = p.map_loc.forward(loc);
    let mut cat = Vec::new();
    let fused = match p.mode {
        FusionMode::Product => (0..v.len()).map(|i| v[i] * l[i] * o[i]).collect(),
        FusionMode::Average => (0..v.len()).map(|i| (v[i] + l[i] + o[i]) / 3.0).collect(),
        FusionMode::Concat => {
            cat = [v.as_slice(), &l, &o].concat();
            p.map_concat
                .as_ref()
                .ok_or_else(|| Error::Config("concat fusion without its mapping layer".into()))?
                .forward(&cat)
        }
    };
    Ok(FuseTrace { v, l, o, cat, fused })
}

/// Fused relationship representation of width `m`.
pub fn fuse(vis: &[f64], lang: &LanguageEncoding, loc: &RelLocEncoding, params: &FusionParams) -> Result<Vec<f64>> {
    Ok(fuse_traced(vis, lang.as_slice(), loc.as_slice(), params)?.fused)
}

/// Probabilities over predicates; entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateDistribution(Vec<f64>);

impl PredicateDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!("not a probability distribution (sum {sum})")));
        }
        Ok(PredicateDistribution(probs))
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite predicate logits".into()));
        }
        Ok(PredicateDistribution(softmax(logits)))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }
}

/// Logits `r_pred + r_ggnn` for a fused vector (`r_ggnn` omitted without a GGNN).
pub fn predicate_logits(
    fused: &[f64],
    graph: &PredicateGraph,
    fusion: &FusionParams,
    ggnn: Option<&GgnnParams>,
) -> Result<Vec<f64>> {
    fusion.to_pred.check_input(fused, "fused representation")?;
    let mut logits = fusion.to_pred.forward(fused);
    if let Some(g) = ggnn {
        check_graph(graph, logits.len())?;
        let (r_ggnn, _) = g.forward(graph, &logits)?;
        logits.iter_mut().zip(r_ggnn).for_each(|(a, b)| *a += b);
    }
    Ok(logits)
}

fn check_graph(graph: &PredicateGraph, n: usize) -> Result<()> {
    if graph.num_nodes() != n {
        return Err(Error::Input(format!(
            "predicate graph has {} nodes but the model predicts {n} predicates",
            graph.num_nodes()
        )));
    }
    Ok(())
}

pub fn predict(
    fused: &[f64],
    graph: &PredicateGraph,
    fusion: &FusionParams,
    ggnn: &GgnnParams,
) -> Result<PredicateDistribution> {
    PredicateDistribution::from_logits(&predicate_logits(fused, graph, fusion, Some(ggnn))?)
}

/// Mean negative log-probability of the labelled predicate.
pub fn prm_loss(probs_batch: &[PredicateDistribution], labels: &[usize]) -> Result<f64> {
    if probs_batch.is_empty() {
        return Err(Error::Config("empty predicate batch".into()));
    }
    if probs_batch.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} distributions but {} labels",
            probs_batch.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &y) in probs_batch.iter().zip(labels) {
        let py = *p
            .as_slice()
            .get(y)
            .ok_or_else(|| Error::Index(format!("predicate label {y} of {}", p.as_slice().len())))?;
        if py <= 0.0 {
            return Err(Error::Numeric(format!("zero probability at label {y}")));
        }
        total -= py.ln();
    }
    Ok(total / labels.len() as f64)
}

/// Final detection scores of every predicate for one pair:
/// `p_sub * p_ob * s_tilde * probs`.
pub fn infer_scores(p_sub: f64, p_ob: f64, probs: &PredicateDistribution, s_tilde: f64) -> Result<Vec<f64>> {
    for (name, v) in [("p_sub", p_sub), ("p_ob", p_ob), ("s_tilde", s_tilde)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Input(format!("{name} = {v} outside (0, 1]")));
        }
    }
    let scale = p_sub * p_ob * s_tilde;
    Ok(probs.as_slice().iter().map(|p| p * scale).collect())
}

/// Everything the predicate model sees for one (subject, object) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PrmInput {
    pub vis: Vec<f64>,
    pub lang: LanguageEncoding,
    pub loc: RelLocEncoding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrmSample {
    pub input: PrmInput,
    pub label: usize,
}

/// Fusion layers plus the optional GGNN.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateModel {
    pub fusion: FusionParams,
    pub ggnn: Option<GgnnParams>,
}

impl Params for PredicateModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.fusion.visit(&join(prefix, "fusion"), f);
        if let Some(g) = &self.ggnn {
            g.visit(&join(prefix, "ggnn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        if let Some(g) = self.ggnn.as_mut() {
            g.visit_mut(&join(prefix, "ggnn"), f);
        }
    }
}

impl PredicateModel {
    pub fn num_predicates(&self) -> usize {
        self.fusion.to_pred.out_dim()
    }

    pub fn logits(&self, input: &PrmInput, graph: &PredicateGraph) -> Result<Vec<f64>> {
        let fused = fuse(&input.vis, &input.lang, &input.loc, &self.fusion)?;
        predicate_logits(&fused, graph, &self.fusion, self.ggnn.as_ref())
    }

    pub fn predict(&self, input: &PrmInput, graph: &PredicateGraph) -> Result<PredicateDistribution> {
        PredicateDistribution::from_logits(&self.logits(input, graph)?)
    }

    /// Cross-entropy of one sample; gradient (scaled by `weight`) added to `grads`.
    pub fn loss_and_grad(&self, sample: &PrmSample, graph: &PredicateGraph, weight: f64, grads: &mut PredicateModel) -> Result<f64> {
        let n = self.num_predicates();
        if sample.label >= n {
            return Err(Error::Input(format!("predicate label {} of {n}", sample.label)));
        }
        let x = &sample.input;
        let ft = fuse_traced(&x.vis, x.lang.as_slice(), x.loc.as_slice(), &self.fusion)?;
        let r_pred = self.fusion.to_pred.forward(&ft.fused);
        let mut logits = r_pred.clone();
        let ggnn_trace = match &self.ggnn {
            Some(g) => {
                check_graph(graph, n)?;
                let (r_ggnn, t) = g.forward(graph, &r_pred)?;
                logits.iter_mut().zip(&r_ggnn).for_each(|(a, b)| *a += b);
                Some(t)
            }
            None => None,
        };
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite predicate logits".into()));
        }
        let lse = log_sum_exp(&logits);
        let loss = lse - logits[sample.label];

        let mut g_logits: Vec<f64> = logits.iter().map(|l| weight * (l - lse).exp()).collect();
        g_logits[sample.label] -= weight;
        let mut g_r_pred = g_logits.clone();
        if let (Some(g), Some(t), Some(gg)) = (&self.ggnn, &ggnn_trace, grads.ggnn.as_mut()) {
            let back = g.backward(graph, t, &g_logits, gg);
            g_r_pred.iter_mut().zip(back).for_each(|(a, b)| *a += b);
        }
        let g_fused = self.fusion.to_pred.backward(&ft.fused, &g_r_pred, &mut grads.fusion.to_pred);

        let m = g_fused.len();
        let (g_v, g_l, g_o): (Vec<f64>, Vec<f64>, Vec<f64>) = match self.fusion.mode {
            FusionMode::Product => (
                (0..m).map(|i| g_fused[i] * ft.l[i] * ft.o[i]).collect(),
                (0..m).map(|i| g_fused[i] * ft.v[i] * ft.o[i]).collect(),
                (0..m).map(|i| g_fused[i] * ft.v[i] * ft.l[i]).collect(),
            ),
            FusionMode::Average => {
                let g: Vec<f64> = g_fused.iter().map(|g| g / 3.0).collect();
                (g.clone(), g.clone(), g)
            }
            FusionMode::Concat => {
                let (layer, grad_layer) = match (&self.fusion.map_concat, grads.fusion.map_concat.as_mut()) {
                    (Some(l), Some(g)) => (l, g),
                    _ => return Err(Error::Config("concat fusion without its mapping layer".into())),
                };
                let g_cat = layer.backward(&ft.cat, &g_fused, grad_layer);
                (g_cat[..m].to_vec(), g_cat[m..2 * m].to_vec(), g_cat[2 * m..].to_vec())
            }
        };
        self.fusion.map_vis.backward_params(&x.vis, &g_v, &mut grads.fusion.map_vis);
        self.fusion.map_lang.backward_params(x.lang.as_slice(), &g_l, &mut grads.fusion.map_lang);
        self.fusion.map_loc.backward_params(x.loc.as_slice(), &g_o, &mut grads.fusion.map_loc);
        Ok(loss)
    }
}
