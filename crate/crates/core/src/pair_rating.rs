//! Object-pair rating: scores how likely an ordered (subject, object) pair of
//! detections is to take part in any relationship.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{tri_iou, BBox, RelLocEncoding, REL_LOC_DIM};
use crate::nn::{join, sigmoid, Linear, Params};

/// Rating-head input: `[feature(sub) | feature(ob) | rel_loc(sub, ob)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrmInput(Vec<f64>);

impl OrmInput {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Visual feature dimension `n` (input length is `2n + 14`).
    pub fn feature_dim(&self) -> usize {
        (self.0.len() - REL_LOC_DIM) / 2
    }

    /// `(sub, ob, loc)` slices.
    pub fn blocks(&self) -> (&[f64], &[f64], &[f64]) {
        let n = self.feature_dim();
        (&self.0[..n], &self.0[n..2 * n], &self.0[2 * n..])
    }
}

pub fn assemble_orm_input(sub_feat: &[f64], ob_feat: &[f64], loc: &RelLocEncoding) -> Result<OrmInput> {
    if sub_feat.len() != ob_feat.len() {
        return Err(Error::Input(format!(
            "subject feature has length {}, object feature {}",
            sub_feat.len(),
            ob_feat.len()
        )));
    }
    let mut v = Vec::with_capacity(2 * sub_feat.len() + REL_LOC_DIM);
    v.extend_from_slice(sub_feat);
    v.extend_from_slice(ob_feat);
    v.extend_from_slice(loc.as_slice());
    Ok(OrmInput(v))
}

/// Two fully connected layers with a rectifier between them and a scalar
/// output `h_orm`; the rating score is `sigmoid(h_orm)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrmHead {
    pub hidden: Linear,
    pub output: Linear,
}

/// Intermediate values kept for the backward pass.
struct OrmTrace {
    hidden_pre: Vec<f64>,
    hidden_act: Vec<f64>,
    logit: f64,
}

impl OrmHead {
    pub fn init(feature_dim: usize, hidden_width: usize, rng: &mut impl Rng) -> Self {
        let in_dim = 2 * feature_dim + REL_LOC_DIM;
        OrmHead {
            hidden: Linear::init(in_dim, hidden_width, rng),
            output: Linear::init(hidden_width, 1, rng),
        }
    }

    pub fn zeros(feature_dim: usize, hidden_width: usize) -> Self {
        OrmHead {
            hidden: Linear::zeros(2 * feature_dim + REL_LOC_DIM, hidden_width),
            output: Linear::zeros(hidden_width, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        (self.input_dim() - REL_LOC_DIM) / 2
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.out_dim()
    }

    fn trace(&self, x: &[f64]) -> OrmTrace {
        let hidden_pre = self.hidden.forward(x);
        let hidden_act: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
        let logit = self.output.forward(&hidden_act)[0];
        OrmTrace {
            hidden_pre,
            hidden_act,
            logit,
        }
    }

    /// Hidden-layer values before the ReLU.
    pub(crate) fn hidden_preactivations(&self, input: &OrmInput) -> Vec<f64> {
        self.hidden.forward(input.as_slice())
    }

    /// The pre-sigmoid output `h_orm`.
    pub fn logit(&self, input: &OrmInput) -> Result<f64> {
        self.hidden.check_input(input.as_slice(), "rating head")?;
        let h = self.trace(input.as_slice()).logit;
        if !h.is_finite() {
            return Err(Error::Numeric("rating head produced a non-finite activation".into()));
        }
        Ok(h)
    }

    /// Backpropagates `dL/dh_orm` for one input, accumulating into `grads`.
    pub fn backward(&self, input: &OrmInput, grad_logit: f64, grads: &mut OrmHead) {
        let x = input.as_slice();
        let t = self.trace(x);
        let g_act = self.output.backward(&t.hidden_act, &[grad_logit], &mut grads.output);
        let g_pre: Vec<f64> = g_act
            .iter()
            .zip(&t.hidden_pre)
            .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
            .collect();
        self.hidden.backward_params(x, &g_pre, &mut grads.hidden);
    }

    /// Mean binary cross-entropy over `samples` and its gradient (added to
    /// `grads`, already divided by the batch size).
    pub fn loss_and_grad(&self, samples: &[&OrmSample], grads: &mut OrmHead) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Config("empty rating batch".into()));
        }
        let n = samples.len() as f64;
        let mut loss = 0.0;
        for s in samples {
            let h = self.logit(&s.input)?;
            let y = if s.positive { 1.0 } else { 0.0 };
            loss += bce_with_logit(h, y);
            self.backward(&s.input, (sigmoid(h) - y) / n, grads);
        }
        Ok(loss / n)
    }
}

impl Params for OrmHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Probability that the pair is interconnected, kept strictly inside `(0, 1)`.
pub fn orm_score(input: &OrmInput, head: &OrmHead) -> Result<f64> {
    Ok(sigmoid(head.logit(input)?).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
}

/// `-[y ln s + (1-y) ln(1-s)]` with `s = sigmoid(h)`, evaluated without
/// forming `s`.
fn bce_with_logit(h: f64, y: f64) -> f64 {
    // ln(1 + e^{-|h|}) + max(h, 0) - y h
    (-h.abs()).exp().ln_1p() + h.max(0.0) - y * h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrmLabel {
    Positive,
    Negative,
    Ignore,
}

pub fn assign_orm_label(
    pair: (&BBox, &BBox),
    gt_pairs: &[(BBox, BBox)],
    thresh_high: f64,
    thresh_low: f64,
) -> Result<OrmLabel> {
    if !(0.0..=1.0).contains(&thresh_low) || !(0.0..=1.0).contains(&thresh_high) || thresh_low > thresh_high {
        return Err(Error::Config(format!(
            "rating thresholds must satisfy 0 <= low ({thresh_low}) <= high ({thresh_high}) <= 1"
        )));
    }
    let t = tri_iou(pair, gt_pairs);
    Ok(if t >= thresh_high {
        OrmLabel::Positive
    } else if t <= thresh_low {
        OrmLabel::Negative
    } else {
        OrmLabel::Ignore
    })
}

/// Mean binary cross-entropy of probabilities against `{0, 1}` labels.
pub fn orm_loss(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Config("empty rating batch".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Numeric(format!("rating score {s} outside (0, 1)")));
        }
        total -= if y { s.ln() } else { (1.0 - s).ln() };
    }
    Ok(total / scores.len() as f64)
}

/// One labelled training example for the rating head.
#[derive(Debug, Clone, PartialEq)]
pub struct OrmSample {
    pub input: OrmInput,
    pub positive: bool,
}

/// Downsamples the majority class to at most `max_ratio` times the minority
/// class. Output keeps the input order of the retained samples.
pub fn balance_samples(samples: Vec<OrmSample>, max_ratio: f64, rng: &mut impl Rng) -> Vec<OrmSample> {
    let pos = samples.iter().filter(|s| s.positive).count();
    let neg = samples.len() - pos;
    let (minority, majority_is_pos) = if pos <= neg { (pos, false) } else { (neg, true) };
    let cap = ((minority as f64) * max_ratio).floor() as usize;
    let majority = samples.len() - minority;
    if minority == 0 || majority <= cap {
        return samples;
    }
    let mut majority_idx: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.positive == majority_is_pos)
        .map(|(i, _)| i)
        .collect();
    majority_idx.shuffle(rng);
    let mut keep = vec![true; samples.len()];
    for &i in &majority_idx[cap..] {
        keep[i] = false;
    }
    samples
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect()
}
