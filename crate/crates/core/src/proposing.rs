//! Pair proposing: combine rating and objectiveness into a proposal score and
//! run the pair-level greedy suppression (i-NMS).

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::{encode_relative_location, iou, BBox};
use crate::pair_rating::{assemble_orm_input, orm_score, OrmHead};

/// An ordered (subject, object) pair of detections with its proposal score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProposal {
    pub sub_idx: usize,
    pub ob_idx: usize,
    pub sub_box: BBox,
    pub ob_box: BBox,
    pub sub_cat: usize,
    pub ob_cat: usize,
    /// Rating-head probability `s_orm`.
    pub rating: f64,
    /// Combined proposal score `s_orm * p_sub * p_ob`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposingConfig {
    /// Maximum number of proposals kept.
    pub n_o: usize,
    /// Suppression threshold on the product of subject and object IoU.
    pub n_t: f64,
    /// Detections below this objectiveness are not paired at all.
    pub objectiveness_floor: f64,
}

impl Default for ProposingConfig {
    fn default() -> Self {
        ProposingConfig {
            n_o: 110,
            n_t: 0.25,
            objectiveness_floor: 0.05,
        }
    }
}

impl ProposingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_o == 0 {
            return Err(Error::Config("n_o must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.n_t) {
            return Err(Error::Config(format!("n_t = {} outside [0, 1]", self.n_t)));
        }
        if !(0.0..=1.0).contains(&self.objectiveness_floor) {
            return Err(Error::Config(format!(
                "objectiveness floor {} outside [0, 1]",
                self.objectiveness_floor
            )));
        }
        Ok(())
    }
}

fn in_unit(v: f64) -> bool {
    v > 0.0 && v <= 1.0
}

/// `s_orm * p_sub * p_ob`; every factor must lie in `(0, 1]`.
pub fn proposal_score(s_orm: f64, p_sub: f64, p_ob: f64) -> Result<f64> {
    if !(in_unit(s_orm) && in_unit(p_sub) && in_unit(p_ob)) {
        return Err(Error::Input(format!(
            "proposal score factors ({s_orm}, {p_sub}, {p_ob}) must lie in (0, 1]"
        )));
    }
    Ok(s_orm * p_sub * p_ob)
}

/// Descending score, then ascending `(sub_idx, ob_idx)`.
pub fn proposal_order(a: &PairProposal, b: &PairProposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.sub_idx.cmp(&b.sub_idx))
        .then(a.ob_idx.cmp(&b.ob_idx))
}

/// Whether `kept` suppresses `cand`: same category pair and product IoU at
/// least `n_t`.
pub fn suppresses(kept: &PairProposal, cand: &PairProposal, n_t: f64) -> bool {
    kept.sub_cat == cand.sub_cat
        && kept.ob_cat == cand.ob_cat
        && iou(&kept.sub_box, &cand.sub_box) * iou(&kept.ob_box, &cand.ob_box) >= n_t
}

/// Scores every ordered pair `i != j` of detections at or above the
/// objectiveness floor. Output is in `(i, j)` enumeration order.
pub fn score_pairs(detections: &DetectionSet, rating: &OrmHead, floor: f64) -> Result<Vec<PairProposal>> {
    if let Some(n) = detections.feature_dim() {
        if n != rating.feature_dim() {
            return Err(Error::Input(format!(
                "detections carry {n}-dim features but the rating head expects {}",
                rating.feature_dim()
            )));
        }
    }
    let kept: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].objectiveness >= floor)
        .collect();
    let pairs: Vec<(usize, usize)> = kept
        .iter()
        .flat_map(|&i| kept.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let (s, o) = (&detections[i], &detections[j]);
            let loc = encode_relative_location(&s.bbox, &o.bbox);
            let input = assemble_orm_input(&s.feature, &o.feature, &loc)?;
            let rating_score = orm_score(&input, rating)?;
            Ok(PairProposal {
                sub_idx: i,
                ob_idx: j,
                sub_box: s.bbox,
                ob_box: o.bbox,
                sub_cat: s.category,
                ob_cat: o.category,
                rating: rating_score,
                score: proposal_score(rating_score, s.objectiveness, o.objectiveness)?,
            })
        })
        .collect()
}

/// Greedy pair suppression over an already scored pool.
///
/// Repeatedly emits the best remaining pair and drops every remaining pair
/// with the same category pair whose product IoU with it reaches `n_t`, until
/// the pool is empty or `n_o` pairs were emitted.
pub fn suppress(mut pool: Vec<PairProposal>, n_o: usize, n_t: f64) -> Vec<PairProposal> {
    pool.sort_by(proposal_order);
    let mut alive = vec![true; pool.len()];
    let mut out = Vec::new();
    for m in 0..pool.len() {
        if out.len() >= n_o {
            break;
        }
        if !alive[m] {
            continue;
        }
        let kept = &pool[m];
        for (c, flag) in alive.iter_mut().enumerate().skip(m + 1) {
            if *flag && suppresses(kept, &pool[c], n_t) {
                *flag = false;
            }
        }
        out.push(kept.clone());
    }
    out
}

/// Full proposing step for one image. Fewer than two usable detections give
/// an empty list.
pub fn i_nms(detections: &DetectionSet, rating: &OrmHead, cfg: &ProposingConfig) -> Result<Vec<PairProposal>> {
    cfg.validate()?;
    let pool = score_pairs(detections, rating, cfg.objectiveness_floor)?;
    Ok(suppress(pool, cfg.n_o, cfg.n_t))
}
