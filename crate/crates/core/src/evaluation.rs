//! Recall@n,k for predicate, phrase and relationship detection.
//!
//! `n` counts object-pair proposals: the `n` best-scoring pairs of an image
//! each contribute their `k` highest-scoring predicates. For `k = 1` this is
//! the same as keeping the top `n` single predictions per image.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, union_box, BBox};
use crate::proposing::PairProposal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTriplet {
    pub sub_box: BBox,
    pub ob_box: BBox,
    pub sub_cat: usize,
    pub ob_cat: usize,
    pub predicate: usize,
}

impl GroundTruthTriplet {
    pub fn label_key(&self) -> (usize, usize, usize) {
        (self.sub_cat, self.predicate, self.ob_cat)
    }

    /// Total order on content, used to break ties between equally good matches.
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        let a: [f64; 8] = boxes_of(self);
        let b: [f64; 8] = boxes_of(other);
        a.iter()
            .zip(&b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then(self.label_key().cmp(&other.label_key()))
    }
}

fn boxes_of(t: &GroundTruthTriplet) -> [f64; 8] {
    let s: [f64; 4] = t.sub_box.into();
    let o: [f64; 4] = t.ob_box.into();
    [s[0], s[1], s[2], s[3], o[0], o[1], o[2], o[3]]
}

/// A pair together with the final score of every predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair: PairProposal,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub pair: PairProposal,
    /// Position of the pair in the input list.
    pub pair_index: usize,
    pub predicate: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Ground-truth pairs given; only the predicate must be right.
    Predicate,
    /// Labels right and the union box localized.
    Phrase,
    /// Labels right and both boxes localized.
    Relationship,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Predicate => "predicate",
            Task::Phrase => "phrase",
            Task::Relationship => "relationship",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub n: usize,
    pub k: usize,
    pub recall: f64,
    pub matched: usize,
    pub total_gt: usize,
}

/// Indices of the `k` best predicates, best first (ties by predicate id).
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Keeps the `n` best pairs (by their best predicate score) with their `k`
/// best predicates each, sorted by descending score, then pair index, then
/// predicate id.
pub fn rank_predictions(per_pair: &[ScoredPair], k: usize, n: usize) -> Vec<RankedPrediction> {
    let k = k.max(1);
    let best: Vec<f64> = per_pair
        .iter()
        .map(|p| p.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut pairs: Vec<usize> = (0..per_pair.len()).filter(|&i| !per_pair[i].scores.is_empty()).collect();
    pairs.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
    pairs.truncate(n);
    let mut out: Vec<RankedPrediction> = pairs
        .into_iter()
        .flat_map(|i| {
            let p = &per_pair[i];
            top_k(&p.scores, k).into_iter().map(move |pred| RankedPrediction {
                pair: p.pair.clone(),
                pair_index: i,
                predicate: pred,
                score: p.scores[pred],
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.pair_index.cmp(&b.pair_index))
            .then(a.predicate.cmp(&b.predicate))
    });
    out
}

/// Localization quality of a label-matched prediction, or `None` when it does
/// not localize the ground truth.
pub fn localization(pred: &RankedPrediction, gt: &GroundTruthTriplet, task: Task, iou_thresh: f64) -> Option<f64> {
    if pred.predicate != gt.predicate || pred.pair.sub_cat != gt.sub_cat || pred.pair.ob_cat != gt.ob_cat {
        return None;
    }
    let p = &pred.pair;
    match task {
        Task::Predicate => {
            // The pair is a ground-truth pair; it must be this one.
            let exact = iou(&p.sub_box, &gt.sub_box) >= 1.0 - 1e-9 && iou(&p.ob_box, &gt.ob_box) >= 1.0 - 1e-9;
            exact.then_some(1.0)
        }
        Task::Phrase => {
            let q = iou(&union_box(&p.sub_box, &p.ob_box), &union_box(&gt.sub_box, &gt.ob_box));
            (q >= iou_thresh).then_some(q)
        }
        Task::Relationship => {
            let (qs, qo) = (iou(&p.sub_box, &gt.sub_box), iou(&p.ob_box, &gt.ob_box));
            (qs >= iou_thresh && qo >= iou_thresh).then_some(qs.min(qo))
        }
    }
}

/// Matches predictions to ground truth in rank order, each ground truth at
/// most once. A prediction that cannot find a free ground truth may move an
/// earlier prediction to another ground truth it also localizes (augmenting
/// path), but an earlier prediction never loses its match. The count is the
/// largest possible, which makes it independent of ground-truth order.
pub fn match_recall(predictions: &[RankedPrediction], gts: &[GroundTruthTriplet], task: Task, iou_thresh: f64) -> (usize, usize) {
    // Candidates per prediction, best localized first.
    let candidates: Vec<Vec<usize>> = predictions
        .iter()
        .map(|pred| {
            let mut c: Vec<(usize, f64)> = gts
                .iter()
                .enumerate()
                .filter_map(|(g, gt)| localization(pred, gt, task, iou_thresh).map(|q| (g, q)))
                .collect();
            c.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| gts[a.0].canonical_cmp(&gts[b.0])));
            c.into_iter().map(|(g, _)| g).collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gts.len()];
    let mut matched = 0;
    for p in 0..predictions.len() {
        let mut seen = vec![false; gts.len()];
        if augment(p, &candidates, &mut owner, &mut seen) {
            matched += 1;
        }
    }
    (matched, gts.len())
}

fn augment(p: usize, candidates: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &g in &candidates[p] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        let free = match owner[g] {
            None => true,
            Some(q) => augment(q, candidates, owner, seen),
        };
        if free {
            owner[g] = Some(p);
            return true;
        }
    }
    false
}

/// Recall report for one image. No ground truth counts as recall 1.
pub fn evaluate_image(
    per_pair: &[ScoredPair],
    gts: &[GroundTruthTriplet],
    task: Task,
    n: usize,
    k: usize,
    iou_thresh: f64,
) -> EvalReport {
    let ranked = rank_predictions(per_pair, k, n);
    let (matched, total_gt) = match_recall(&ranked, gts, task, iou_thresh);
    EvalReport {
        task,
        n,
        k,
        recall: if total_gt == 0 { 1.0 } else { matched as f64 / total_gt as f64 },
        matched,
        total_gt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Matched over total ground truth across all images.
    #[default]
    Micro,
    /// Mean of per-image recall over images with ground truth.
    Macro,
}

/// Combines per-image reports in the given order.
pub fn aggregate(task: Task, n: usize, k: usize, reports: &[EvalReport], averaging: Averaging) -> EvalReport {
    let matched: usize = reports.iter().map(|r| r.matched).sum();
    let total_gt: usize = reports.iter().map(|r| r.total_gt).sum();
    let recall = match averaging {
        _ if total_gt == 0 => 1.0,
        Averaging::Micro => matched as f64 / total_gt as f64,
        Averaging::Macro => {
            let with_gt: Vec<f64> = reports.iter().filter(|r| r.total_gt > 0).map(|r| r.recall).collect();
            with_gt.iter().sum::<f64>() / with_gt.len() as f64
        }
    };
    EvalReport {
        task,
        n,
        k,
        recall,
        matched,
        total_gt,
    }
}

/// Keeps the test triplets whose `(sub_cat, predicate, ob_cat)` never occurs in
/// training.
pub fn zero_shot_filter(test_gts: &[GroundTruthTriplet], train_triplets: &HashSet<(usize, usize, usize)>) -> Vec<GroundTruthTriplet> {
    test_gts
        .iter()
        .filter(|t| !train_triplets.contains(&t.label_key()))
        .copied()
        .collect()
}
