//! Location anchors and the predicate graph.
//!
//! Each annotated pair is rasterized into two `R x R` binary masks over its
//! union box (one for the subject, one for the object). Averaging the masks of
//! all instances of a predicate gives its location anchor. Predicates whose
//! anchors are close in summed squared error, or whose names contain one
//! another as whole words, are connected in the predicate graph.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{union_box, BBox};

/// Averaged subject and object masks of one predicate, row-major `R x R`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationAnchor {
    resolution: usize,
    pub sub_mask: Vec<f64>,
    pub ob_mask: Vec<f64>,
    pub count: usize,
}

impl LocationAnchor {
    pub fn empty(resolution: usize) -> Self {
        LocationAnchor {
            resolution,
            sub_mask: vec![0.0; resolution * resolution],
            ob_mask: vec![0.0; resolution * resolution],
            count: 0,
        }
    }

    pub fn from_masks(resolution: usize, sub_mask: Vec<f64>, ob_mask: Vec<f64>, count: usize) -> Result<Self> {
        let cells = resolution * resolution;
        if sub_mask.len() != cells || ob_mask.len() != cells {
            return Err(Error::Input(format!(
                "anchor masks must have {cells} cells, got {} and {}",
                sub_mask.len(),
                ob_mask.len()
            )));
        }
        if sub_mask.iter().chain(&ob_mask).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("anchor mask entries must lie in [0, 1]".into()));
        }
        Ok(LocationAnchor {
            resolution,
            sub_mask,
            ob_mask,
            count,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }
}

/// One training annotation: subject box, object box and predicate id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairAnnotation {
    pub sub: BBox,
    pub ob: BBox,
    pub predicate: usize,
}

/// Binary mask of `b` over an `R x R` grid spanning `frame`: a cell is set iff
/// its center lies inside `b`.
pub fn rasterize(b: &BBox, frame: &BBox, resolution: usize) -> Vec<f64> {
    let r = resolution as f64;
    let mut mask = vec![0.0; resolution * resolution];
    for row in 0..resolution {
        let cy = frame.y() + (row as f64 + 0.5) * frame.h() / r;
        for col in 0..resolution {
            let cx = frame.x() + (col as f64 + 0.5) * frame.w() / r;
            if b.contains_point(cx, cy) {
                mask[row * resolution + col] = 1.0;
            }
        }
    }
    mask
}

/// One anchor per predicate id in `0..num_predicates`. Predicates without
/// instances get all-zero masks and `count == 0`.
pub fn build_anchor_bank(
    annotations: &[PairAnnotation],
    num_predicates: usize,
    resolution: usize,
) -> Result<Vec<LocationAnchor>> {
    if resolution < 2 {
        return Err(Error::Config(format!("anchor resolution {resolution} must be at least 2")));
    }
    if let Some(a) = annotations.iter().find(|a| a.predicate >= num_predicates) {
        return Err(Error::Index(format!(
            "predicate id {} with only {num_predicates} predicates",
            a.predicate
        )));
    }
    let masks: Vec<(Vec<f64>, Vec<f64>)> = annotations
        .par_iter()
        .map(|a| {
            let u = union_box(&a.sub, &a.ob);
            (rasterize(&a.sub, &u, resolution), rasterize(&a.ob, &u, resolution))
        })
        .collect();
    let mut bank = vec![LocationAnchor::empty(resolution); num_predicates];
    for (a, (sm, om)) in annotations.iter().zip(&masks) {
        let anchor = &mut bank[a.predicate];
        anchor.count += 1;
        for (acc, v) in anchor.sub_mask.iter_mut().zip(sm) {
            *acc += v;
        }
        for (acc, v) in anchor.ob_mask.iter_mut().zip(om) {
            *acc += v;
        }
    }
    for anchor in bank.iter_mut().filter(|a| a.count > 0) {
        let n = anchor.count as f64;
        anchor.sub_mask.iter_mut().for_each(|v| *v /= n);
        anchor.ob_mask.iter_mut().for_each(|v| *v /= n);
    }
    Ok(bank)
}

/// Half the summed squared difference over both channels.
pub fn anchor_mse(a: &LocationAnchor, b: &LocationAnchor) -> Result<f64> {
    if a.resolution != b.resolution {
        return Err(Error::Input(format!(
            "anchor resolutions differ: {} vs {}",
            a.resolution, b.resolution
        )));
    }
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    Ok(0.5 * (sq(&a.sub_mask, &b.sub_mask) + sq(&a.ob_mask, &b.ob_mask)))
}

/// Whether the whitespace tokens of `needle` occur contiguously in `hay`.
fn contains_tokens(hay: &[&str], needle: &[&str]) -> bool {
    !needle.is_empty() && needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Whether one label contains the other as a contiguous run of whole words.
pub fn labels_related(a: &str, b: &str) -> bool {
    let ta: Vec<&str> = a.split_whitespace().collect();
    let tb: Vec<&str> = b.split_whitespace().collect();
    contains_tokens(&ta, &tb) || contains_tokens(&tb, &ta)
}

/// Row-normalized predicate adjacency with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateGraph {
    adjacency: Vec<f64>,
    labels: Vec<String>,
}

impl PredicateGraph {
    /// Builds a graph from an arbitrary nonnegative weight matrix, zeroing the
    /// diagonal and L1-normalizing every nonzero row.
    pub fn from_weights(labels: Vec<String>, mut weights: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if weights.len() != n * n {
            return Err(Error::Input(format!(
                "{n} labels need a {n}x{n} adjacency, got {} entries",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input("adjacency weights must be finite and nonnegative".into()));
        }
        for v in 0..n {
            weights[v * n + v] = 0.0;
            let row = &mut weights[v * n..(v + 1) * n];
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|w| *w /= sum);
            }
        }
        Ok(PredicateGraph {
            adjacency: weights,
            labels,
        })
    }

    /// Takes an already normalized adjacency as is (used when reading a graph
    /// back from disk, so weights round-trip exactly).
    pub fn from_adjacency(labels: Vec<String>, adjacency: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if adjacency.len() != n * n {
            return Err(Error::Input(format!(
                "{n} labels need a {n}x{n} adjacency, got {} entries",
                adjacency.len()
            )));
        }
        for v in 0..n {
            let row = &adjacency[v * n..(v + 1) * n];
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) || row[v] != 0.0 {
                return Err(Error::Input(format!("row {v}: weights must be finite, nonnegative, zero on the diagonal")));
            }
            let sum: f64 = row.iter().sum();
            if sum != 0.0 && (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!("row {v} sums to {sum}, expected 0 or 1")));
            }
        }
        Ok(PredicateGraph { adjacency, labels })
    }

    /// A graph with no edges.
    pub fn disconnected(labels: Vec<String>) -> Self {
        let n = labels.len();
        PredicateGraph {
            adjacency: vec![0.0; n * n],
            labels,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Row `v` of the adjacency.
    pub fn row(&self, v: usize) -> &[f64] {
        let n = self.num_nodes();
        &self.adjacency[v * n..(v + 1) * n]
    }

    pub fn weight(&self, v: usize, u: usize) -> f64 {
        self.adjacency[v * self.num_nodes() + u]
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    /// `(v, u, weight)` for every nonzero entry, row-major.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.num_nodes();
        (0..n)
            .flat_map(|v| (0..n).map(move |u| (v, u)))
            .filter_map(|(v, u)| {
                let w = self.weight(v, u);
                (w != 0.0).then_some((v, u, w))
            })
            .collect()
    }
}

/// Connects `u != v` when their anchors are closer than `mse_thresh` (both
/// anchors need at least one instance) or when one label contains the other
/// word-wise. Every edge gets weight 1 before row normalization.
pub fn build_predicate_graph(anchors: &[LocationAnchor], labels: &[String], mse_thresh: f64) -> Result<PredicateGraph> {
    if !(mse_thresh > 0.0) {
        return Err(Error::Config(format!("MSE threshold {mse_thresh} must be positive")));
    }
    if anchors.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} anchors but {} labels",
            anchors.len(),
            labels.len()
        )));
    }
    let n = labels.len();
    let mut weights = vec![0.0; n * n];
    for v in 0..n {
        for u in (v + 1)..n {
            let close = anchors[v].count > 0
                && anchors[u].count > 0
                && anchor_mse(&anchors[v], &anchors[u])? < mse_thresh;
            if close || labels_related(&labels[v], &labels[u]) {
                weights[v * n + u] = 1.0;
                weights[u * n + v] = 1.0;
            }
        }
    }
    PredicateGraph::from_weights(labels.to_vec(), weights)
}
