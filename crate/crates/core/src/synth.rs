//! Synthetic relationship datasets with predicates defined by geometric rules.
//!
//! Each image is a square canvas cut into a 3x3 grid. Every relation and every
//! distractor object gets its own cell, so pairs from different cells are far
//! apart and only pairs inside a cell carry a predicate. Detections are the
//! ground-truth objects with jittered boxes; appearance features are a
//! category one-hot plus noisy box geometry.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::io::dataset::{features_tensor, write_embeddings, write_json, write_jsonl, MANIFEST};
use crate::io::{write_tensor, DetectionRecord, GtRecord, ImageEntry, Manifest};
use crate::predicate_recognition::EmbeddingTable;

const GRID: usize = 3;
/// Box sides are drawn from this fraction range of the canvas side.
const SIZE_RANGE: (f64, f64) = (0.05, 0.12);
/// Maximum gap between the boxes of a spatial relation, relative to the
/// larger box side along that axis.
const MAX_GAP: f64 = 0.5;
const OVERLAP_IOU: (f64, f64) = (0.3, 0.7);
const INSIDE_MAX_AREA: f64 = 0.5;

/// Geometric rule that defines a predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Subject directly above the object, close, with horizontal overlap.
    Above,
    /// Subject directly left of the object, close, with vertical overlap.
    LeftOf,
    /// Subject close to the object, diagonally below it.
    Near,
    /// Boxes intersect with moderate IoU, neither contains the other.
    Overlap,
    /// Subject inside the object and at most half its area.
    Inside,
}

fn span_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    a1.min(b1) - a0.max(b0)
}

impl Rule {
    /// Whether the (subject, object) boxes satisfy the rule.
    pub fn holds(self, s: &BBox, o: &BBox) -> bool {
        let gap_x = MAX_GAP * s.w().max(o.w());
        let gap_y = MAX_GAP * s.h().max(o.h());
        match self {
            Rule::Above => {
                s.bottom() <= o.y()
                    && o.y() - s.bottom() <= gap_y
                    && span_overlap(s.x(), s.right(), o.x(), o.right()) > 0.0
            }
            Rule::LeftOf => {
                s.right() <= o.x()
                    && o.x() - s.right() <= gap_x
                    && span_overlap(s.y(), s.bottom(), o.y(), o.bottom()) > 0.0
            }
            Rule::Near => {
                let dy = s.y() - o.bottom();
                let dx = if s.x() >= o.right() { s.x() - o.right() } else { o.x() - s.right() };
                dy >= 0.0 && dy <= gap_y && dx >= 0.0 && dx <= gap_x
            }
            Rule::Overlap => {
                let v = iou(s, o);
                (OVERLAP_IOU.0..=OVERLAP_IOU.1).contains(&v) && !s.contains(o) && !o.contains(s)
            }
            Rule::Inside => o.contains(s) && s.area() <= INSIDE_MAX_AREA * o.area(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredicateSpec {
    pub name: String,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_images: usize,
    pub seed: u64,
    pub categories: Vec<String>,
    pub predicates: Vec<PredicateSpec>,
    /// Side of the square canvas in pixels.
    pub canvas: f64,
    /// Inclusive range of relations per image.
    pub relations_per_image: [usize; 2],
    /// Inclusive range of unrelated objects per image.
    pub distractors_per_image: [usize; 2],
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Detection box jitter relative to the box size.
    pub box_jitter: f64,
    pub embedding_dim: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let p = |name: &str, rule| PredicateSpec { name: name.into(), rule };
        SynthSpec {
            num_images: 100,
            seed: 0,
            categories: ["person", "horse", "dog", "car", "table", "bottle"].map(String::from).to_vec(),
            predicates: vec![
                p("above", Rule::Above),
                p("left of", Rule::LeftOf),
                p("near", Rule::Near),
                p("overlap", Rule::Overlap),
                p("inside", Rule::Inside),
            ],
            canvas: 600.0,
            relations_per_image: [2, 4],
            distractors_per_image: [1, 2],
            feature_dim: 16,
            feature_noise: 0.05,
            box_jitter: 0.03,
            embedding_dim: 300,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let mut names = HashSet::new();
        if let Some(c) = self.categories.iter().find(|c| c.trim().is_empty() || !names.insert(c.as_str())) {
            return cfg(format!("empty or duplicate category `{c}`"));
        }
        let mut names = HashSet::new();
        let mut rules = HashSet::new();
        for p in &self.predicates {
            if p.name.trim().is_empty() || !names.insert(p.name.as_str()) {
                return cfg(format!("empty or duplicate predicate `{}`", p.name));
            }
            if !rules.insert(p.rule) {
                return cfg(format!("rule {:?} is used by two predicates, labels would contradict", p.rule));
            }
        }
        if self.num_images > 0 {
            if self.predicates.is_empty() {
                return cfg("no predicates to generate".into());
            }
            if self.categories.len() < 2 {
                return cfg("relations need at least two categories".into());
            }
        }
        let [r0, r1] = self.relations_per_image;
        let [d0, d1] = self.distractors_per_image;
        if r0 > r1 || d0 > d1 || r0 == 0 {
            return cfg(format!("bad per-image ranges {:?} / {:?}", self.relations_per_image, self.distractors_per_image));
        }
        if r1 + d1 > GRID * GRID {
            return cfg(format!("{} relations plus distractors do not fit {} cells", r1 + d1, GRID * GRID));
        }
        if self.feature_dim < self.categories.len() + 4 {
            return cfg(format!(
                "feature_dim {} cannot hold a {}-way one-hot plus 4 geometry values",
                self.feature_dim,
                self.categories.len()
            ));
        }
        if !(self.canvas > 0.0 && self.canvas.is_finite()) {
            return cfg(format!("canvas {} must be positive", self.canvas));
        }
        if !(0.0..=0.2).contains(&self.box_jitter) || !(self.feature_noise >= 0.0) {
            return cfg("box_jitter must lie in [0, 0.2] and feature_noise be >= 0".into());
        }
        if self.embedding_dim == 0 {
            return cfg("embedding_dim must be positive".into());
        }
        Ok(())
    }
}

/// One generated image, ready to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image_id: String,
    pub detections: Vec<DetectionRecord>,
    pub ground_truth: Vec<GtRecord>,
    pub features: Vec<Vec<f64>>,
}

fn image_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn side(rng: &mut impl Rng, canvas: f64) -> f64 {
    rng.gen_range(SIZE_RANGE.0..SIZE_RANGE.1) * canvas
}

/// Boxes `(sub, ob)` satisfying `rule`, with the object near the origin.
fn place_pair(rule: Rule, canvas: f64, rng: &mut impl Rng) -> Result<(BBox, BBox)> {
    let (wo, ho) = (side(rng, canvas), side(rng, canvas));
    let ob = BBox::new(0.0, 0.0, wo, ho)?;
    let (ws, hs) = (side(rng, canvas), side(rng, canvas));
    let sub = match rule {
        Rule::Above => {
            let m = 0.25 * ws.min(wo);
            let x = rng.gen_range(m - ws..wo - m);
            let g = rng.gen_range(0.0..0.8 * MAX_GAP) * hs.max(ho);
            BBox::new(x, -g - hs, ws, hs)?
        }
        Rule::LeftOf => {
            let m = 0.25 * hs.min(ho);
            let y = rng.gen_range(m - hs..ho - m);
            let g = rng.gen_range(0.0..0.8 * MAX_GAP) * ws.max(wo);
            BBox::new(-g - ws, y, ws, hs)?
        }
        Rule::Near => {
            let gx = rng.gen_range(0.1..0.8 * MAX_GAP) * ws.max(wo);
            let gy = rng.gen_range(0.1..0.8 * MAX_GAP) * hs.max(ho);
            let x = if rng.gen_bool(0.5) { wo + gx } else { -gx - ws };
            BBox::new(x, ho + gy, ws, hs)?
        }
        Rule::Overlap => {
            let mut found = None;
            for _ in 0..1000 {
                let w = wo * rng.gen_range(0.8..1.25);
                let h = ho * rng.gen_range(0.8..1.25);
                let cand = BBox::new(rng.gen_range(-0.4..0.4) * wo, rng.gen_range(-0.4..0.4) * ho, w, h)?;
                let v = iou(&cand, &ob);
                if v >= OVERLAP_IOU.0 + 0.05 && v <= OVERLAP_IOU.1 - 0.05 && Rule::Overlap.holds(&cand, &ob) {
                    found = Some(cand);
                    break;
                }
            }
            found.ok_or_else(|| Error::Config("could not place an overlapping pair".into()))?
        }
        Rule::Inside => {
            let (ws, hs) = (wo * rng.gen_range(0.3..0.6), ho * rng.gen_range(0.3..0.6));
            BBox::new(rng.gen_range(0.0..wo - ws), rng.gen_range(0.0..ho - hs), ws, hs)?
        }
    };
    Ok((sub, ob))
}

/// Moves a group of boxes so their union sits at a random spot inside `cell`.
fn into_cell(boxes: &[BBox], cell: (f64, f64, f64), rng: &mut impl Rng) -> Result<Vec<BBox>> {
    let x0 = boxes.iter().map(BBox::x).fold(f64::INFINITY, f64::min);
    let y0 = boxes.iter().map(BBox::y).fold(f64::INFINITY, f64::min);
    let x1 = boxes.iter().map(BBox::right).fold(f64::NEG_INFINITY, f64::max);
    let y1 = boxes.iter().map(BBox::bottom).fold(f64::NEG_INFINITY, f64::max);
    let (cx, cy, size) = cell;
    let slack_x = (size - (x1 - x0)).max(0.0);
    let slack_y = (size - (y1 - y0)).max(0.0);
    let dx = cx - x0 + rng.gen_range(0.0..=slack_x);
    let dy = cy - y0 + rng.gen_range(0.0..=slack_y);
    boxes.iter().map(|b| b.translated(dx, dy)).collect()
}

fn jitter(b: &BBox, amount: f64, rng: &mut impl Rng) -> Result<BBox> {
    if amount == 0.0 {
        return Ok(*b);
    }
    let mut d = || rng.gen_range(-amount..amount);
    let (jx, jy, jw, jh) = (d(), d(), d(), d());
    BBox::new(b.x() + jx * b.w(), b.y() + jy * b.h(), b.w() * (1.0 + jw), b.h() * (1.0 + jh))
}

/// Category one-hot, then `[cx, cy, w, h] / canvas`, then zeros; Gaussian
/// noise on every entry.
fn feature_row(spec: &SynthSpec, category: usize, b: &BBox, rng: &mut impl Rng) -> Vec<f64> {
    let mut f = vec![0.0; spec.feature_dim];
    f[category] = 1.0;
    let k = spec.categories.len();
    let (cx, cy) = b.center();
    for (i, v) in [cx, cy, b.w(), b.h()].into_iter().enumerate() {
        f[k + i] = v / spec.canvas;
    }
    if spec.feature_noise > 0.0 {
        let noise = Normal::new(0.0, spec.feature_noise).expect("positive std");
        f.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    f
}

/// Generates image `index` of the dataset. Each image has its own random
/// stream, so images can be generated in any order.
pub fn generate_image(spec: &SynthSpec, index: usize) -> Result<SynthImage> {
    let mut rng = image_rng(spec.seed, index as u64 + 1);
    let n_rel = rng.gen_range(spec.relations_per_image[0]..=spec.relations_per_image[1]);
    let n_dis = rng.gen_range(spec.distractors_per_image[0]..=spec.distractors_per_image[1]);
    let cell = spec.canvas / GRID as f64;
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(&mut rng);
    let cell_at = |c: usize| ((c % GRID) as f64 * cell, (c / GRID) as f64 * cell, cell);

    // (box, category) of every object; relations reference object indices.
    let mut objects: Vec<(BBox, usize)> = Vec::new();
    let mut relations = Vec::new();
    for r in 0..n_rel {
        let p = rng.gen_range(0..spec.predicates.len());
        let (s, o) = place_pair(spec.predicates[p].rule, spec.canvas, &mut rng)?;
        let placed = into_cell(&[s, o], cell_at(cells[r]), &mut rng)?;
        let sc = rng.gen_range(0..spec.categories.len());
        let mut oc = rng.gen_range(0..spec.categories.len() - 1);
        if oc >= sc {
            oc += 1;
        }
        relations.push((objects.len(), objects.len() + 1, p));
        objects.push((placed[0], sc));
        objects.push((placed[1], oc));
    }
    for d in 0..n_dis {
        let b = BBox::new(0.0, 0.0, side(&mut rng, spec.canvas), side(&mut rng, spec.canvas))?;
        let placed = into_cell(&[b], cell_at(cells[n_rel + d]), &mut rng)?;
        objects.push((placed[0], rng.gen_range(0..spec.categories.len())));
    }

    let mut features = Vec::new();
    let mut detections = Vec::new();
    for (b, c) in &objects {
        let db = jitter(b, spec.box_jitter, &mut rng)?;
        features.push(feature_row(spec, *c, &db, &mut rng));
        detections.push(DetectionRecord {
            bbox: db,
            category: spec.categories[*c].clone(),
            objectiveness: rng.gen_range(0.6..1.0),
            feature_row: features.len() - 1,
        });
    }
    // Ground-truth boxes get their own feature rows.
    let gt_row0 = features.len();
    for (b, c) in &objects {
        features.push(feature_row(spec, *c, b, &mut rng));
    }
    let ground_truth = relations
        .iter()
        .map(|&(s, o, p)| GtRecord {
            sub_box: objects[s].0,
            sub_category: spec.categories[objects[s].1].clone(),
            ob_box: objects[o].0,
            ob_category: spec.categories[objects[o].1].clone(),
            predicate: spec.predicates[p].name.clone(),
            sub_feature_row: gt_row0 + s,
            ob_feature_row: gt_row0 + o,
        })
        .collect();
    Ok(SynthImage {
        image_id: format!("img{index:05}"),
        detections,
        ground_truth,
        features,
    })
}

/// Random unit-variance vectors for every word of every category name.
pub fn generate_embeddings(spec: &SynthSpec) -> Result<EmbeddingTable> {
    let mut rng = image_rng(spec.seed, 0);
    let mut words: Vec<&str> = spec.categories.iter().flat_map(|c| c.split_whitespace()).collect();
    words.sort_unstable();
    words.dedup();
    let mut table = EmbeddingTable::new(spec.embedding_dim);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for w in words {
        table.insert(w, (0..spec.embedding_dim).map(|_| normal.sample(&mut rng)).collect())?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub images: usize,
    pub relations: usize,
    pub detections: usize,
}

/// Writes a complete dataset directory under `out`.
pub fn write_dataset(spec: &SynthSpec, out: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let images: Vec<SynthImage> = (0..spec.num_images)
        .into_par_iter()
        .map(|i| generate_image(spec, i))
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(images.len());
    for img in &images {
        let stem = format!("images/{}", img.image_id);
        let entry = ImageEntry {
            image_id: img.image_id.clone(),
            detections_file: format!("{stem}.det.jsonl"),
            features_file: format!("{stem}.feat.rlt"),
            gt_file: format!("{stem}.gt.jsonl"),
        };
        write_jsonl(&out.join(&entry.detections_file), &img.detections)?;
        write_jsonl(&out.join(&entry.gt_file), &img.ground_truth)?;
        write_tensor(&out.join(&entry.features_file), &features_tensor(&img.features, spec.feature_dim)?)?;
        entries.push(entry);
    }
    let embeddings_file = "embeddings.txt".to_string();
    write_embeddings(&out.join(&embeddings_file), &generate_embeddings(spec)?)?;
    write_json(
        &out.join(MANIFEST),
        &Manifest {
            categories: spec.categories.clone(),
            predicates: spec.predicates.iter().map(|p| p.name.clone()).collect(),
            embeddings_file,
            images: entries,
        },
    )?;
    Ok(SynthSummary {
        images: images.len(),
        relations: images.iter().map(|i| i.ground_truth.len()).sum(),
        detections: images.iter().map(|i| i.detections.len()).sum(),
    })
}
