//! End-to-end steps behind the CLI commands. Each step reads its inputs from
//! disk and writes its outputs atomically, so steps can be chained by path.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::anchor_graph::{build_anchor_bank, build_predicate_graph, LocationAnchor, PairAnnotation, PredicateGraph};
use crate::config::{Config, OrmConfig, PrmConfig};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, evaluate_image, zero_shot_filter, EvalReport, GroundTruthTriplet, Task};
use crate::geometry::{encode_relative_location, BBox};
use crate::ggnn::GgnnParams;
use crate::io::dataset::Dataset;
use crate::io::model::{
    load_orm, load_prm, read_anchor_bank, read_graph, read_predictions, save_orm, save_prm, write_anchor_bank, write_graph,
    write_predictions, ORM_DIR, PRM_DIR,
};
use crate::io::{write_atomic, ImageData, PairSource, PredictionRecord};
use crate::pair_rating::{assemble_orm_input, assign_orm_label, balance_samples, OrmHead, OrmLabel, OrmSample};
use crate::predicate_recognition::{
    encode_language, infer_scores, EmbeddingTable, FusionParams, FusionShape, PredicateModel, PrmInput, PrmSample,
};
use crate::proposing::{i_nms, PairProposal, ProposingConfig};
use crate::training::instances::{self, Component};
use crate::training::{train_stage1, train_stage2, GradCheckReport};

/// Input of the predicate model for a (subject, object) pair.
pub fn prm_input(
    sub: (&BBox, &[f64], &str),
    ob: (&BBox, &[f64], &str),
    embeddings: &EmbeddingTable,
) -> Result<PrmInput> {
    let mut vis = sub.1.to_vec();
    vis.extend_from_slice(ob.1);
    Ok(PrmInput {
        vis,
        lang: encode_language(sub.2, ob.2, embeddings)?,
        loc: encode_relative_location(sub.0, ob.0),
    })
}

/// Every ordered detection pair labelled against the ground truth, then
/// balanced. Pairs between the two thresholds are dropped.
pub fn orm_samples(images: &[ImageData], cfg: &OrmConfig, seed: u64) -> Result<Vec<OrmSample>> {
    let per_image: Vec<Vec<OrmSample>> = images
        .par_iter()
        .map(|img| {
            let gt: Vec<(BBox, BBox)> = img.annotations.iter().map(|a| (a.triplet.sub_box, a.triplet.ob_box)).collect();
            let dets = img.detections.as_slice();
            let mut out = Vec::new();
            for (i, s) in dets.iter().enumerate() {
                for (j, o) in dets.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let positive = match assign_orm_label((&s.bbox, &o.bbox), &gt, cfg.thresh_high, cfg.thresh_low)? {
                        OrmLabel::Positive => true,
                        OrmLabel::Negative => false,
                        OrmLabel::Ignore => continue,
                    };
                    let loc = encode_relative_location(&s.bbox, &o.bbox);
                    out.push(OrmSample {
                        input: assemble_orm_input(&s.feature, &o.feature, &loc)?,
                        positive,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(balance_samples(per_image.into_iter().flatten().collect(), cfg.neg_ratio, &mut rng))
}

/// One sample per ground-truth triplet, built from the ground-truth boxes and
/// their feature rows.
pub fn prm_samples(ds: &Dataset, images: &[ImageData], embeddings: &EmbeddingTable) -> Result<Vec<PrmSample>> {
    let cats = ds.categories();
    images
        .iter()
        .flat_map(|img| &img.annotations)
        .map(|a| {
            let t = &a.triplet;
            Ok(PrmSample {
                input: prm_input(
                    (&t.sub_box, &a.sub_feature, &cats[t.sub_cat]),
                    (&t.ob_box, &a.ob_feature, &cats[t.ob_cat]),
                    embeddings,
                )?,
                label: t.predicate,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub samples: usize,
    pub positives: Option<usize>,
    pub final_loss: Option<f64>,
    pub loss_curve: Vec<f64>,
}

fn write_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let text: String = curve.iter().enumerate().map(|(e, l)| format!("{}\t{l}\n", e + 1)).collect();
    write_atomic(path, format!("epoch\tloss\n{text}").as_bytes())
}

fn feature_dim(images: &[ImageData]) -> Result<usize> {
    images
        .iter()
        .find_map(|img| img.detections.feature_dim())
        .ok_or_else(|| Error::Config("training data has no detections".into()))
}

/// First stage: fits the rating head and writes it under `<ckpt>/orm/`.
pub fn train_orm(data: &Path, cfg: &Config, ckpt: &Path) -> Result<(OrmHead, TrainSummary)> {
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    let images = ds.load_all()?;
    let tc = &cfg.orm.train;
    let samples = orm_samples(&images, &cfg.orm, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let head = OrmHead::init(feature_dim(&images)?, cfg.orm.hidden, &mut rng);
    let (head, curve) = train_stage1(&samples, head, tc)?;
    save_orm(ckpt, &head)?;
    write_curve(&ckpt.join(ORM_DIR).join("loss.tsv"), &curve)?;
    Ok((
        head,
        TrainSummary {
            samples: samples.len(),
            positives: Some(samples.iter().filter(|s| s.positive).count()),
            final_loss: curve.last().copied(),
            loss_curve: curve,
        },
    ))
}

/// Fresh predicate model shaped for the dataset.
pub fn init_predicate_model(vis_dim: usize, lang_dim: usize, num_predicates: usize, cfg: &PrmConfig, seed: u64) -> Result<PredicateModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = FusionShape {
        vis_dim,
        lang_dim,
        fused_dim: cfg.fused_dim,
        num_predicates,
    };
    let fusion = FusionParams::init(shape, cfg.fusion, &mut rng);
    let ggnn = if cfg.use_ggnn {
        Some(GgnnParams::init(cfg.ggnn_hidden, cfg.ggnn_steps, &mut rng)?)
    } else {
        None
    };
    Ok(PredicateModel { fusion, ggnn })
}

/// Second stage: fits fusion and GGNN on ground-truth pairs and writes them,
/// with the graph, under `<ckpt>/prm/`.
pub fn train_prm(data: &Path, graph_path: &Path, cfg: &Config, ckpt: &Path) -> Result<(PredicateModel, TrainSummary)> {
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    let graph = read_graph(graph_path)?;
    if graph.labels() != ds.predicates() {
        return Err(Error::Input(format!(
            "graph predicates {:?} differ from dataset predicates {:?}",
            graph.labels(),
            ds.predicates()
        )));
    }
    let embeddings = ds.embeddings()?;
    let images = ds.load_all()?;
    let samples = prm_samples(&ds, &images, &embeddings)?;
    let vis_dim = samples
        .first()
        .map(|s| s.input.vis.len())
        .ok_or_else(|| Error::Config("no predicate training samples".into()))?;
    let tc = &cfg.prm.train;
    let model = init_predicate_model(vis_dim, 2 * embeddings.dim(), ds.predicates().len(), &cfg.prm, tc.seed)?;
    let (model, curve) = train_stage2(&samples, &graph, model, tc)?;
    save_prm(ckpt, &model, &graph)?;
    write_curve(&ckpt.join(PRM_DIR).join("loss.tsv"), &curve)?;
    Ok((
        model,
        TrainSummary {
            samples: samples.len(),
            positives: None,
            final_loss: curve.last().copied(),
            loss_curve: curve,
        },
    ))
}

/// Location anchors from every ground-truth pair of the dataset.
pub fn build_anchors(data: &Path, resolution: usize, out: &Path, png: bool) -> Result<Vec<LocationAnchor>> {
    let ds = Dataset::open(data)?;
    let images = ds.load_all()?;
    let anns: Vec<PairAnnotation> = images
        .iter()
        .flat_map(|img| &img.annotations)
        .map(|a| PairAnnotation {
            sub: a.triplet.sub_box,
            ob: a.triplet.ob_box,
            predicate: a.triplet.predicate,
        })
        .collect();
    let bank = build_anchor_bank(&anns, ds.predicates().len(), resolution)?;
    write_anchor_bank(out, &bank, ds.predicates(), png)?;
    Ok(bank)
}

pub fn build_graph(anchors_dir: &Path, mse_thresh: f64, out: &Path) -> Result<PredicateGraph> {
    let (anchors, labels) = read_anchor_bank(anchors_dir)?;
    let graph = build_predicate_graph(&anchors, &labels, mse_thresh)?;
    write_graph(out, &graph)?;
    Ok(graph)
}

/// Ground-truth pairs of an image without repeats (a pair annotated with
/// several predicates is scored once).
pub fn unique_gt_pairs(gts: &[GroundTruthTriplet]) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for (i, t) in gts.iter().enumerate() {
        let same = |j: &usize| {
            let u = &gts[*j];
            u.sub_box == t.sub_box && u.ob_box == t.ob_box && u.sub_cat == t.sub_cat && u.ob_cat == t.ob_cat
        };
        if !keep.iter().any(same) {
            keep.push(i);
        }
    }
    keep
}

fn predict_image(
    img: &ImageData,
    ds: &Dataset,
    embeddings: &EmbeddingTable,
    orm: &OrmHead,
    model: &PredicateModel,
    graph: &PredicateGraph,
    proposing: &ProposingConfig,
) -> Result<Vec<PredictionRecord>> {
    let cats = ds.categories();
    let dets = img.detections.as_slice();
    let mut records = Vec::new();
    for p in i_nms(&img.detections, orm, proposing)? {
        let (s, o) = (&dets[p.sub_idx], &dets[p.ob_idx]);
        let input = prm_input(
            (&s.bbox, &s.feature, &cats[s.category]),
            (&o.bbox, &o.feature, &cats[o.category]),
            embeddings,
        )?;
        let probs = model.predict(&input, graph)?;
        let scores = infer_scores(s.objectiveness, o.objectiveness, &probs, p.score)?;
        records.push(PredictionRecord {
            source: PairSource::Proposal,
            pair: p,
            scores,
        });
    }
    for i in unique_gt_pairs(&img.triplets()) {
        let a = &img.annotations[i];
        let t = &a.triplet;
        let input = prm_input(
            (&t.sub_box, &a.sub_feature, &cats[t.sub_cat]),
            (&t.ob_box, &a.ob_feature, &cats[t.ob_cat]),
            embeddings,
        )?;
        let probs = model.predict(&input, graph)?;
        records.push(PredictionRecord {
            source: PairSource::GtPair,
            pair: PairProposal {
                sub_idx: i,
                ob_idx: i,
                sub_box: t.sub_box,
                ob_box: t.ob_box,
                sub_cat: t.sub_cat,
                ob_cat: t.ob_cat,
                rating: 1.0,
                score: 1.0,
            },
            scores: infer_scores(1.0, 1.0, &probs, 1.0)?,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InferSummary {
    pub images: usize,
    pub proposals: usize,
    pub gt_pairs: usize,
}

/// Proposals and predicate scores for every image, one file per image.
pub fn infer(data: &Path, ckpt: &Path, proposing: &ProposingConfig, out: &Path) -> Result<InferSummary> {
    proposing.validate()?;
    let ds = Dataset::open(data)?;
    let embeddings = ds.embeddings()?;
    let orm = load_orm(ckpt)?;
    let (model, graph) = load_prm(ckpt)?;
    if graph.labels() != ds.predicates() {
        return Err(Error::Input("checkpoint predicates differ from dataset predicates".into()));
    }
    let counts: Vec<(usize, usize)> = (0..ds.num_images())
        .into_par_iter()
        .map(|i| {
            let img = ds.load_image(i)?;
            let records = predict_image(&img, &ds, &embeddings, &orm, &model, &graph, proposing)?;
            write_predictions(out, &img.image_id, &records)?;
            let props = records.iter().filter(|r| r.source == PairSource::Proposal).count();
            Ok((props, records.len() - props))
        })
        .collect::<Result<_>>()?;
    if ds.num_images() == 0 {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    Ok(InferSummary {
        images: counts.len(),
        proposals: counts.iter().map(|c| c.0).sum(),
        gt_pairs: counts.iter().map(|c| c.1).sum(),
    })
}

/// Label triplets `(sub, predicate, ob)` seen in a training set.
pub fn training_triplets(train_data: &Path) -> Result<HashSet<(usize, usize, usize)>> {
    let ds = Dataset::open(train_data)?;
    Ok(ds
        .load_all()?
        .iter()
        .flat_map(|img| img.annotations.iter().map(|a| a.triplet.label_key()))
        .collect())
}

/// Recall@n,k over every image of `data`, reading predictions from `preds`.
/// With `zero_shot`, only test triplets absent from that set count.
pub fn evaluate(
    preds: &Path,
    data: &Path,
    task: Task,
    n: usize,
    k: usize,
    cfg: &Config,
    zero_shot: Option<&HashSet<(usize, usize, usize)>>,
) -> Result<EvalReport> {
    let ds = Dataset::open(data)?;
    let source = match task {
        Task::Predicate => PairSource::GtPair,
        Task::Phrase | Task::Relationship => PairSource::Proposal,
    };
    let num_pred = ds.predicates().len();
    let reports: Vec<EvalReport> = (0..ds.num_images())
        .into_par_iter()
        .map(|i| {
            let img = ds.load_image(i)?;
            let mut gts = img.triplets();
            if let Some(seen) = zero_shot {
                gts = zero_shot_filter(&gts, seen);
            }
            let pairs = read_predictions(preds, &img.image_id, source)?;
            if let Some(p) = pairs.iter().find(|p| p.scores.len() != num_pred) {
                return Err(Error::Input(format!(
                    "image {}: {} scores per pair, dataset has {num_pred} predicates",
                    img.image_id,
                    p.scores.len()
                )));
            }
            Ok(evaluate_image(&pairs, &gts, task, n, k, cfg.eval.iou_thresh))
        })
        .collect::<Result<_>>()?;
    Ok(aggregate(task, n, k, &reports, cfg.eval.averaging))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub component: Component,
    pub instances: usize,
    pub max_rel_err: f64,
    pub worst: GradCheckReport,
    pub pass: bool,
}

/// Finite-difference checks on `count` seeded random instances.
pub fn gradcheck(component: Component, count: usize, seed: u64, step: f64, tol: f64) -> Result<GradCheckSummary> {
    if count == 0 {
        return Err(Error::Config("need at least one instance".into()));
    }
    let reports: Vec<GradCheckReport> = (0..count as u64)
        .into_par_iter()
        .map(|i| instances::check(component, seed.wrapping_add(i), step, tol))
        .collect::<Result<_>>()?;
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .cloned()
        .expect("nonempty");
    Ok(GradCheckSummary {
        component,
        instances: count,
        max_rel_err: worst.max_rel_err,
        pass: reports.iter().all(|r| r.pass),
        worst,
    })
}
