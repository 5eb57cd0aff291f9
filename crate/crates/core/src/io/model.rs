//! Trained artifacts: predicate graphs, anchor banks, checkpoints and
//! per-image predictions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchor_graph::{LocationAnchor, PredicateGraph};
use crate::error::{Error, Result};
use crate::evaluation::ScoredPair;
use crate::ggnn::GgnnParams;
use crate::io::dataset::{read_json, read_jsonl, write_json, write_jsonl};
use crate::io::tensor::{read_tensor, write_tensor, Tensor};
use crate::io::write_atomic;
use crate::nn::Params;
use crate::pair_rating::OrmHead;
use crate::predicate_recognition::{FusionMode, FusionParams, FusionShape, PredicateModel};
use crate::proposing::PairProposal;

// ---------------------------------------------------------------- graph

/// Edge-list text:
///
/// ```text
/// # relloc predicate graph
/// node <id> <label>
/// edge <v> <u> <weight>
/// ```
/// Fields are tab separated. A dense `.rlt` copy is written next to it.
pub fn write_graph(path: &Path, graph: &PredicateGraph) -> Result<()> {
    let mut text = String::from("# relloc predicate graph\n");
    for (i, l) in graph.labels().iter().enumerate() {
        let _ = writeln!(text, "node\t{i}\t{l}");
    }
    for (v, u, w) in graph.edges() {
        let _ = writeln!(text, "edge\t{v}\t{u}\t{w}");
    }
    write_atomic(path, text.as_bytes())?;
    let n = graph.num_nodes();
    write_tensor(&path.with_extension("rlt"), &Tensor::from_f64(vec![n, n], graph.adjacency())?)
}

pub fn read_graph(path: &Path) -> Result<PredicateGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let bad = |msg: &str| Error::parse(path, line_no, msg);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[0] {
            "node" if fields.len() == 3 => {
                let id: usize = fields[1].parse().map_err(|_| bad("bad node id"))?;
                if id != labels.len() {
                    return Err(bad("node ids must be 0, 1, 2, ... in order"));
                }
                labels.push(fields[2].to_string());
            }
            "edge" if fields.len() == 4 => {
                let v: usize = fields[1].parse().map_err(|_| bad("bad edge source"))?;
                let u: usize = fields[2].parse().map_err(|_| bad("bad edge target"))?;
                let w: f64 = fields[3].parse().map_err(|_| bad("bad edge weight"))?;
                edges.push((line_no, v, u, w));
            }
            _ => return Err(bad("expected `node<TAB>id<TAB>label` or `edge<TAB>v<TAB>u<TAB>w`")),
        }
    }
    let n = labels.len();
    let mut adj = vec![0.0; n * n];
    for (line_no, v, u, w) in edges {
        if v >= n || u >= n {
            return Err(Error::parse(path, line_no, format!("edge ({v}, {u}) with {n} nodes")));
        }
        adj[v * n + u] = w;
    }
    PredicateGraph::from_adjacency(labels, adj).map_err(|e| Error::parse(path, 0, e))
}

// ---------------------------------------------------------------- anchors

pub const ANCHOR_META: &str = "anchors.json";
pub const ANCHOR_TENSOR: &str = "anchors.rlt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnchorMeta {
    resolution: usize,
    labels: Vec<String>,
    counts: Vec<usize>,
}

/// `anchors.rlt` holds a `[V, 2, R, R]` tensor (subject then object mask),
/// `anchors.json` the labels and instance counts. With `png` set, every mask
/// is also written as a grayscale image `png/<id>_sub.png` / `png/<id>_ob.png`.
pub fn write_anchor_bank(dir: &Path, anchors: &[LocationAnchor], labels: &[String], png: bool) -> Result<()> {
    if anchors.len() != labels.len() {
        return Err(Error::Input(format!("{} anchors for {} labels", anchors.len(), labels.len())));
    }
    let r = anchors.first().map_or(0, LocationAnchor::resolution);
    let mut flat = Vec::with_capacity(anchors.len() * 2 * r * r);
    for a in anchors {
        flat.extend_from_slice(&a.sub_mask);
        flat.extend_from_slice(&a.ob_mask);
    }
    write_tensor(&dir.join(ANCHOR_TENSOR), &Tensor::from_f64(vec![anchors.len(), 2, r, r], &flat)?)?;
    let meta = AnchorMeta {
        resolution: r,
        labels: labels.to_vec(),
        counts: anchors.iter().map(|a| a.count).collect(),
    };
    write_json(&dir.join(ANCHOR_META), &meta)?;
    if png {
        for (i, a) in anchors.iter().enumerate() {
            for (channel, mask) in [("sub", &a.sub_mask), ("ob", &a.ob_mask)] {
                let img = image::GrayImage::from_fn(r as u32, r as u32, |x, y| {
                    let v = mask[y as usize * r + x as usize];
                    image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
                });
                let mut bytes = Vec::new();
                img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
                    .map_err(|e| Error::Input(format!("PNG encoding failed: {e}")))?;
                write_atomic(&dir.join("png").join(format!("{i}_{channel}.png")), &bytes)?;
            }
        }
    }
    Ok(())
}

pub fn read_anchor_bank(dir: &Path) -> Result<(Vec<LocationAnchor>, Vec<String>)> {
    let meta_path = dir.join(ANCHOR_META);
    let meta: AnchorMeta = read_json(&meta_path)?;
    let t_path = dir.join(ANCHOR_TENSOR);
    let t = read_tensor(&t_path)?;
    let (v, r) = (meta.labels.len(), meta.resolution);
    if t.dims() != [v, 2, r, r] || meta.counts.len() != v {
        return Err(Error::parse(
            &t_path,
            0,
            format!("anchor tensor dims {:?} disagree with {v} labels at resolution {r}", t.dims()),
        ));
    }
    let data = t.to_f64();
    let cell = r * r;
    let anchors = (0..v)
        .map(|i| {
            let base = 2 * i * cell;
            LocationAnchor::from_masks(
                r,
                data[base..base + cell].to_vec(),
                data[base + cell..base + 2 * cell].to_vec(),
                meta.counts[i],
            )
        })
        .collect::<Result<_>>()
        .map_err(|e| Error::parse(&t_path, 0, e))?;
    Ok((anchors, meta.labels))
}

// ---------------------------------------------------------------- checkpoints

pub const ORM_DIR: &str = "orm";
pub const PRM_DIR: &str = "prm";
const MODEL_META: &str = "model.json";
/// Predicate graph the PRM was trained with, inside the PRM directory.
pub const PRM_GRAPH: &str = "graph.edges";

/// One rank-1 tensor file per named parameter.
pub fn save_params<P: Params>(dir: &Path, params: &P) -> Result<()> {
    let mut tensors = Vec::new();
    params.visit("", &mut |name, t| tensors.push((name.to_string(), t.to_vec())));
    for (name, t) in tensors {
        write_tensor(&dir.join(format!("{name}.rlt")), &Tensor::from_f64(vec![t.len()], &t)?)?;
    }
    Ok(())
}

/// Fills an already shaped `params` from the files written by [`save_params`].
pub fn load_params<P: Params>(dir: &Path, params: &mut P) -> Result<()> {
    let mut first_err = None;
    params.visit_mut("", &mut |name, t| {
        if first_err.is_some() {
            return;
        }
        let path: PathBuf = dir.join(format!("{name}.rlt"));
        match read_tensor(&path) {
            Ok(src) if src.dims() == [t.len()] => {
                for (d, s) in t.iter_mut().zip(src.data()) {
                    *d = *s as f64;
                }
            }
            Ok(src) => {
                first_err = Some(Error::parse(
                    &path,
                    0,
                    format!("parameter `{name}` has dims {:?}, model expects [{}]", src.dims(), t.len()),
                ))
            }
            Err(e) => first_err = Some(e),
        }
    });
    first_err.map_or(Ok(()), Err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrmMeta {
    pub feature_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GgnnMeta {
    pub hidden: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrmMeta {
    pub vis_dim: usize,
    pub lang_dim: usize,
    pub fused_dim: usize,
    pub fusion: FusionMode,
    pub predicates: Vec<String>,
    pub ggnn: Option<GgnnMeta>,
}

pub fn save_orm(ckpt: &Path, head: &OrmHead) -> Result<()> {
    let dir = ckpt.join(ORM_DIR);
    save_params(&dir, head)?;
    write_json(
        &dir.join(MODEL_META),
        &OrmMeta {
            feature_dim: head.feature_dim(),
            hidden: head.hidden_width(),
        },
    )
}

pub fn load_orm(ckpt: &Path) -> Result<OrmHead> {
    let dir = ckpt.join(ORM_DIR);
    let meta: OrmMeta = read_json(&dir.join(MODEL_META))?;
    let mut head = OrmHead::zeros(meta.feature_dim, meta.hidden);
    load_params(&dir, &mut head)?;
    Ok(head)
}

pub fn save_prm(ckpt: &Path, model: &PredicateModel, graph: &PredicateGraph) -> Result<()> {
    let dir = ckpt.join(PRM_DIR);
    if graph.num_nodes() != model.num_predicates() {
        return Err(Error::Input(format!(
            "graph has {} nodes, model {} predicates",
            graph.num_nodes(),
            model.num_predicates()
        )));
    }
    let shape = model.fusion.shape();
    save_params(&dir, model)?;
    write_graph(&dir.join(PRM_GRAPH), graph)?;
    write_json(
        &dir.join(MODEL_META),
        &PrmMeta {
            vis_dim: shape.vis_dim,
            lang_dim: shape.lang_dim,
            fused_dim: shape.fused_dim,
            fusion: model.fusion.mode,
            predicates: graph.labels().to_vec(),
            ggnn: model.ggnn.as_ref().map(|g| GgnnMeta {
                hidden: g.hidden_dim(),
                steps: g.steps(),
            }),
        },
    )
}

pub fn load_prm(ckpt: &Path) -> Result<(PredicateModel, PredicateGraph)> {
    let dir = ckpt.join(PRM_DIR);
    let meta_path = dir.join(MODEL_META);
    let meta: PrmMeta = read_json(&meta_path)?;
    let graph = read_graph(&dir.join(PRM_GRAPH))?;
    if graph.labels() != meta.predicates.as_slice() {
        return Err(Error::parse(&meta_path, 0, "predicate list disagrees with the stored graph"));
    }
    let shape = FusionShape {
        vis_dim: meta.vis_dim,
        lang_dim: meta.lang_dim,
        fused_dim: meta.fused_dim,
        num_predicates: meta.predicates.len(),
    };
    let mut model = PredicateModel {
        fusion: FusionParams::zeros(shape, meta.fusion),
        ggnn: meta.ggnn.map(|g| GgnnParams::zeros(g.hidden, g.steps)).transpose()?,
    };
    load_params(&dir, &mut model)?;
    Ok((model, graph))
}

// ---------------------------------------------------------------- predictions

/// Where a scored pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    /// A detection pair kept by i-NMS; indices refer to the detection file.
    Proposal,
    /// A ground-truth pair; indices refer to the line in the ground-truth file.
    GtPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub source: PairSource,
    #[serde(flatten)]
    pub pair: PairProposal,
    /// Final score of every predicate, indexed like the manifest predicates.
    pub scores: Vec<f64>,
}

pub fn prediction_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.jsonl"))
}

pub fn write_predictions(dir: &Path, image_id: &str, records: &[PredictionRecord]) -> Result<()> {
    write_jsonl(&prediction_path(dir, image_id), records)
}

/// Scored pairs of one image and source, in file order.
pub fn read_predictions(dir: &Path, image_id: &str, source: PairSource) -> Result<Vec<ScoredPair>> {
    Ok(read_jsonl::<PredictionRecord>(&prediction_path(dir, image_id))?
        .into_iter()
        .filter(|(_, r)| r.source == source)
        .map(|(_, r)| ScoredPair {
            pair: r.pair,
            scores: r.scores,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor_graph::{build_anchor_bank, PairAnnotation};
    use crate::geometry::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn graph_round_trip_is_exact() {
        let g = PredicateGraph::from_weights(
            labels(&["on", "next to", "walk next to"]),
            vec![0.0, 1.0, 1.0, 1.0, 0.0, 3.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.edges");
        write_graph(&p, &g).unwrap();
        assert_eq!(read_graph(&p).unwrap(), g);
        assert_eq!(read_tensor(&p.with_extension("rlt")).unwrap().dims(), &[3, 3]);
        std::fs::write(&p, "node\t0\ta\nedge\t0\t5\t1\n").unwrap();
        assert!(matches!(read_graph(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn anchor_bank_round_trip() {
        let b = |x, y| BBox::new(x, y, 4.0, 4.0).unwrap();
        let anns = vec![
            PairAnnotation { sub: b(0.0, 0.0), ob: b(4.0, 0.0), predicate: 0 },
            PairAnnotation { sub: b(0.0, 0.0), ob: b(0.0, 4.0), predicate: 1 },
        ];
        let bank = build_anchor_bank(&anns, 3, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let names = labels(&["a", "b", "c"]);
        write_anchor_bank(dir.path(), &bank, &names, true).unwrap();
        let (back, l) = read_anchor_bank(dir.path()).unwrap();
        assert_eq!(l, names);
        assert_eq!(back, bank);
        assert!(dir.path().join("png/2_ob.png").exists());
    }

    #[test]
    fn checkpoints_round_trip_through_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = OrmHead::init(3, 5, &mut rng);
        let shape = FusionShape { vis_dim: 6, lang_dim: 4, fused_dim: 5, num_predicates: 3 };
        let model = PredicateModel {
            fusion: FusionParams::init(shape, FusionMode::Concat, &mut rng),
            ggnn: Some(GgnnParams::init(4, 2, &mut rng).unwrap()),
        };
        let graph = PredicateGraph::disconnected(labels(&["x", "y", "z"]));
        let dir = tempfile::tempdir().unwrap();
        save_orm(dir.path(), &head).unwrap();
        save_prm(dir.path(), &model, &graph).unwrap();
        let h2 = load_orm(dir.path()).unwrap();
        let (m2, g2) = load_prm(dir.path()).unwrap();
        assert_eq!(g2, graph);
        let close = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).all(|(x, y)| (*x as f32) as f64 == *y);
        assert!(close(head.flatten(), h2.flatten()));
        assert_eq!(model.layout(), m2.layout());
        assert!(close(model.flatten(), m2.flatten()));
        std::fs::remove_file(dir.path().join("orm/output.bias.rlt")).unwrap();
        assert!(matches!(load_orm(dir.path()), Err(Error::Io { .. })));
    }
}
