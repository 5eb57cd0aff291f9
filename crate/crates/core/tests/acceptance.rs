//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::HashSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relloc::anchor_graph::{build_predicate_graph, LocationAnchor};
use relloc::config::Config;
use relloc::detection::{Detection, DetectionSet};
use relloc::evaluation::{evaluate_image, GroundTruthTriplet, ScoredPair, Task};
use relloc::geometry::{encode_relative_location, iou, tri_iou, BBox};
use relloc::pair_rating::{assemble_orm_input, orm_score, OrmHead};
use relloc::pipeline;
use relloc::proposing::{i_nms, PairProposal, ProposingConfig};
use relloc::synth::{write_dataset, SynthSpec};
use relloc::training::instances::Component;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox::new(x, y, w, h).unwrap()
}

// ---------------------------------------------------------------------------
// 1. i-NMS against a literal transcription of the greedy pair suppression.

/// Straight transcription: score every ordered pair, then repeatedly take
/// the best one out of the pool and drop everything it suppresses.
fn algorithm_one(dets: &DetectionSet, head: &OrmHead, n_o: usize, n_t: f64, floor: f64) -> Vec<(usize, usize, f64)> {
    let mut pool = Vec::new();
    for i in 0..dets.len() {
        for j in 0..dets.len() {
            let (s, o) = (&dets[i], &dets[j]);
            if i == j || s.objectiveness < floor || o.objectiveness < floor {
                continue;
            }
            let loc = encode_relative_location(&s.bbox, &o.bbox);
            let s_orm = orm_score(&assemble_orm_input(&s.feature, &o.feature, &loc).unwrap(), head).unwrap();
            pool.push((i, j, s_orm * s.objectiveness * o.objectiveness));
        }
    }
    let mut out = Vec::new();
    while !pool.is_empty() && out.len() < n_o {
        let mut m = 0;
        for c in 1..pool.len() {
            let (best, cand) = (pool[m], pool[c]);
            if cand.2 > best.2 || (cand.2 == best.2 && (cand.0, cand.1) < (best.0, best.1)) {
                m = c;
            }
        }
        let (mi, mj, ms) = pool.remove(m);
        out.push((mi, mj, ms));
        pool.retain(|&(i, j, _)| {
            let same = dets[i].category == dets[mi].category && dets[j].category == dets[mj].category;
            !(same && iou(&dets[mi].bbox, &dets[i].bbox) * iou(&dets[mj].bbox, &dets[j].bbox) >= n_t)
        });
    }
    out
}

fn random_detections(rng: &mut impl Rng, feature_dim: usize) -> DetectionSet {
    let n = rng.gen_range(0..=8);
    let categories = rng.gen_range(1..=5);
    // A few anchor spots so that overlapping same-category pairs are common.
    let spots: Vec<(f64, f64)> = (0..3).map(|_| (rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0))).collect();
    let dets = (0..n)
        .map(|_| {
            let (cx, cy) = spots[rng.gen_range(0..spots.len())];
            let size = rng.gen_range(10.0..60.0);
            Detection {
                bbox: b(
                    cx + rng.gen_range(-8.0..8.0),
                    cy + rng.gen_range(-8.0..8.0),
                    size * rng.gen_range(0.8..1.2),
                    size * rng.gen_range(0.8..1.2),
                ),
                category: rng.gen_range(0..categories),
                // Coarse grid of objectiveness values makes exact score ties possible.
                objectiveness: if rng.gen_bool(0.3) { 0.5 } else { rng.gen_range(0.01..=1.0) },
                feature: (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    DetectionSet::new(dets).unwrap()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    let mut emitted = 0;
    for set in 0..1000 {
        let feature_dim = rng.gen_range(1..=4);
        // Every fourth set uses an all-zero head so all ratings tie at 0.5.
        let head = if set % 4 == 0 {
            OrmHead::zeros(feature_dim, 3)
        } else {
            OrmHead::init(feature_dim, rng.gen_range(2..=8), &mut rng)
        };
        let dets = random_detections(&mut rng, feature_dim);
        let cfg = ProposingConfig {
            n_o: if rng.gen_bool(0.5) { 110 } else { rng.gen_range(1..=12) },
            n_t: if rng.gen_bool(0.5) { 0.25 } else { rng.gen_range(0.0..=1.0) },
            objectiveness_floor: if rng.gen_bool(0.5) { 0.05 } else { 0.0 },
        };
        let got: Vec<(usize, usize, f64)> = i_nms(&dets, &head, &cfg)
            .unwrap()
            .iter()
            .map(|p| (p.sub_idx, p.ob_idx, p.score))
            .collect();
        let want = algorithm_one(&dets, &head, cfg.n_o, cfg.n_t, cfg.objectiveness_floor);
        emitted += got.len();
        let same = got.len() == want.len()
            && got.iter().zip(&want).all(|(g, w)| g.0 == w.0 && g.1 == w.1 && g.2.to_bits() == w.2.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 sets, {emitted} proposals, {mismatches} mismatches"))
}

// ---------------------------------------------------------------------------
// 2. Geometry invariants.

fn random_box(rng: &mut impl Rng) -> BBox {
    b(rng.gen_range(-300.0..300.0), rng.gen_range(-300.0..300.0), rng.gen_range(0.5..200.0), rng.gen_range(0.5..200.0))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = Vec::new();
    for case in 0..10_000 {
        let (a, c) = (random_box(&mut rng), random_box(&mut rng));
        let v = iou(&a, &c);
        if v != iou(&c, &a) || !(0.0..=1.0).contains(&v) || (iou(&a, &a) - 1.0).abs() > 1e-12 {
            failures.push(format!("iou case {case}"));
        }

        let gts: Vec<(BBox, BBox)> = (0..rng.gen_range(0..4)).map(|_| (random_box(&mut rng), random_box(&mut rng))).collect();
        let oracle = gts.iter().map(|(s, o)| iou(&a, s) * iou(&c, o)).fold(0.0, f64::max);
        let base = tri_iou((&a, &c), &gts);
        let mut more = gts.clone();
        more.push((random_box(&mut rng), random_box(&mut rng)));
        if (base - oracle).abs() > 1e-12 || tri_iou((&a, &c), &more) < base {
            failures.push(format!("tri_iou case {case}"));
        }

        let e = encode_relative_location(&a, &c);
        let norm = e.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        let (dx, dy, s) = (rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3), rng.gen_range(0.05..20.0));
        let t = encode_relative_location(&a.translated(dx, dy).unwrap(), &c.translated(dx, dy).unwrap());
        let sc = encode_relative_location(&a.scaled(s).unwrap(), &c.scaled(s).unwrap());
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-9);
        if (norm - 1.0).abs() > 1e-6 || !close(e.as_slice(), t.as_slice()) || !close(e.as_slice(), sc.as_slice()) {
            failures.push(format!("encoding case {case}"));
        }
    }
    let detail = match failures.first() {
        None => "10000 pairs".to_string(),
        Some(f) => format!("{} failures, first: {f}", failures.len()),
    };
    outcome(failures.is_empty(), detail)
}

// ---------------------------------------------------------------------------
// 3. Finite-difference gradient checks.

fn criterion_3() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, c) in [("orm", Component::Orm), ("fusion", Component::Fusion), ("ggnn", Component::Ggnn), ("prm", Component::Prm)] {
        match pipeline::gradcheck(c, 20, 303, 1e-4, 1e-3) {
            Ok(s) => {
                pass &= s.pass && s.instances >= 20;
                parts.push(format!("{name} {:.1e}", s.max_rel_err));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} error: {e}"));
            }
        }
    }
    outcome(pass, format!("20 instances each, max rel err: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 4. Predicate graph construction.

fn mse_oracle(a: &LocationAnchor, c: &LocationAnchor) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.sub_mask.len() {
        sum += (a.sub_mask[i] - c.sub_mask[i]).powi(2);
        sum += (a.ob_mask[i] - c.ob_mask[i]).powi(2);
    }
    sum / 2.0
}

fn related_oracle(a: &str, c: &str) -> bool {
    let (ta, tc): (Vec<&str>, Vec<&str>) = (a.split(' ').collect(), c.split(' ').collect());
    let within = |hay: &[&str], needle: &[&str]| (0..=hay.len().saturating_sub(needle.len())).any(|s| hay.len() >= needle.len() && hay[s..s + needle.len()] == *needle);
    within(&ta, &tc) || within(&tc, &ta)
}

fn graph_oracle(anchors: &[LocationAnchor], labels: &[String], thresh: f64) -> Vec<f64> {
    let n = labels.len();
    let mut w = vec![0.0; n * n];
    for v in 0..n {
        for u in 0..n {
            let close = anchors[v].count > 0 && anchors[u].count > 0 && mse_oracle(&anchors[v], &anchors[u]) < thresh;
            if u != v && (close || related_oracle(&labels[v], &labels[u])) {
                w[v * n + u] = 1.0;
            }
        }
        let sum: f64 = w[v * n..(v + 1) * n].iter().sum();
        if sum > 0.0 {
            for u in 0..n {
                w[v * n + u] /= sum;
            }
        }
    }
    w
}

/// Mask with ones on the cells where `f(row, col)` holds.
fn mask(r: usize, f: impl Fn(usize, usize) -> bool) -> Vec<f64> {
    (0..r * r).map(|i| if f(i / r, i % r) { 1.0 } else { 0.0 }).collect()
}

fn rows_ok(adjacency: &[f64], n: usize) -> bool {
    (0..n).all(|v| {
        let s: f64 = adjacency[v * n..(v + 1) * n].iter().sum();
        s == 0.0 || (s - 1.0).abs() <= 1e-9
    })
}

fn criterion_4() -> Outcome {
    let r = 8;
    let labels: Vec<String> = ["walk next to", "walk", "next to", "ride", "on"].map(String::from).to_vec();
    let anchor = |sub, ob, count| LocationAnchor::from_masks(r, sub, ob, count).unwrap();
    let left = mask(r, |_, c| c < 4);
    let right = mask(r, |_, c| c >= 4);
    let top = mask(r, |row, _| row < 4);
    let bottom = mask(r, |row, _| row >= 4);
    let mut right_nudged = right.clone();
    right_nudged[0] = 1.0;
    let mut top_soft = top.clone();
    top_soft.iter_mut().for_each(|v| *v *= 0.9);
    let bank = vec![
        anchor(left.clone(), right.clone(), 10),
        anchor(left.clone(), right_nudged, 4),
        anchor(top.clone(), bottom.clone(), 7),
        anchor(top_soft, bottom.clone(), 3),
        anchor(bottom, top, 0),
    ];

    let mut mismatches = 0;
    let mut checks = 0;
    let mut rows = true;
    for thresh in [0.1, 0.6, 2.0, 17.0, 40.0, 1000.0] {
        let g = build_predicate_graph(&bank, &labels, thresh).unwrap();
        let want = graph_oracle(&bank, &labels, thresh);
        checks += 1;
        if g.adjacency().iter().zip(&want).any(|(x, y)| (x - y).abs() > 1e-12) {
            mismatches += 1;
        }
        rows &= rows_ok(g.adjacency(), 5);
    }

    // Random anchors with soft masks.
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..200 {
        let r = rng.gen_range(2..=6);
        let random_mask = |rng: &mut ChaCha8Rng| (0..r * r).map(|_| rng.gen_range(0.0..=1.0)).collect::<Vec<f64>>();
        let anchors: Vec<LocationAnchor> = (0..5)
            .map(|_| {
                let (s, o) = (random_mask(&mut rng), random_mask(&mut rng));
                LocationAnchor::from_masks(r, s, o, rng.gen_range(0..3)).unwrap()
            })
            .collect();
        let thresh = rng.gen_range(0.1..(r * r) as f64);
        let g = build_predicate_graph(&anchors, &labels, thresh).unwrap();
        let want = graph_oracle(&anchors, &labels, thresh);
        checks += 1;
        if g.adjacency().iter().zip(&want).any(|(x, y)| (x - y).abs() > 1e-12) {
            mismatches += 1;
        }
        rows &= rows_ok(g.adjacency(), 5);
    }

    // Containment alone.
    let words: Vec<String> = ["walk next to", "walk", "next to"].map(String::from).to_vec();
    let empty = vec![LocationAnchor::empty(r); 3];
    let g = build_predicate_graph(&empty, &words, 1000.0).unwrap();
    let edges: HashSet<(usize, usize)> = g.edges().iter().map(|&(v, u, _)| (v.min(u), v.max(u))).collect();
    let containment = edges == HashSet::from([(0, 1), (0, 2)]) && g.edges().len() == 4;
    rows &= rows_ok(g.adjacency(), 3);

    outcome(
        mismatches == 0 && containment && rows,
        format!("{checks} graphs, {mismatches} oracle mismatches, containment edges {edges:?}, rows ok: {rows}"),
    )
}

// ---------------------------------------------------------------------------
// 5. Recall against an exhaustive matching oracle.

fn union(a: &BBox, c: &BBox) -> BBox {
    BBox::from_corners(a.x().min(c.x()), a.y().min(c.y()), a.right().max(c.right()), a.bottom().max(c.bottom())).unwrap()
}

fn hits(pair: &PairProposal, predicate: usize, gt: &GroundTruthTriplet, task: Task) -> bool {
    if predicate != gt.predicate || pair.sub_cat != gt.sub_cat || pair.ob_cat != gt.ob_cat {
        return false;
    }
    match task {
        Task::Predicate => pair.sub_box == gt.sub_box && pair.ob_box == gt.ob_box,
        Task::Phrase => iou(&union(&pair.sub_box, &pair.ob_box), &union(&gt.sub_box, &gt.ob_box)) >= 0.5,
        Task::Relationship => iou(&pair.sub_box, &gt.sub_box) >= 0.5 && iou(&pair.ob_box, &gt.ob_box) >= 0.5,
    }
}

/// Largest number of ground truths that can be assigned distinct predictions.
fn max_matching(compatible: &[Vec<bool>], gt: usize, used: &mut Vec<bool>) -> usize {
    if gt == compatible.len() {
        return 0;
    }
    let mut best = max_matching(compatible, gt + 1, used);
    for p in 0..used.len() {
        if compatible[gt][p] && !used[p] {
            used[p] = true;
            best = best.max(1 + max_matching(compatible, gt + 1, used));
            used[p] = false;
        }
    }
    best
}

/// One prediction per pair (its best predicate), best `n` pairs, then the
/// maximum matching.
fn single_prediction_oracle(pairs: &[ScoredPair], gts: &[GroundTruthTriplet], task: Task, n: usize) -> usize {
    let argmax = |s: &[f64]| (0..s.len()).fold(0, |m, i| if s[i] > s[m] { i } else { m });
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&x, &y| pairs[y].scores[argmax(&pairs[y].scores)].total_cmp(&pairs[x].scores[argmax(&pairs[x].scores)]).then(x.cmp(&y)));
    order.truncate(n);
    let compatible: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| order.iter().map(|&i| hits(&pairs[i].pair, argmax(&pairs[i].scores), g, task)).collect())
        .collect();
    max_matching(&compatible, 0, &mut vec![false; order.len()])
}

fn random_scene(rng: &mut impl Rng) -> (Vec<GroundTruthTriplet>, Vec<ScoredPair>) {
    let gts: Vec<GroundTruthTriplet> = (0..rng.gen_range(0..=5))
        .map(|_| GroundTruthTriplet {
            sub_box: b(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), rng.gen_range(8.0..30.0), rng.gen_range(8.0..30.0)),
            ob_box: b(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), rng.gen_range(8.0..30.0), rng.gen_range(8.0..30.0)),
            sub_cat: rng.gen_range(0..2),
            ob_cat: rng.gen_range(0..2),
            predicate: rng.gen_range(0..3),
        })
        .collect();
    let pairs = (0..rng.gen_range(0..=10))
        .map(|i| {
            let (sub_box, ob_box, sub_cat, ob_cat) = match gts.get(rng.gen_range(0..gts.len() + 1)) {
                Some(g) if rng.gen_bool(0.3) => (g.sub_box, g.ob_box, g.sub_cat, g.ob_cat),
                Some(g) => {
                    let (dx, dy) = (rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0));
                    (g.sub_box.translated(dx, dy).unwrap(), g.ob_box.translated(dx, dy).unwrap(), g.sub_cat, g.ob_cat)
                }
                None => (random_box(rng), random_box(rng), rng.gen_range(0..2), rng.gen_range(0..2)),
            };
            ScoredPair {
                pair: PairProposal { sub_idx: i, ob_idx: i + 1, sub_box, ob_box, sub_cat, ob_cat, rating: 1.0, score: 1.0 },
                scores: (0..3).map(|_| rng.gen_range(0.0..1.0)).collect(),
            }
        })
        .collect();
    (gts, pairs)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut oracle_failures, mut monotone_failures, mut matched) = (0, 0, 0);
    for _ in 0..500 {
        let (gts, pairs) = random_scene(&mut rng);
        for task in [Task::Predicate, Task::Phrase, Task::Relationship] {
            let grid: Vec<Vec<usize>> = (1..=12)
                .map(|n| (1..=3).map(|k| evaluate_image(&pairs, &gts, task, n, k, 0.5).matched).collect())
                .collect();
            for (ni, row) in grid.iter().enumerate() {
                let want = single_prediction_oracle(&pairs, &gts, task, ni + 1);
                matched += want;
                if row[0] != want {
                    oracle_failures += 1;
                }
                let k_ok = row.windows(2).all(|w| w[0] <= w[1]);
                let n_ok = grid.get(ni + 1).map_or(true, |next| row.iter().zip(next).all(|(x, y)| x <= y));
                if !(k_ok && n_ok) {
                    monotone_failures += 1;
                }
            }
        }
    }
    outcome(
        oracle_failures == 0 && monotone_failures == 0,
        format!("500 scenes x 3 tasks x n=1..12, {matched} oracle matches, {oracle_failures} oracle mismatches, {monotone_failures} monotonicity violations"),
    )
}

// ---------------------------------------------------------------------------
// 6 and 7. End-to-end synthetic experiment.

#[derive(Debug, Clone, PartialEq)]
struct Metrics {
    relationship_k1: f64,
    phrase_k1: f64,
    predicate_k1: f64,
    predicate_kv_ggnn: f64,
    predicate_kv_plain: f64,
    predicate_k1_plain: f64,
    final_loss_orm: f64,
    final_loss_prm: f64,
}

impl Metrics {
    fn bits(&self) -> Vec<u64> {
        [
            self.relationship_k1,
            self.phrase_k1,
            self.predicate_k1,
            self.predicate_kv_ggnn,
            self.predicate_kv_plain,
            self.predicate_k1_plain,
            self.final_loss_orm,
            self.final_loss_prm,
        ]
        .map(f64::to_bits)
        .to_vec()
    }
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        std::fs::copy(entry.path(), to.join(entry.file_name()))?;
    }
    Ok(())
}

fn end_to_end(root: &Path) -> relloc::Result<Metrics> {
    let (train, test) = (root.join("train"), root.join("test"));
    write_dataset(&SynthSpec { num_images: 500, seed: 11, ..SynthSpec::default() }, &train)?;
    write_dataset(&SynthSpec { num_images: 100, seed: 12, ..SynthSpec::default() }, &test)?;
    let cfg = Config::default();
    let num_predicates = SynthSpec::default().predicates.len();

    let ckpt = root.join("ckpt");
    let (_, orm) = pipeline::train_orm(&train, &cfg, &ckpt)?;
    pipeline::build_anchors(&train, cfg.anchors.resolution, &root.join("anchors"), false)?;
    let graph = root.join("graph.edges");
    pipeline::build_graph(&root.join("anchors"), cfg.anchors.mse_thresh, &graph)?;
    let (_, prm) = pipeline::train_prm(&train, &graph, &cfg, &ckpt)?;
    let proposing = ProposingConfig { n_o: 110, n_t: 0.25, ..cfg.proposing.clone() };
    pipeline::infer(&test, &ckpt, &proposing, &root.join("preds"))?;

    let mut plain_cfg = cfg.clone();
    plain_cfg.prm.use_ggnn = false;
    let plain = root.join("ckpt_plain");
    copy_dir(&ckpt.join(relloc::io::model::ORM_DIR), &plain.join(relloc::io::model::ORM_DIR)).map_err(|source| relloc::Error::Io { path: plain.clone(), source })?;
    pipeline::train_prm(&train, &graph, &plain_cfg, &plain)?;
    pipeline::infer(&test, &plain, &proposing, &root.join("preds_plain"))?;

    let eval = |preds: &str, task, k| pipeline::evaluate(&root.join(preds), &test, task, 50, k, &cfg, None).map(|r| r.recall);
    Ok(Metrics {
        relationship_k1: eval("preds", Task::Relationship, 1)?,
        phrase_k1: eval("preds", Task::Phrase, 1)?,
        predicate_k1: eval("preds", Task::Predicate, 1)?,
        predicate_kv_ggnn: eval("preds", Task::Predicate, num_predicates)?,
        predicate_kv_plain: eval("preds_plain", Task::Predicate, num_predicates)?,
        predicate_k1_plain: eval("preds_plain", Task::Predicate, 1)?,
        final_loss_orm: orm.final_loss.unwrap_or(f64::NAN),
        final_loss_prm: prm.final_loss.unwrap_or(f64::NAN),
    })
}

fn report(id: &str, name: &str, o: &Outcome, elapsed: Duration) -> bool {
    println!(
        "{} {id:>2} {name}: {} ({:.2} s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    o.pass
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if !within(limit, elapsed) {
            o.pass = false;
            o.detail.push_str(&format!(", over the {} s budget", limit.as_secs()));
        }
    }
    (o, elapsed)
}

fn main() -> ExitCode {
    // `cargo test -- <filter>` passes arguments; this suite always runs whole,
    // except that `--list` must not run anything.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let secs = Duration::from_secs;
    let mut all = true;

    let (o, t) = timed(Some(secs(30)), criterion_1);
    all &= report("1", "i-NMS matches the literal greedy transcription", &o, t);
    let (o, t) = timed(Some(secs(10)), criterion_2);
    all &= report("2", "geometry invariants", &o, t);
    let (o, t) = timed(Some(secs(60)), criterion_3);
    all &= report("3", "gradient checks at 1e-3", &o, t);
    let (o, t) = timed(None, criterion_4);
    all &= report("4", "predicate graph construction", &o, t);
    let (o, t) = timed(None, criterion_5);
    all &= report("5", "recall fidelity and monotonicity", &o, t);

    let dir = tempfile::tempdir().expect("temp dir");
    let mut first = None;
    let (o, t) = timed(Some(secs(600)), || match end_to_end(&dir.path().join("run1")) {
        Ok(m) => {
            let pass = m.relationship_k1 >= 0.85 && m.predicate_k1 >= 0.90 && m.predicate_kv_ggnn >= m.predicate_kv_plain;
            let detail = format!(
                "relationship R@50,k=1 {:.4} (>= 0.85), predicate R@50,k=1 {:.4} (>= 0.90), predicate R@50,k=5 with GGNN {:.4} vs without {:.4}; phrase R@50,k=1 {:.4}, predicate R@50,k=1 without GGNN {:.4}",
                m.relationship_k1, m.predicate_k1, m.predicate_kv_ggnn, m.predicate_kv_plain, m.phrase_k1, m.predicate_k1_plain
            );
            first = Some(m);
            outcome(pass, detail)
        }
        Err(e) => outcome(false, format!("pipeline error: {e}")),
    });
    all &= report("6", "end-to-end synthetic experiment", &o, t);

    // Second run on a smaller thread pool: the results must not depend on
    // scheduling.
    let (o, t) = timed(None, || {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().expect("thread pool");
        match (pool.install(|| end_to_end(&dir.path().join("run2"))), &first) {
            (Ok(m), Some(f)) => {
                let same = m.bits() == f.bits();
                outcome(same, if same { "all 8 metrics bit-identical".into() } else { format!("run 1 {f:?}, run 2 {m:?}") })
            }
            (Err(e), _) => outcome(false, format!("pipeline error: {e}")),
            (_, None) => outcome(false, "first run did not finish"),
        }
    });
    all &= report("7", "determinism of the end-to-end run", &o, t);

    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some criteria failed");
        ExitCode::FAILURE
    }
}
