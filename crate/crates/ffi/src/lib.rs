//! C ABI over the `relloc` library.
//!
//! Every function returns a [`RellocStatus`]; results go through out
//! pointers. On failure a message is kept per thread and can be read with
//! [`relloc_last_error`]. Handles are opaque and must be released with their
//! `_free` function. Boxes are `double[4]` in `(x, y, w, h)` order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use relloc::anchor_graph::PredicateGraph;
use relloc::detection::{Detection, DetectionSet};
use relloc::geometry::{encode_relative_location, iou, tri_iou, BBox, REL_LOC_DIM};
use relloc::io::dataset::read_embeddings;
use relloc::io::model::{load_orm, load_prm, read_graph};
use relloc::pair_rating::OrmHead;
use relloc::pipeline::prm_input;
use relloc::predicate_recognition::{EmbeddingTable, PredicateModel};
use relloc::proposing::{i_nms, ProposingConfig};
use relloc::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RellocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Numeric = 4,
    Lookup = 5,
    Index = 6,
    Parse = 7,
    Io = 8,
    /// Output buffer too small; the needed length is still reported.
    BufferTooSmall = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RellocStatus {
    match e {
        Error::Input(_) => RellocStatus::InvalidInput,
        Error::Config(_) => RellocStatus::Config,
        Error::Numeric(_) => RellocStatus::Numeric,
        Error::Lookup(_) => RellocStatus::Lookup,
        Error::Index(_) => RellocStatus::Index,
        Error::Parse { .. } => RellocStatus::Parse,
        Error::Io { .. } => RellocStatus::Io,
    }
}

struct Fail(RellocStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RellocStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RellocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RellocStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RellocStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn read_box(p: *const f64, what: &str) -> Result<BBox, Fail> {
    let s = slice(p, 4, what)?;
    Ok(BBox::new(s[0], s[1], s[2], s[3])?)
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(RellocStatus::InvalidInput, format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn relloc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Intersection over union of two boxes.
///
/// # Safety
/// `a` and `b` point to 4 doubles, `out` to one.
#[no_mangle]
pub unsafe extern "C" fn relloc_iou(a: *const f64, b: *const f64, out: *mut f64) -> RellocStatus {
    guard(|| {
        let v = iou(&read_box(a, "a")?, &read_box(b, "b")?);
        write_out(out, v, "out")
    })
}

/// The 14-value relative-location encoding of a (subject, object) pair.
///
/// # Safety
/// `sub` and `ob` point to 4 doubles, `out` to 14.
#[no_mangle]
pub unsafe extern "C" fn relloc_encode_relative_location(sub: *const f64, ob: *const f64, out: *mut f64) -> RellocStatus {
    guard(|| {
        let enc = encode_relative_location(&read_box(sub, "sub")?, &read_box(ob, "ob")?);
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(enc.as_slice().as_ptr(), out, REL_LOC_DIM);
        Ok(())
    })
}

/// Best product of subject and object IoU against `n_gt` ground-truth pairs,
/// given as `n_gt * 8` doubles (subject box then object box).
///
/// # Safety
/// `sub`, `ob` point to 4 doubles, `gt_pairs` to `8 * n_gt`, `out` to one.
#[no_mangle]
pub unsafe extern "C" fn relloc_tri_iou(
    sub: *const f64,
    ob: *const f64,
    gt_pairs: *const f64,
    n_gt: usize,
    out: *mut f64,
) -> RellocStatus {
    guard(|| {
        let (s, o) = (read_box(sub, "sub")?, read_box(ob, "ob")?);
        let raw = slice(gt_pairs, 8 * n_gt, "gt_pairs")?;
        let gt = raw
            .chunks_exact(8)
            .map(|c| Ok((BBox::new(c[0], c[1], c[2], c[3])?, BBox::new(c[4], c[5], c[6], c[7])?)))
            .collect::<Result<Vec<_>, Error>>()?;
        write_out(out, tri_iou((&s, &o), &gt), "out")
    })
}

/// A trained pair-rating head.
pub struct RellocOrm {
    head: OrmHead,
}

/// Loads the rating head from a checkpoint directory.
///
/// # Safety
/// `ckpt_dir` is a NUL-terminated path, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn relloc_orm_load(ckpt_dir: *const c_char, out: *mut *mut RellocOrm) -> RellocStatus {
    guard(|| {
        let head = load_orm(Path::new(read_str(ckpt_dir, "ckpt_dir")?))?;
        write_out(out, Box::into_raw(Box::new(RellocOrm { head })), "out")
    })
}

/// Appearance feature length the head expects per detection.
///
/// # Safety
/// `orm` comes from [`relloc_orm_load`].
#[no_mangle]
pub unsafe extern "C" fn relloc_orm_feature_dim(orm: *const RellocOrm, out: *mut usize) -> RellocStatus {
    guard(|| {
        let orm = orm.as_ref().ok_or_else(|| null("orm"))?;
        write_out(out, orm.head.feature_dim(), "out")
    })
}

/// # Safety
/// `orm` comes from [`relloc_orm_load`] and is not used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn relloc_orm_free(orm: *mut RellocOrm) {
    if !orm.is_null() {
        drop(Box::from_raw(orm));
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RellocDetection {
    pub bbox: [f64; 4],
    pub category: usize,
    pub objectiveness: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RellocPair {
    pub sub_idx: usize,
    pub ob_idx: usize,
    pub rating: f64,
    pub score: f64,
}

/// Pair proposing with i-NMS. `features` holds `n * feature_dim` doubles,
/// one row per detection. At most `capacity` pairs are written to `out`;
/// `out_len` receives the full count, and [`RellocStatus::BufferTooSmall`] is
/// returned if it exceeds `capacity`.
///
/// # Safety
/// Array pointers cover the lengths given; `out` covers `capacity` pairs.
#[no_mangle]
pub unsafe extern "C" fn relloc_i_nms(
    orm: *const RellocOrm,
    detections: *const RellocDetection,
    n: usize,
    features: *const f64,
    feature_dim: usize,
    n_o: usize,
    n_t: f64,
    objectiveness_floor: f64,
    out: *mut RellocPair,
    capacity: usize,
    out_len: *mut usize,
) -> RellocStatus {
    guard(|| {
        let orm = orm.as_ref().ok_or_else(|| null("orm"))?;
        let dets = slice(detections, n, "detections")?;
        let feats = slice(features, n * feature_dim, "features")?;
        let set = DetectionSet::new(
            dets.iter()
                .enumerate()
                .map(|(i, d)| {
                    Ok(Detection {
                        bbox: BBox::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3])?,
                        category: d.category,
                        objectiveness: d.objectiveness,
                        feature: feats[i * feature_dim..(i + 1) * feature_dim].to_vec(),
                    })
                })
                .collect::<Result<_, Error>>()?,
        )?;
        let cfg = ProposingConfig {
            n_o,
            n_t,
            objectiveness_floor,
        };
        let pairs = i_nms(&set, &orm.head, &cfg)?;
        write_out(out_len, pairs.len(), "out_len")?;
        if pairs.len() > capacity {
            return Err(Fail(
                RellocStatus::BufferTooSmall,
                format!("{} pairs do not fit a buffer of {capacity}", pairs.len()),
            ));
        }
        if !pairs.is_empty() && out.is_null() {
            return Err(null("out"));
        }
        for (i, p) in pairs.iter().enumerate() {
            out.add(i).write(RellocPair {
                sub_idx: p.sub_idx,
                ob_idx: p.ob_idx,
                rating: p.rating,
                score: p.score,
            });
        }
        Ok(())
    })
}

/// A predicate graph read from an edge-list file.
pub struct RellocGraph {
    graph: PredicateGraph,
}

/// # Safety
/// `path` is a NUL-terminated path, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn relloc_graph_load(path: *const c_char, out: *mut *mut RellocGraph) -> RellocStatus {
    guard(|| {
        let graph = read_graph(Path::new(read_str(path, "path")?))?;
        write_out(out, Box::into_raw(Box::new(RellocGraph { graph })), "out")
    })
}

/// # Safety
/// `graph` comes from [`relloc_graph_load`].
#[no_mangle]
pub unsafe extern "C" fn relloc_graph_num_nodes(graph: *const RellocGraph, out: *mut usize) -> RellocStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        write_out(out, g.graph.num_nodes(), "out")
    })
}

/// Normalized adjacency weight from node `v` to node `u`.
///
/// # Safety
/// `graph` comes from [`relloc_graph_load`].
#[no_mangle]
pub unsafe extern "C" fn relloc_graph_weight(graph: *const RellocGraph, v: usize, u: usize, out: *mut f64) -> RellocStatus {
    guard(|| {
        let g = &graph.as_ref().ok_or_else(|| null("graph"))?.graph;
        let n = g.num_nodes();
        if v >= n || u >= n {
            return Err(Fail(RellocStatus::Index, format!("({v}, {u}) in a graph of {n} nodes")));
        }
        write_out(out, g.weight(v, u), "out")
    })
}

/// # Safety
/// `graph` comes from [`relloc_graph_load`] and is not used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn relloc_graph_free(graph: *mut RellocGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Predicate model with its graph and word vectors.
pub struct RellocPredictor {
    model: PredicateModel,
    graph: PredicateGraph,
    embeddings: EmbeddingTable,
}

/// Loads the predicate model from a checkpoint and word vectors from a text
/// embedding file.
///
/// # Safety
/// Both paths are NUL-terminated, `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn relloc_predictor_load(
    ckpt_dir: *const c_char,
    embeddings_file: *const c_char,
    out: *mut *mut RellocPredictor,
) -> RellocStatus {
    guard(|| {
        let (model, graph) = load_prm(Path::new(read_str(ckpt_dir, "ckpt_dir")?))?;
        let embeddings = read_embeddings(Path::new(read_str(embeddings_file, "embeddings_file")?))?;
        let p = RellocPredictor { model, graph, embeddings };
        write_out(out, Box::into_raw(Box::new(p)), "out")
    })
}

/// # Safety
/// `predictor` comes from [`relloc_predictor_load`].
#[no_mangle]
pub unsafe extern "C" fn relloc_predictor_num_predicates(predictor: *const RellocPredictor, out: *mut usize) -> RellocStatus {
    guard(|| {
        let p = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        write_out(out, p.model.num_predicates(), "out")
    })
}

/// Predicate probabilities for one pair. `sub_feature` and `ob_feature` hold
/// `feature_dim` doubles each; labels are category names known to the word
/// vectors. `out` receives one probability per predicate.
///
/// # Safety
/// Pointers cover the lengths given; `out` covers `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn relloc_predict(
    predictor: *const RellocPredictor,
    sub_box: *const f64,
    ob_box: *const f64,
    sub_feature: *const f64,
    ob_feature: *const f64,
    feature_dim: usize,
    sub_label: *const c_char,
    ob_label: *const c_char,
    out: *mut f64,
    capacity: usize,
) -> RellocStatus {
    guard(|| {
        let p = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        let n = p.model.num_predicates();
        if capacity < n {
            return Err(Fail(RellocStatus::BufferTooSmall, format!("{n} predicates, buffer of {capacity}")));
        }
        let (sb, ob) = (read_box(sub_box, "sub_box")?, read_box(ob_box, "ob_box")?);
        let input = prm_input(
            (&sb, slice(sub_feature, feature_dim, "sub_feature")?, read_str(sub_label, "sub_label")?),
            (&ob, slice(ob_feature, feature_dim, "ob_feature")?, read_str(ob_label, "ob_label")?),
            &p.embeddings,
        )?;
        let probs = p.model.predict(&input, &p.graph)?;
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(probs.as_slice().as_ptr(), out, n);
        Ok(())
    })
}

/// # Safety
/// `predictor` comes from [`relloc_predictor_load`] and is not used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn relloc_predictor_free(predictor: *mut RellocPredictor) {
    if !predictor.is_null() {
        drop(Box::from_raw(predictor));
    }
}
