use std::ffi::{CStr, CString};
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use relloc::anchor_graph::PredicateGraph;
use relloc::detection::{Detection, DetectionSet};
use relloc::geometry::{encode_relative_location, BBox};
use relloc::io::dataset::write_embeddings;
use relloc::io::model::{save_orm, save_prm, write_graph};
use relloc::pair_rating::OrmHead;
use relloc::pipeline::{init_predicate_model, prm_input};
use relloc::predicate_recognition::EmbeddingTable;
use relloc::proposing::{i_nms, ProposingConfig};
use relloc_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(relloc_last_error()) }.to_str().unwrap().to_string()
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn geometry_calls() {
    let a = [0.0, 0.0, 10.0, 10.0];
    let b = [5.0, 0.0, 10.0, 10.0];
    let mut v = 0.0;
    assert_eq!(unsafe { relloc_iou(a.as_ptr(), b.as_ptr(), &mut v) }, RellocStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-12);

    let mut enc = [0.0; 14];
    assert_eq!(unsafe { relloc_encode_relative_location(a.as_ptr(), b.as_ptr(), enc.as_mut_ptr()) }, RellocStatus::Ok);
    let expected = encode_relative_location(&BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), &BBox::new(5.0, 0.0, 10.0, 10.0).unwrap());
    assert_eq!(&enc[..], expected.as_slice());

    let gt = [0.0, 0.0, 10.0, 10.0, 5.0, 0.0, 10.0, 10.0, 100.0, 100.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
    assert_eq!(unsafe { relloc_tri_iou(a.as_ptr(), b.as_ptr(), gt.as_ptr(), 2, &mut v) }, RellocStatus::Ok);
    assert_eq!(v, 1.0);
    assert_eq!(unsafe { relloc_tri_iou(a.as_ptr(), b.as_ptr(), ptr::null(), 0, &mut v) }, RellocStatus::Ok);
    assert_eq!(v, 0.0);
}

#[test]
fn errors_set_codes_and_messages() {
    let a = [0.0, 0.0, 10.0, 10.0];
    let bad = [0.0, 0.0, -1.0, 10.0];
    let mut v = 0.0;
    assert_eq!(unsafe { relloc_iou(a.as_ptr(), bad.as_ptr(), &mut v) }, RellocStatus::InvalidInput);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { relloc_iou(ptr::null(), a.as_ptr(), &mut v) }, RellocStatus::NullPointer);
    assert!(last_error().contains("a is null"));
    assert_eq!(unsafe { relloc_iou(a.as_ptr(), a.as_ptr(), ptr::null_mut()) }, RellocStatus::NullPointer);
    assert_eq!(unsafe { relloc_iou(a.as_ptr(), a.as_ptr(), &mut v) }, RellocStatus::Ok);
    assert!(last_error().is_empty());

    let mut orm = ptr::null_mut();
    let missing = CString::new("/nonexistent/ckpt").unwrap();
    assert_eq!(unsafe { relloc_orm_load(missing.as_ptr(), &mut orm) }, RellocStatus::Io);
    assert!(orm.is_null());
    unsafe { relloc_orm_free(ptr::null_mut()) };
}

#[test]
fn i_nms_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let head = OrmHead::init(3, 8, &mut rng);
    save_orm(dir.path(), &head).unwrap();
    let stored = relloc::io::model::load_orm(dir.path()).unwrap();

    let mut orm = ptr::null_mut();
    assert_eq!(unsafe { relloc_orm_load(cpath(dir.path()).as_ptr(), &mut orm) }, RellocStatus::Ok);
    let mut fd = 0;
    assert_eq!(unsafe { relloc_orm_feature_dim(orm, &mut fd) }, RellocStatus::Ok);
    assert_eq!(fd, 3);

    let raw = [
        ([0.0, 0.0, 10.0, 20.0], 0, 0.9),
        ([1.0, 0.0, 10.0, 20.0], 0, 0.8),
        ([15.0, 5.0, 20.0, 15.0], 1, 0.7),
        ([40.0, 40.0, 5.0, 5.0], 2, 0.6),
    ];
    let dets: Vec<RellocDetection> = raw
        .iter()
        .map(|&(bbox, category, objectiveness)| RellocDetection { bbox, category, objectiveness })
        .collect();
    let feats: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let set = DetectionSet::new(
        raw.iter()
            .enumerate()
            .map(|(i, &(b, c, p))| Detection {
                bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
                category: c,
                objectiveness: p,
                feature: feats[i * 3..i * 3 + 3].to_vec(),
            })
            .collect(),
    )
    .unwrap();
    let expected = i_nms(&set, &stored, &ProposingConfig::default()).unwrap();

    let mut out = vec![RellocPair { sub_idx: 0, ob_idx: 0, rating: 0.0, score: 0.0 }; 32];
    let mut len = 0;
    let st = unsafe {
        relloc_i_nms(orm, dets.as_ptr(), 4, feats.as_ptr(), 3, 110, 0.25, 0.05, out.as_mut_ptr(), out.len(), &mut len)
    };
    assert_eq!(st, RellocStatus::Ok);
    assert_eq!(len, expected.len());
    for (got, want) in out.iter().zip(&expected) {
        assert_eq!((got.sub_idx, got.ob_idx, got.rating, got.score), (want.sub_idx, want.ob_idx, want.rating, want.score));
    }

    let st = unsafe { relloc_i_nms(orm, dets.as_ptr(), 4, feats.as_ptr(), 3, 110, 0.25, 0.05, out.as_mut_ptr(), 2, &mut len) };
    assert_eq!(st, RellocStatus::BufferTooSmall);
    assert_eq!(len, expected.len());
    let st = unsafe { relloc_i_nms(orm, dets.as_ptr(), 4, feats.as_ptr(), 3, 0, 0.25, 0.05, out.as_mut_ptr(), 32, &mut len) };
    assert_eq!(st, RellocStatus::Config);
    unsafe { relloc_orm_free(orm) };
}

#[test]
fn graph_and_predictor_handles() {
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<String> = ["on", "next to", "walk next to"].map(String::from).to_vec();
    let graph = PredicateGraph::from_weights(labels.clone(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let gpath = dir.path().join("g.edges");
    write_graph(&gpath, &graph).unwrap();

    let mut g = ptr::null_mut();
    assert_eq!(unsafe { relloc_graph_load(cpath(&gpath).as_ptr(), &mut g) }, RellocStatus::Ok);
    let (mut n, mut w) = (0, 0.0);
    assert_eq!(unsafe { relloc_graph_num_nodes(g, &mut n) }, RellocStatus::Ok);
    assert_eq!(n, 3);
    assert_eq!(unsafe { relloc_graph_weight(g, 1, 2, &mut w) }, RellocStatus::Ok);
    assert_eq!(w, 0.5);
    assert_eq!(unsafe { relloc_graph_weight(g, 3, 0, &mut w) }, RellocStatus::Index);
    unsafe { relloc_graph_free(g) };

    let mut emb = EmbeddingTable::new(4);
    emb.insert("person", vec![1.0, 0.0, 0.5, 0.0]).unwrap();
    emb.insert("horse", vec![0.0, 1.0, 0.0, -0.5]).unwrap();
    let epath = dir.path().join("emb.txt");
    write_embeddings(&epath, &emb).unwrap();
    let model = init_predicate_model(4, 8, 3, &Default::default(), 1).unwrap();
    save_prm(dir.path(), &model, &graph).unwrap();
    let (stored, stored_graph) = relloc::io::model::load_prm(dir.path()).unwrap();

    let mut p = ptr::null_mut();
    assert_eq!(unsafe { relloc_predictor_load(cpath(dir.path()).as_ptr(), cpath(&epath).as_ptr(), &mut p) }, RellocStatus::Ok);
    assert_eq!(unsafe { relloc_predictor_num_predicates(p, &mut n) }, RellocStatus::Ok);
    assert_eq!(n, 3);
    let (sb, ob) = ([0.0, 0.0, 5.0, 5.0], [3.0, 1.0, 6.0, 4.0]);
    let (sf, of) = ([0.1, 0.2], [0.3, -0.4]);
    let (person, horse, zebra) = (CString::new("person").unwrap(), CString::new("horse").unwrap(), CString::new("zebra").unwrap());
    let mut probs = [0.0; 3];
    let call = |label: &CString, out: &mut [f64]| unsafe {
        relloc_predict(p, sb.as_ptr(), ob.as_ptr(), sf.as_ptr(), of.as_ptr(), 2, person.as_ptr(), label.as_ptr(), out.as_mut_ptr(), out.len())
    };
    assert_eq!(call(&horse, &mut probs), RellocStatus::Ok);
    let input = prm_input(
        (&BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(), &sf, "person"),
        (&BBox::new(3.0, 1.0, 6.0, 4.0).unwrap(), &of, "horse"),
        &emb,
    )
    .unwrap();
    assert_eq!(&probs[..], stored.predict(&input, &stored_graph).unwrap().as_slice());
    assert_eq!(call(&zebra, &mut probs), RellocStatus::Lookup);
    assert_eq!(call(&horse, &mut probs[..2]), RellocStatus::BufferTooSmall);
    unsafe { relloc_predictor_free(p) };
}
