//! Visual relationship detection guided by relative location.
//!
//! The pipeline rates candidate object pairs, keeps a compact set with
//! pair-level NMS, then recognises predicates from fused visual, language and
//! location features refined by a gated graph network over a predicate graph
//! built from location anchors.

pub mod anchor_graph;
pub mod config;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod ggnn;
pub mod io;
pub mod nn;
pub mod pair_rating;
pub mod pipeline;
pub mod predicate_recognition;
pub mod proposing;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use geometry::BBox;
