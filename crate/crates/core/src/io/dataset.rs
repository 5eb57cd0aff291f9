//! Dataset directories.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<embeddings_file>          word vectors, text format
//! <root>/<detections_file>          one DetectionRecord per line
//! <root>/<features_file>            RLT1 matrix, one row per feature_row
//! <root>/<gt_file>                  one GtRecord per line
//! ```
//! Paths inside the manifest are relative to `<root>`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::detection::{Detection, DetectionSet};
use crate::error::{Error, Result};
use crate::evaluation::GroundTruthTriplet;
use crate::geometry::BBox;
use crate::io::tensor::{read_tensor, Tensor};
use crate::io::write_atomic;
use crate::predicate_recognition::EmbeddingTable;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub image_id: String,
    pub detections_file: String,
    pub features_file: String,
    pub gt_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub categories: Vec<String>,
    pub predicates: Vec<String>,
    pub embeddings_file: String,
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: String,
    pub objectiveness: f64,
    pub feature_row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub sub_box: BBox,
    pub sub_category: String,
    pub ob_box: BBox,
    pub ob_category: String,
    pub predicate: String,
    pub sub_feature_row: usize,
    pub ob_feature_row: usize,
}

/// A ground-truth triplet with the appearance features of its two boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct GtAnnotation {
    pub triplet: GroundTruthTriplet,
    pub sub_feature: Vec<f64>,
    pub ob_feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageData {
    pub image_id: String,
    pub detections: DetectionSet,
    pub annotations: Vec<GtAnnotation>,
}

impl ImageData {
    pub fn triplets(&self) -> Vec<GroundTruthTriplet> {
        self.annotations.iter().map(|a| a.triplet).collect()
    }
}

fn index_names(kind: &str, names: &[String], path: &Path) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if n.trim().is_empty() || map.insert(n.clone(), i).is_some() {
            return Err(Error::parse(path, 0, format!("empty or duplicate {kind} name `{n}`")));
        }
    }
    Ok(map)
}

/// Image ids double as file names for prediction output.
pub fn valid_image_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    category_ids: HashMap<String, usize>,
    predicate_ids: HashMap<String, usize>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.line(), e))?;
        Dataset::from_manifest(root, manifest)
    }

    pub fn from_manifest(root: &Path, manifest: Manifest) -> Result<Self> {
        let path = root.join(MANIFEST);
        let category_ids = index_names("category", &manifest.categories, &path)?;
        let predicate_ids = index_names("predicate", &manifest.predicates, &path)?;
        let mut seen = HashSet::new();
        for img in &manifest.images {
            if !valid_image_id(&img.image_id) || !seen.insert(img.image_id.as_str()) {
                return Err(Error::parse(&path, 0, format!("invalid or duplicate image id `{}`", img.image_id)));
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            category_ids,
            predicate_ids,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn categories(&self) -> &[String] {
        &self.manifest.categories
    }

    pub fn predicates(&self) -> &[String] {
        &self.manifest.predicates
    }

    pub fn num_images(&self) -> usize {
        self.manifest.images.len()
    }

    pub fn category_id(&self, name: &str) -> Result<usize> {
        self.category_ids.get(name).copied().ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn predicate_id(&self, name: &str) -> Result<usize> {
        self.predicate_ids.get(name).copied().ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn embeddings(&self) -> Result<EmbeddingTable> {
        read_embeddings(&self.root.join(&self.manifest.embeddings_file))
    }

    pub fn load_image(&self, i: usize) -> Result<ImageData> {
        let entry = self
            .manifest
            .images
            .get(i)
            .ok_or_else(|| Error::Index(format!("image {i} of {}", self.num_images())))?;
        let feat_path = self.root.join(&entry.features_file);
        let features = read_tensor(&feat_path)?;
        if features.dims().len() != 2 {
            return Err(Error::parse(&feat_path, 0, format!("feature tensor must be a matrix, dims {:?}", features.dims())));
        }
        let row = |path: &Path, line: usize, r: usize| -> Result<Vec<f64>> {
            features.row(r).map_err(|_| {
                Error::Index(format!(
                    "{}:{line}: feature row {r} but {} has {} rows",
                    path.display(),
                    feat_path.display(),
                    features.dims()[0]
                ))
            })
        };

        let det_path = self.root.join(&entry.detections_file);
        let mut dets = Vec::new();
        for (line, rec) in read_jsonl::<DetectionRecord>(&det_path)? {
            dets.push(Detection {
                bbox: rec.bbox,
                category: self.category_id(&rec.category)?,
                objectiveness: rec.objectiveness,
                feature: row(&det_path, line, rec.feature_row)?,
            });
        }
        let detections = DetectionSet::new(dets).map_err(|e| Error::parse(&det_path, 0, e))?;

        let gt_path = self.root.join(&entry.gt_file);
        let mut annotations = Vec::new();
        for (line, rec) in read_jsonl::<GtRecord>(&gt_path)? {
            annotations.push(GtAnnotation {
                triplet: GroundTruthTriplet {
                    sub_box: rec.sub_box,
                    ob_box: rec.ob_box,
                    sub_cat: self.category_id(&rec.sub_category)?,
                    ob_cat: self.category_id(&rec.ob_category)?,
                    predicate: self.predicate_id(&rec.predicate)?,
                },
                sub_feature: row(&gt_path, line, rec.sub_feature_row)?,
                ob_feature: row(&gt_path, line, rec.ob_feature_row)?,
            });
        }
        Ok(ImageData {
            image_id: entry.image_id.clone(),
            detections,
            annotations,
        })
    }

    pub fn load_all(&self) -> Result<Vec<ImageData>> {
        (0..self.num_images()).map(|i| self.load_image(i)).collect()
    }
}

/// Parses one JSON value per nonblank line, returning 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e))?;
        out.push((i + 1, v));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e))
}

/// Text word vectors: a `count dim` header, then `word v1 .. vdim` per line.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "missing `count dim` header"))?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(path, 1, format!("bad header: {e}")))?;
    let [count, dim] = nums[..] else {
        return Err(Error::parse(path, 1, "header must be `count dim`"));
    };
    let mut table = EmbeddingTable::new(dim);
    for (i, line) in lines {
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap_or_default();
        let v: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, i + 1, format!("bad value: {e}")))?;
        if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(path, i + 1, format!("`{word}` needs {dim} finite values, got {}", v.len())));
        }
        table.insert(word, v)?;
    }
    if table.len() != count {
        return Err(Error::parse(path, 1, format!("header announces {count} words, file has {}", table.len())));
    }
    Ok(table)
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let mut text = format!("{} {}\n", table.len(), table.dim());
    for w in table.words() {
        text.push_str(w);
        for v in table.get(w).unwrap_or_default() {
            let _ = write!(text, " {v}");
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Writes a feature matrix for one image.
pub fn features_tensor(rows: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_f64(vec![rows.len(), dim], &flat)
}
