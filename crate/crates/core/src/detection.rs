use crate::error::{Error, Result};
use crate::geometry::BBox;

/// One detected object: box, category id, objectiveness score and its visual
/// feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub objectiveness: f64,
    pub feature: Vec<f64>,
}

/// All detections of one image. Every feature vector has the same length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(detections: Vec<Detection>) -> Result<Self> {
        if let Some(first) = detections.first() {
            let n = first.feature.len();
            for (i, d) in detections.iter().enumerate() {
                if d.feature.len() != n {
                    return Err(Error::Input(format!(
                        "detection {i} has feature length {}, expected {n}",
                        d.feature.len()
                    )));
                }
                if !(d.objectiveness > 0.0 && d.objectiveness <= 1.0) {
                    return Err(Error::Input(format!(
                        "detection {i} objectiveness {} outside (0, 1]",
                        d.objectiveness
                    )));
                }
                if d.feature.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Input(format!("detection {i} has a non-finite feature")));
                }
            }
        }
        Ok(DetectionSet { detections })
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.detections.first().map(|d| d.feature.len())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Detection> {
        self.detections.iter()
    }

    pub fn as_slice(&self) -> &[Detection] {
        &self.detections
    }
}

impl std::ops::Index<usize> for DetectionSet {
    type Output = Detection;

    fn index(&self, i: usize) -> &Detection {
        &self.detections[i]
    }
}
