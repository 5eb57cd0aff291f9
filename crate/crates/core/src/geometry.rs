//! Axis-aligned box arithmetic and the 14-dimensional relative-location encoding.
//!
//! Boxes use image coordinates: `(x, y)` is the upper-left corner and `y` grows
//! downward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(x, y, w, h)` in pixels.
///
/// Serialized as the array `[x, y, w, h]`; deserialization validates it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::Input(format!(
                "box ({x}, {y}, {w}, {h}) has non-finite fields"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Input(format!(
                "box ({x}, {y}, {w}, {h}) must have positive width and height"
            )));
        }
        Ok(BBox { x, y, w, h })
    }

    /// Box from corner coordinates `(x1, y1)`–`(x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BBox::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn right(&self) -> f64 {
        self.x + self.w
    }
    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// True when `other` lies entirely inside `self` (boundaries included).
    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// True when the point lies inside the closed box.
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.right() && py >= self.y && py <= self.bottom()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        BBox::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Intersection over union. Symmetric, `1` for identical boxes, `0` when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Smallest axis-aligned box containing both arguments.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    let x1 = a.x.min(b.x);
    let y1 = a.y.min(b.y);
    let x2 = a.right().max(b.right());
    let y2 = a.bottom().max(b.bottom());
    BBox {
        x: x1,
        y: y1,
        w: x2 - x1,
        h: y2 - y1,
    }
}

/// Best product of subject and object IoU against any ground-truth pair; `0`
/// when there are none.
pub fn tri_iou(pair: (&BBox, &BBox), gt_pairs: &[(BBox, BBox)]) -> f64 {
    gt_pairs
        .iter()
        .map(|(gs, go)| iou(pair.0, gs) * iou(pair.1, go))
        .fold(0.0, f64::max)
}

/// Dimension of [`RelLocEncoding`].
pub const REL_LOC_DIM: usize = 14;

/// Unit-norm relative location of a (subject, object) pair.
///
/// Layout: the subject's position inside the union box (5), the object's
/// position inside the union box (5), then the mutual offsets and log size
/// ratios (4).
#[derive(Debug, Clone, PartialEq)]
pub struct RelLocEncoding([f64; REL_LOC_DIM]);

impl RelLocEncoding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Wraps an arbitrary vector after normalizing it. Used by tests and
    /// callers that already hold an encoding computed elsewhere.
    pub fn from_raw(mut v: [f64; REL_LOC_DIM]) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Numeric("relative location vector has zero or non-finite norm".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(RelLocEncoding(v))
    }
}

/// The pre-normalization 14-vector. Exposed so tests can check individual terms.
pub fn relative_location_terms(sub: &BBox, ob: &BBox) -> [f64; REL_LOC_DIM] {
    let u = union_box(sub, ob);
    let su = u.area();
    let respective = |b: &BBox| {
        let x = b.x - u.x;
        let y = b.y - u.y;
        [
            x / u.w,
            y / u.h,
            (x + b.w) / u.w,
            (y + b.h) / u.h,
            b.area() / su,
        ]
    };
    let rs = respective(sub);
    let ro = respective(ob);
    let mut v = [0.0; REL_LOC_DIM];
    v[..5].copy_from_slice(&rs);
    v[5..10].copy_from_slice(&ro);
    v[10] = (sub.x - ob.x) / ob.w;
    v[11] = (sub.y - ob.y) / ob.h;
    v[12] = (sub.w / ob.w).ln();
    v[13] = (sub.h / ob.h).ln();
    v
}

pub fn encode_relative_location(sub: &BBox, ob: &BBox) -> RelLocEncoding {
    // Both area terms are positive for valid boxes, so the norm is never zero.
    RelLocEncoding::from_raw(relative_location_terms(sub, ob))
        .expect("valid boxes give a nonzero encoding")
}
