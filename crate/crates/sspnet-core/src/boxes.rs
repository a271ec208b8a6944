//! Axis-aligned boxes, IoU/IoF geometry and detection records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth box in pixels, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub ignore: bool,
}

impl GtBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        GtBox {
            x,
            y,
            w,
            h,
            ignore: false,
        }
    }

    /// Object scale, the geometric mean of the side lengths.
    pub fn scale(&self) -> f64 {
        (self.w * self.h).sqrt()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// A scored detection attached to an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl Detection {
    pub fn as_box(&self) -> GtBox {
        GtBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

pub fn intersection_area(a: &GtBox, b: &GtBox) -> f64 {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y1 = (a.y + a.h).min(b.y + b.h);
    (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
}

/// Intersection over union.
pub fn iou(a: &GtBox, b: &GtBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Intersection over foreground: how much of the foreground box `fg` is
/// covered by `other`.
pub fn iof(fg: &GtBox, other: &GtBox) -> Result<f64> {
    let area = fg.area();
    if area <= 0.0 {
        return Err(Error::arg(format!(
            "iof: foreground box has zero area ({},{},{},{})",
            fg.x, fg.y, fg.w, fg.h
        )));
    }
    Ok(intersection_area(fg, other) / area)
}

/// IoU of two shapes placed on a common center; used by anchor clustering.
pub fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    let union = w1 * h1 + w2 * h2 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
