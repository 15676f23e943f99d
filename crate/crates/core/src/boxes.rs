//! Axis-aligned boxes and the annotation/proposal/detection records shared
//! by the proposal generator, the trainer and the evaluation suite.

use serde::{Deserialize, Serialize};

/// Axis-aligned box: top-left corner plus extent, in pixels. Areas are
/// continuous (w * h), not pixel-discretized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "degenerate box {w}x{h}");
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.w / self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Clip to an image of the given size; returns None if nothing remains.
    pub fn clipped(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width);
        let y1 = (self.y + self.h).min(height);
        if x1 > x0 && y1 > y0 {
            Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
        } else {
            None
        }
    }
}

/// Ground-truth box with its in-plane angle, degrees in [-180, 180).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    #[serde(flatten)]
    pub bbox: BBox,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Proposal {
    pub image_id: String,
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
    pub cluster: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
    pub angle_deg: f64,
}
