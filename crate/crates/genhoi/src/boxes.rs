//! Box formats, overlap measures, and the differentiable box losses.
//!
//! Network heads emit normalized `cx, cy, w, h` boxes; detections, manifests
//! and the evaluator work with pixel-space corner boxes.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Pixel-space corner box `x1, y1, x2, y2`, serialized as a 4-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for CornerBox {
    fn from(v: [f64; 4]) -> Self {
        CornerBox { x1: v[0], y1: v[1], x2: v[2], y2: v[3] }
    }
}

impl From<CornerBox> for [f64; 4] {
    fn from(b: CornerBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl CornerBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        CornerBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Positive area with finite coordinates.
    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn intersection(&self, other: &CornerBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &CornerBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn giou(&self, other: &CornerBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let ew = self.x2.max(other.x2) - self.x1.min(other.x1);
        let eh = self.y2.max(other.y2) - self.y1.min(other.y1);
        let enclosing = ew * eh;
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        if enclosing <= 0.0 {
            iou
        } else {
            iou - (enclosing - union) / enclosing
        }
    }

    pub fn from_cxcywh(b: [f64; 4]) -> Self {
        CornerBox::new(b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0)
    }

    /// Normalized `cx, cy, w, h` relative to an image of the given size.
    pub fn to_normalized_cxcywh(&self, width: f64, height: f64) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx / width, cy / height, self.width() / width, self.height() / height]
    }

    /// Inverse of [`CornerBox::to_normalized_cxcywh`].
    pub fn from_normalized_cxcywh(b: [f64; 4], width: f64, height: f64) -> Self {
        let c = CornerBox::from_cxcywh(b);
        CornerBox::new(c.x1 * width, c.y1 * height, c.x2 * width, c.y2 * height)
    }

    pub fn flip_horizontal(&self, width: f64) -> Self {
        CornerBox::new(width - self.x2, self.y1, width - self.x1, self.y2)
    }

    pub fn scale(&self, f: f64) -> Self {
        CornerBox::new(self.x1 * f, self.y1 * f, self.x2 * f, self.y2 * f)
    }
}

/// Summed L1 distance and summed `1 - GIoU` between predicted boxes
/// (`M x 4`, normalized cxcywh, differentiable) and constant targets.
pub fn box_losses(g: &Graph, pred: Var, target: &Tensor) -> (Var, Var) {
    let (m, c) = g.shape(pred);
    assert_eq!(c, 4);
    assert_eq!(target.shape(), (m, 4));
    let t = g.constant(target.clone());
    let l1 = g.sum(g.abs(g.sub(pred, t)));

    let col = |v: Var, j: usize| g.slice_cols(v, j, 1);
    let corners = |v: Var| {
        let (cx, cy, w, h) = (col(v, 0), col(v, 1), col(v, 2), col(v, 3));
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        (g.sub(cx, hw), g.sub(cy, hh), g.add(cx, hw), g.add(cy, hh), g.mul(w, h))
    };
    let (px1, py1, px2, py2, parea) = corners(pred);
    let (tx1, ty1, tx2, ty2, tarea) = corners(t);
    let iw = g.relu(g.sub(g.minimum(px2, tx2), g.maximum(px1, tx1)));
    let ih = g.relu(g.sub(g.minimum(py2, ty2), g.maximum(py1, ty1)));
    let inter = g.mul(iw, ih);
    let union = g.sub(g.add(parea, tarea), inter);
    let iou = g.div(inter, union);
    let ew = g.sub(g.maximum(px2, tx2), g.minimum(px1, tx1));
    let eh = g.sub(g.maximum(py2, ty2), g.minimum(py1, ty1));
    let enclosing = g.mul(ew, eh);
    let penalty = g.div(g.sub(enclosing, union), enclosing);
    let giou = g.sub(iou, penalty);
    // sum(1 - giou)
    let giou_loss = g.add_scalar(g.scale(g.sum(giou), -1.0), m as f64);
    (l1, giou_loss)
}
