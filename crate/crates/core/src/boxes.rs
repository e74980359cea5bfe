//! Normalized `(cx, cy, w, h)` boxes, IoU/GIoU, and their tape versions.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One of the two ipsilateral projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Cc,
    Mlo,
}

impl View {
    pub const BOTH: [View; 2] = [View::Cc, View::Mlo];

    pub fn tag(self) -> &'static str {
        match self {
            View::Cc => "cc",
            View::Mlo => "mlo",
        }
    }

    pub fn other(self) -> View {
        match self {
            View::Cc => View::Mlo,
            View::Mlo => View::Cc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn corners(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn l1(self, other: BBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

fn corner_area(b: BBox) -> f64 {
    let [x0, y0, x1, y1] = b.corners();
    (x1 - x0) * (y1 - y0)
}

fn intersection(a: BBox, b: BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    iw * ih
}

pub fn box_iou(a: BBox, b: BBox) -> f64 {
    // Areas from corners, so that identical boxes give exactly 1.
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU, in `[-1, 1]`.
pub fn generalized_iou(a: BBox, b: BBox) -> f64 {
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let enclose = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    inter / union - (enclose - union) / enclose
}

/// Summed L1 and summed `1 - GIoU` between predicted rows `pred [K×4]` and
/// constant targets.
pub fn box_losses(t: &mut Tape, pred: Var, targets: &[BBox]) -> Result<(Var, Var)> {
    let rows: Vec<Vec<f64>> = targets.iter().map(|b| b.to_array().to_vec()).collect();
    let target = t.constant(Tensor::from_rows(&rows)?);
    let diff = t.sub(pred, target)?;
    let abs = t.abs(diff);
    let l1 = t.sum(abs);

    let corners = |t: &mut Tape, b: Var| -> Result<[Var; 4]> {
        let cx = t.slice_cols(b, 0, 1)?;
        let cy = t.slice_cols(b, 1, 1)?;
        let w = t.slice_cols(b, 2, 1)?;
        let h = t.slice_cols(b, 3, 1)?;
        let hw = t.scale(w, 0.5);
        let hh = t.scale(h, 0.5);
        Ok([t.sub(cx, hw)?, t.sub(cy, hh)?, t.add(cx, hw)?, t.add(cy, hh)?])
    };
    let [px0, py0, px1, py1] = corners(t, pred)?;
    let [tx0, ty0, tx1, ty1] = corners(t, target)?;

    let ix0 = t.maximum(px0, tx0)?;
    let iy0 = t.maximum(py0, ty0)?;
    let ix1 = t.minimum(px1, tx1)?;
    let iy1 = t.minimum(py1, ty1)?;
    let iw = t.sub(ix1, ix0)?;
    let iw = t.relu(iw);
    let ih = t.sub(iy1, iy0)?;
    let ih = t.relu(ih);
    let inter = t.mul(iw, ih)?;

    let pw = t.sub(px1, px0)?;
    let ph = t.sub(py1, py0)?;
    let pa = t.mul(pw, ph)?;
    let tw = t.sub(tx1, tx0)?;
    let th = t.sub(ty1, ty0)?;
    let ta = t.mul(tw, th)?;
    let sum_area = t.add(pa, ta)?;
    let union = t.sub(sum_area, inter)?;
    let iou = t.div(inter, union)?;

    let ex0 = t.minimum(px0, tx0)?;
    let ey0 = t.minimum(py0, ty0)?;
    let ex1 = t.maximum(px1, tx1)?;
    let ey1 = t.maximum(py1, ty1)?;
    let ew = t.sub(ex1, ex0)?;
    let eh = t.sub(ey1, ey0)?;
    let ea = t.mul(ew, eh)?;
    let gap = t.sub(ea, union)?;
    let penalty = t.div(gap, ea)?;
    let giou = t.sub(iou, penalty)?;
    let total = t.sum(giou);
    let k = targets.len() as f64;
    let neg = t.scale(total, -1.0);
    let giou_loss = t.add_scalar(neg, k);
    Ok((l1, giou_loss))
}
