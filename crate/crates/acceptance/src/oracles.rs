//! Slow, obviously-correct reference implementations.

use clnet::boxes::{box_iou, BBox};
use clnet::eval::{FrocPoint, ImageDetections};
use clnet::linker::{cosine_sim, ExtractedPair, LinkPredictions, Slot};
use clnet::Tensor;

/// Greedy matching recomputed from scratch on the detections scoring at
/// least `th`, in score order (ties by input order).
fn tp_fp_at(dets: &[ImageDetections], gts: &[Vec<BBox>], iou_thr: f64, th: f64) -> (usize, usize) {
    let (mut tp, mut fp) = (0, 0);
    for (d, g) in dets.iter().zip(gts) {
        let mut kept: Vec<usize> = (0..d.scores.len()).filter(|&i| d.scores[i] >= th).collect();
        kept.sort_by(|&a, &b| d.scores[b].partial_cmp(&d.scores[a]).unwrap().then(a.cmp(&b)));
        let mut taken = vec![false; g.len()];
        for i in kept {
            let mut best = None;
            let mut best_iou = iou_thr;
            for (k, gt) in g.iter().enumerate() {
                let iou = box_iou(d.boxes[i], *gt);
                if !taken[k] && iou >= best_iou && best.map_or(true, |_| iou > best_iou) {
                    best = Some(k);
                    best_iou = iou;
                }
            }
            match best {
                Some(k) => {
                    taken[k] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
        }
    }
    (tp, fp)
}

/// One operating point per distinct score, by descending threshold.
pub fn froc_by_enumeration(dets: &[ImageDetections], gts: &[Vec<BBox>], iou_thr: f64) -> Vec<FrocPoint> {
    let mut ths: Vec<f64> = dets.iter().flat_map(|d| d.scores.iter().copied()).collect();
    ths.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ths.dedup();
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    ths.into_iter()
        .map(|th| {
            let (tp, fp) = tp_fp_at(dets, gts, iou_thr, th);
            FrocPoint {
                threshold: th,
                fpi: fp as f64 / dets.len() as f64,
                recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
            }
        })
        .collect()
}

/// Recall at the smallest enumerated threshold whose FPI fits the budget.
pub fn recall_at_by_enumeration(points: &[FrocPoint], t: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.fpi <= t)
        .min_by(|a, b| a.threshold.partial_cmp(&b.threshold).unwrap())
        .map_or(0.0, |p| p.recall)
}

/// Scans every `(cc slot, mlo slot)` combination per query and keeps the
/// first one that is best in CC similarity, then in MLO similarity.
pub fn extract_by_scan(preds: &LinkPredictions, ext_c: &Tensor, ext_m: &Tensor, floor: f64) -> Vec<ExtractedPair> {
    let slots = ext_c.shape()[0];
    let n = slots - 1;
    let mut out = Vec::new();
    for (q, &score) in preds.scores.iter().enumerate() {
        if score < floor {
            continue;
        }
        let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0, 0);
        for c in 0..slots {
            let sc = cosine_sim(preds.v_c.row(q), ext_c.row(c));
            for m in 0..slots {
                let sm = cosine_sim(preds.v_m.row(q), ext_m.row(m));
                if sc > best.0 || (sc == best.0 && sm > best.1) {
                    best = (sc, sm, c, m);
                }
            }
        }
        let (c, m) = (Slot::from_index(best.2, n), Slot::from_index(best.3, n));
        if c == Slot::Dustbin && m == Slot::Dustbin {
            continue;
        }
        out.push(ExtractedPair {
            query_id: q,
            c,
            m,
            score,
        });
    }
    out
}
