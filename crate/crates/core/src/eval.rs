//! FROC analysis, recall at fixed false-positive budgets, and pair metrics.

use serde::{Deserialize, Serialize};

use crate::assignment::PairLabel;
use crate::boxes::{box_iou, BBox};
use crate::error::{Error, Result};
use crate::linker::Slot;

/// FPI budgets reported in result tables.
pub const FPI_BUDGETS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Scored detections of one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fpi: f64,
    pub recall: f64,
}

/// Operating points sorted by descending threshold.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
}

/// Detection indices of one image by descending score; ties keep input order.
fn ranked(d: &ImageDetections) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.scores.len()).collect();
    idx.sort_by(|&a, &b| d.scores[b].total_cmp(&d.scores[a]));
    idx
}

/// Greedy matching in score order: each detection takes the unmatched
/// ground truth of highest IoU if that IoU reaches `iou_thr`. Returns the
/// matched ground-truth index per detection (in input order); detections
/// scoring below `score_thr` stay unmatched.
pub fn match_detections(d: &ImageDetections, gts: &[BBox], iou_thr: f64, score_thr: f64) -> Vec<Option<usize>> {
    let mut out = vec![None; d.scores.len()];
    let mut taken = vec![false; gts.len()];
    for i in ranked(d) {
        if d.scores[i] < score_thr {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = box_iou(d.boxes[i], *gt);
            if iou >= iou_thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

/// Sweeps every distinct detection score as a threshold. Because matching is
/// greedy in score order, the matches at a threshold are exactly the matches
/// of the full ranking restricted to detections at or above it.
pub fn froc(dets: &[ImageDetections], gts: &[Vec<BBox>], iou_thr: f64) -> Result<FrocCurve> {
    if dets.is_empty() {
        return Err(Error::contract("FROC needs at least one image"));
    }
    if dets.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let num_gt: usize = gts.iter().map(|g| g.len()).sum();
    let mut events: Vec<(f64, bool)> = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        if d.boxes.len() != d.scores.len() {
            return Err(Error::contract("detections need one score per box"));
        }
        let m = match_detections(d, g, iou_thr, f64::NEG_INFINITY);
        events.extend(d.scores.iter().zip(&m).map(|(&s, hit)| (s, hit.is_some())));
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_img = dets.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let th = events[i].0;
        while i < events.len() && events[i].0 == th {
            if events[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(FrocPoint {
            threshold: th,
            fpi: fp as f64 / n_img,
            recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
        });
    }
    Ok(FrocCurve { points })
}

/// Recall at the lowest threshold whose FPI is within budget `t` (step
/// interpolation); zero if no operating point qualifies.
pub fn recall_at(curve: &FrocCurve, t: f64) -> f64 {
    curve
        .points
        .iter()
        .rev()
        .find(|p| p.fpi <= t)
        .map_or(0.0, |p| p.recall)
}

pub fn recalls(curve: &FrocCurve) -> [f64; 5] {
    FPI_BUDGETS.map(|t| recall_at(curve, t))
}

/// Method × R@t table with percentages to one decimal.
pub fn format_table(rows: &[(String, [f64; 5])]) -> String {
    let width = rows.iter().map(|r| r.0.len()).chain([6]).max().unwrap();
    let mut out = format!("{:<width$}", "Method");
    for t in FPI_BUDGETS {
        out.push_str(&format!(" {:>7}", format!("R@{t:?}")));
    }
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&format!("{name:<width$}"));
        for v in r {
            out.push_str(&format!(" {:>7.1}", 100.0 * v));
        }
        out.push('\n');
    }
    out
}

pub fn curve_csv(curve: &FrocCurve) -> String {
    let mut s = String::from("threshold,fpi,recall\n");
    for p in &curve.points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.fpi, p.recall));
    }
    s
}

// ----------------------------------------------------------------------------
// Pair metrics

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PairMetrics {
    pub precision: f64,
    pub recall: f64,
    /// Share of lesions whose touching predicted pairs are all exactly right
    /// (and at least one exists).
    pub exact_pair_accuracy: f64,
    pub predicted: usize,
    pub correct: usize,
    pub lesions: usize,
}

/// One image's predicted pairs with the slot-to-ground-truth maps.
#[derive(Clone, Debug)]
pub struct PairCase<'a> {
    pub predicted: &'a [(Slot, Slot)],
    pub gt_pairs: &'a [PairLabel],
    /// Matched ground-truth box per detection slot, per view.
    pub slot_to_gt_c: &'a [Option<usize>],
    pub slot_to_gt_m: &'a [Option<usize>],
}

/// `Some(None)` for the dustbin, `Some(Some(g))` for a matched detection,
/// `None` for a detection matched to nothing.
fn resolve(slot: Slot, map: &[Option<usize>]) -> Option<Option<usize>> {
    match slot {
        Slot::Dustbin => Some(None),
        Slot::Det(i) => map.get(i).copied().flatten().map(Some),
    }
}

fn mapped(p: (Slot, Slot), case: &PairCase<'_>) -> Option<PairLabel> {
    Some((resolve(p.0, case.slot_to_gt_c)?, resolve(p.1, case.slot_to_gt_m)?))
}

/// A predicted pair is correct iff both sides map to the same ground-truth
/// pair entry. Precision is 1 when nothing is predicted; recall and exact
/// accuracy are 1 when there are no lesions.
pub fn pair_metrics(cases: &[PairCase<'_>]) -> PairMetrics {
    let (mut predicted, mut correct, mut lesions, mut found, mut exact) = (0, 0, 0, 0, 0);
    for case in cases {
        predicted += case.predicted.len();
        let maps: Vec<Option<PairLabel>> = case.predicted.iter().map(|&p| mapped(p, case)).collect();
        correct += maps
            .iter()
            .filter(|m| m.is_some_and(|m| case.gt_pairs.contains(&m)))
            .count();
        for gt in case.gt_pairs {
            lesions += 1;
            if maps.iter().any(|m| m.as_ref() == Some(gt)) {
                found += 1;
            }
            let touches = |p: &(Slot, Slot)| {
                let c = resolve(p.0, case.slot_to_gt_c).flatten();
                let m = resolve(p.1, case.slot_to_gt_m).flatten();
                (c.is_some() && c == gt.0) || (m.is_some() && m == gt.1)
            };
            let touching: Vec<usize> = (0..case.predicted.len()).filter(|&k| touches(&case.predicted[k])).collect();
            if !touching.is_empty() && touching.iter().all(|&k| maps[k].as_ref() == Some(gt)) {
                exact += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    PairMetrics {
        precision: ratio(correct, predicted),
        recall: ratio(found, lesions),
        exact_pair_accuracy: ratio(exact, lesions),
        predicted,
        correct,
        lesions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64) -> BBox {
        BBox::new(cx, cy, 0.1, 0.1)
    }

    #[test]
    fn no_detections_gives_zero_recall() {
        let c = froc(&[ImageDetections::default()], &[vec![b(0.5, 0.5)]], 0.2).unwrap();
        assert!(c.points.is_empty());
        for t in FPI_BUDGETS {
            assert_eq!(recall_at(&c, t), 0.0);
        }
    }

    #[test]
    fn perfect_detections_reach_full_recall_at_zero_fpi() {
        let gts = vec![vec![b(0.2, 0.2), b(0.7, 0.7)], vec![b(0.4, 0.6)]];
        let dets: Vec<ImageDetections> = gts
            .iter()
            .map(|g| ImageDetections {
                boxes: g.clone(),
                scores: vec![0.9; g.len()],
            })
            .collect();
        let c = froc(&dets, &gts, 0.2).unwrap();
        let last = c.points.last().unwrap();
        assert_eq!((last.fpi, last.recall), (0.0, 1.0));
        assert_eq!(recall_at(&c, 0.25), 1.0);
    }

    #[test]
    fn zero_images_is_an_error() {
        assert!(froc(&[], &[], 0.2).is_err());
    }

    #[test]
    fn single_point_step_interpolation() {
        let c = FrocCurve {
            points: vec![FrocPoint {
                threshold: 0.5,
                fpi: 0.5,
                recall: 0.8,
            }],
        };
        assert_eq!(recall_at(&c, 1.0), 0.8);
        assert_eq!(recall_at(&c, 0.25), 0.0);
    }

    #[test]
    fn table_layout() {
        let t = format_table(&[("clnet".into(), [0.781, 0.831, 0.88, 0.924, 0.95])]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(
            lines[0].split_whitespace().collect::<Vec<_>>(),
            ["Method", "R@0.25", "R@0.5", "R@1.0", "R@2.0", "R@4.0"]
        );
        assert_eq!(
            lines[1].split_whitespace().collect::<Vec<_>>(),
            ["clnet", "78.1", "83.1", "88.0", "92.4", "95.0"]
        );
    }

    #[test]
    fn pair_metric_conventions() {
        let gt = [(Some(0), Some(0)), (Some(1), None)];
        let map_c = [Some(0), Some(1), None];
        let map_m = [Some(0), None, None];
        let perfect = [(Slot::Det(0), Slot::Det(0)), (Slot::Det(1), Slot::Dustbin)];
        let case = |p: &'static [(Slot, Slot)]| PairCase {
            predicted: p,
            gt_pairs: &gt,
            slot_to_gt_c: &map_c,
            slot_to_gt_m: &map_m,
        };
        let m = pair_metrics(&[PairCase {
            predicted: &perfect,
            ..case(&[])
        }]);
        assert_eq!((m.precision, m.recall, m.exact_pair_accuracy), (1.0, 1.0, 1.0));

        let m = pair_metrics(&[case(&[])]);
        assert_eq!((m.precision, m.recall), (1.0, 0.0));

        // A wrong link touching lesion 0 spoils its exactness but not lesion 1's.
        let mixed = [
            (Slot::Det(0), Slot::Det(0)),
            (Slot::Det(1), Slot::Dustbin),
            (Slot::Dustbin, Slot::Det(0)),
            (Slot::Det(2), Slot::Det(1)),
        ];
        let m = pair_metrics(&[PairCase {
            predicted: &mixed,
            ..case(&[])
        }]);
        assert_eq!(m.correct, 2);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.exact_pair_accuracy, 0.5);
    }
}
