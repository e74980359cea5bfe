//! Inference on labelled cases: detections, extracted pairs, attention dumps
//! and the metrics built from them.

use serde::Serialize;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::{self, match_detections, FrocCurve, ImageDetections, PairCase, PairMetrics};
use crate::linker::{self, argmax, ExtractedPair, LinkPredictions, LinkerDump, Slot};
use crate::losses::{total_loss, CaseTargets, LossReport};
use crate::model::{forward, Forward};
use crate::params::{Graph, ParamStore};
use crate::synth::PairedSample;
use crate::tensor::Tensor;
use crate::vild::{DecoderDump, DetectionSet};

/// Everything inferred for one case.
#[derive(Clone, Debug)]
pub struct CasePrediction {
    pub seed: u64,
    pub dets: [DetectionSet; 2],
    pub pairs: Vec<ExtractedPair>,
    pub loss: LossReport,
    /// Per two-view lesion: whether its link query attends hardest to the
    /// lesion's own slots in the last link layer.
    pub locality: Vec<bool>,
    pub decoder_dumps: Vec<DecoderDump>,
    pub linker_dumps: Vec<LinkerDump>,
}

/// Pairs of the paired-query variant: query `j` contributes slot `j` in each
/// view whose score clears `floor`.
fn plq_pairs(dets: &[DetectionSet; 2], floor: f64) -> Vec<ExtractedPair> {
    let mut out = Vec::new();
    for j in 0..dets[0].scores.len() {
        let (sc, sm) = (dets[0].scores[j], dets[1].scores[j]);
        let c = if sc >= floor { Slot::Det(j) } else { Slot::Dustbin };
        let m = if sm >= floor { Slot::Det(j) } else { Slot::Dustbin };
        if c == Slot::Dustbin && m == Slot::Dustbin {
            continue;
        }
        out.push(ExtractedPair {
            query_id: j,
            c,
            m,
            score: sc.max(sm),
        });
    }
    out
}

/// Pairs of the pair-verification variant: every non-dustbin cell of
/// `sigmoid(S)` at or above `floor`.
fn pv_pairs(logits: &Tensor, floor: f64) -> Result<Vec<ExtractedPair>> {
    let (r, c) = logits.dims2()?;
    let mut out = Vec::new();
    for i in 0..r {
        for j in 0..c {
            if i == r - 1 && j == c - 1 {
                continue;
            }
            let p = 1.0 / (1.0 + (-logits.get2(i, j)).exp());
            if p >= floor {
                out.push(ExtractedPair {
                    query_id: i * c + j,
                    c: Slot::from_index(i, r - 1),
                    m: Slot::from_index(j, c - 1),
                    score: p,
                });
            }
        }
    }
    Ok(out)
}

/// Per two-view GT pair: whether its assigned link query's last-layer
/// attention peaks, among the detection slots, on the pair's own slots.
fn locality(fwd: &Forward, loss: &crate::losses::CaseLoss, n: usize) -> Vec<bool> {
    let (Some(assign), Some(dump)) = (&loss.link_assign, fwd.linker_dumps.last()) else {
        return Vec::new();
    };
    let (Some(lc), Some(lm)) = (&dump.link_cc, &dump.link_mlo) else {
        return Vec::new();
    };
    loss.triplets
        .iter()
        .zip(&assign.perm)
        .filter(|(y, _)| y.a && y.e_c < n && y.e_m < n)
        .map(|(y, &j)| argmax(&lc.row(j)[..n]) == y.e_c && argmax(&lm.row(j)[..n]) == y.e_m)
        .collect()
}

/// Runs the model on one labelled case.
pub fn predict_case(params: &ParamStore, cfg: &ModelConfig, s: &PairedSample, dump: bool) -> Result<CasePrediction> {
    let mut g = Graph::new(params);
    let fwd = forward(&mut g, cfg, &s.img_c.to_tensor(), &s.img_m.to_tensor(), dump)?;
    let dets = fwd.detections(&g)?;
    let targets = CaseTargets {
        gt_c: &s.gt_c,
        gt_m: &s.gt_m,
        pairs: &s.pairs,
    };
    let loss = total_loss(&mut g, &fwd, &targets, cfg)?;
    let n = cfg.num_queries;
    let pairs = if let Some(link) = &fwd.link {
        let preds = LinkPredictions::read(&g, link.heads);
        linker::extract_pairs(&preds, g.value(link.ext[0].e), g.value(link.ext[1].e), cfg.score_floor)?
    } else if let Some(pv) = fwd.pv_logits {
        pv_pairs(g.value(pv), cfg.score_floor)?
    } else if cfg.variant == Variant::PairedLesionQuery {
        plq_pairs(&dets, cfg.score_floor)
    } else {
        Vec::new()
    };
    let locality = locality(&fwd, &loss, n);
    Ok(CasePrediction {
        seed: s.seed,
        dets,
        pairs,
        loss: loss.report,
        locality,
        decoder_dumps: fwd.decoder_dumps,
        linker_dumps: fwd.linker_dumps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(default)]
pub struct EvalOptions {
    /// IoU at which a detection hits a lesion.
    pub iou_thr: f64,
    /// Detection score needed before a slot counts as matched for pair metrics.
    pub det_thr: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            iou_thr: 0.2,
            det_thr: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub variant: &'static str,
    pub cases: usize,
    /// Recall at each of the standard FPI budgets, pooled over both views.
    pub recalls: [f64; 5],
    pub pairs: PairMetrics,
    /// Share of two-view lesions passing the attention-locality check; absent
    /// without a link module.
    pub locality: Option<f64>,
    pub mean_loss: f64,
    #[serde(skip)]
    pub curve: FrocCurve,
}

fn image_dets(d: &DetectionSet) -> ImageDetections {
    ImageDetections {
        boxes: d.boxes.clone(),
        scores: d.scores.clone(),
    }
}

/// Metrics of already computed predictions against their cases.
pub fn summarize(
    cfg: &ModelConfig,
    cases: &[PairedSample],
    preds: &[CasePrediction],
    opts: EvalOptions,
) -> Result<EvalReport> {
    if cases.len() != preds.len() || cases.is_empty() {
        return Err(Error::contract(format!("{} predictions for {} cases", preds.len(), cases.len())));
    }
    let mut all_dets = Vec::new();
    let mut all_gts = Vec::new();
    let mut maps = Vec::new();
    let mut pair_lists = Vec::new();
    let (mut hits, mut checked, mut loss) = (0usize, 0usize, 0.0);
    for (s, p) in cases.iter().zip(preds) {
        let mut m = Vec::new();
        for (det, gts) in p.dets.iter().zip([&s.gt_c, &s.gt_m]) {
            let d = image_dets(det);
            m.push(match_detections(&d, gts, opts.iou_thr, opts.det_thr));
            all_dets.push(d);
            all_gts.push(gts.clone());
        }
        maps.push(m);
        pair_lists.push(p.pairs.iter().map(|q| (q.c, q.m)).collect::<Vec<_>>());
        hits += p.locality.iter().filter(|&&h| h).count();
        checked += p.locality.len();
        loss += p.loss.total;
    }
    let curve = eval::froc(&all_dets, &all_gts, opts.iou_thr)?;
    let pc: Vec<PairCase<'_>> = cases
        .iter()
        .enumerate()
        .map(|(i, s)| PairCase {
            predicted: &pair_lists[i],
            gt_pairs: &s.pairs,
            slot_to_gt_c: &maps[i][0],
            slot_to_gt_m: &maps[i][1],
        })
        .collect();
    Ok(EvalReport {
        variant: cfg.variant.name(),
        cases: cases.len(),
        recalls: eval::recalls(&curve),
        pairs: eval::pair_metrics(&pc),
        locality: cfg.variant.uses_linker().then(|| if checked == 0 { 1.0 } else { hits as f64 / checked as f64 }),
        mean_loss: loss / cases.len() as f64,
        curve,
    })
}

/// Predicts every case and summarizes.
pub fn evaluate(params: &ParamStore, cfg: &ModelConfig, cases: &[PairedSample], opts: EvalOptions) -> Result<EvalReport> {
    let preds = cases
        .iter()
        .map(|s| predict_case(params, cfg, s, cfg.variant.uses_linker()))
        .collect::<Result<Vec<_>>>()?;
    summarize(cfg, cases, &preds, opts)
}

fn matrix_csv(t: &Tensor) -> String {
    let (r, c) = t.dims2().unwrap_or((0, 0));
    let mut s = String::new();
    for i in 0..r {
        let row: Vec<String> = (0..c).map(|j| format!("{:.9}", t.get2(i, j))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Attention maps as `(file name, csv)`; rows are queries, columns keys.
pub fn attention_csvs(p: &CasePrediction) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (k, d) in p.decoder_dumps.iter().enumerate() {
        for (name, t) in [("cc_from_mlo", &d.cc_from_mlo), ("mlo_from_cc", &d.mlo_from_cc)] {
            if let Some(t) = t {
                out.push((format!("layer{k}_{name}.csv"), matrix_csv(t)));
            }
        }
    }
    for (k, d) in p.linker_dumps.iter().enumerate() {
        for (name, t) in [("link_cc", &d.link_cc), ("link_mlo", &d.link_mlo)] {
            if let Some(t) = t {
                out.push((format!("layer{k}_{name}.csv"), matrix_csv(t)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plq_pairs_skip_empty_queries() {
        let set = |scores: Vec<f64>, view| DetectionSet {
            boxes: vec![crate::boxes::BBox::new(0.5, 0.5, 0.1, 0.1); scores.len()],
            scores,
            embeddings: Tensor::zeros(&[3, 1]),
            view,
        };
        let dets = [
            set(vec![0.9, 0.1, 0.2], crate::boxes::View::Cc),
            set(vec![0.8, 0.7, 0.1], crate::boxes::View::Mlo),
        ];
        let p = plq_pairs(&dets, 0.5);
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].c, p[0].m), (Slot::Det(0), Slot::Det(0)));
        assert_eq!((p[1].c, p[1].m), (Slot::Dustbin, Slot::Det(1)));
    }

    #[test]
    fn pv_pairs_never_emit_double_dustbin() {
        let logits = Tensor::full(&[3, 3], 5.0);
        let p = pv_pairs(&logits, 0.5).unwrap();
        assert_eq!(p.len(), 8);
        assert!(p.iter().all(|q| !(q.c == Slot::Dustbin && q.m == Slot::Dustbin)));
    }
}
