//! Training objective: per-view detection loss, the link loss, and the two
//! match-learning baselines.

use serde::Serialize;

use crate::assignment::{
    self, detection_match_cost, gt_to_triplets, hungarian, link_match_cost, plq_match_cost, AssignmentResult,
    GroundTruthTriplet, PairLabel, PairedPrediction, PairedTarget,
};
use crate::boxes::{box_losses, BBox, View};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::linker::LinkPredictions;
use crate::model::{Forward, LinkBranch};
use crate::params::Graph;
use crate::tape::Var;
use crate::vild::{DetectionSet, HeadVars};

/// Loss breakdown of one case or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub l_d: f64,
    pub l_link: f64,
    pub l_sim: f64,
    pub l_cls: f64,
    pub l_d_cc: f64,
    pub l_d_mlo: f64,
}

impl LossReport {
    pub fn accumulate(&mut self, o: &LossReport) {
        self.total += o.total;
        self.l_d += o.l_d;
        self.l_link += o.l_link;
        self.l_sim += o.l_sim;
        self.l_cls += o.l_cls;
        self.l_d_cc += o.l_d_cc;
        self.l_d_mlo += o.l_d_mlo;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.l_d, self.l_link, self.l_sim, self.l_cls].iter().all(|v| v.is_finite())
    }
}

/// Ground truth of one case as the losses consume it.
#[derive(Clone, Debug)]
pub struct CaseTargets<'a> {
    pub gt_c: &'a [BBox],
    pub gt_m: &'a [BBox],
    pub pairs: &'a [PairLabel],
}

impl CaseTargets<'_> {
    pub fn boxes(&self, v: View) -> &[BBox] {
        match v {
            View::Cc => self.gt_c,
            View::Mlo => self.gt_m,
        }
    }
}

/// Detection loss of one view under a given assignment: summed focal
/// classification over all slots (matched slots are positives), plus L1 and
/// `1 - GIoU` over matched slots, weighted and divided by `max(1, K)`.
pub fn detection_loss(
    g: &mut Graph<'_>,
    heads: HeadVars,
    gts: &[BBox],
    positives: &[bool],
    matched: &[usize],
    cfg: &ModelConfig,
) -> Result<Var> {
    let targets: Vec<f64> = positives.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let focal = g.focal_sum(heads.scores, &targets, cfg.focal)?;
    let w = cfg.det_weights;
    let mut total = g.scale(focal, w.cls);
    if !gts.is_empty() {
        let pred = g.select_rows(heads.boxes, matched)?;
        let (l1, giou) = box_losses(g, pred, gts)?;
        let l1 = g.scale(l1, w.l1);
        let giou = g.scale(giou, w.giou);
        total = g.add_all(&[total, l1, giou])?;
    }
    Ok(g.scale(total, 1.0 / gts.len().max(1) as f64))
}

/// Detection assignment of one view, then its loss.
pub fn matched_detection_loss(
    g: &mut Graph<'_>,
    heads: HeadVars,
    det: &DetectionSet,
    gts: &[BBox],
    cfg: &ModelConfig,
) -> Result<(Var, AssignmentResult)> {
    let assign = hungarian(&detection_match_cost(det, gts, cfg.det_weights)?)?;
    let matched = &assign.perm[..gts.len()];
    let mut positives = vec![false; det.boxes.len()];
    for &j in matched {
        positives[j] = true;
    }
    let loss = detection_loss(g, heads, gts, &positives, matched, cfg)?;
    Ok((loss, assign))
}

/// Link loss terms `(λ_sim Σ L_sim, λ_cls Σ focal)`. The similarity scores
/// are taken against the extended embeddings, detached unless
/// `cfg.detach_sim_targets` is off.
pub fn link_loss(
    g: &mut Graph<'_>,
    link: &LinkBranch,
    triplets: &[GroundTruthTriplet],
    perm: &[usize],
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let m = triplets.len();
    if perm.len() != m {
        return Err(Error::contract(format!("{} link assignments for {m} triplets", perm.len())));
    }
    let (mut ext_c, mut ext_m) = (link.ext[0].e, link.ext[1].e);
    if cfg.detach_sim_targets {
        ext_c = g.detach(ext_c);
        ext_m = g.detach(ext_m);
    }
    let mut sims = Vec::new();
    let mut targets = vec![0.0; m];
    for (y, &j) in triplets.iter().zip(perm) {
        targets[j] = if y.a { 1.0 } else { 0.0 };
        if !y.a {
            continue;
        }
        for (v, ext, slot) in [(link.heads.v_c, ext_c, y.e_c), (link.heads.v_m, ext_m, y.e_m)] {
            let row = g.select_rows(v, &[j])?;
            let s = g.cosine(row, ext)?;
            sims.push(g.cross_entropy(s, slot, cfg.tau)?);
        }
    }
    let sim = if sims.is_empty() {
        g.constant(crate::tensor::Tensor::scalar(0.0))
    } else {
        g.add_all(&sims)?
    };
    let sim = g.scale(sim, cfg.lambda_sim);
    let cls = g.focal_sum(link.heads.s, &targets, cfg.focal)?;
    let cls = g.scale(cls, cfg.lambda_cls);
    Ok((sim, cls))
}

/// Target matrix of the pair-verification baseline: one positive per lesion
/// at its slots, with `N` standing for the missing side.
pub fn pair_verification_targets(
    assign_c: &AssignmentResult,
    assign_m: &AssignmentResult,
    pairs: &[PairLabel],
    n: usize,
) -> Vec<f64> {
    let mut m = vec![0.0; (n + 1) * (n + 1)];
    for &(c, mm) in pairs {
        let i = c.map_or(n, |g| assign_c.perm[g]);
        let j = mm.map_or(n, |g| assign_m.perm[g]);
        m[i * (n + 1) + j] = 1.0;
    }
    m
}

/// Summed focal loss of `sigmoid(S)` against the target matrix.
pub fn pair_verification_loss(g: &mut Graph<'_>, logits: Var, targets: &[f64], cfg: &ModelConfig) -> Result<Var> {
    let p = g.sigmoid(logits);
    g.focal_sum(p, targets, cfg.pv_focal)
}

/// Paired-query loss: assignment by the larger of the two view costs, then
/// a detection loss per view in which a lesion missing from that view makes
/// its query a negative there.
pub fn plq_loss(g: &mut Graph<'_>, fwd: &Forward, t: &CaseTargets<'_>, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let dets = fwd.detections(g)?;
    let n = dets[0].boxes.len();
    let preds: Vec<PairedPrediction> = (0..n)
        .map(|j| PairedPrediction {
            box_c: dets[0].boxes[j],
            box_m: dets[1].boxes[j],
            score_c: dets[0].scores[j],
            score_m: dets[1].scores[j],
        })
        .collect();
    let gts: Vec<PairedTarget> = t
        .pairs
        .iter()
        .map(|&(c, m)| PairedTarget {
            box_c: c.map(|i| t.gt_c[i]),
            box_m: m.map(|i| t.gt_m[i]),
        })
        .collect();
    let assign = hungarian(&plq_match_cost(&preds, &gts, cfg.det_weights)?)?;
    let mut out = Vec::new();
    for (vi, view) in View::BOTH.iter().enumerate() {
        let mut positives = vec![false; n];
        let mut boxes = Vec::new();
        let mut matched = Vec::new();
        for (k, gt) in gts.iter().enumerate() {
            let b = if *view == View::Cc { gt.box_c } else { gt.box_m };
            if let Some(b) = b {
                let j = assign.perm[k];
                positives[j] = true;
                boxes.push(b);
                matched.push(j);
            }
        }
        out.push(detection_loss(g, fwd.heads[vi], &boxes, &positives, &matched, cfg)?);
    }
    Ok((out[0], out[1]))
}

/// Everything one case contributes to the objective.
pub struct CaseLoss {
    pub total: Var,
    pub report: LossReport,
    pub det_assign: Option<[AssignmentResult; 2]>,
    pub triplets: Vec<GroundTruthTriplet>,
    pub link_assign: Option<AssignmentResult>,
}

/// Matching and losses for whichever variant `cfg` selects;
/// `total = l_d + l_link`.
pub fn total_loss(g: &mut Graph<'_>, fwd: &Forward, t: &CaseTargets<'_>, cfg: &ModelConfig) -> Result<CaseLoss> {
    let zero = g.constant(crate::tensor::Tensor::scalar(0.0));
    if cfg.variant == Variant::PairedLesionQuery {
        let (lc, lm) = plq_loss(g, fwd, t, cfg)?;
        let l_d = g.add(lc, lm)?;
        let report = LossReport {
            total: g.value(l_d).item(),
            l_d: g.value(l_d).item(),
            l_d_cc: g.value(lc).item(),
            l_d_mlo: g.value(lm).item(),
            ..Default::default()
        };
        return Ok(CaseLoss {
            total: l_d,
            report,
            det_assign: None,
            triplets: Vec::new(),
            link_assign: None,
        });
    }

    let dets = fwd.detections(g)?;
    let (lc, ac) = matched_detection_loss(g, fwd.heads[0], &dets[0], t.gt_c, cfg)?;
    let (lm, am) = matched_detection_loss(g, fwd.heads[1], &dets[1], t.gt_m, cfg)?;
    let mut det_terms = vec![lc, lm];
    for aux in &fwd.aux_heads {
        for (vi, view) in View::BOTH.iter().enumerate() {
            let d = DetectionSet::read(g, aux[vi], aux[vi].boxes, *view)?;
            let (l, _) = matched_detection_loss(g, aux[vi], &d, t.boxes(*view), cfg)?;
            det_terms.push(l);
        }
    }
    let l_d = g.add_all(&det_terms)?;
    let mut report = LossReport {
        l_d: g.value(l_d).item(),
        l_d_cc: g.value(lc).item(),
        l_d_mlo: g.value(lm).item(),
        ..Default::default()
    };
    let n = dets[0].boxes.len();
    let mut triplets = Vec::new();
    let mut link_assign = None;
    let l_link = if let Some(link) = &fwd.link {
        let m = g.value(link.heads.s).len();
        triplets = gt_to_triplets(&ac, &am, t.pairs, n, m)?;
        let preds = LinkPredictions::read(g, link.heads);
        let cost = link_match_cost(
            &triplets,
            &preds,
            g.value(link.ext[0].e),
            g.value(link.ext[1].e),
            cfg.alpha,
            cfg.beta,
            cfg.cost_form,
        )?;
        let assign = assignment::hungarian(&cost)?;
        let (sim, cls) = link_loss(g, link, &triplets, &assign.perm, cfg)?;
        report.l_sim = g.value(sim).item();
        report.l_cls = g.value(cls).item();
        link_assign = Some(assign);
        g.add(sim, cls)?
    } else if let Some(logits) = fwd.pv_logits {
        let targets = pair_verification_targets(&ac, &am, t.pairs, n);
        let l = pair_verification_loss(g, logits, &targets, cfg)?;
        report.l_cls = g.value(l).item();
        l
    } else {
        zero
    };
    report.l_link = g.value(l_link).item();
    let total = g.add(l_d, l_link)?;
    report.total = g.value(total).item();
    Ok(CaseLoss {
        total,
        report,
        det_assign: Some([ac, am]),
        triplets,
        link_assign,
    })
}
