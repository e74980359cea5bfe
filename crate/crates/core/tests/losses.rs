mod common;

use clnet::assignment::{plq_match_cost, detection_pair_cost, PairedPrediction, PairedTarget};
use clnet::boxes::BBox;
use clnet::config::{ModelConfig, Variant};
use clnet::losses::{total_loss, CaseLoss, CaseTargets};
use clnet::model::{forward, init_parameters};
use clnet::nn::focal_loss;
use clnet::synth::PairedSample;
use clnet::tape::sigmoid;
use clnet::train::batch_gradients;
use clnet::{Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn targets(s: &PairedSample) -> CaseTargets<'_> {
    CaseTargets {
        gt_c: &s.gt_c,
        gt_m: &s.gt_m,
        pairs: &s.pairs,
    }
}

fn evaluate(params: &ParamStore, cfg: &ModelConfig, s: &PairedSample) -> (CaseLoss, Option<Vec<f64>>) {
    let mut g = Graph::new(params);
    let f = forward(&mut g, cfg, &s.img_c.to_tensor(), &s.img_m.to_tensor(), false).unwrap();
    let l = total_loss(&mut g, &f, &targets(s), cfg).unwrap();
    let pv = f.pv_logits.map(|v| g.value(v).data().to_vec());
    (l, pv)
}

const VARIANTS: [Variant; 5] = [
    Variant::ClNet,
    Variant::VildOnly,
    Variant::LinkerOnly,
    Variant::PairVerification,
    Variant::PairedLesionQuery,
];

#[test]
fn total_is_detection_plus_link_for_every_variant() {
    let case = common::two_lesion_occluded_case();
    for v in VARIANTS {
        let cfg = ModelConfig::tiny().with_variant(v);
        let p = init_parameters(&cfg, 3).unwrap();
        let (l, _) = evaluate(&p, &cfg, &case);
        let r = l.report;
        assert!(r.is_finite());
        assert!((r.total - (r.l_d + r.l_link)).abs() < 1e-9, "{v:?} {r:?}");
        assert!((r.l_link - (r.l_sim + r.l_cls)).abs() < 1e-9, "{v:?} {r:?}");
        if matches!(v, Variant::VildOnly | Variant::PairedLesionQuery) {
            assert_eq!(r.l_link, 0.0, "{v:?}");
        } else {
            assert!(r.l_link > 0.0, "{v:?}");
        }
    }
}

#[test]
fn empty_ground_truth_gives_pure_negative_losses() {
    let mut case = common::two_lesion_occluded_case();
    case.gt_c.clear();
    case.gt_m.clear();
    case.pairs.clear();
    for v in VARIANTS {
        let cfg = ModelConfig::tiny().with_variant(v);
        let p = init_parameters(&cfg, 1).unwrap();
        let (l, pv) = evaluate(&p, &cfg, &case);
        assert!(l.report.is_finite(), "{v:?}");
        assert_eq!(l.report.l_sim, 0.0);
        if v == Variant::PairVerification {
            let logits = pv.unwrap();
            let n = cfg.num_queries + 1;
            assert_eq!(logits.len(), n * n);
            let expect: f64 = logits.iter().map(|&s| focal_loss(sigmoid(s), false, cfg.pv_focal)).sum();
            assert!((l.report.l_link - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_similarity_weight_leaves_only_classification() {
    let case = common::two_lesion_occluded_case();
    let cfg = ModelConfig {
        lambda_sim: 0.0,
        ..ModelConfig::tiny()
    };
    let p = init_parameters(&cfg, 2).unwrap();
    let (l, _) = evaluate(&p, &cfg, &case);
    assert_eq!(l.report.l_sim, 0.0);
    assert!((l.report.l_link - l.report.l_cls).abs() < 1e-12);
}

#[test]
fn paired_cost_is_the_worse_view() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = ModelConfig::tiny().det_weights;
    let rb = |rng: &mut ChaCha8Rng| BBox {
        cx: rng.gen_range(0.2..0.8),
        cy: rng.gen_range(0.2..0.8),
        w: rng.gen_range(0.05..0.3),
        h: rng.gen_range(0.05..0.3),
    };
    for _ in 0..100 {
        let preds: Vec<PairedPrediction> = (0..4)
            .map(|_| PairedPrediction {
                box_c: rb(&mut rng),
                box_m: rb(&mut rng),
                score_c: rng.gen(),
                score_m: rng.gen(),
            })
            .collect();
        let gts = vec![
            PairedTarget { box_c: Some(rb(&mut rng)), box_m: Some(rb(&mut rng)) },
            PairedTarget { box_c: Some(rb(&mut rng)), box_m: None },
        ];
        let c = plq_match_cost(&preds, &gts, w).unwrap();
        for (j, p) in preds.iter().enumerate() {
            let both = detection_pair_cost(gts[0].box_c.unwrap(), p.box_c, p.score_c, w)
                .max(detection_pair_cost(gts[0].box_m.unwrap(), p.box_m, p.score_m, w));
            assert_eq!(c.get(0, j), both);
            let one = detection_pair_cost(gts[1].box_c.unwrap(), p.box_c, p.score_c, w)
                .max(-w.cls * (1.0 - p.score_m));
            assert_eq!(c.get(1, j), one);
        }
    }
}

fn gd_trace(cfg: &ModelConfig, steps: usize, lr: f64) -> Vec<f64> {
    let case = common::two_lesion_occluded_case();
    let mut p = init_parameters(cfg, 5).unwrap();
    let batch = std::slice::from_ref(&case);
    let mut trace = Vec::new();
    for _ in 0..steps {
        let (r, grads) = batch_gradients(&p, cfg, batch).unwrap();
        trace.push(r.total);
        for (name, t) in p.iter_mut() {
            for (x, g) in t.data_mut().iter_mut().zip(grads[name].data()) {
                *x -= lr * g;
            }
        }
    }
    trace
}

#[test]
fn gradient_descent_on_a_frozen_batch_rarely_increases_the_loss() {
    let cfg = ModelConfig::tiny();
    let trace = gd_trace(&cfg, 101, 3e-4);
    let ok = trace.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(ok >= 95, "{ok}/100 non-increasing steps: {trace:?}");
    assert!(trace[100] < trace[0]);
}

#[test]
fn pair_verification_loss_decreases_under_training() {
    let cfg = ModelConfig::tiny().with_variant(Variant::PairVerification);
    let trace = gd_trace(&cfg, 40, 1e-3);
    assert!(trace[39] < trace[0], "{trace:?}");
}
