//! One function per acceptance criterion; none of them panic on failure.

use std::fs;
use std::path::Path;
use std::time::Instant;

use clnet::assignment::{brute_force_assign, embedding_cost, hungarian, link_match_cost, CostMatrix, GroundTruthTriplet};
use clnet::config::{CostForm, ModelConfig};
use clnet::eval::{froc, recall_at, ImageDetections, FPI_BUDGETS};
use clnet::gradcheck::{finite_diff_check, GradCheckOptions};
use clnet::linker::{extract_pairs, LinkPredictions};
use clnet::losses::{total_loss, CaseTargets};
use clnet::model::{forward, init_parameters};
use clnet::synth::{generate_case, GenConfig};
use clnet::{boxes::BBox, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles::{extract_by_scan, froc_by_enumeration, recall_at_by_enumeration};
use crate::Outcome;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::uniform(&[r, c], 1.0, rng)
}

pub fn hungarian_matches_enumeration() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for n in 2..=7 {
        for k in 0..500 {
            // Every fourth matrix is integer-valued so that ties are common.
            let data: Vec<f64> = (0..n * n)
                .map(|_| if k % 4 == 0 { rng.gen_range(0..4) as f64 } else { rng.gen_range(-10.0..10.0) })
                .collect();
            let c = CostMatrix::new(n, data).unwrap();
            let (h, b) = (hungarian(&c).unwrap(), brute_force_assign(&c).unwrap());
            if c.total(&h.perm) != c.total(&b.perm) {
                return Outcome::new(false, format!("n={n}: hungarian {} vs enumeration {}", h.total_cost, b.total_cost));
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(secs < 30.0, format!("{checked} matrices, n=2..7, {secs:.2}s (limit 30s)"))
}

/// Two-lesion case at the tiny resolution with one lesion hidden in a view.
pub fn occluded_pair_case(image_size: usize) -> clnet::synth::PairedSample {
    let cfg = GenConfig {
        image_size,
        min_lesions: 2,
        max_lesions: 2,
        min_radius: 1.5,
        max_radius: 2.5,
        p_occ: 0.5,
        max_distractors: 1,
        ..GenConfig::default()
    };
    (0..)
        .map(|seed| generate_case(seed, &cfg).unwrap())
        .find(|s| s.pairs.len() == 2 && s.pairs.iter().filter(|p| p.0.is_none() || p.1.is_none()).count() == 1)
        .unwrap()
}

pub fn full_model_gradcheck() -> Outcome {
    let cfg = ModelConfig {
        detach_sim_targets: false,
        ..ModelConfig::tiny()
    };
    let shape = (cfg.model_dim, cfg.num_queries, cfg.num_link_queries);
    if shape != (16, 6, 4) {
        return Outcome::new(false, format!("tiny preset is (D, N, M) = {shape:?}"));
    }
    let params = init_parameters(&cfg, 3).unwrap();
    let case = occluded_pair_case(cfg.image_size);
    let (img_c, img_m) = (case.img_c.to_tensor(), case.img_m.to_tensor());
    let start = Instant::now();
    let opts = GradCheckOptions::default();
    let report = finite_diff_check(
        &params,
        |g| {
            let f = forward(g, &cfg, &img_c, &img_m, false)?;
            let t = CaseTargets {
                gt_c: &case.gt_c,
                gt_m: &case.gt_m,
                pairs: &case.pairs,
            };
            Ok(total_loss(g, &f, &t, &cfg)?.total)
        },
        &opts,
    );
    let secs = start.elapsed().as_secs_f64();
    match report {
        Ok(r) => Outcome::new(
            r.passed() && r.max_rel_error() < 1e-4 && secs < 300.0,
            format!(
                "{} parameter groups, every entry, max rel error {:.2e} at eps {:.0e} (limit 1e-4), {secs:.0}s (limit 300s){}",
                r.params.len(),
                r.max_rel_error(),
                opts.eps,
                if r.failures.is_empty() { String::new() } else { format!("; failing {:?}", r.failures) }
            ),
        ),
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

fn random_link_instance(rng: &mut ChaCha8Rng, m: usize, n: usize, d: usize) -> (Vec<GroundTruthTriplet>, LinkPredictions, Tensor, Tensor) {
    let ext_c = rand_tensor(rng, n + 1, d);
    let ext_m = rand_tensor(rng, n + 1, d);
    let preds = LinkPredictions {
        v_c: rand_tensor(rng, m, d),
        v_m: rand_tensor(rng, m, d),
        scores: (0..m).map(|_| rng.gen_range(0.01..1.0)).collect(),
    };
    let k = rng.gen_range(0..=m.min(n));
    let gts = (0..m)
        .map(|i| {
            if i < k {
                GroundTruthTriplet {
                    e_c: rng.gen_range(0..=n),
                    e_m: rng.gen_range(0..n),
                    a: true,
                }
            } else {
                GroundTruthTriplet { e_c: n, e_m: n, a: false }
            }
        })
        .collect();
    (gts, preds, ext_c, ext_m)
}

pub fn matching_cost_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..10_000 {
        let d = rng.gen_range(2..12);
        let v: Vec<Vec<f64>> = (0..4).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        // Include exactly aligned and opposed embeddings at the extremes.
        let (vc, vm) = match k % 3 {
            0 => (v[0].clone(), v[1].clone()),
            1 => (v[0].iter().map(|x| -x).collect(), v[1].iter().map(|x| -2.0 * x).collect()),
            _ => (v[2].clone(), v[3].clone()),
        };
        let beta = rng.gen_range(0.0..=1.0);
        let e = embedding_cost(&v[0], &v[1], &vc, &vm, beta);
        lo = lo.min(e);
        hi = hi.max(e);
    }
    let bounded = (0.0..=2.0).contains(&lo) && (0.0..=2.0).contains(&hi);

    let mut invariant = 0;
    let mut tied = 0;
    for _ in 0..100 {
        let m = rng.gen_range(2..7);
        let n = rng.gen_range(2..9);
        let (gts, preds, ext_c, ext_m) = random_link_instance(&mut rng, m, n, 8);
        let cost = |p: &LinkPredictions| link_match_cost(&gts, p, &ext_c, &ext_m, 0.5, 0.5, CostForm::Mul).unwrap();
        let base_cost = cost(&preds);
        let base = hungarian(&base_cost).unwrap();
        let mut all = true;
        for c in [0.5, 2.0, 10.0] {
            let scaled = LinkPredictions {
                scores: preds.scores.iter().map(|s| s * c).collect(),
                ..preds.clone()
            };
            let r = hungarian(&cost(&scaled)).unwrap();
            if r.perm != base.perm {
                if (base_cost.total(&r.perm) - base_cost.total(&base.perm)).abs() < 1e-12 {
                    tied += 1;
                } else {
                    all = false;
                }
            }
        }
        invariant += all as usize;
    }
    Outcome::new(
        bounded && invariant == 100,
        format!(
            "L_emd range [{lo:.4}, {hi:.4}] over 1e4 pairs; Mul argmin invariant on {invariant}/100 instances for c in {{0.5, 2, 10}} ({tied} cost ties)"
        ),
    )
}

pub fn extraction_matches_scan() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut forced = 0;
    for k in 0..1000 {
        let (m, n) = (rng.gen_range(1..=6), rng.gen_range(1..=8));
        let (_, mut preds, ext_c, ext_m) = random_link_instance(&mut rng, m, n, 6);
        // A third of the instances aim some queries straight at a dustbin.
        if k % 3 == 0 {
            for q in 0..m {
                let which = rng.gen_range(0..3);
                let d = 6;
                if which != 1 {
                    preds.v_c.data_mut()[q * d..(q + 1) * d].copy_from_slice(ext_c.row(n));
                }
                if which != 0 {
                    preds.v_m.data_mut()[q * d..(q + 1) * d].copy_from_slice(ext_m.row(n));
                }
                forced += 1;
            }
        }
        let floor = if k % 2 == 0 { 0.0 } else { 0.5 };
        let got = extract_pairs(&preds, &ext_c, &ext_m, floor).unwrap();
        let want = extract_by_scan(&preds, &ext_c, &ext_m, floor);
        if got != want {
            return Outcome::new(false, format!("instance {k}: {got:?} vs scan {want:?}"));
        }
    }
    Outcome::new(true, format!("1000 instances (M<=6, N<=8), {forced} queries forced onto a dustbin"))
}

fn random_froc_fixture(rng: &mut ChaCha8Rng) -> (Vec<ImageDetections>, Vec<Vec<BBox>>) {
    let n_img = rng.gen_range(1..=10);
    let total = rng.gen_range(0..=30);
    let mut dets = vec![ImageDetections::default(); n_img];
    let mut gts = Vec::new();
    let rb = |rng: &mut ChaCha8Rng| BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
    for _ in 0..n_img {
        let k = rng.gen_range(0..4);
        gts.push((0..k).map(|_| rb(rng)).collect::<Vec<_>>());
    }
    for _ in 0..total {
        let i = rng.gen_range(0..n_img);
        // Near-copies of ground truth give hits; quantized scores give ties.
        let b = match gts[i].len() {
            0 => rb(rng),
            k if rng.gen_bool(0.6) => {
                let g: BBox = gts[i][rng.gen_range(0..k)];
                BBox::new(g.cx + rng.gen_range(-0.03..0.03), g.cy + rng.gen_range(-0.03..0.03), g.w, g.h)
            }
            _ => rb(rng),
        };
        dets[i].boxes.push(b);
        dets[i].scores.push((rng.gen_range(0..12) as f64) / 11.0);
    }
    (dets, gts)
}

pub fn froc_matches_enumeration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..200 {
        let (dets, gts) = random_froc_fixture(&mut rng);
        let curve = froc(&dets, &gts, 0.3).unwrap();
        let want = froc_by_enumeration(&dets, &gts, 0.3);
        if curve.points != want {
            return Outcome::new(false, format!("fixture {k}: curve differs from enumeration"));
        }
        for t in FPI_BUDGETS.iter().copied().chain([0.1, 3.0, 10.0]) {
            if recall_at(&curve, t) != recall_at_by_enumeration(&want, t) {
                return Outcome::new(false, format!("fixture {k}: recall_at({t}) differs"));
            }
        }
        let monotone = curve.points.windows(2).all(|w| {
            w[0].threshold > w[1].threshold && w[0].fpi <= w[1].fpi && w[0].recall <= w[1].recall
        });
        if !monotone {
            return Outcome::new(false, format!("fixture {k}: curve not monotone"));
        }
    }
    Outcome::new(true, "200 fixtures (<=10 images, <=30 detections), curves and R@t identical, monotone")
}

fn cli(args: &[&str]) -> Result<String, String> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["clnet"];
    full.extend_from_slice(args);
    match clnet_cli::run(full, &mut out, &mut err) {
        0 => Ok(String::from_utf8_lossy(&out).into_owned()),
        code => Err(format!("clnet {args:?} exited {code}: {}", String::from_utf8_lossy(&err))),
    }
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let at = |f: &str| dir.join(f).display().to_string();
    let (data, test, ckpt, log) = (at("train.jsonl"), at("test.jsonl"), at("model.ckpt"), at("log.jsonl"));
    cli(&["gen-data", "--set", "seed=1", "--n", "20", "--out", &data])?;
    cli(&["gen-data", "--set", "seed=1", "--n", "10", "--split", "test", "--out", &test])?;
    cli(&["train", "--set", "seed=1", "--set", "train.steps=10", "--data", &data, "--checkpoint", &ckpt, "--log", &log])?;
    let table = cli(&["eval", "--checkpoint", &ckpt, "--data", &test])?;
    let mut files = Vec::new();
    for (name, path) in [("gen-data", &data), ("gen-data test", &test), ("checkpoint", &ckpt), ("train log", &log)] {
        files.push((name.to_string(), fs::read(path).map_err(|e| e.to_string())?));
    }
    files.push(("eval".to_string(), table.into_bytes()));
    Ok(files)
}

pub fn pipeline_is_deterministic() -> Outcome {
    let run = || -> Result<Vec<(String, Vec<u8>)>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        pipeline(dir.path())
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
            let sizes: Vec<String> = a.iter().map(|(n, v)| format!("{n} {}B", v.len())).collect();
            if differing.is_empty() {
                Outcome::new(true, format!("two runs byte-identical: {}", sizes.join(", ")))
            } else {
                Outcome::new(false, format!("outputs differ: {differing:?}"))
            }
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e),
    }
}

pub fn both_cost_forms_run() -> Outcome {
    let inner = || -> Result<String, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let at = |f: &str| dir.path().join(f).display().to_string();
        let data = at("train.jsonl");
        cli(&["gen-data", "--n", "10", "--out", &data])?;
        for form in ["mul", "add"] {
            let set = format!("model.cost_form=\"{form}\"");
            let (ckpt, log) = (at(&format!("{form}.ckpt")), at(&format!("{form}.log")));
            cli(&["train", "--set", &set, "--set", "train.steps=20", "--data", &data, "--checkpoint", &ckpt, "--log", &log])?;
        }
        cli(&["eval", "--checkpoint", &at("mul.ckpt"), "--checkpoint", &at("add.ckpt"), "--data", &data])
    };
    match inner() {
        Ok(table) => {
            let row = |label: &str| table.lines().find(|l| l.starts_with(label)).map(str::to_string);
            let (mul, add) = (row("clnet-mul"), row("clnet-add"));
            let numeric = |r: &Option<String>| {
                r.as_ref().is_some_and(|l| l.split_whitespace().skip(1).all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)))
            };
            Outcome::new(
                numeric(&mul) && numeric(&add),
                format!("eval rows: {} | {}", mul.unwrap_or_default(), add.unwrap_or_default()),
            )
        }
        Err(e) => Outcome::new(false, e),
    }
}
