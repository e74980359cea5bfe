//! Toy-scale reproduction: the variants trained on one synthetic dataset
//! over several seeds, compared on held-out recall and pair quality.

use std::time::Instant;

use clnet::config::{ModelConfig, Variant};
use clnet::inference::{evaluate, EvalOptions, EvalReport};
use clnet::synth::{generate_dataset, GenConfig, PairedSample};
use clnet::train::{train, TrainConfig, TrainState};
use serde::Serialize;

use crate::Outcome;

pub const DATA_SEED: u64 = 1;
pub const TRAIN_CASES: usize = 2000;
pub const TEST_CASES: usize = 400;
pub const SEEDS: [u64; 3] = [1, 2, 3];

/// The compared methods: label and model config.
pub fn arms() -> Vec<(&'static str, ModelConfig)> {
    let desk = ModelConfig::desk();
    // At this scale the linker only learns to point once its loss weighs as
    // much as one detection term.
    let clnet = ModelConfig {
        lambda_sim: 1.0,
        ..desk.clone().with_variant(Variant::ClNet)
    };
    vec![
        ("clnet", clnet),
        ("vild_only", desk.clone().with_variant(Variant::VildOnly)),
        (
            "plain",
            ModelConfig {
                inter_attention: false,
                ..desk.clone().with_variant(Variant::VildOnly)
            },
        ),
        ("paired_lesion_query", desk.with_variant(Variant::PairedLesionQuery)),
    ]
}

/// Fixed training budget shared by every arm.
pub fn budget(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 3000,
        batch_size: 2,
        lr: 1e-3,
        linker_lr_mult: 1.0,
        warmup_steps: 50,
        seed,
        ..TrainConfig::default()
    }
}

pub fn datasets() -> (Vec<PairedSample>, Vec<PairedSample>) {
    let cfg = GenConfig {
        p_occ: 0.15,
        ..GenConfig::default()
    };
    let train = generate_dataset(DATA_SEED, TRAIN_CASES, &cfg).unwrap();
    let test_seed = clnet_cli::split_seed(DATA_SEED, "test").unwrap();
    let test = generate_dataset(test_seed, TEST_CASES, &cfg).unwrap();
    (train, test)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub seconds: f64,
    pub report: EvalReport,
}

pub fn run_arm(label: &str, model: &ModelConfig, seed: u64, train_set: &[PairedSample], test_set: &[PairedSample]) -> clnet::Result<RunResult> {
    let start = Instant::now();
    let tc = budget(seed);
    let mut state = TrainState::init(model, seed)?;
    train(&mut state, model, &tc, train_set, |_, _| Ok(()))?;
    let report = evaluate(&state.params, model, test_set, EvalOptions::default())?;
    Ok(RunResult {
        arm: label.to_string(),
        seed,
        seconds: start.elapsed().as_secs_f64(),
        report,
    })
}

fn mean(rs: &[RunResult], arm: &str, f: impl Fn(&EvalReport) -> f64) -> f64 {
    let v: Vec<f64> = rs.iter().filter(|r| r.arm == arm).map(|r| f(&r.report)).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Ordering of mean R@0.5, in percentage points with a one-point slack.
pub fn ordering(rs: &[RunResult]) -> Outcome {
    let r = |arm| 100.0 * mean(rs, arm, |e| e.recalls[1]);
    let (cl, vi, pl, plq) = (r("clnet"), r("vild_only"), r("plain"), r("paired_lesion_query"));
    let slack = 1.0;
    let ok = cl >= vi - slack && vi >= pl - slack && plq < vi + slack;
    Outcome::new(
        ok,
        format!("mean R@0.5 over seeds {SEEDS:?}: clnet {cl:.1}, vild_only {vi:.1}, plain {pl:.1}, paired_lesion_query {plq:.1} (need clnet >= vild_only >= plain, plq < vild_only, 1-pt slack)"),
    )
}

pub fn pair_learning(rs: &[RunResult]) -> Outcome {
    let exact = mean(rs, "clnet", |e| e.pairs.exact_pair_accuracy);
    let loc = mean(rs, "clnet", |e| e.locality.unwrap_or(0.0));
    Outcome::new(
        exact >= 0.7 && loc >= 0.7,
        format!("clnet exact-pair accuracy {exact:.3} (need >= 0.7), attention locality {loc:.3} (need >= 0.7)"),
    )
}
