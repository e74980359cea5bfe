use clnet::config::ModelConfig;
use clnet::synth::{generate_dataset, GenConfig, PairedSample};
use clnet::train::{checkpoint_bytes, checkpoint_from_bytes, train, StepLog, TrainConfig, TrainState};
use clnet::{Error, Tensor};

fn setup() -> (ModelConfig, TrainConfig, Vec<PairedSample>) {
    let model = ModelConfig::tiny();
    let data_cfg = GenConfig {
        image_size: model.image_size,
        min_radius: 1.5,
        max_radius: 2.5,
        ..GenConfig::default()
    };
    let data = generate_dataset(3, 12, &data_cfg).unwrap();
    let tc = TrainConfig {
        steps: 10,
        batch_size: 2,
        warmup_steps: 3,
        flip: true,
        crop_jitter: 1,
        seed: 4,
        ..TrainConfig::default()
    };
    (model, tc, data)
}

fn run(state: &mut TrainState, model: &ModelConfig, tc: &TrainConfig, data: &[PairedSample]) -> Vec<StepLog> {
    let mut logs = Vec::new();
    train(state, model, tc, data, |_, l| {
        logs.push(l.clone());
        Ok(())
    })
    .unwrap();
    logs
}

#[test]
fn training_is_deterministic() {
    let (model, tc, data) = setup();
    let mut a = TrainState::init(&model, 1).unwrap();
    let mut b = TrainState::init(&model, 1).unwrap();
    let la = run(&mut a, &model, &tc, &data);
    let lb = run(&mut b, &model, &tc, &data);
    assert_eq!(serde_json::to_string(&la).unwrap(), serde_json::to_string(&lb).unwrap());
    assert_eq!(checkpoint_bytes(&model, &a), checkpoint_bytes(&model, &b));
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_trace() {
    let (model, tc, data) = setup();
    let mut full = TrainState::init(&model, 1).unwrap();
    let reference = run(&mut full, &model, &tc, &data);

    let mut part = TrainState::init(&model, 1).unwrap();
    let first = run(&mut part, &model, &TrainConfig { steps: 4, ..tc.clone() }, &data);
    let bytes = checkpoint_bytes(&model, &part);
    let (m2, mut resumed) = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(m2, model);
    assert_eq!(resumed.step, 4);
    let rest = run(&mut resumed, &model, &tc, &data);
    let joined: Vec<&StepLog> = first.iter().chain(&rest).collect();
    assert_eq!(joined.len(), reference.len());
    for (a, b) in joined.iter().zip(&reference) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.samples, b.samples);
        assert!((a.loss.total - b.loss.total).abs() < 1e-9, "step {}", a.step);
        assert!((a.grad_norm - b.grad_norm).abs() < 1e-9);
    }
}

#[test]
fn non_finite_parameters_abort_with_the_batch_seeds() {
    let (model, tc, data) = setup();
    let mut state = TrainState::init(&model, 1).unwrap();
    let shape = state.params.get("link.dustbin").unwrap().shape().to_vec();
    state.params.insert("link.dustbin", Tensor::full(&shape, f64::NAN));
    let err = train(&mut state, &model, &tc, &data, |_, _| Ok(())).unwrap_err();
    match err {
        Error::NonFinite(msg) => assert!(msg.contains("seeds"), "{msg}"),
        e => panic!("unexpected {e}"),
    }
    assert_eq!(state.step, 0);
}
