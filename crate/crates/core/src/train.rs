//! AdamW training with warm-up and cosine decay, deterministic batching and
//! augmentation, and resumable checkpoints.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::{total_loss, CaseTargets, LossReport};
use crate::model::{forward, init_parameters};
use crate::params::{Graph, ParamStore};
use crate::synth::PairedSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning-rate factor for link-module parameters.
    pub linker_lr_mult: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    /// Cosine decay after warm-up; constant rate when off.
    pub cosine: bool,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub flip: bool,
    /// Maximum crop-jitter shift in pixels; 0 disables.
    pub crop_jitter: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            linker_lr_mult: 0.25,
            steps: 100,
            batch_size: 2,
            seed: 0,
            warmup_steps: 10,
            cosine: true,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 0.1,
            flip: false,
            crop_jitter: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (f, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(f, "must lie in [0, 1)"));
            }
        }
        if self.weight_decay < 0.0 || self.linker_lr_mult < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::config("weight_decay", "rates must be non-negative"));
        }
        Ok(())
    }

    /// Rate at `step` (0-based): linear warm-up, then half-cosine to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine {
            return self.lr;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub samples: Vec<u64>,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Parameters plus optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    /// Steps completed.
    pub step: usize,
}

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";
const OPT_STEP: &str = "opt.step";

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        TrainState {
            params,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(init_parameters(cfg, seed)?))
    }

    /// Model parameters and optimizer state in one store.
    pub fn to_checkpoint(&self) -> ParamStore {
        let mut s = self.params.clone();
        for (k, t) in &self.m {
            s.insert(format!("{OPT_M}{k}"), t.clone());
        }
        for (k, t) in &self.v {
            s.insert(format!("{OPT_V}{k}"), t.clone());
        }
        s.insert(OPT_STEP, Tensor::scalar(self.step as f64));
        s
    }

    /// Splits a checkpoint; one without optimizer state starts fresh moments.
    pub fn from_checkpoint(store: ParamStore) -> Self {
        let mut params = ParamStore::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        let mut step = 0;
        for (k, t) in store.iter() {
            if let Some(name) = k.strip_prefix(OPT_M) {
                m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(OPT_V) {
                v.insert(name.to_string(), t.clone());
            } else if k == OPT_STEP {
                step = t.item() as usize;
            } else {
                params.insert(k.clone(), t.clone());
            }
        }
        let mut state = TrainState::new(params);
        if !m.is_empty() {
            state.m.extend(m);
            state.v.extend(v);
            state.step = step;
        }
        state
    }
}

const RUN_MAGIC: &[u8] = b"CLNET-RUN-1\n";

/// A training run on disk: the model config as JSON, then the parameter and
/// optimizer store.
pub fn checkpoint_bytes(model: &ModelConfig, state: &TrainState) -> Vec<u8> {
    let header = serde_json::to_vec(model).expect("config serializes");
    let mut out = RUN_MAGIC.to_vec();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&state.to_checkpoint().to_bytes());
    out
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<(ModelConfig, TrainState)> {
    let bad = |offset: usize, msg: &str| Error::Parse {
        line: 0,
        offset,
        msg: msg.to_string(),
    };
    let rest = buf.strip_prefix(RUN_MAGIC).ok_or_else(|| bad(0, "missing CLNET-RUN-1 header"))?;
    if rest.len() < 4 {
        return Err(bad(RUN_MAGIC.len(), "truncated checkpoint"));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let body = &rest[4..];
    if body.len() < len {
        return Err(bad(RUN_MAGIC.len() + 4, "truncated config header"));
    }
    let model: ModelConfig = serde_json::from_slice(&body[..len])
        .map_err(|e| bad(RUN_MAGIC.len() + 4 + e.column(), &e.to_string()))?;
    let store = ParamStore::from_bytes(&body[len..])?;
    Ok((model, TrainState::from_checkpoint(store)))
}

pub fn save_checkpoint(path: &std::path::Path, model: &ModelConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, state))?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(ModelConfig, TrainState)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Model parameters only, for evaluation.
pub fn model_params(store: &ParamStore) -> ParamStore {
    TrainState::from_checkpoint(store.clone()).params
}

fn mix(seed: u64, a: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(a.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ 0x5851_F42D
}

/// Dataset indices of the batch at `step`: consecutive slices of a per-epoch
/// shuffle, so the batch is a pure function of seed and step.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cache: Option<(usize, Vec<usize>)> = None;
    for k in 0..batch {
        let pos = step * batch + k;
        let (epoch, off) = (pos / n, pos % n);
        if cache.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
            cache = Some((epoch, perm));
        }
        out.push(cache.as_ref().unwrap().1[off]);
    }
    out
}

/// Random flip and crop jitter for the `k`-th sample of `step`.
pub fn augment(s: &PairedSample, cfg: &TrainConfig, step: usize, k: usize) -> PairedSample {
    if !cfg.flip && cfg.crop_jitter == 0 {
        return s.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0xA5A5, (step * 1024 + k) as u64));
    let mut out = if cfg.flip && rng.gen_bool(0.5) { s.flipped() } else { s.clone() };
    if cfg.crop_jitter > 0 {
        let j = cfg.crop_jitter as i32;
        let (dc, dm, dy) = (rng.gen_range(-j..=j), rng.gen_range(-j..=j), rng.gen_range(-j..=j));
        out = out.shifted(dc, dm, dy);
    }
    out
}

/// Summed loss and gradients of a batch at the current parameters.
pub fn batch_gradients(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &[PairedSample],
) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new(params);
    let mut report = LossReport::default();
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let f = forward(&mut g, cfg, &s.img_c.to_tensor(), &s.img_m.to_tensor(), false)?;
        // Matching rejects NaN costs, so catch non-finite outputs here first.
        let mut outputs = vec![
            ("cc boxes", f.heads[0].boxes),
            ("cc scores", f.heads[0].scores),
            ("mlo boxes", f.heads[1].boxes),
            ("mlo scores", f.heads[1].scores),
        ];
        if let Some(l) = &f.link {
            outputs.extend([("link embeddings", l.heads.v_c), ("link embeddings", l.heads.v_m), ("link scores", l.heads.s)]);
            outputs.extend([("dustbin-extended embeddings", l.ext[0].e), ("dustbin-extended embeddings", l.ext[1].e)]);
        }
        if let Some(v) = f.pv_logits {
            outputs.push(("pair logits", v));
        }
        if let Some((what, _)) = outputs.iter().find(|(_, v)| !g.value(*v).is_finite()) {
            let seeds: Vec<u64> = batch.iter().map(|s| s.seed).collect();
            return Err(Error::NonFinite(format!(
                "non-finite {what} on sample {} of batch with sample seeds {seeds:?}",
                s.seed
            )));
        }
        let t = CaseTargets {
            gt_c: &s.gt_c,
            gt_m: &s.gt_m,
            pairs: &s.pairs,
        };
        let l = total_loss(&mut g, &f, &t, cfg)?;
        report.accumulate(&l.report);
        terms.push(l.total);
    }
    let loss = g.add_all(&terms)?;
    if !report.is_finite() {
        let seeds: Vec<u64> = batch.iter().map(|s| s.seed).collect();
        return Err(Error::NonFinite(format!(
            "loss {report:?} on batch with sample seeds {seeds:?}"
        )));
    }
    let grads = g.backward(loss)?;
    Ok((report, g.param_grads(&grads)))
}

const ADAM_EPS: f64 = 1e-8;

fn lr_mult(name: &str, cfg: &TrainConfig) -> f64 {
    if name.starts_with("link.") {
        cfg.linker_lr_mult
    } else {
        1.0
    }
}

/// Applies one AdamW update; returns the pre-clip global gradient norm.
pub fn adamw_step(state: &mut TrainState, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig, lr: f64) -> Result<f64> {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    let t = (state.step + 1) as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, p) in state.params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?
            .data();
        let m = state.m.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let rate = lr * lr_mult(name, cfg);
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let gi = gi * clip;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let update = (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            *pi -= rate * (update + cfg.weight_decay * *pi);
        }
    }
    state.step += 1;
    Ok(norm)
}

/// Runs one optimization step on the batch chosen for `state.step`.
pub fn train_step(
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &[PairedSample],
) -> Result<StepLog> {
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let step = state.step;
    let idx = batch_indices(data.len(), cfg.batch_size, cfg.seed, step);
    let batch: Vec<PairedSample> = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| augment(&data[i], cfg, step, k))
        .collect();
    let (loss, grads) = batch_gradients(&state.params, model, &batch)?;
    let lr = cfg.lr_at(step);
    let grad_norm = adamw_step(state, &grads, cfg, lr)?;
    Ok(StepLog {
        step,
        lr,
        grad_norm,
        samples: batch.iter().map(|s| s.seed).collect(),
        loss,
    })
}

/// Trains until `cfg.steps`, calling `on_step` after every step.
pub fn train(
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &[PairedSample],
    mut on_step: impl FnMut(&TrainState, &StepLog) -> Result<()>,
) -> Result<()> {
    model.validate()?;
    cfg.validate()?;
    while state.step < cfg.steps {
        let log = train_step(state, model, cfg, data)?;
        on_step(state, &log)?;
    }
    Ok(())
}
