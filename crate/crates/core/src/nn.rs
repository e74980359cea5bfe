//! Attention, feed-forward blocks, layer norm, parameter initialization and
//! the classification losses shared by every head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;

/// Focal loss balance `alpha` and focusing exponent `gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.5,
            gamma: 2.0,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("{field}.alpha"), "must lie in [0, 1]"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("{field}.gamma"), "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

pub fn activate(t: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Gelu => t.gelu(x),
        Activation::Relu => t.relu(x),
    }
}

// ----------------------------------------------------------------------------
// Attention

/// `softmax(q kᵀ / sqrt(d)) v`. Returns the output and the weight matrix.
pub fn attend(t: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (nq, d) = t.value(q).dims2()?;
    let (nk, dk) = t.value(k).dims2()?;
    let (nv, _) = t.value(v).dims2()?;
    if d != dk || nk != nv || nk == 0 || nq == 0 {
        return Err(Error::shape("attention", t.shape(q), t.shape(k)));
    }
    let scores = t.matmul_nt(q, k)?;
    let scores = t.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = t.softmax_rows(scores)?;
    let out = t.matmul(weights, v)?;
    Ok((out, weights))
}

/// Projection handles of one multi-head attention block. Each `D×D` matrix
/// holds the per-head `D×(D/m)` projections side by side.
#[derive(Clone, Copy, Debug)]
pub struct MhaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head attention: per-head attention on projected inputs, heads
/// concatenated, then the output projection. Also returns every head's
/// weight matrix.
pub fn mha(t: &mut Tape, w: MhaVars, heads: usize, q: Var, k: Var, v: Var) -> Result<(Var, Vec<Var>)> {
    let d = t.value(w.wq).dims2()?.0;
    for x in [q, k, v] {
        if t.value(x).dims2()?.1 != d {
            return Err(Error::shape("multi_head_attention", t.shape(x), &[d]));
        }
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::config("heads", format!("model dim {d} not divisible by {heads}")));
    }
    let dh = d / heads;
    let qp = t.matmul(q, w.wq)?;
    let kp = t.matmul(k, w.wk)?;
    let vp = t.matmul(v, w.wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                t.slice_cols(qp, h * dh, dh)?,
                t.slice_cols(kp, h * dh, dh)?,
                t.slice_cols(vp, h * dh, dh)?,
            )
        };
        let (o, wts) = attend(t, qh, kh, vh)?;
        outs.push(o);
        weights.push(wts);
    }
    let cat = if heads == 1 { outs[0] } else { t.concat_cols(&outs)? };
    Ok((t.matmul(cat, w.wo)?, weights))
}

/// Head-averaged attention weights.
pub fn mean_weights(t: &Tape, weights: &[Var]) -> Tensor {
    let mut acc = t.value(weights[0]).clone();
    for &w in &weights[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(t.value(w).data()) {
            *a += b;
        }
    }
    let n = weights.len() as f64;
    acc.map(|v| v / n)
}

/// Plain-tensor multi-head attention parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: usize) -> Result<Self> {
        let d = wq.dims2()?.0;
        for w in [&wq, &wk, &wv, &wo] {
            if w.shape() != [d, d] {
                return Err(Error::shape("attention_params", w.shape(), &[d, d]));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config("heads", format!("model dim {d} not divisible by {heads}")));
        }
        Ok(AttentionParams { wq, wk, wv, wo, heads })
    }

    pub fn model_dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

/// Untracked attention on plain tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let (out, _) = attend(&mut t, q, k, v)?;
    Ok(t.value(out).clone())
}

/// Untracked multi-head attention on plain tensors.
pub fn multi_head_attention(p: &AttentionParams, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let w = MhaVars {
        wq: t.constant(p.wq.clone()),
        wk: t.constant(p.wk.clone()),
        wv: t.constant(p.wv.clone()),
        wo: t.constant(p.wo.clone()),
    };
    let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let (out, _) = mha(&mut t, w, p.heads, q, k, v)?;
    Ok(t.value(out).clone())
}

// ----------------------------------------------------------------------------
// Named blocks over a parameter store

pub fn bind_mha(g: &mut Graph<'_>, prefix: &str) -> Result<MhaVars> {
    Ok(MhaVars {
        wq: g.param(&format!("{prefix}.wq"))?,
        wk: g.param(&format!("{prefix}.wk"))?,
        wv: g.param(&format!("{prefix}.wv"))?,
        wo: g.param(&format!("{prefix}.wo"))?,
    })
}

pub fn linear(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.g"))?;
    let beta = g.param(&format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// Residual feed-forward block `LN(x + W2 act(W1 x + b1) + b2)`.
pub fn ffn_block(g: &mut Graph<'_>, prefix: &str, x: Var, act: Activation) -> Result<Var> {
    let h = linear(g, &format!("{prefix}.l1"), x)?;
    let h = activate(g, h, act);
    let h = linear(g, &format!("{prefix}.l2"), h)?;
    let r = g.add(x, h)?;
    layer_norm(g, &format!("{prefix}.ln"), r)
}

/// Stack of linear layers with activations between them (none after the last).
pub fn mlp(g: &mut Graph<'_>, prefix: &str, layers: usize, x: Var, act: Activation) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = activate(g, h, act);
        }
    }
    Ok(h)
}

// ----------------------------------------------------------------------------
// Initialization

/// Writes freshly initialized parameters into a store.
pub struct Initializer<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl<R: Rng> Initializer<'_, R> {
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let w = Tensor::uniform(&[fan_in, fan_out], xavier_bound(fan_in, fan_out), self.rng);
        self.store.insert(format!("{prefix}.w"), w);
        self.store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    /// Linear layer whose weight starts at zero and whose bias is random.
    pub fn linear_zero_weight(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.store.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = Tensor::uniform(&[fan_out], 1.0, self.rng);
        self.store.insert(format!("{prefix}.b"), b);
    }

    pub fn linear_with_bias(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: f64) {
        self.linear(prefix, fan_in, fan_out);
        self.store.insert(format!("{prefix}.b"), Tensor::full(&[fan_out], bias));
    }

    pub fn mha(&mut self, prefix: &str, d: usize, zero_output: bool) {
        let bound = xavier_bound(d, d);
        for name in ["wq", "wk", "wv"] {
            let w = Tensor::uniform(&[d, d], bound, self.rng);
            self.store.insert(format!("{prefix}.{name}"), w);
        }
        let wo = if zero_output {
            Tensor::zeros(&[d, d])
        } else {
            Tensor::uniform(&[d, d], bound, self.rng)
        };
        self.store.insert(format!("{prefix}.wo"), wo);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.store.insert(format!("{prefix}.g"), Tensor::ones(&[d]));
        self.store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
    }

    pub fn ffn_block(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.linear(&format!("{prefix}.l1"), d, hidden);
        self.linear(&format!("{prefix}.l2"), hidden, d);
        self.layer_norm(&format!("{prefix}.ln"), d);
    }

    pub fn mlp(&mut self, prefix: &str, dims: &[usize]) {
        for (i, w) in dims.windows(2).enumerate() {
            self.linear(&format!("{prefix}.{i}"), w[0], w[1]);
        }
    }

    pub fn embedding(&mut self, name: &str, rows: usize, d: usize) {
        let t = Tensor::uniform(&[rows, d], 1.0, self.rng);
        self.store.insert(name.to_string(), t);
    }

    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        let bound = xavier_bound(cin * k * k, cout * k * k);
        let w = Tensor::uniform(&[cout, cin, k, k], bound, self.rng);
        self.store.insert(format!("{prefix}.w"), w);
        self.store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
    }
}

// ----------------------------------------------------------------------------
// Losses

/// Focal loss of a single probability (clamped to `[1e-7, 1 - 1e-7]`).
pub fn focal_loss(p: f64, target: bool, cfg: FocalConfig) -> f64 {
    tape::focal_value(p, if target { 1.0 } else { 0.0 }, cfg)
}

/// `-log softmax(scores / tau)[target]`.
pub fn cross_entropy(scores: &[f64], target: usize, tau: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::shape("cross_entropy", &[0], &[target]));
    }
    let mut t = Tape::new();
    let s = t.constant(Tensor::new(vec![scores.len()], scores.to_vec())?);
    let l = t.cross_entropy(s, target, tau)?;
    Ok(t.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// softmax(q kᵀ/√d) v by explicit loops.
    fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let (nq, d) = q.dims2().unwrap();
        let (nk, dv) = v.dims2().unwrap();
        let mut out = Tensor::zeros(&[nq, dv]);
        for i in 0..nq {
            let s: Vec<f64> = (0..nk)
                .map(|j| (0..d).map(|t| q.get2(i, t) * k.get2(j, t)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for c in 0..dv {
                out.data_mut()[i * dv + c] =
                    (0..nk).map(|j| (s[j] - m).exp() / z * v.get2(j, c)).sum();
            }
        }
        out
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut r = rng(1);
        let q = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let k = Tensor::uniform(&[1, 4], 1.0, &mut r);
        let v = Tensor::uniform(&[1, 5], 1.0, &mut r);
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn attention_zero_query_is_value_mean() {
        let mut r = rng(2);
        let k = Tensor::uniform(&[4, 3], 1.0, &mut r);
        let v = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let out = attention(&Tensor::zeros(&[2, 3]), &k, &v).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|j| v.get2(j, c)).sum::<f64>() / 4.0;
            assert!((out.get2(0, c) - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_seed11_matches_oracle() {
        let mut r = rng(11);
        let q = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let k = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let v = Tensor::uniform(&[3, 4], 1.0, &mut r);
        assert!(close(&attention(&q, &k, &v).unwrap(), &attention_oracle(&q, &k, &v), 1e-12));
    }

    #[test]
    fn attention_shape_mismatch() {
        assert!(attention(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn mha_identity_single_head_reduces_to_attention() {
        let mut r = rng(3);
        let q = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let k = Tensor::uniform(&[5, 4], 1.0, &mut r);
        let v = Tensor::uniform(&[5, 4], 1.0, &mut r);
        let i = Tensor::eye(4);
        let p = AttentionParams::new(i.clone(), i.clone(), i.clone(), i, 1).unwrap();
        assert_eq!(multi_head_attention(&p, &q, &k, &v).unwrap(), attention(&q, &k, &v).unwrap());
    }

    #[test]
    fn mha_zero_output_projection() {
        let mut r = rng(4);
        let w = || Tensor::uniform(&[4, 4], 1.0, &mut rng(9));
        let p = AttentionParams::new(w(), w(), w(), Tensor::zeros(&[4, 4]), 2).unwrap();
        let x = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let out = multi_head_attention(&p, &x, &x, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mha_two_heads_matches_per_head_oracle() {
        let mut r = rng(5);
        let (wq, wk, wv, wo) = (
            Tensor::uniform(&[4, 4], 1.0, &mut r),
            Tensor::uniform(&[4, 4], 1.0, &mut r),
            Tensor::uniform(&[4, 4], 1.0, &mut r),
            Tensor::uniform(&[4, 4], 1.0, &mut r),
        );
        let q = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let kv = Tensor::uniform(&[5, 4], 1.0, &mut r);
        let p = AttentionParams::new(wq.clone(), wk.clone(), wv.clone(), wo.clone(), 2).unwrap();
        let got = multi_head_attention(&p, &q, &kv, &kv).unwrap();

        let cols = |m: &Tensor, start: usize| {
            let rows: Vec<Vec<f64>> = (0..m.shape()[0]).map(|i| m.row(i)[start..start + 2].to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let proj = |x: &Tensor, w: &Tensor| crate::tensor::matmul(x, w).unwrap();
        let mut heads = Vec::new();
        for h in 0..2 {
            let hq = proj(&q, &cols(&wq, 2 * h));
            let hk = proj(&kv, &cols(&wk, 2 * h));
            let hv = proj(&kv, &cols(&wv, 2 * h));
            heads.push(attention_oracle(&hq, &hk, &hv));
        }
        let rows: Vec<Vec<f64>> = (0..3).map(|i| [heads[0].row(i), heads[1].row(i)].concat()).collect();
        let want = proj(&Tensor::from_rows(&rows).unwrap(), &wo);
        assert!(close(&got, &want, 1e-12));
    }

    #[test]
    fn attention_is_invariant_to_key_value_permutation() {
        let mut r = rng(6);
        for _ in 0..50 {
            let q = Tensor::uniform(&[2, 3], 2.0, &mut r);
            let k = Tensor::uniform(&[5, 3], 2.0, &mut r);
            let v = Tensor::uniform(&[5, 2], 2.0, &mut r);
            let perm = [3usize, 0, 4, 1, 2];
            let pk = Tensor::from_rows(&perm.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let pv = Tensor::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            assert!(close(&attention(&q, &k, &v).unwrap(), &attention(&q, &pk, &pv).unwrap(), 1e-10));
        }
    }

    #[test]
    fn focal_examples() {
        let cfg0 = FocalConfig { alpha: 0.5, gamma: 0.0 };
        for &p in &[0.1, 0.4, 0.9] {
            assert!((focal_loss(p, true, cfg0) - 0.5 * -(p as f64).ln()).abs() < 1e-12);
            assert!((focal_loss(p, false, cfg0) - 0.5 * -(1.0 - p as f64).ln()).abs() < 1e-12);
        }
        assert!(focal_loss(0.999_999, true, FocalConfig::default()) < 1e-12);
        let v = focal_loss(0.3, true, FocalConfig::default());
        assert!((v - 0.5 * 0.49 * -(0.3f64).ln()).abs() < 1e-12);
        assert!((v - 0.29498).abs() < 1e-5);
    }

    #[test]
    fn focal_nonnegative_and_monotone_for_positives() {
        let cfg = FocalConfig::default();
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let p = i as f64 / 1000.0;
            let l = focal_loss(p, true, cfg);
            assert!(l >= 0.0 && focal_loss(p, false, cfg) >= 0.0);
            assert!(l <= prev + 1e-15);
            prev = l;
        }
    }

    #[test]
    fn cross_entropy_examples() {
        for tau in [0.1, 1.0, 3.0] {
            assert!((cross_entropy(&[0.7; 4], 2, tau).unwrap() - 4f64.ln()).abs() < 1e-12);
        }
        let v = cross_entropy(&[1.0, -1.0], 0, 1.0).unwrap();
        assert!((v - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.12693).abs() < 1e-5);

        let s = [0.3f64, -1.1, 2.4, 0.05, -0.7];
        let tau = 0.5f64;
        let z: f64 = s.iter().map(|x| (x / tau).exp()).sum();
        let want = -((s[3] / tau).exp() / z).ln();
        assert!((cross_entropy(&s, 3, tau).unwrap() - want).abs() < 1e-12);
        assert!(matches!(cross_entropy(&s, 5, 1.0), Err(Error::Index { .. })));
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let s = [0.3, -1.1, 2.4];
        let shifted: Vec<f64> = s.iter().map(|v| v + 17.0).collect();
        let a = cross_entropy(&s, 1, 0.1).unwrap();
        let b = cross_entropy(&shifted, 1, 0.1).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    fn op_store(seed: u64) -> ParamStore {
        let mut r = rng(seed);
        let mut p = ParamStore::new();
        p.insert("a", Tensor::uniform(&[3, 4], 1.0, &mut r));
        p.insert("b", Tensor::uniform(&[4, 4], 1.0, &mut r));
        p.insert("c", Tensor::uniform(&[3, 4], 1.0, &mut r).map(|v| v.abs() + 0.5));
        p.insert("row", Tensor::uniform(&[4], 1.0, &mut r));
        p.insert("img", Tensor::uniform(&[2, 5, 5], 1.0, &mut r));
        p.insert("k", Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut r));
        p.insert("kb", Tensor::uniform(&[3], 1.0, &mut r));
        p
    }

    fn check(f: impl Fn(&mut Graph<'_>) -> Result<Var>) {
        let report = finite_diff_check(&op_store(21), f, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{:#?}", report.params);
    }

    // Every op that participates in a model forward pass, checked in isolation.

    #[test]
    fn grad_matmul_variants_and_transpose() {
        check(|g| {
            let (a, b, c) = (g.param("a")?, g.param("b")?, g.param("c")?);
            let x = g.matmul(a, b)?;
            let y = g.matmul_nt(x, c)?;
            let t = g.transpose(y)?;
            let t = g.mul(t, t)?;
            Ok(g.sum(t))
        });
    }

    #[test]
    fn grad_elementwise_ops() {
        check(|g| {
            let (a, c, row) = (g.param("a")?, g.param("c")?, g.param("row")?);
            let s = g.sub(a, c)?;
            let d = g.div(s, c)?;
            let m = g.maximum(d, a)?;
            let n = g.minimum(m, c)?;
            let r = g.add_row(n, row)?;
            let e = g.exp(r);
            let l = g.log(c);
            let q = g.sqrt(c);
            let ab = g.abs(a);
            let sg = g.sigmoid(a);
            let ge = g.gelu(a);
            let sc = g.scale(ge, -1.7);
            let sc = g.add_scalar(sc, 0.3);
            let parts = [e, l, q, ab, sg, sc];
            let prods: Vec<Var> = parts.iter().map(|&p| g.sum(p)).collect();
            let rl = g.relu(a);
            let rs = g.sum(rl);
            let total = g.add_all(&prods)?;
            g.add(total, rs)
        });
    }

    #[test]
    fn grad_softmax_layernorm_and_slicing() {
        check(|g| {
            let (a, b, row) = (g.param("a")?, g.param("b")?, g.param("row")?);
            let sm = g.softmax_rows(a)?;
            let ln = g.layer_norm(a, row, row)?;
            let sl = g.slice_cols(ln, 1, 2)?;
            let cc = g.concat_cols(&[sl, sm])?;
            let cr = g.concat_rows(&[a, b])?;
            let sel = g.select_rows(cr, &[0, 4, 4, 6, 1, 2])?;
            let rs = g.reshape(sel, &[6, 4])?;
            let x = g.matmul(cc, rs)?;
            let x = g.mul(x, x)?;
            Ok(g.sum(x))
        });
    }

    #[test]
    fn grad_conv2d() {
        check(|g| {
            let (img, k, kb) = (g.param("img")?, g.param("k")?, g.param("kb")?);
            let y = g.conv2d(img, k, kb, 2, 1)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        });
    }

    #[test]
    fn grad_cosine_cross_entropy_focal() {
        check(|g| {
            let (a, c) = (g.param("a")?, g.param("c")?);
            let s = g.cosine(a, c)?;
            let row = g.select_rows(s, &[1])?;
            let ce = g.cross_entropy(row, 2, 0.1)?;
            let p = g.sigmoid(a);
            let f = g.focal_sum(p, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0], FocalConfig::default())?;
            let s2 = g.sum(s);
            let t = g.add(ce, f)?;
            g.add(t, s2)
        });
    }

    #[test]
    fn grad_attention_blocks() {
        check(|g| {
            let (a, b, c) = (g.param("a")?, g.param("b")?, g.param("c")?);
            let w = MhaVars { wq: b, wk: b, wv: b, wo: b };
            let (o, _) = mha(g, w, 2, a, c, c)?;
            let o = g.mul(o, o)?;
            Ok(g.sum(o))
        });
    }

    #[test]
    fn backward_examples() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_rows(&[vec![1.5, -2.0, 0.25]]).unwrap());
        let mut g = Graph::new(&p);
        let x = g.param("x").unwrap();
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new(&p);
        let x = g.param("x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[3.0, -4.0, 0.5]);
        assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
    }
}
