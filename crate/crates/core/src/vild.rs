//! The cross-view detector: shared conv backbone and encoder, a query decoder
//! whose blocks end with inter-attention between the two views, and the
//! detection heads.

use rand::Rng;

use crate::boxes::{BBox, View};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, bind_mha, ffn_block, layer_norm, linear, mha, mlp, Activation, Initializer};
use crate::params::Graph;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Per-view decoder output.
#[derive(Clone, Copy, Debug)]
pub struct ViewEmbeddings {
    /// `[N×D]` query embeddings.
    pub e: Var,
    /// `[N×D]` learnable positional encodings of this view's queries.
    pub p: Var,
    pub view: View,
}

/// Detection head output on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[N×4]` sigmoid boxes.
    pub boxes: Var,
    /// `[N×1]` lesion probabilities.
    pub scores: Var,
}

/// Detections of one view, read off the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub embeddings: Tensor,
    pub view: View,
}

impl DetectionSet {
    pub fn read(g: &Graph<'_>, heads: HeadVars, e: Var, view: View) -> Result<Self> {
        let b = g.value(heads.boxes);
        let n = b.dims2()?.0;
        Ok(DetectionSet {
            boxes: (0..n).map(|i| BBox::from_slice(b.row(i))).collect(),
            scores: g.value(heads.scores).data().to_vec(),
            embeddings: g.value(e).clone(),
            view,
        })
    }
}

/// Head-averaged attention weights of one decoder layer.
#[derive(Clone, Debug, Default)]
pub struct DecoderDump {
    /// CC queries (rows) attending to MLO queries (cols).
    pub cc_from_mlo: Option<Tensor>,
    pub mlo_from_cc: Option<Tensor>,
}

fn view_key(v: View) -> &'static str {
    v.tag()
}

// ----------------------------------------------------------------------------
// Backbone and encoder

/// Three stride-2 conv blocks, then a linear projection to `D` and learned
/// row/column positional encodings. Returns tokens `[T×D]` and their
/// positional encodings.
pub fn encode_view(g: &mut Graph<'_>, cfg: &ModelConfig, img: &Tensor) -> Result<(Var, Var)> {
    let s = cfg.image_size;
    if img.shape() != [1, s, s] {
        return Err(Error::shape("encode_view", img.shape(), &[1, s, s]));
    }
    let mut x = g.constant(img.clone());
    for i in 0..3 {
        let w = g.param(&format!("backbone.conv{i}.w"))?;
        let b = g.param(&format!("backbone.conv{i}.b"))?;
        x = g.conv2d(x, w, b, 2, 1)?;
        x = nn::activate(g, x, cfg.activation);
    }
    let grid = cfg.feature_grid();
    let c = cfg.backbone_channels[2];
    let flat = g.reshape(x, &[c, grid * grid])?;
    let tokens = g.transpose(flat)?;
    let tokens = linear(g, "backbone.proj", tokens)?;

    let rows: Vec<usize> = (0..grid * grid).map(|i| i / grid).collect();
    let cols: Vec<usize> = (0..grid * grid).map(|i| i % grid).collect();
    let pr = g.param("enc.pos_row")?;
    let pc = g.param("enc.pos_col")?;
    let pr = g.select_rows(pr, &rows)?;
    let pc = g.select_rows(pc, &cols)?;
    let pos = g.add(pr, pc)?;

    let mut x = tokens;
    for l in 0..cfg.encoder_layers {
        let w = bind_mha(g, &format!("enc.{l}.attn"))?;
        let qk = g.add(x, pos)?;
        let (a, _) = mha(g, w, cfg.heads, qk, qk, x)?;
        let r = g.add(x, a)?;
        x = layer_norm(g, &format!("enc.{l}.ln"), r)?;
        x = ffn_block(g, &format!("enc.{l}.ffn"), x, cfg.activation)?;
    }
    Ok((x, pos))
}

/// Encodes both views with the same weights.
pub fn encode_views(g: &mut Graph<'_>, cfg: &ModelConfig, img_c: &Tensor, img_m: &Tensor) -> Result<[(Var, Var); 2]> {
    Ok([encode_view(g, cfg, img_c)?, encode_view(g, cfg, img_m)?])
}

// ----------------------------------------------------------------------------
// Decoder

/// Name of the inter-attention block through which `view`'s queries read the
/// other view.
pub fn inter_prefix(cfg: &ModelConfig, layer: usize, view: View) -> String {
    let dir = if cfg.tie_inter_weights { View::Cc } else { view };
    format!("dec.{layer}.inter_{}", view_key(dir))
}

/// Runs the decoder over both views. Each block applies, per view,
/// self-attention, cross-attention to the view's tokens, inter-attention to
/// the other view's queries, and the feed-forward block. Both inter-attention
/// directions read the same layer's cross-attention outputs.
pub fn vild_decode(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    tokens: [(Var, Var); 2],
    dump: bool,
) -> Result<([ViewEmbeddings; 2], Vec<DecoderDump>)> {
    let (views, dumps, _) = vild_decode_layers(g, cfg, tokens, dump)?;
    Ok((views, dumps))
}

/// As [`vild_decode`], also returning every layer's embeddings.
#[allow(clippy::type_complexity)]
pub fn vild_decode_layers(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    tokens: [(Var, Var); 2],
    dump: bool,
) -> Result<([ViewEmbeddings; 2], Vec<DecoderDump>, Vec<[Var; 2]>)> {
    let mut e = [g.param("dec.cc.query")?, g.param("dec.mlo.query")?];
    let p = [g.param("dec.cc.pos")?, g.param("dec.mlo.pos")?];
    let mut dumps = Vec::new();
    let mut layers = Vec::new();
    for l in 0..cfg.decoder_layers {
        let mut mid = e;
        for i in 0..2 {
            let w = bind_mha(g, &format!("dec.{l}.self"))?;
            let qk = g.add(e[i], p[i])?;
            let (a, _) = mha(g, w, cfg.heads, qk, qk, e[i])?;
            let r = g.add(e[i], a)?;
            let x = layer_norm(g, &format!("dec.{l}.ln1"), r)?;

            let (tok, tpos) = tokens[i];
            let w = bind_mha(g, &format!("dec.{l}.cross"))?;
            let q = g.add(x, p[i])?;
            let k = g.add(tok, tpos)?;
            let (a, _) = mha(g, w, cfg.heads, q, k, tok)?;
            let r = g.add(x, a)?;
            mid[i] = layer_norm(g, &format!("dec.{l}.ln2"), r)?;
        }
        let mut out = mid;
        let mut d = DecoderDump::default();
        if cfg.inter_attention {
            for (i, v) in View::BOTH.iter().enumerate() {
                let o = 1 - i;
                let w = bind_mha(g, &inter_prefix(cfg, l, *v))?;
                let q = g.add(mid[i], p[i])?;
                let k = g.add(mid[o], p[o])?;
                let (a, wts) = mha(g, w, cfg.heads, q, k, mid[o])?;
                out[i] = g.add(mid[i], a)?;
                if dump {
                    let m = nn::mean_weights(g, &wts);
                    match v {
                        View::Cc => d.cc_from_mlo = Some(m),
                        View::Mlo => d.mlo_from_cc = Some(m),
                    }
                }
            }
        }
        for i in 0..2 {
            e[i] = ffn_block(g, &format!("dec.{l}.ffn"), out[i], cfg.activation)?;
        }
        dumps.push(d);
        layers.push(e);
    }
    Ok((
        [
            ViewEmbeddings { e: e[0], p: p[0], view: View::Cc },
            ViewEmbeddings { e: e[1], p: p[1], view: View::Mlo },
        ],
        dumps,
        layers,
    ))
}

/// Box MLP with sigmoid, and a linear lesion-probability head. `reference`
/// holds per-query centre logits `[N×2]` added before the sigmoid, so a
/// query predicts its box relative to its own reference point.
pub fn detection_heads(g: &mut Graph<'_>, prefix: &str, e: Var, reference: Var, act: Activation) -> Result<HeadVars> {
    let b = mlp(g, &format!("{prefix}.box"), 3, e, act)?;
    let n = g.value(b).dims2()?.0;
    let zeros = g.constant(Tensor::zeros(&[n, 2]));
    let offset = g.concat_cols(&[reference, zeros])?;
    let b = g.add(b, offset)?;
    let boxes = g.sigmoid(b);
    let s = linear(g, &format!("{prefix}.score"), e)?;
    let scores = g.sigmoid(s);
    Ok(HeadVars { boxes, scores })
}

// ----------------------------------------------------------------------------
// Initialization

pub(crate) fn init_encoder<R: Rng>(init: &mut Initializer<'_, R>, cfg: &ModelConfig) {
    let d = cfg.model_dim;
    let mut cin = 1;
    for (i, &c) in cfg.backbone_channels.iter().enumerate() {
        init.conv(&format!("backbone.conv{i}"), cin, c, 3);
        cin = c;
    }
    init.linear("backbone.proj", cin, d);
    let grid = cfg.feature_grid();
    let cell = |i: usize| (i as f64 + 0.5) / grid as f64;
    let rows: Vec<Vec<f64>> = (0..grid).map(|r| split_code(Some(cell(r)), None, d)).collect();
    let cols: Vec<Vec<f64>> = (0..grid).map(|c| split_code(None, Some(cell(c)), d)).collect();
    init.store.insert("enc.pos_row", Tensor::from_rows(&rows).expect("rectangular"));
    init.store.insert("enc.pos_col", Tensor::from_rows(&cols).expect("rectangular"));
    for l in 0..cfg.encoder_layers {
        init.mha(&format!("enc.{l}.attn"), d, false);
        init.layer_norm(&format!("enc.{l}.ln"), d);
        init.ffn_block(&format!("enc.{l}.ffn"), d, cfg.ffn_hidden);
    }
}

pub(crate) fn init_decoder<R: Rng>(init: &mut Initializer<'_, R>, cfg: &ModelConfig) {
    let (d, n) = (cfg.model_dim, cfg.num_queries);
    for v in View::BOTH {
        let k = view_key(v);
        init.embedding(&format!("dec.{k}.query"), n, d);
        init.store.insert(format!("dec.{k}.pos"), anchor_codes(n, d));
        init.store.insert(format!("dec.{k}.ref"), anchor_logits(n));
    }
    for l in 0..cfg.decoder_layers {
        init.mha(&format!("dec.{l}.self"), d, false);
        init.layer_norm(&format!("dec.{l}.ln1"), d);
        init.mha(&format!("dec.{l}.cross"), d, false);
        init.layer_norm(&format!("dec.{l}.ln2"), d);
        if cfg.inter_attention {
            init.mha(&inter_prefix(cfg, l, View::Cc), d, true);
            if !cfg.tie_inter_weights {
                init.mha(&inter_prefix(cfg, l, View::Mlo), d, true);
            }
        }
        init.ffn_block(&format!("dec.{l}.ffn"), d, cfg.ffn_hidden);
    }
}

pub(crate) fn init_heads<R: Rng>(init: &mut Initializer<'_, R>, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.model_dim;
    init.mlp(&format!("{prefix}.box"), &[d, d, d]);
    let size = prior_logit(BOX_SIZE_PRIOR);
    init.store.insert(format!("{prefix}.box.2.w"), Tensor::zeros(&[d, 4]));
    init.store.insert(
        format!("{prefix}.box.2.b"),
        Tensor::new(vec![4], vec![0.0, 0.0, size, size]).expect("four entries"),
    );
    init.linear_with_bias(&format!("{prefix}.score"), d, 1, prior_logit(cfg.prior_prob));
}

/// Initial box width and height, as a fraction of the image.
pub const BOX_SIZE_PRIOR: f64 = 0.12;

/// `n` reference points `(x, y)` in `[0.1, 0.9]²`: a square grid when `n` is
/// a perfect square, otherwise a Halton (2, 3) sequence.
pub fn anchor_points(n: usize) -> Vec<(f64, f64)> {
    let k = (n as f64).sqrt().round() as usize;
    let unit = |t: f64| 0.1 + 0.8 * t;
    if k * k == n {
        return (0..n)
            .map(|i| {
                let (r, c) = (i / k, i % k);
                (unit((c as f64 + 0.5) / k as f64), unit((r as f64 + 0.5) / k as f64))
            })
            .collect();
    }
    let halton = |mut i: usize, base: usize| {
        let (mut f, mut r) = (1.0, 0.0);
        while i > 0 {
            f /= base as f64;
            r += f * (i % base) as f64;
            i /= base;
        }
        r
    };
    (1..=n).map(|i| (unit(halton(i, 2)), unit(halton(i, 3)))).collect()
}

/// Fourier code of a coordinate in `[0, 1]`: `cos/sin(π k t)` pairs, `k ≥ 1`.
fn fourier(t: f64, width: usize) -> impl Iterator<Item = f64> {
    (0..width).map(move |j| {
        let a = std::f64::consts::PI * (j / 2 + 1) as f64 * t;
        if j % 2 == 0 {
            a.cos()
        } else {
            a.sin()
        }
    })
}

/// `d`-wide positional code: the first `d/2` entries encode `y`, the rest
/// `x`; a missing coordinate leaves its half at zero.
fn split_code(y: Option<f64>, x: Option<f64>, d: usize) -> Vec<f64> {
    let h = d / 2;
    let mut out = Vec::with_capacity(d);
    out.extend(y.map_or_else(|| vec![0.0; h], |y| fourier(y, h).collect()));
    out.extend(x.map_or_else(|| vec![0.0; d - h], |x| fourier(x, d - h).collect()));
    out
}

/// Positional codes of the reference points, one row per query. Token
/// encodings start from the same code, so a query initially attends near
/// its reference point.
pub fn anchor_codes(n: usize, d: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = anchor_points(n).into_iter().map(|(x, y)| split_code(Some(y), Some(x), d)).collect();
    Tensor::from_rows(&rows).expect("rectangular")
}

/// Reference points in logit space, `[N×2]` as `(x, y)`.
pub fn anchor_logits(n: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = anchor_points(n).into_iter().map(|(x, y)| vec![prior_logit(x), prior_logit(y)]).collect();
    Tensor::from_rows(&rows).expect("rectangular")
}

/// Bias that makes a sigmoid head start at probability `p`.
pub fn prior_logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
