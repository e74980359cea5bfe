//! Link queries: dustbin augmentation, the link decoder, triplet heads and
//! correspondence extraction.

use rand::Rng;
use serde::{Serialize, Serializer};

use crate::config::{LinkOrder, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{self, bind_mha, ffn_block, linear, mha, mlp, Initializer};
use crate::params::Graph;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::vild::{prior_logit, ViewEmbeddings};

/// Dustbin-extended detection embeddings and positions of one view.
#[derive(Clone, Copy, Debug)]
pub struct Extended {
    /// `[(N+1)×D]`; row `N` is the dustbin.
    pub e: Var,
    pub p: Var,
}

/// Link head outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LinkVars {
    pub v_c: Var,
    pub v_m: Var,
    /// `[M×1]` pair confidences.
    pub s: Var,
}

/// Link head outputs as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkPredictions {
    pub v_c: Tensor,
    pub v_m: Tensor,
    pub scores: Vec<f64>,
}

impl LinkPredictions {
    pub fn read(g: &Graph<'_>, l: LinkVars) -> Self {
        LinkPredictions {
            v_c: g.value(l.v_c).clone(),
            v_m: g.value(l.v_m).clone(),
            scores: g.value(l.s).data().to_vec(),
        }
    }
}

/// Head-averaged attention of the link queries over one layer.
#[derive(Clone, Debug, Default)]
pub struct LinkerDump {
    /// `[M×(N+1)]` link queries over CC slots.
    pub link_cc: Option<Tensor>,
    pub link_mlo: Option<Tensor>,
}

/// Index into the `N + 1` slots of one view; `N` is the dustbin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Det(usize),
    Dustbin,
}

impl Slot {
    pub fn from_index(i: usize, n: usize) -> Slot {
        if i >= n {
            Slot::Dustbin
        } else {
            Slot::Det(i)
        }
    }

    pub fn det(self) -> Option<usize> {
        match self {
            Slot::Det(i) => Some(i),
            Slot::Dustbin => None,
        }
    }
}

impl Serialize for Slot {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Slot::Det(i) => s.serialize_u64(*i as u64),
            Slot::Dustbin => s.serialize_str("dustbin"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExtractedPair {
    pub query_id: usize,
    #[serde(rename = "cc_index")]
    pub c: Slot,
    #[serde(rename = "mlo_index")]
    pub m: Slot,
    pub score: f64,
}

/// Appends the shared dustbin embedding as row `N`, and the learned dustbin
/// position as the matching positional row.
pub fn append_dustbin(g: &mut Graph<'_>, view: ViewEmbeddings) -> Result<Extended> {
    let d = g.param("link.dustbin")?;
    let dp = g.param("link.dustbin_pos")?;
    let width = g.value(view.e).dims2()?.1;
    let d = g.reshape(d, &[1, width])?;
    let dp = g.reshape(dp, &[1, width])?;
    Ok(Extended {
        e: g.concat_rows(&[view.e, d])?,
        p: g.concat_rows(&[view.p, dp])?,
    })
}

/// Stacked link-decoder layers: residual self-attention, attention to one
/// view's extended embeddings, then the other's, then the feed-forward block.
pub fn link_decode(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    ext: [Extended; 2],
    dump: bool,
) -> Result<(Var, Vec<LinkerDump>)> {
    let mut q = g.param("link.query")?;
    let order = match cfg.link_order {
        LinkOrder::CcFirst => [0, 1],
        LinkOrder::MloFirst => [1, 0],
    };
    let mut dumps = Vec::new();
    for l in 0..cfg.linker_layers {
        let w = bind_mha(g, &format!("link.{l}.self"))?;
        let (a, _) = mha(g, w, cfg.heads, q, q, q)?;
        q = g.add(q, a)?;
        let mut d = LinkerDump::default();
        for &i in &order {
            let name = if i == 0 { "cc" } else { "mlo" };
            let w = bind_mha(g, &format!("link.{l}.{name}"))?;
            let k = g.add(ext[i].e, ext[i].p)?;
            let (a, wts) = mha(g, w, cfg.heads, q, k, ext[i].e)?;
            q = g.add(q, a)?;
            if dump {
                let m = nn::mean_weights(g, &wts);
                if i == 0 {
                    d.link_cc = Some(m);
                } else {
                    d.link_mlo = Some(m);
                }
            }
        }
        q = ffn_block(g, &format!("link.{l}.ffn"), q, cfg.activation)?;
        dumps.push(d);
    }
    Ok((q, dumps))
}

/// Two-layer embedding heads per view and a sigmoid confidence head.
pub fn link_heads(g: &mut Graph<'_>, cfg: &ModelConfig, q: Var) -> Result<LinkVars> {
    let v_c = mlp(g, "link.vc", 2, q, cfg.activation)?;
    let v_m = mlp(g, "link.vm", 2, q, cfg.activation)?;
    let s = linear(g, "link.s", q)?;
    let s = g.sigmoid(s);
    Ok(LinkVars { v_c, v_m, s })
}

pub(crate) fn init_linker<R: Rng>(init: &mut Initializer<'_, R>, cfg: &ModelConfig) {
    let (d, m) = (cfg.model_dim, cfg.num_link_queries);
    init.embedding("link.query", m, d);
    let e = Tensor::uniform(&[d], 1.0, init.rng);
    init.store.insert("link.dustbin", e);
    let p = Tensor::uniform(&[d], 1.0, init.rng);
    init.store.insert("link.dustbin_pos", p);
    for l in 0..cfg.linker_layers {
        init.mha(&format!("link.{l}.self"), d, false);
        init.mha(&format!("link.{l}.cc"), d, false);
        init.mha(&format!("link.{l}.mlo"), d, false);
        init.ffn_block(&format!("link.{l}.ffn"), d, cfg.ffn_hidden);
    }
    for head in ["link.vc", "link.vm"] {
        init.linear(&format!("{head}.0"), d, d);
        init.linear_zero_weight(&format!("{head}.1"), d, d);
    }
    init.linear_with_bias("link.s", d, 1, prior_logit(cfg.prior_prob));
}

pub fn cosine_sim(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (nx * ny + 1e-12)
}

/// First index of the maximum; NaN never wins.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Per link query, the most similar slot in each view. Queries under
/// `score_floor`, and queries pointing at both dustbins, are dropped.
pub fn extract_pairs(preds: &LinkPredictions, ext_c: &Tensor, ext_m: &Tensor, score_floor: f64) -> Result<Vec<ExtractedPair>> {
    let (slots, d) = ext_c.dims2()?;
    if ext_m.dims2()? != (slots, d) || preds.v_c.dims2()?.1 != d || preds.v_m.dims2()?.1 != d {
        return Err(Error::shape("extract_pairs", ext_c.shape(), preds.v_c.shape()));
    }
    let n = slots - 1;
    let mut out = Vec::new();
    for (i, &score) in preds.scores.iter().enumerate() {
        if score < score_floor {
            continue;
        }
        let best = |v: &[f64], ext: &Tensor| {
            let sims: Vec<f64> = (0..slots).map(|j| cosine_sim(v, ext.row(j))).collect();
            Slot::from_index(argmax(&sims), n)
        };
        let c = best(preds.v_c.row(i), ext_c);
        let m = best(preds.v_m.row(i), ext_m);
        if c == Slot::Dustbin && m == Slot::Dustbin {
            continue;
        }
        out.push(ExtractedPair {
            query_id: i,
            c,
            m,
            score,
        });
    }
    Ok(out)
}
