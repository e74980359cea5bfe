//! Parameter initialization and the forward pass for every variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::View;
use crate::config::{ModelConfig, Variant};
use crate::error::Result;
use crate::linker::{self, Extended, LinkVars, LinkerDump};
use crate::nn::{bind_mha, ffn_block, mha, Initializer};
use crate::params::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::vild::{self, DecoderDump, DetectionSet, HeadVars, ViewEmbeddings};

/// Deterministic parameters for `cfg`.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer {
        store: &mut store,
        rng: &mut rng,
    };
    vild::init_encoder(&mut init, cfg);
    let d = cfg.model_dim;
    match cfg.variant {
        Variant::PairedLesionQuery => {
            init.embedding("plq.query", cfg.num_queries, d);
            init.store.insert("plq.pos", vild::anchor_codes(cfg.num_queries, d));
            for v in ["cc", "mlo"] {
                init.store.insert(format!("plq.{v}.ref"), vild::anchor_logits(cfg.num_queries));
            }
            for l in 0..cfg.plq_layers {
                for part in ["self", "cc", "mlo"] {
                    init.mha(&format!("plq.{l}.{part}"), d, false);
                }
                init.ffn_block(&format!("plq.{l}.ffn"), d, cfg.ffn_hidden);
            }
            vild::init_heads(&mut init, "plq.cc", cfg);
            vild::init_heads(&mut init, "plq.mlo", cfg);
        }
        _ => {
            vild::init_decoder(&mut init, cfg);
            vild::init_heads(&mut init, "head", cfg);
        }
    }
    if cfg.variant.uses_linker() {
        linker::init_linker(&mut init, cfg);
    }
    if cfg.variant == Variant::PairVerification {
        init.mlp("pv.mlp", &[d, d, d]);
        let e = Tensor::uniform(&[d], 1.0, init.rng);
        init.store.insert("pv.dustbin", e);
    }
    Ok(store)
}

/// Link-branch outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LinkBranch {
    pub heads: LinkVars,
    pub ext: [Extended; 2],
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Detection heads per view (CC, MLO).
    pub heads: [HeadVars; 2],
    /// Final query embeddings per view; absent for the paired-query variant.
    pub views: Option<[ViewEmbeddings; 2]>,
    /// Heads applied to earlier decoder layers, when auxiliary losses are on.
    pub aux_heads: Vec<[HeadVars; 2]>,
    pub link: Option<LinkBranch>,
    /// `[(N+1)×(N+1)]` pair-verification logits.
    pub pv_logits: Option<Var>,
    pub decoder_dumps: Vec<DecoderDump>,
    pub linker_dumps: Vec<LinkerDump>,
}

impl Forward {
    /// Detection sets read off the tape.
    pub fn detections(&self, g: &Graph<'_>) -> Result<[DetectionSet; 2]> {
        let embed = |i: usize| self.views.map(|v| v[i].e).unwrap_or(self.heads[i].boxes);
        Ok([
            DetectionSet::read(g, self.heads[0], embed(0), View::Cc)?,
            DetectionSet::read(g, self.heads[1], embed(1), View::Mlo)?,
        ])
    }
}

/// Full forward pass on one case. `dump` records head-averaged attention.
pub fn forward(g: &mut Graph<'_>, cfg: &ModelConfig, img_c: &Tensor, img_m: &Tensor, dump: bool) -> Result<Forward> {
    let tokens = vild::encode_views(g, cfg, img_c, img_m)?;
    if cfg.variant == Variant::PairedLesionQuery {
        return plq_forward(g, cfg, tokens);
    }
    let (views, decoder_dumps, layers) = vild::vild_decode_layers(g, cfg, tokens, dump)?;
    let refs = [g.param("dec.cc.ref")?, g.param("dec.mlo.ref")?];
    let heads = [
        vild::detection_heads(g, "head", views[0].e, refs[0], cfg.activation)?,
        vild::detection_heads(g, "head", views[1].e, refs[1], cfg.activation)?,
    ];
    let mut aux_heads = Vec::new();
    if cfg.aux_loss {
        for e in &layers[..layers.len() - 1] {
            aux_heads.push([
                vild::detection_heads(g, "head", e[0], refs[0], cfg.activation)?,
                vild::detection_heads(g, "head", e[1], refs[1], cfg.activation)?,
            ]);
        }
    }
    let mut out = Forward {
        heads,
        views: Some(views),
        aux_heads,
        link: None,
        pv_logits: None,
        decoder_dumps,
        linker_dumps: Vec::new(),
    };
    if cfg.variant.uses_linker() {
        let ext = [linker::append_dustbin(g, views[0])?, linker::append_dustbin(g, views[1])?];
        let (q, dumps) = linker::link_decode(g, cfg, ext, dump)?;
        out.link = Some(LinkBranch {
            heads: linker::link_heads(g, cfg, q)?,
            ext,
        });
        out.linker_dumps = dumps;
    }
    if cfg.variant == Variant::PairVerification {
        out.pv_logits = Some(pair_verification_logits(g, cfg, views)?);
    }
    Ok(out)
}

/// `S = Ê^c Ê^mᵀ` with `Ê^t = concat(MLP(E^t), e_d)`.
pub fn pair_verification_logits(g: &mut Graph<'_>, cfg: &ModelConfig, views: [ViewEmbeddings; 2]) -> Result<Var> {
    let d = cfg.model_dim;
    let dust = g.param("pv.dustbin")?;
    let dust = g.reshape(dust, &[1, d])?;
    let mut hats = [dust, dust];
    for (i, v) in views.iter().enumerate() {
        let h = crate::nn::mlp(g, "pv.mlp", 2, v.e, cfg.activation)?;
        hats[i] = g.concat_rows(&[h, dust])?;
    }
    g.matmul_nt(hats[0], hats[1])
}

fn plq_forward(g: &mut Graph<'_>, cfg: &ModelConfig, tokens: [(Var, Var); 2]) -> Result<Forward> {
    let mut q = g.param("plq.query")?;
    let p = g.param("plq.pos")?;
    for l in 0..cfg.plq_layers {
        let w = bind_mha(g, &format!("plq.{l}.self"))?;
        let qk = g.add(q, p)?;
        let (a, _) = mha(g, w, cfg.heads, qk, qk, q)?;
        q = g.add(q, a)?;
        for (i, name) in ["cc", "mlo"].iter().enumerate() {
            let (tok, pos) = tokens[i];
            let w = bind_mha(g, &format!("plq.{l}.{name}"))?;
            let qp = g.add(q, p)?;
            let k = g.add(tok, pos)?;
            let (a, _) = mha(g, w, cfg.heads, qp, k, tok)?;
            q = g.add(q, a)?;
        }
        q = ffn_block(g, &format!("plq.{l}.ffn"), q, cfg.activation)?;
    }
    let refs = [g.param("plq.cc.ref")?, g.param("plq.mlo.ref")?];
    let heads = [
        vild::detection_heads(g, "plq.cc", q, refs[0], cfg.activation)?,
        vild::detection_heads(g, "plq.mlo", q, refs[1], cfg.activation)?,
    ];
    Ok(Forward {
        heads,
        views: None,
        aux_heads: Vec::new(),
        link: None,
        pv_logits: None,
        decoder_dumps: Vec::new(),
        linker_dumps: Vec::new(),
    })
}
