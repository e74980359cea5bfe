//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, FocalConfig};

/// Which training objective and head layout to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cross-view detector plus the link-query correspondence module.
    ClNet,
    /// Cross-view detector alone.
    VildOnly,
    /// Link-query module on a detector without inter-attention.
    LinkerOnly,
    /// Cross-view detector plus an all-pairs match matrix.
    PairVerification,
    /// One query set predicting a box in each view.
    PairedLesionQuery,
}

impl Variant {
    pub fn uses_linker(self) -> bool {
        matches!(self, Variant::ClNet | Variant::LinkerOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ClNet => "clnet",
            Variant::VildOnly => "vild_only",
            Variant::LinkerOnly => "linker_only",
            Variant::PairVerification => "pair_verification",
            Variant::PairedLesionQuery => "paired_lesion_query",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "clnet" => Variant::ClNet,
            "vild_only" => Variant::VildOnly,
            "linker_only" => Variant::LinkerOnly,
            "pair_verification" => Variant::PairVerification,
            "paired_lesion_query" => Variant::PairedLesionQuery,
            other => return Err(Error::config("variant", format!("unknown variant `{other}`"))),
        })
    }
}

/// How the link matching cost combines embedding similarity and pair score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostForm {
    /// Weighted geometric mean.
    Mul,
    /// Weighted arithmetic mean.
    Add,
}

/// Order in which link queries visit the two views inside a linker layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkOrder {
    CcFirst,
    MloFirst,
}

/// Weights of the per-view detection matching cost and loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for DetectionWeights {
    fn default() -> Self {
        DetectionWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Object queries per view.
    pub num_queries: usize,
    /// Link queries.
    pub num_link_queries: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub linker_layers: usize,
    /// Decoder depth of the paired-lesion-query variant.
    pub plq_layers: usize,
    /// Square input resolution in pixels.
    pub image_size: usize,
    /// Output channels of the three stride-2 conv blocks.
    pub backbone_channels: Vec<usize>,
    /// Balance between embedding similarity and pair score in link matching.
    pub alpha: f64,
    /// Balance between the CC and MLO similarity terms.
    pub beta: f64,
    pub lambda_sim: f64,
    pub lambda_cls: f64,
    pub focal: FocalConfig,
    /// Focal parameters of the pair-verification matrix loss.
    pub pv_focal: FocalConfig,
    /// Softmax temperature of the slot-localization cross-entropy.
    pub tau: f64,
    pub cost_form: CostForm,
    pub variant: Variant,
    /// Cross-view inter-attention at the end of each decoder block.
    pub inter_attention: bool,
    /// Share inter-attention weights between the two directions.
    pub tie_inter_weights: bool,
    pub activation: Activation,
    pub link_order: LinkOrder,
    /// Per-decoder-layer auxiliary detection losses.
    pub aux_loss: bool,
    /// Treat the extended detection embeddings as constants inside the
    /// slot-localization loss. Off (the default) lets that loss shape the
    /// detector embeddings too.
    pub detach_sim_targets: bool,
    pub det_weights: DetectionWeights,
    /// Minimum pair confidence for an extracted link.
    pub score_floor: f64,
    /// Prior probability used to initialize score-head biases.
    pub prior_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_queries: 125,
            num_link_queries: 16,
            model_dim: 256,
            heads: 8,
            ffn_hidden: 1024,
            encoder_layers: 6,
            decoder_layers: 6,
            linker_layers: 3,
            plq_layers: 3,
            image_size: 64,
            backbone_channels: vec![8, 16, 32],
            alpha: 0.5,
            beta: 0.5,
            lambda_sim: 0.125,
            lambda_cls: 1.0,
            focal: FocalConfig { alpha: 0.5, gamma: 2.0 },
            pv_focal: FocalConfig { alpha: 0.75, gamma: 2.0 },
            tau: 0.1,
            cost_form: CostForm::Mul,
            variant: Variant::ClNet,
            inter_attention: true,
            tie_inter_weights: false,
            activation: Activation::Gelu,
            link_order: LinkOrder::CcFirst,
            aux_loss: false,
            detach_sim_targets: false,
            det_weights: DetectionWeights::default(),
            score_floor: 0.5,
            prior_prob: 0.1,
        }
    }
}

impl ModelConfig {
    /// Single-core desk scale.
    pub fn desk() -> Self {
        ModelConfig {
            num_queries: 16,
            num_link_queries: 8,
            model_dim: 64,
            heads: 4,
            ffn_hidden: 128,
            encoder_layers: 2,
            decoder_layers: 3,
            ..Self::default()
        }
    }

    /// Smallest configuration used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            num_queries: 6,
            num_link_queries: 4,
            model_dim: 16,
            heads: 2,
            ffn_hidden: 32,
            encoder_layers: 1,
            decoder_layers: 2,
            linker_layers: 2,
            plq_layers: 2,
            image_size: 16,
            backbone_channels: vec![4, 4, 8],
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        if variant == Variant::LinkerOnly {
            self.inter_attention = false;
        }
        self
    }

    /// Tokens per view after the backbone.
    pub fn feature_grid(&self) -> usize {
        self.image_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_queries", self.num_queries),
            ("num_link_queries", self.num_link_queries),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("decoder_layers", self.decoder_layers),
            ("linker_layers", self.linker_layers),
            ("plq_layers", self.plq_layers),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("model_dim {} is not divisible by {}", self.model_dim, self.heads),
            ));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::config("image_size", "must be a positive multiple of 8"));
        }
        if self.backbone_channels.len() != 3 || self.backbone_channels.contains(&0) {
            return Err(Error::config("backbone_channels", "need three positive widths"));
        }
        for (field, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.prior_prob) || self.prior_prob == 0.0 {
            return Err(Error::config("prior_prob", "must lie in (0, 1)"));
        }
        self.focal.validate("focal")?;
        self.pv_focal.validate("pv_focal")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let c = ModelConfig::default();
        assert_eq!((c.num_queries, c.num_link_queries), (125, 16));
        assert_eq!((c.lambda_sim, c.lambda_cls), (0.125, 1.0));
        assert_eq!((c.alpha, c.beta), (0.5, 0.5));
        assert_eq!(c.cost_form, CostForm::Mul);
        assert_eq!(c.linker_layers, 3);
        assert_eq!(c.plq_layers, 3);
        assert_eq!(c.focal, FocalConfig { alpha: 0.5, gamma: 2.0 });
        assert_eq!(c.pv_focal, FocalConfig { alpha: 0.75, gamma: 2.0 });
        c.validate().unwrap();
    }

    #[test]
    fn desk_overrides_scale_only() {
        let c = ModelConfig::desk();
        assert_eq!((c.model_dim, c.num_queries, c.num_link_queries), (64, 16, 8));
        assert_eq!((c.decoder_layers, c.encoder_layers), (3, 2));
        assert_eq!(c.lambda_sim, 0.125);
        c.validate().unwrap();
    }

    #[test]
    fn validation_names_field() {
        let mut c = ModelConfig::desk();
        c.heads = 3;
        assert!(c.validate().unwrap_err().to_string().contains("heads"));
        let mut c = ModelConfig::desk();
        c.beta = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("beta"));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [
            Variant::ClNet,
            Variant::VildOnly,
            Variant::LinkerOnly,
            Variant::PairVerification,
            Variant::PairedLesionQuery,
        ] {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("detr").is_err());
    }
}
