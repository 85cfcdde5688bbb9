//! The full network: embedders, encoder, decoders, fusion and the one-shot
//! head, with parameter initialization and the unmasked forward pass.

use std::fmt;
use std::str::FromStr;

use crate::embedding::{self, concat_modalities, embed_sample, EmbedConfig, TokenLayout, TokenSequence};
use crate::error::{Error, Result};
use crate::fusion::{self, fuse, fuse_no_cross, FusedRepresentation, FusionConfig};
use crate::mae::{self, init_block, transformer_block, DecoderConfig, EncoderConfig, MaeConfig, SampleShapes};
use crate::masking::MaskConfig;
use crate::numerics::{Bound, Graph, ParamStore, RngStream, StreamKind, Tensor, Var};
use crate::synthdata::{DatasetSpec, MultimodalSample};

/// Pluggable one-shot embedding applied to the fused representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Parameter-free layer normalization of the pooled vector.
    LayerNorm,
    /// One self-attention block over the pre-pooling sequence, then pooling
    /// and normalization.
    Attention,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::LayerNorm => "layernorm",
            HeadKind::Attention => "attention",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layernorm" => Ok(HeadKind::LayerNorm),
            "attention" => Ok(HeadKind::Attention),
            other => Err(Error::Config(format!("unknown one-shot head `{other}`"))),
        }
    }
}

/// How the unimodal and encoder representations are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Cross,
    NoCross,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Cross => "cross",
            FusionMode::NoCross => "no-cross",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(FusionMode::Cross),
            "no-cross" | "nocross" => Ok(FusionMode::NoCross),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

pub const HEAD_PREFIX: &str = "head.attn";
pub const HEAD_HEADS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed: EmbedConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mask: MaskConfig,
    pub fusion: FusionConfig,
    pub fusion_mode: FusionMode,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed: EmbedConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            mask: MaskConfig::default(),
            fusion: FusionConfig::default(),
            fusion_mode: FusionMode::Cross,
            head: HeadKind::LayerNorm,
        }
    }
}

impl ModelConfig {
    pub fn mae(&self) -> MaeConfig {
        MaeConfig {
            embed: self.embed.clone(),
            encoder: self.encoder,
            decoder: self.decoder,
            mask: self.mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.embed;
        if e.width == 0 || e.width % 2 != 0 || e.sensor_dim == 0 || e.sensor_window == 0 || e.sensor_stride == 0 {
            return Err(Error::Config(
                "embedding width must be even and positive; sensor window, stride and width positive".into(),
            ));
        }
        mae::validate_encoder(&self.encoder, e.width)?;
        mae::validate_decoder(&self.decoder, e.width)?;
        self.fusion.validate()?;
        for r in [self.mask.video_ratio, self.mask.sensor_ratio] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("mask ratio {r} outside [0, 1]")));
            }
        }
        if self.head == HeadKind::Attention && self.fusion.out_width % HEAD_HEADS != 0 {
            return Err(Error::Config(format!(
                "attention head needs fused width divisible by {HEAD_HEADS}"
            )));
        }
        Ok(())
    }
}

/// Sizes the network for `spec`.
pub fn layout(spec: &DatasetSpec, cfg: &ModelConfig) -> Result<TokenLayout> {
    TokenLayout::new(spec, &cfg.embed)
}

/// Every parameter of the network. Each component draws from its own stream,
/// so its initial values do not depend on the other components' sizes.
pub fn init_params(spec: &DatasetSpec, cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let layout = layout(spec, cfg)?;
    let shapes = SampleShapes {
        video_channels: spec.video.channels,
        sensor_channels: spec.sensors.iter().map(|s| s.channels).collect(),
    };
    let stream = |part: u64| RngStream::derive(seed, StreamKind::Init, &[part]);
    let n = layout.num_modalities();
    let d = cfg.embed.width;
    let mut p = ParamStore::new();
    embedding::init_params(&mut p, &spec.video, &spec.sensors, &cfg.embed, &mut stream(0));
    mae::init_encoder(&mut p, &cfg.encoder, d, &mut stream(1));
    mae::init_decoders(&mut p, &cfg.decoder, &layout, &shapes, &cfg.embed, &mut stream(2));
    fusion::init_params(&mut p, &cfg.fusion, n, d, &mut stream(3));
    fusion::init_no_cross(&mut p, &cfg.fusion, n, d, &mut stream(4));
    init_block(&mut p, HEAD_PREFIX, cfg.fusion.out_width, 2, &mut stream(5));
    Ok(p)
}

/// Embedding, unmasked encoding and fusion of one sample.
pub fn fused_representation(
    g: &mut Graph,
    sample: &MultimodalSample,
    layout: &TokenLayout,
    cfg: &ModelConfig,
    p: &Bound,
) -> Result<FusedRepresentation> {
    let uni = embed_sample(g, sample, &cfg.embed, p)?;
    match cfg.fusion_mode {
        FusionMode::Cross => {
            let full = concat_modalities(g, &uni.video, &uni.sensors, layout)?;
            let enc = mae::encode(g, &full, &cfg.encoder, p)?;
            fuse(g, &uni.all(), &enc, &cfg.fusion, p)
        }
        FusionMode::NoCross => {
            // Same encoder as the cross arm; each modality is pooled over its
            // own rows of the encoder output instead of being attended to.
            let full = concat_modalities(g, &uni.video, &uni.sensors, layout)?;
            let enc = mae::encode(g, &full, &cfg.encoder, p)?;
            let mut start = 0;
            let mut parts = Vec::new();
            for u in uni.all() {
                let n = u.positions.len();
                let rows: Vec<usize> = (start..start + n).collect();
                start += n;
                parts.push(TokenSequence {
                    tokens: g.gather_rows(enc.tokens, &rows)?,
                    positions: u.positions.clone(),
                });
            }
            fuse_no_cross(g, &parts.iter().collect::<Vec<_>>(), p)
        }
    }
}

/// Layer normalization without gain or bias.
pub fn plain_norm(g: &mut Graph, x: Var) -> Result<Var> {
    let w = g.shape(x)[1];
    let gain = g.constant(Tensor::filled(&[w], 1.0));
    let bias = g.constant(Tensor::zeros(&[w]));
    g.layer_norm(x, gain, bias, mae::LN_EPS)
}

/// One-shot embedding `[1 × d_m]` of a fused representation.
pub fn oneshot_embed(g: &mut Graph, fused: &FusedRepresentation, head: HeadKind, p: &Bound) -> Result<Var> {
    match head {
        HeadKind::LayerNorm => plain_norm(g, fused.pooled),
        HeadKind::Attention => {
            let x = transformer_block(g, fused.sequence, p, HEAD_PREFIX, HEAD_HEADS)?;
            let pooled = g.mean_rows(x)?;
            plain_norm(g, pooled)
        }
    }
}

/// Full forward pass of one sample to its one-shot embedding.
pub fn embed(g: &mut Graph, sample: &MultimodalSample, layout: &TokenLayout, cfg: &ModelConfig, p: &Bound) -> Result<Var> {
    let fused = fused_representation(g, sample, layout, cfg, p)?;
    oneshot_embed(g, &fused, cfg.head, p)
}

/// One-shot embedding as plain numbers, with frozen parameters.
pub fn embed_frozen(sample: &MultimodalSample, layout: &TokenLayout, cfg: &ModelConfig, params: &ParamStore) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let e = embed(&mut g, sample, layout, cfg, &b)?;
    Ok(g.value(e).data().to_vec())
}
