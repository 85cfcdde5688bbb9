//! Cross-attention fusion. Queries come from the encoder representation, keys
//! and values from each modality's unimodal tokens; per-modality head outputs
//! are concatenated, projected, joined across modalities and mean-pooled.

use std::fmt;
use std::str::FromStr;

use crate::embedding::{glorot, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamStore, RngStream, Var};

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scaling {
    /// `sqrt(d_head)`.
    Sqrt,
    /// `exp(d_head)`, the literal printed form.
    Exp,
}

impl Scaling {
    pub fn denominator(self, d_head: usize) -> f64 {
        match self {
            Scaling::Sqrt => (d_head as f64).sqrt(),
            Scaling::Exp => (d_head as f64).exp(),
        }
    }
}

impl fmt::Display for Scaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scaling::Sqrt => "sqrt",
            Scaling::Exp => "exp",
        })
    }
}

impl FromStr for Scaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(Scaling::Sqrt),
            "exp" => Ok(Scaling::Exp),
            other => Err(Error::Config(format!("unknown attention scaling `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub heads: usize,
    pub head_dim: usize,
    /// Width `d_m` of the fused representation.
    pub out_width: usize,
    pub scaling: Scaling,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            head_dim: 8,
            out_width: 16,
            scaling: Scaling::Sqrt,
        }
    }
}

impl FusionConfig {
    /// Width of one modality's concatenated heads.
    pub fn modality_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.out_width == 0 {
            return Err(Error::Config("fusion heads, head width and output width must be positive".into()));
        }
        Ok(())
    }
}

pub fn head_param(modality: usize, head: usize, part: &str) -> String {
    format!("fusion.m{modality}.h{head}.{part}")
}

pub fn output_param(modality: usize) -> String {
    format!("fusion.m{modality}.c")
}

pub const GLOBAL_PARAM: &str = "fusion.out";
pub const NO_CROSS_PARAM: &str = "nocross.out";

/// Cross-attention parameters for `modalities` modalities whose unimodal
/// tokens and encoder tokens both have width `width`.
pub fn init_params(store: &mut ParamStore, cfg: &FusionConfig, modalities: usize, width: usize, rng: &mut RngStream) {
    let dh = cfg.head_dim;
    for i in 0..modalities {
        for h in 0..cfg.heads {
            for part in ["q", "k", "v"] {
                store.insert(head_param(i, h, part), glorot(rng, width, dh, &[width, dh]));
            }
        }
        let dc = cfg.modality_width();
        store.insert(output_param(i), glorot(rng, dc, dc, &[dc, dc]));
    }
    let cat = modalities * cfg.modality_width();
    store.insert(GLOBAL_PARAM, glorot(rng, cat, cfg.out_width, &[cat, cfg.out_width]));
}

/// Projection used when cross-attention is replaced by concatenation of the
/// pooled unimodal tokens.
pub fn init_no_cross(store: &mut ParamStore, cfg: &FusionConfig, modalities: usize, width: usize, rng: &mut RngStream) {
    let cat = modalities * width;
    store.insert(NO_CROSS_PARAM, glorot(rng, cat, cfg.out_width, &[cat, cfg.out_width]));
}

fn check_width(g: &Graph, op: &'static str, x: Var, w: Var) -> Result<()> {
    if g.shape(x)[1] != g.shape(w)[0] {
        return Err(Error::shape(op, g.shape(x), g.shape(w)));
    }
    Ok(())
}

/// `K = U_i·W^K`, `V = U_i·W^V` for one head.
pub fn project_kv(g: &mut Graph, unimodal: &TokenSequence, p: &Bound, modality: usize, head: usize) -> Result<(Var, Var)> {
    let wk = p.get(&head_param(modality, head, "k"))?;
    let wv = p.get(&head_param(modality, head, "v"))?;
    check_width(g, "project_kv", unimodal.tokens, wk)?;
    Ok((g.matmul(unimodal.tokens, wk)?, g.matmul(unimodal.tokens, wv)?))
}

/// `Q = R_encoder·W^Q` for one head of one modality.
pub fn project_q(g: &mut Graph, encoder_rep: &TokenSequence, p: &Bound, modality: usize, head: usize) -> Result<Var> {
    let wq = p.get(&head_param(modality, head, "q"))?;
    check_width(g, "project_q", encoder_rep.tokens, wq)?;
    g.matmul(encoder_rep.tokens, wq)
}

/// Row-wise attention weights `softmax(Q·Kᵀ / denom)`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var, d_head: usize, scaling: Scaling) -> Result<Var> {
    if g.shape(k)[0] == 0 {
        return Err(Error::invalid("cross-attention needs at least one key"));
    }
    if g.shape(q)[1] != g.shape(k)[1] {
        return Err(Error::shape("cross_attention_head", g.shape(q), g.shape(k)));
    }
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, 1.0 / scaling.denominator(d_head));
    Ok(g.softmax_rows(s))
}

pub fn cross_attention_head(g: &mut Graph, q: Var, k: Var, v: Var, d_head: usize, scaling: Scaling) -> Result<Var> {
    if g.shape(k)[0] != g.shape(v)[0] {
        return Err(Error::shape("cross_attention_head", g.shape(k), g.shape(v)));
    }
    let a = attention_weights(g, q, k, d_head, scaling)?;
    g.matmul(a, v)
}

/// `R^c_i`: heads computed independently, concatenated, projected by `W^c_i`.
pub fn fuse_modality(
    g: &mut Graph,
    unimodal: &TokenSequence,
    encoder_rep: &TokenSequence,
    modality: usize,
    cfg: &FusionConfig,
    p: &Bound,
) -> Result<Var> {
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (k, v) = project_kv(g, unimodal, p, modality, h)?;
        let q = project_q(g, encoder_rep, p, modality, h)?;
        heads.push(cross_attention_head(g, q, k, v, cfg.head_dim, cfg.scaling)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(cat, p.get(&output_param(modality))?)
}

/// Multimodal representation: the projected sequence and its row mean.
#[derive(Clone, Copy, Debug)]
pub struct FusedRepresentation {
    /// `[1 × d_m]`.
    pub pooled: Var,
    /// `[L × d_m]`.
    pub sequence: Var,
}

/// Feature-axis concatenation of every `R^c_i`, projection by `W^m`, and mean
/// pooling over the sequence.
pub fn fuse_all(g: &mut Graph, outputs: &[Var], p: &Bound) -> Result<FusedRepresentation> {
    let Some(&first) = outputs.first() else {
        return Err(Error::invalid("no modality outputs to fuse"));
    };
    let len = g.shape(first)[0];
    if let Some(&bad) = outputs.iter().find(|&&o| g.shape(o)[0] != len) {
        return Err(Error::shape("fuse_all", g.shape(first), g.shape(bad)));
    }
    let cat = if outputs.len() == 1 { first } else { g.concat_cols(outputs)? };
    let sequence = g.matmul(cat, p.get(GLOBAL_PARAM)?)?;
    let pooled = g.mean_rows(sequence)?;
    Ok(FusedRepresentation { pooled, sequence })
}

/// Full cross-attention fusion over every modality in order.
pub fn fuse(
    g: &mut Graph,
    unimodal: &[&TokenSequence],
    encoder_rep: &TokenSequence,
    cfg: &FusionConfig,
    p: &Bound,
) -> Result<FusedRepresentation> {
    let outs = unimodal
        .iter()
        .enumerate()
        .map(|(i, u)| fuse_modality(g, u, encoder_rep, i, cfg, p))
        .collect::<Result<Vec<_>>>()?;
    fuse_all(g, &outs, p)
}

/// Concatenation of the pooled unimodal tokens followed by one projection.
pub fn fuse_no_cross(g: &mut Graph, unimodal: &[&TokenSequence], p: &Bound) -> Result<FusedRepresentation> {
    let pooled = unimodal
        .iter()
        .map(|u| g.mean_rows(u.tokens))
        .collect::<Result<Vec<_>>>()?;
    let cat = g.concat_cols(&pooled)?;
    let out = g.matmul(cat, p.get(NO_CROSS_PARAM)?)?;
    Ok(FusedRepresentation {
        pooled: out,
        sequence: out,
    })
}
