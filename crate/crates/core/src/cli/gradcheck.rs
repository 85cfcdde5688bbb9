//! Finite-difference check of every differentiable component at tiny sizes.

use crate::embedding::{project_sensor, sensor_embed, tubelet_embed, EmbedConfig, Modality, Position, TokenLayout, TokenSequence};
use crate::error::Result;
use crate::fusion::{self, cross_attention_head, fuse, fuse_no_cross, FusionConfig, Scaling};
use crate::mae::{self, decode_modality, encode, init_block, DecoderConfig, DecoderContext, EncoderConfig, SampleShapes};
use crate::model::{oneshot_embed, HeadKind, HEAD_PREFIX};
use crate::numerics::gradcheck::{grad_check_params, grad_check_scaled};
use crate::numerics::{Graph, GradCheckReport, ParamStore, RngStream, Tensor, Var};
use crate::fusion::FusedRepresentation;
use crate::oneshot::episode_loss_graph;
use crate::synthdata::{DatasetSpec, SensorSpec, VideoGeometry};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Component names in suite order.
pub const COMPONENTS: &[&str] = &[
    "video embedder",
    "sensor embedder",
    "encoder block",
    "video decoder",
    "sensor decoder",
    "cross-attention head (sqrt)",
    "cross-attention head (exp)",
    "fusion stack",
    "no-cross fusion",
    "attention one-shot head",
    "cosine-softmax loss",
];

fn random(r: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.normal()).collect()).expect("shape matches")
}

fn embed_cfg() -> EmbedConfig {
    EmbedConfig {
        tubelet_t: 2,
        patch_h: 2,
        patch_w: 2,
        width: 8,
        sensor_window: 4,
        sensor_stride: 2,
        sensor_dim: 4,
    }
}

fn spec() -> DatasetSpec {
    DatasetSpec {
        num_classes: 2,
        samples_per_class: 1,
        video: VideoGeometry {
            frames: 4,
            height: 4,
            width: 4,
            channels: 1,
        },
        sensors: vec![SensorSpec { length: 8, channels: 2 }; 2],
        ..DatasetSpec::default()
    }
}

/// Weighted sum so that every output entry gets a distinct cotangent.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(random(&mut RngStream::new(seed, 77), &shape));
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

fn params_check(store: &ParamStore, corrupt: f64, f: impl Fn(&mut Graph, &crate::numerics::Bound) -> Result<Var>) -> Result<GradCheckReport> {
    grad_check_params(f, store, STEP, TOLERANCE, usize::MAX, corrupt)
}

fn tokens(g: &mut Graph, t: Tensor, positions: Vec<Position>) -> TokenSequence {
    TokenSequence {
        tokens: g.constant(t),
        positions,
    }
}

fn sensor_positions(n: usize) -> Vec<Position> {
    (0..n).map(|t| Position::Sensor { modality: 0, t }).collect()
}

fn check(name: &str, corrupt: f64) -> Result<GradCheckReport> {
    let spec = spec();
    let e = embed_cfg();
    let layout = TokenLayout::new(&spec, &e)?;
    let mut r = RngStream::new(11, 0);
    let video = Tensor::new(vec![4, 4, 4, 1], (0..64).map(|_| r.uniform()).collect())?;
    let series = random(&mut r, &[8, 2]);
    let enc_cfg = EncoderConfig {
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    let dec_cfg = DecoderConfig {
        depth: 1,
        heads: 2,
        width: 4,
        mlp_ratio: 2,
        context: DecoderContext::Modality,
    };
    let fusion_cfg = |scaling| FusionConfig {
        heads: 2,
        head_dim: 3,
        out_width: 4,
        scaling,
    };
    let mut store = ParamStore::new();
    let mut init = RngStream::new(12, 0);
    match name {
        "video embedder" | "sensor embedder" => {
            crate::embedding::init_params(&mut store, &spec.video, &spec.sensors, &e, &mut init);
            let prefix = if name == "video embedder" { "embed.video." } else { "embed.sensor0." };
            let mut only = ParamStore::new();
            only.merge_prefixed(&store, &[prefix]);
            params_check(&only, corrupt, |g, b| {
                let y = if name == "video embedder" {
                    tubelet_embed(g, &video, &e, b)?
                } else {
                    let raw = sensor_embed(g, &series, 0, &e, b)?;
                    project_sensor(g, &raw, 0, b)?
                };
                probe(g, y.tokens, 1)
            })
        }
        "encoder block" => {
            mae::init_encoder(&mut store, &enc_cfg, 8, &mut init);
            let x = random(&mut r, &[5, 8]);
            params_check(&store, corrupt, |g, b| {
                let x = tokens(g, x.clone(), sensor_positions(5));
                let y = encode(g, &x, &enc_cfg, b)?;
                probe(g, y.tokens, 2)
            })
        }
        "video decoder" | "sensor decoder" => {
            let shapes = SampleShapes {
                video_channels: 1,
                sensor_channels: vec![2, 2],
            };
            mae::init_decoders(&mut store, &dec_cfg, &layout, &shapes, &e, &mut init);
            let (modality, masked): (Modality, Vec<usize>) = if name == "video decoder" {
                (Modality::Video, vec![0, 2, 3, 5, 7])
            } else {
                (Modality::Sensor(0), vec![0, 2])
            };
            let mut only = ParamStore::new();
            only.merge_prefixed(&store, &[&format!("{}.", mae::decoder_prefix(modality))]);
            let visible = random(&mut r, &[5, 8]);
            let positions = vec![
                Position::Video { t: 0, h: 0, w: 1 },
                Position::Video { t: 1, h: 0, w: 0 },
                Position::Video { t: 1, h: 1, w: 0 },
                Position::Sensor { modality: 0, t: 1 },
                Position::Sensor { modality: 1, t: 0 },
            ];
            params_check(&only, corrupt, |g, b| {
                let enc = tokens(g, visible.clone(), positions.clone());
                let y = decode_modality(g, &enc, &masked, modality, &layout, &dec_cfg, b)?;
                probe(g, y, 3)
            })
        }
        "cross-attention head (sqrt)" | "cross-attention head (exp)" => {
            let scaling = if name.ends_with("(exp)") { Scaling::Exp } else { Scaling::Sqrt };
            // Rows 0..3 are queries, 3..7 keys, 7..11 values.
            let x = random(&mut r, &[11, 3]);
            grad_check_scaled(
                |g, x| {
                    let q = g.gather_rows(x, &[0, 1, 2])?;
                    let k = g.gather_rows(x, &[3, 4, 5, 6])?;
                    let v = g.gather_rows(x, &[7, 8, 9, 10])?;
                    let y = cross_attention_head(g, q, k, v, 3, scaling)?;
                    probe(g, y, 4)
                },
                &x,
                STEP,
                TOLERANCE,
                corrupt,
            )
        }
        "fusion stack" => {
            let cfg = fusion_cfg(Scaling::Sqrt);
            fusion::init_params(&mut store, &cfg, 2, 8, &mut init);
            let (u0, u1, enc) = (random(&mut r, &[4, 8]), random(&mut r, &[3, 8]), random(&mut r, &[5, 8]));
            params_check(&store, corrupt, |g, b| {
                let u0 = tokens(g, u0.clone(), sensor_positions(4));
                let u1 = tokens(g, u1.clone(), sensor_positions(3));
                let enc = tokens(g, enc.clone(), sensor_positions(5));
                let f = fuse(g, &[&u0, &u1], &enc, &cfg, b)?;
                let s = probe(g, f.sequence, 5)?;
                let p = probe(g, f.pooled, 6)?;
                g.add(s, p)
            })
        }
        "no-cross fusion" => {
            fusion::init_no_cross(&mut store, &fusion_cfg(Scaling::Sqrt), 2, 8, &mut init);
            let (u0, u1) = (random(&mut r, &[4, 8]), random(&mut r, &[3, 8]));
            params_check(&store, corrupt, |g, b| {
                let u0 = tokens(g, u0.clone(), sensor_positions(4));
                let u1 = tokens(g, u1.clone(), sensor_positions(3));
                let f = fuse_no_cross(g, &[&u0, &u1], b)?;
                probe(g, f.pooled, 7)
            })
        }
        "attention one-shot head" => {
            init_block(&mut store, HEAD_PREFIX, 4, 2, &mut init);
            let seq = random(&mut r, &[5, 4]);
            params_check(&store, corrupt, |g, b| {
                let sequence = g.constant(seq.clone());
                let pooled = g.mean_rows(sequence)?;
                let y = oneshot_embed(g, &FusedRepresentation { pooled, sequence }, HeadKind::Attention, b)?;
                probe(g, y, 8)
            })
        }
        "cosine-softmax loss" => {
            // Rows 0..4 are queries, 4..7 prototypes.
            let x = random(&mut r, &[7, 5]);
            grad_check_scaled(
                |g, x| {
                    let q = g.gather_rows(x, &[0, 1, 2, 3])?;
                    let p = g.gather_rows(x, &[4, 5, 6])?;
                    Ok(episode_loss_graph(g, q, p, &[0, 2, 1, 2])?.0)
                },
                &x,
                STEP,
                TOLERANCE,
                corrupt,
            )
        }
        other => Err(crate::error::Error::invalid(format!("unknown gradcheck component `{other}`"))),
    }
}

/// Runs every component. `corrupt` names one component whose analytic
/// gradient is scaled by 1.01 before comparison, as a negative control.
pub fn run_suite(corrupt: Option<&str>) -> Result<Vec<ComponentReport>> {
    COMPONENTS
        .iter()
        .map(|&name| {
            let factor = if corrupt == Some(name) { 1.01 } else { 1.0 };
            Ok(ComponentReport {
                name,
                report: check(name, factor)?,
            })
        })
        .collect()
}

/// One line per component.
pub fn format_suite(reports: &[ComponentReport]) -> String {
    let w = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    reports
        .iter()
        .map(|r| {
            format!(
                "{:<w$}  max_rel_err {:.3e}  checked {:>4}  {}\n",
                r.name,
                r.report.max_rel_err,
                r.report.checked,
                if r.report.pass { "ok" } else { "FAIL" }
            )
        })
        .collect()
}
