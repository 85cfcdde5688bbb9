//! Unimodal embedders: tubelet patches for video, strided 1-D convolution for
//! each sensor stream, fixed sinusoidal positions, and the multimodal
//! concatenation that feeds the encoder.

use crate::error::{Error, Result};
use crate::numerics::{conv1d_out_len, Bound, Graph, ParamStore, RngStream, Tensor, Var};
use crate::synthdata::{DatasetSpec, MultimodalSample, SensorSpec, VideoGeometry};

/// Structural coordinate of one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    Video { t: usize, h: usize, w: usize },
    Sensor { modality: usize, t: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Video,
    Sensor(usize),
}

impl Position {
    pub fn modality(&self) -> Modality {
        match *self {
            Position::Video { .. } => Modality::Video,
            Position::Sensor { modality, .. } => Modality::Sensor(modality),
        }
    }
}

/// Token matrix `[L × d]` living in a [`Graph`], with one position per row.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub positions: Vec<Position>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub tubelet_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Shared token width `d` of the encoder input.
    pub width: usize,
    pub sensor_window: usize,
    pub sensor_stride: usize,
    /// Width of the convolutional sensor features before projection.
    pub sensor_dim: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            tubelet_t: 2,
            patch_h: 16,
            patch_w: 16,
            width: 16,
            sensor_window: 8,
            sensor_stride: 8,
            sensor_dim: 64,
        }
    }
}

/// Token grid sizes for one dataset geometry under one [`EmbedConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    /// `(t_tokens, h_tokens, w_tokens)`.
    pub video_grid: (usize, usize, usize),
    pub sensor_tokens: Vec<usize>,
}

impl TokenLayout {
    pub fn new(spec: &DatasetSpec, cfg: &EmbedConfig) -> Result<Self> {
        let video_grid = video_grid(&spec.video, cfg)?;
        let sensor_tokens = spec
            .sensors
            .iter()
            .map(|s| conv1d_out_len(s.length, cfg.sensor_window, cfg.sensor_stride))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            video_grid,
            sensor_tokens,
        })
    }

    pub fn video_tokens(&self) -> usize {
        let (t, h, w) = self.video_grid;
        t * h * w
    }

    pub fn total_tokens(&self) -> usize {
        self.video_tokens() + self.sensor_tokens.iter().sum::<usize>()
    }

    pub fn num_modalities(&self) -> usize {
        1 + self.sensor_tokens.len()
    }

    /// Positions of every video token in canonical (t, h, w) order.
    pub fn video_positions(&self) -> Vec<Position> {
        let (gt, gh, gw) = self.video_grid;
        let mut out = Vec::with_capacity(gt * gh * gw);
        for t in 0..gt {
            for h in 0..gh {
                for w in 0..gw {
                    out.push(Position::Video { t, h, w });
                }
            }
        }
        out
    }

    pub fn sensor_positions(&self, modality: usize) -> Vec<Position> {
        (0..self.sensor_tokens[modality])
            .map(|t| Position::Sensor { modality, t })
            .collect()
    }

    pub fn modality_positions(&self, m: Modality) -> Vec<Position> {
        match m {
            Modality::Video => self.video_positions(),
            Modality::Sensor(i) => self.sensor_positions(i),
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        std::iter::once(Modality::Video)
            .chain((0..self.sensor_tokens.len()).map(Modality::Sensor))
            .collect()
    }

    /// Sinusoid indices whose encodings are summed for `p`.
    fn pe_indices(&self, p: &Position) -> Vec<usize> {
        let (gt, gh, gw) = self.video_grid;
        match *p {
            Position::Video { t, h, w } => vec![t, gt + h, gt + gh + w],
            Position::Sensor { modality, t } => {
                let base = gt + gh + gw + self.sensor_tokens[..modality].iter().sum::<usize>();
                vec![base + t]
            }
        }
    }
}

fn video_grid(v: &VideoGeometry, cfg: &EmbedConfig) -> Result<(usize, usize, usize)> {
    let (tt, ph, pw) = (cfg.tubelet_t, cfg.patch_h, cfg.patch_w);
    if tt == 0 || ph == 0 || pw == 0 {
        return Err(Error::invalid("tubelet extents must be positive"));
    }
    if v.frames % tt != 0 || v.height % ph != 0 || v.width % pw != 0 {
        return Err(Error::invalid(format!(
            "video {}x{}x{} is not divisible by tubelet {tt}x{ph}x{pw}: frames must be a \
             multiple of {tt}, height of {ph}, width of {pw}",
            v.frames, v.height, v.width
        )));
    }
    Ok((v.frames / tt, v.height / ph, v.width / pw))
}

/// Flattened tubelet contents `[L × (tt·ph·pw·C)]` in (t, h, w) token order.
pub fn tubelet_patches(video: &Tensor, cfg: &EmbedConfig) -> Result<Tensor> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("video must be rank 4, got {s:?}")));
    }
    let geom = VideoGeometry {
        frames: s[0],
        height: s[1],
        width: s[2],
        channels: s[3],
    };
    let (gt, gh, gw) = video_grid(&geom, cfg)?;
    let (tt, ph, pw, c) = (cfg.tubelet_t, cfg.patch_h, cfg.patch_w, geom.channels);
    let p = tt * ph * pw * c;
    let d = video.data();
    let mut out = Vec::with_capacity(gt * gh * gw * p);
    for t in 0..gt {
        for h in 0..gh {
            for w in 0..gw {
                for dt in 0..tt {
                    for dy in 0..ph {
                        let f = t * tt + dt;
                        let y = h * ph + dy;
                        let x0 = w * pw;
                        let start = ((f * geom.height + y) * geom.width + x0) * c;
                        out.extend_from_slice(&d[start..start + pw * c]);
                    }
                }
            }
        }
    }
    Tensor::matrix(gt * gh * gw, p, out)
}

/// Raw window contents `[L × (window·C)]` of a sensor series.
pub fn sensor_windows(series: &Tensor, cfg: &EmbedConfig) -> Result<Tensor> {
    let (len, c) = series.dims2();
    let n = conv1d_out_len(len, cfg.sensor_window, cfg.sensor_stride)?;
    let w = cfg.sensor_window;
    let mut out = Vec::with_capacity(n * w * c);
    for o in 0..n {
        let start = o * cfg.sensor_stride * c;
        out.extend_from_slice(&series.data()[start..start + w * c]);
    }
    Tensor::matrix(n, w * c, out)
}

pub fn video_param_names() -> (&'static str, &'static str) {
    ("embed.video.w", "embed.video.b")
}

pub fn sensor_param_name(i: usize, part: &str) -> String {
    format!("embed.sensor{i}.{part}")
}

/// Video tokens: a learned linear map of each flattened tubelet.
pub fn tubelet_embed(
    g: &mut Graph,
    video: &Tensor,
    cfg: &EmbedConfig,
    params: &Bound,
) -> Result<TokenSequence> {
    let patches = tubelet_patches(video, cfg)?;
    let (gt, gh, gw) = (
        video.shape()[0] / cfg.tubelet_t,
        video.shape()[1] / cfg.patch_h,
        video.shape()[2] / cfg.patch_w,
    );
    let x = g.constant(patches);
    let (wn, bn) = video_param_names();
    let y = g.matmul(x, params.get(wn)?)?;
    let y = g.add_row(y, params.get(bn)?)?;
    let layout = TokenLayout {
        video_grid: (gt, gh, gw),
        sensor_tokens: vec![],
    };
    Ok(TokenSequence {
        tokens: y,
        positions: layout.video_positions(),
    })
}

/// Sensor tokens of width `sensor_dim`: strided convolution, bias, GELU.
pub fn sensor_embed(
    g: &mut Graph,
    series: &Tensor,
    modality: usize,
    cfg: &EmbedConfig,
    params: &Bound,
) -> Result<TokenSequence> {
    let x = g.constant(series.clone());
    let k = params.get(&sensor_param_name(modality, "conv"))?;
    let y = g.conv1d(x, k, cfg.sensor_stride)?;
    let y = g.add_row(y, params.get(&sensor_param_name(modality, "conv_b"))?)?;
    let y = g.gelu(y);
    let n = g.shape(y)[0];
    Ok(TokenSequence {
        tokens: y,
        positions: (0..n).map(|t| Position::Sensor { modality, t }).collect(),
    })
}

/// Linear projection of sensor tokens from `sensor_dim` to the shared width.
pub fn project_sensor(
    g: &mut Graph,
    seq: &TokenSequence,
    modality: usize,
    params: &Bound,
) -> Result<TokenSequence> {
    let y = g.matmul(seq.tokens, params.get(&sensor_param_name(modality, "proj"))?)?;
    let y = g.add_row(y, params.get(&sensor_param_name(modality, "proj_b"))?)?;
    Ok(TokenSequence {
        tokens: y,
        positions: seq.positions.clone(),
    })
}

/// Sinusoid of one flattened index: `[sin(i·f₀), cos(i·f₀), sin(i·f₁), …]`
/// with `f_k = 10000^(−2k/dim)`.
pub fn sinusoid(index: usize, dim: usize) -> Vec<f64> {
    let pos = index as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * k) as f64) / dim as f64);
        out.push((pos * freq).sin());
        out.push((pos * freq).cos());
    }
    out
}

/// Fixed sinusoidal encoding of `positions`. Video tokens sum the sinusoids
/// of their three axis indices (each axis owns a disjoint index range); sensor
/// tokens use their time index offset by a per-modality base.
pub fn positional_encoding(positions: &[Position], layout: &TokenLayout, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("positional encoding width must be even, got {dim}")));
    }
    let mut out = vec![0.0; positions.len() * dim];
    for (r, p) in positions.iter().enumerate() {
        for idx in layout.pe_indices(p) {
            for (o, v) in out[r * dim..(r + 1) * dim].iter_mut().zip(sinusoid(idx, dim)) {
                *o += v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![positions.len(), dim], out))
}

/// Adds the positional encoding of each token to the sequence.
pub fn add_positions(g: &mut Graph, seq: &TokenSequence, layout: &TokenLayout) -> Result<TokenSequence> {
    let d = g.shape(seq.tokens)[1];
    let pe = g.constant(positional_encoding(&seq.positions, layout, d)?);
    let y = g.add(seq.tokens, pe)?;
    Ok(TokenSequence {
        tokens: y,
        positions: seq.positions.clone(),
    })
}

/// Encoder input: `[video + Pᵛ ; sensors + Pˢ]` with sensors in configuration
/// order. Every part must already share the token width.
pub fn concat_modalities(
    g: &mut Graph,
    video: &TokenSequence,
    sensors: &[TokenSequence],
    layout: &TokenLayout,
) -> Result<TokenSequence> {
    let d = g.shape(video.tokens)[1];
    let mut parts = Vec::with_capacity(1 + sensors.len());
    let mut positions = Vec::new();
    for seq in std::iter::once(video).chain(sensors) {
        let w = g.shape(seq.tokens).get(1).copied().unwrap_or(0);
        if w != d {
            return Err(Error::shape("concat_modalities", g.shape(video.tokens), g.shape(seq.tokens)));
        }
        parts.push(add_positions(g, seq, layout)?.tokens);
        positions.extend_from_slice(&seq.positions);
    }
    let tokens = g.concat_rows(&parts)?;
    Ok(TokenSequence { tokens, positions })
}

/// Unimodal representations `U_i` of one sample, all of width `d`.
#[derive(Clone, Debug)]
pub struct Unimodal {
    pub video: TokenSequence,
    pub sensors: Vec<TokenSequence>,
}

impl Unimodal {
    pub fn all(&self) -> Vec<&TokenSequence> {
        std::iter::once(&self.video).chain(&self.sensors).collect()
    }
}

pub fn embed_sample(
    g: &mut Graph,
    sample: &MultimodalSample,
    cfg: &EmbedConfig,
    params: &Bound,
) -> Result<Unimodal> {
    let video = tubelet_embed(g, &sample.video, cfg, params)?;
    let sensors = sample
        .sensors
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let raw = sensor_embed(g, s, i, cfg, params)?;
            project_sensor(g, &raw, i, params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Unimodal { video, sensors })
}

/// Glorot-uniform matrix.
pub(crate) fn glorot(rng: &mut RngStream, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-a, a)).collect())
        .expect("shape matches length")
}

pub fn init_params(
    store: &mut ParamStore,
    video: &VideoGeometry,
    sensors: &[SensorSpec],
    cfg: &EmbedConfig,
    rng: &mut RngStream,
) {
    let p = cfg.tubelet_t * cfg.patch_h * cfg.patch_w * video.channels;
    let (wn, bn) = video_param_names();
    store.insert(wn, glorot(rng, p, cfg.width, &[p, cfg.width]));
    store.insert(bn, Tensor::zeros(&[cfg.width]));
    for (i, s) in sensors.iter().enumerate() {
        let fan_in = cfg.sensor_window * s.channels;
        store.insert(
            sensor_param_name(i, "conv"),
            glorot(rng, fan_in, cfg.sensor_dim, &[cfg.sensor_window, s.channels, cfg.sensor_dim]),
        );
        store.insert(sensor_param_name(i, "conv_b"), Tensor::zeros(&[cfg.sensor_dim]));
        store.insert(
            sensor_param_name(i, "proj"),
            glorot(rng, cfg.sensor_dim, cfg.width, &[cfg.sensor_dim, cfg.width]),
        );
        store.insert(sensor_param_name(i, "proj_b"), Tensor::zeros(&[cfg.width]));
    }
}
