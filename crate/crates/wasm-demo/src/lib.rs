//! Browser bindings over the core library: synthetic samples, token masks and
//! cross-attention weights. Each export has a plain Rust twin (`*_view`) so
//! the logic is testable off the browser.

use wasm_bindgen::prelude::*;

use mumae::embedding::{EmbedConfig, TokenLayout};
use mumae::fusion::{attention_weights, Scaling};
use mumae::masking::{plan_masks, MaskConfig, MaskStrategy};
use mumae::numerics::{Graph, RngStream, Tensor};
use mumae::synthdata::{generate_sample, DatasetSpec};

fn spec(data_seed: u64) -> DatasetSpec {
    DatasetSpec {
        seed: data_seed,
        ..DatasetSpec::default()
    }
}

fn js(e: mumae::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct SampleView {
    frames: usize,
    height: usize,
    width: usize,
    video: Vec<f32>,
    num_sensors: usize,
    sensor_len: usize,
    sensor_channels: usize,
    sensors: Vec<f32>,
    label: usize,
}

#[wasm_bindgen]
impl SampleView {
    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }
    /// `[frames, height, width]` intensities in `[0, 1]`, first channel.
    #[wasm_bindgen(getter)]
    pub fn video(&self) -> Vec<f32> {
        self.video.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn num_sensors(&self) -> usize {
        self.num_sensors
    }
    #[wasm_bindgen(getter)]
    pub fn sensor_len(&self) -> usize {
        self.sensor_len
    }
    #[wasm_bindgen(getter)]
    pub fn sensor_channels(&self) -> usize {
        self.sensor_channels
    }
    /// `[sensor, time, channel]`.
    #[wasm_bindgen(getter)]
    pub fn sensors(&self) -> Vec<f32> {
        self.sensors.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn label(&self) -> usize {
        self.label
    }
}

pub fn sample_view(class_id: usize, sample_index: usize, data_seed: u64) -> mumae::Result<SampleView> {
    let spec = spec(data_seed);
    let s = generate_sample(&spec, class_id, sample_index)?;
    let v = spec.video;
    let video = (0..v.frames * v.height * v.width)
        .map(|i| s.video.data()[i * v.channels] as f32)
        .collect();
    let sensors = s.sensors.iter().flat_map(|t| t.data().iter().map(|&x| x as f32)).collect();
    Ok(SampleView {
        frames: v.frames,
        height: v.height,
        width: v.width,
        video,
        num_sensors: spec.sensors.len(),
        sensor_len: spec.sensors[0].length,
        sensor_channels: spec.sensors[0].channels,
        sensors,
        label: s.label,
    })
}

/// One sample of the default synthetic dataset.
#[wasm_bindgen]
pub fn sample(class_id: usize, sample_index: usize, data_seed: u64) -> Result<SampleView, JsError> {
    sample_view(class_id, sample_index, data_seed).map_err(js)
}

#[wasm_bindgen]
pub struct MaskView {
    grid_t: usize,
    grid_h: usize,
    grid_w: usize,
    video: Vec<u8>,
    num_sensors: usize,
    sensor_tokens: usize,
    sensors: Vec<u8>,
}

#[wasm_bindgen]
impl MaskView {
    #[wasm_bindgen(getter)]
    pub fn grid_t(&self) -> usize {
        self.grid_t
    }
    #[wasm_bindgen(getter)]
    pub fn grid_h(&self) -> usize {
        self.grid_h
    }
    #[wasm_bindgen(getter)]
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }
    /// 1 = masked, flat `(t·h + h)·w + w`.
    #[wasm_bindgen(getter)]
    pub fn video(&self) -> Vec<u8> {
        self.video.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn num_sensors(&self) -> usize {
        self.num_sensors
    }
    #[wasm_bindgen(getter)]
    pub fn sensor_tokens(&self) -> usize {
        self.sensor_tokens
    }
    /// 1 = masked, `[sensor, time token]`.
    #[wasm_bindgen(getter)]
    pub fn sensors(&self) -> Vec<u8> {
        self.sensors.clone()
    }
}

pub fn mask_view(strategy: &str, ratio: f64, patch: usize, seed: u64) -> mumae::Result<MaskView> {
    let strategy: MaskStrategy = strategy.parse()?;
    let embed = EmbedConfig {
        patch_h: patch,
        patch_w: patch,
        ..EmbedConfig::default()
    };
    let spec = DatasetSpec::default();
    let layout = TokenLayout::new(&spec, &embed)?;
    let cfg = MaskConfig {
        strategy,
        video_ratio: ratio,
        sensor_ratio: ratio,
    };
    let plan = plan_masks(&cfg, layout.video_grid, &layout.sensor_tokens, &mut RngStream::new(seed, 0))?;
    let n = layout.sensor_tokens[0];
    let mut sensors = vec![0u8; layout.sensor_tokens.len() * n];
    for i in 0..layout.sensor_tokens.len() {
        for &t in &plan.sensors.for_modality(i).masked_time_indices {
            sensors[i * n + t] = 1;
        }
    }
    let (t, h, w) = layout.video_grid;
    Ok(MaskView {
        grid_t: t,
        grid_h: h,
        grid_w: w,
        video: plan.video.masked.iter().map(|&m| m as u8).collect(),
        num_sensors: layout.sensor_tokens.len(),
        sensor_tokens: n,
        sensors,
    })
}

/// Tube video mask plus sensor masks under `strategy` (`random` or
/// `synchronized`) for the default geometry with square patches of `patch`.
#[wasm_bindgen]
pub fn masks(strategy: &str, ratio: f64, patch: usize, seed: u64) -> Result<MaskView, JsError> {
    mask_view(strategy, ratio, patch, seed).map_err(js)
}

#[wasm_bindgen]
pub struct AttentionView {
    rows: usize,
    cols: usize,
    sqrt: Vec<f32>,
    exp: Vec<f32>,
}

#[wasm_bindgen]
impl AttentionView {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }
    /// Row-major weights with the `sqrt(d)` denominator.
    #[wasm_bindgen(getter)]
    pub fn sqrt(&self) -> Vec<f32> {
        self.sqrt.clone()
    }
    /// Row-major weights with the `exp(d)` denominator.
    #[wasm_bindgen(getter)]
    pub fn exp(&self) -> Vec<f32> {
        self.exp.clone()
    }
}

/// Mean row entropy in nats; `ln(cols)` means uniform attention.
pub fn mean_entropy(weights: &[f32], cols: usize) -> f64 {
    let rows = weights.chunks(cols);
    let n = rows.len().max(1);
    rows.map(|r| r.iter().filter(|&&p| p > 0.0).map(|&p| -(p as f64) * (p as f64).ln()).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

pub fn attention_view(queries: usize, keys: usize, d_head: usize, spread: f64, seed: u64) -> mumae::Result<AttentionView> {
    let mut r = RngStream::new(seed, 1);
    let mut draw = |n: usize| -> mumae::Result<Tensor> {
        Tensor::matrix(n, d_head, (0..n * d_head).map(|_| spread * r.normal()).collect())
    };
    let (qt, kt) = (draw(queries)?, draw(keys)?);
    let weights = |scaling| -> mumae::Result<Vec<f32>> {
        let mut g = Graph::new();
        let (q, k) = (g.constant(qt.clone()), g.constant(kt.clone()));
        let a = attention_weights(&mut g, q, k, d_head, scaling)?;
        Ok(g.value(a).data().iter().map(|&x| x as f32).collect())
    };
    Ok(AttentionView {
        rows: queries,
        cols: keys,
        sqrt: weights(Scaling::Sqrt)?,
        exp: weights(Scaling::Exp)?,
    })
}

/// Attention weights for random queries and keys with entries `spread·N(0,1)`
/// under both denominators.
#[wasm_bindgen]
pub fn attention(queries: usize, keys: usize, d_head: usize, spread: f64, seed: u64) -> Result<AttentionView, JsError> {
    attention_view(queries, keys, d_head, spread, seed).map_err(js)
}

#[wasm_bindgen]
pub fn entropy(weights: &[f32], cols: usize) -> f64 {
    mean_entropy(weights, cols)
}
