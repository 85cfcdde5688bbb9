//! Multimodal masked autoencoder: a pre-norm transformer encoder over the
//! visible tokens, one lightweight decoder per modality, masked-position MSE,
//! and the pretraining loop.

use std::fmt;
use std::str::FromStr;

use crate::embedding::{
    concat_modalities, embed_sample, glorot, positional_encoding, sensor_windows, tubelet_patches,
    EmbedConfig, Modality, Position, TokenLayout, TokenSequence,
};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, plan_masks, MaskConfig, MaskPlan};
use crate::numerics::optim::{cosine_lr, Adam};
use crate::numerics::{Bound, Gradients, Graph, ParamStore, RngStream, StreamKind, Tensor, Var};
use crate::synthdata::MultimodalSample;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        }
    }
}

/// Which encoder tokens a modality decoder attends over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderContext {
    Modality,
    Full,
}

impl fmt::Display for DecoderContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderContext::Modality => "modality",
            DecoderContext::Full => "full",
        })
    }
}

impl FromStr for DecoderContext {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modality" => Ok(DecoderContext::Modality),
            "full" => Ok(DecoderContext::Full),
            other => Err(Error::Config(format!("unknown decoder context `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    pub context: DecoderContext,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 2,
            width: 8,
            mlp_ratio: 2,
            context: DecoderContext::Modality,
        }
    }
}

pub fn validate_encoder(cfg: &EncoderConfig, width: usize) -> Result<()> {
    if cfg.depth == 0 || cfg.heads == 0 || cfg.mlp_ratio == 0 {
        return Err(Error::Config("encoder depth, heads and mlp ratio must be positive".into()));
    }
    if width % cfg.heads != 0 {
        return Err(Error::Config(format!(
            "encoder width {width} is not divisible by {} heads",
            cfg.heads
        )));
    }
    Ok(())
}

pub fn validate_decoder(cfg: &DecoderConfig, encoder_width: usize) -> Result<()> {
    if cfg.depth == 0 || cfg.heads == 0 || cfg.mlp_ratio == 0 {
        return Err(Error::Config("decoder depth, heads and mlp ratio must be positive".into()));
    }
    if cfg.width > encoder_width {
        return Err(Error::Config(format!(
            "decoder width {} exceeds encoder width {encoder_width}",
            cfg.width
        )));
    }
    if cfg.width % cfg.heads != 0 || cfg.width % 2 != 0 {
        return Err(Error::Config(format!(
            "decoder width {} must be even and divisible by {} heads",
            cfg.width, cfg.heads
        )));
    }
    Ok(())
}

/// Parameters of one pre-norm block under `prefix`.
pub fn init_block(store: &mut ParamStore, prefix: &str, width: usize, mlp_ratio: usize, rng: &mut RngStream) {
    let hidden = width * mlp_ratio;
    store.insert(format!("{prefix}.ln1.g"), Tensor::filled(&[width], 1.0));
    store.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[width]));
    store.insert(format!("{prefix}.qkv"), glorot(rng, width, width, &[width, 3 * width]));
    store.insert(format!("{prefix}.qkv_b"), Tensor::zeros(&[3 * width]));
    store.insert(format!("{prefix}.proj"), glorot(rng, width, width, &[width, width]));
    store.insert(format!("{prefix}.proj_b"), Tensor::zeros(&[width]));
    store.insert(format!("{prefix}.ln2.g"), Tensor::filled(&[width], 1.0));
    store.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[width]));
    store.insert(format!("{prefix}.fc1"), glorot(rng, width, hidden, &[width, hidden]));
    store.insert(format!("{prefix}.fc1_b"), Tensor::zeros(&[hidden]));
    store.insert(format!("{prefix}.fc2"), glorot(rng, hidden, width, &[hidden, width]));
    store.insert(format!("{prefix}.fc2_b"), Tensor::zeros(&[width]));
}

fn linear(g: &mut Graph, x: Var, p: &Bound, w: &str, b: &str) -> Result<Var> {
    let y = g.matmul(x, p.get(w)?)?;
    g.add_row(y, p.get(b)?)
}

fn norm(g: &mut Graph, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    g.layer_norm(x, p.get(&format!("{prefix}.g"))?, p.get(&format!("{prefix}.b"))?, LN_EPS)
}

/// Multi-head scaled dot-product self-attention on `[L × d]`.
pub fn self_attention(g: &mut Graph, x: Var, p: &Bound, prefix: &str, heads: usize) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / heads;
    let qkv = linear(g, x, p, &format!("{prefix}.qkv"), &format!("{prefix}.qkv_b"))?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, (h + 1) * dh)?;
        let k = g.slice_cols(qkv, d + h * dh, d + (h + 1) * dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let a = g.softmax_rows(s);
        outs.push(g.matmul(a, v)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, cat, p, &format!("{prefix}.proj"), &format!("{prefix}.proj_b"))
}

/// `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
pub fn transformer_block(g: &mut Graph, x: Var, p: &Bound, prefix: &str, heads: usize) -> Result<Var> {
    let h = norm(g, x, p, &format!("{prefix}.ln1"))?;
    let a = self_attention(g, h, p, prefix, heads)?;
    let x = g.add(x, a)?;
    let h = norm(g, x, p, &format!("{prefix}.ln2"))?;
    let h = linear(g, h, p, &format!("{prefix}.fc1"), &format!("{prefix}.fc1_b"))?;
    let h = g.gelu(h);
    let h = linear(g, h, p, &format!("{prefix}.fc2"), &format!("{prefix}.fc2_b"))?;
    g.add(x, h)
}

pub fn init_encoder(store: &mut ParamStore, cfg: &EncoderConfig, width: usize, rng: &mut RngStream) {
    for b in 0..cfg.depth {
        init_block(store, &format!("enc.block{b}"), width, cfg.mlp_ratio, rng);
    }
    store.insert("enc.norm.g", Tensor::filled(&[width], 1.0));
    store.insert("enc.norm.b", Tensor::zeros(&[width]));
}

/// Encoder over a token sequence whose positional encodings are already added.
pub fn encode(g: &mut Graph, visible: &TokenSequence, cfg: &EncoderConfig, p: &Bound) -> Result<TokenSequence> {
    if visible.is_empty() {
        return Err(Error::invalid("encoder input sequence is empty"));
    }
    let mut x = visible.tokens;
    for b in 0..cfg.depth {
        x = transformer_block(g, x, p, &format!("enc.block{b}"), cfg.heads)?;
    }
    let x = norm(g, x, p, "enc.norm")?;
    Ok(TokenSequence {
        tokens: x,
        positions: visible.positions.clone(),
    })
}

pub fn decoder_prefix(m: Modality) -> String {
    match m {
        Modality::Video => "dec.video".to_string(),
        Modality::Sensor(i) => format!("dec.sensor{i}"),
    }
}

/// Flattened raw size reconstructed per token of `m`.
pub fn target_width(m: Modality, sample_shapes: &SampleShapes, embed: &EmbedConfig) -> usize {
    match m {
        Modality::Video => embed.tubelet_t * embed.patch_h * embed.patch_w * sample_shapes.video_channels,
        Modality::Sensor(i) => embed.sensor_window * sample_shapes.sensor_channels[i],
    }
}

/// Channel counts needed to size reconstruction heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleShapes {
    pub video_channels: usize,
    pub sensor_channels: Vec<usize>,
}

pub fn init_decoders(
    store: &mut ParamStore,
    cfg: &DecoderConfig,
    layout: &TokenLayout,
    shapes: &SampleShapes,
    embed: &EmbedConfig,
    rng: &mut RngStream,
) {
    let d = embed.width;
    let dd = cfg.width;
    for m in layout.modalities() {
        let pre = decoder_prefix(m);
        let out = target_width(m, shapes, embed);
        store.insert(format!("{pre}.embed"), glorot(rng, d, dd, &[d, dd]));
        store.insert(format!("{pre}.embed_b"), Tensor::zeros(&[dd]));
        store.insert(
            format!("{pre}.mask_token"),
            Tensor::new(vec![dd], (0..dd).map(|_| 0.02 * rng.normal()).collect()).expect("length"),
        );
        for b in 0..cfg.depth {
            init_block(store, &format!("{pre}.block{b}"), dd, cfg.mlp_ratio, rng);
        }
        store.insert(format!("{pre}.norm.g"), Tensor::filled(&[dd], 1.0));
        store.insert(format!("{pre}.norm.b"), Tensor::zeros(&[dd]));
        store.insert(format!("{pre}.head"), glorot(rng, dd, out, &[dd, out]));
        store.insert(format!("{pre}.head_b"), Tensor::zeros(&[out]));
    }
}

/// Reconstructs the masked tokens of `modality`. `mask_positions` index the
/// modality's own token grid in canonical order. Returns `[|mask| × patch]`.
pub fn decode_modality(
    g: &mut Graph,
    encoder_out: &TokenSequence,
    mask_positions: &[usize],
    modality: Modality,
    layout: &TokenLayout,
    cfg: &DecoderConfig,
    p: &Bound,
) -> Result<Var> {
    let pre = decoder_prefix(modality);
    let mask_token = p
        .get(&format!("{pre}.mask_token"))
        .map_err(|_| Error::invalid(format!("unknown modality {modality:?}")))?;
    let all = layout.modality_positions(modality);
    let out_w = g.shape(p.get(&format!("{pre}.head"))?)[1];
    if mask_positions.is_empty() {
        return Ok(g.constant(Tensor::from_parts(vec![0, out_w], vec![])));
    }
    if let Some(&bad) = mask_positions.iter().find(|&&i| i >= all.len()) {
        return Err(Error::invalid(format!(
            "mask position {bad} out of range for {} tokens of {modality:?}",
            all.len()
        )));
    }

    // Encoder rows the decoder sees as context.
    let ctx: Vec<usize> = (0..encoder_out.len())
        .filter(|&r| cfg.context == DecoderContext::Full || encoder_out.positions[r].modality() == modality)
        .collect();
    let mut positions: Vec<Position> = ctx.iter().map(|&r| encoder_out.positions[r]).collect();
    let mut masked_sorted = mask_positions.to_vec();
    masked_sorted.sort_unstable();
    masked_sorted.dedup();
    positions.extend(masked_sorted.iter().map(|&i| all[i]));

    let visible = g.gather_rows(encoder_out.tokens, &ctx)?;
    let visible = linear(g, visible, p, &format!("{pre}.embed"), &format!("{pre}.embed_b"))?;
    let dd = g.shape(visible)[1];
    let mask_row = g.reshape(mask_token, vec![1, dd])?;
    let masks = g.gather_rows(mask_row, &vec![0; masked_sorted.len()])?;
    let seq = g.concat_rows(&[visible, masks])?;

    // Restore canonical order so the sequence reads like the unmasked grid.
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by_key(|&i| positions[i]);
    let seq = g.gather_rows(seq, &order)?;
    let sorted_positions: Vec<Position> = order.iter().map(|&i| positions[i]).collect();
    let pe = g.constant(positional_encoding(&sorted_positions, layout, dd)?);
    let mut x = g.add(seq, pe)?;
    for b in 0..cfg.depth {
        x = transformer_block(g, x, p, &format!("{pre}.block{b}"), cfg.heads)?;
    }
    let x = norm(g, x, p, &format!("{pre}.norm"))?;

    // Rows holding mask tokens, in the caller's order.
    let row_of: Vec<usize> = mask_positions
        .iter()
        .map(|&i| {
            let pos = all[i];
            sorted_positions
                .iter()
                .position(|q| *q == pos)
                .expect("masked position is in the decoder sequence")
        })
        .collect();
    let picked = g.gather_rows(x, &row_of)?;
    linear(g, picked, p, &format!("{pre}.head"), &format!("{pre}.head_b"))
}

/// Raw patch or window contents of every token of each modality, in
/// canonical order: video first, then sensors.
pub fn raw_targets(sample: &MultimodalSample, embed: &EmbedConfig) -> Result<Vec<Tensor>> {
    let mut out = vec![tubelet_patches(&sample.video, embed)?];
    for s in &sample.sensors {
        out.push(sensor_windows(s, embed)?);
    }
    Ok(out)
}

/// Per-modality mean squared error over masked elements, averaged with equal
/// weight over the modalities that have at least one masked element.
pub fn reconstruction_loss(g: &mut Graph, reconstructions: &[Var], targets: &[Var]) -> Result<Var> {
    if reconstructions.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} reconstructions for {} targets",
            reconstructions.len(),
            targets.len()
        )));
    }
    let mut losses = Vec::new();
    for (&r, &t) in reconstructions.iter().zip(targets) {
        if g.shape(r) != g.shape(t) {
            return Err(Error::shape("reconstruction_loss", g.shape(r), g.shape(t)));
        }
        if g.value(r).is_empty() {
            continue;
        }
        losses.push(g.mse(r, t)?);
    }
    if losses.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let n = losses.len();
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = g.add(acc, l)?;
    }
    Ok(g.scale(acc, 1.0 / n as f64))
}

/// Everything a masked forward pass produces.
#[derive(Clone, Debug)]
pub struct MaskedForward {
    pub loss: Var,
    pub reconstructions: Vec<Var>,
    pub plan: MaskPlan,
    /// Number of tokens the encoder processed.
    pub encoder_tokens: usize,
}

/// Masked-autoencoder configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeConfig {
    pub embed: EmbedConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mask: MaskConfig,
}

/// Per-modality masked token indices (modality-local) of a plan.
pub fn plan_indices(plan: &MaskPlan, layout: &TokenLayout) -> Vec<Vec<usize>> {
    let mut out = vec![plan.video.masked_indices()];
    for i in 0..layout.sensor_tokens.len() {
        out.push(plan.sensors.for_modality(i).masked_time_indices.clone());
    }
    out
}

/// Embeds, masks, encodes and decodes one sample.
pub fn masked_forward(
    g: &mut Graph,
    sample: &MultimodalSample,
    layout: &TokenLayout,
    cfg: &MaeConfig,
    p: &Bound,
    mask_rng: &mut RngStream,
) -> Result<MaskedForward> {
    let plan = plan_masks(&cfg.mask, layout.video_grid, &layout.sensor_tokens, mask_rng)?;
    let local = plan_indices(&plan, layout);

    let uni = embed_sample(g, sample, &cfg.embed, p)?;
    let full = concat_modalities(g, &uni.video, &uni.sensors, layout)?;
    let mut offset = 0;
    let mut global = Vec::new();
    for (m, idx) in layout.modalities().into_iter().zip(&local) {
        global.extend(idx.iter().map(|&i| offset + i));
        offset += layout.modality_positions(m).len();
    }
    let (visible, _) = apply_mask(g, &full, &global)?;
    let encoder_tokens = visible.len();
    let encoded = encode(g, &visible, &cfg.encoder, p)?;

    let raw = raw_targets(sample, &cfg.embed)?;
    let mut recs = Vec::new();
    let mut tgts = Vec::new();
    for ((m, idx), target) in layout.modalities().into_iter().zip(&local).zip(raw) {
        recs.push(decode_modality(g, &encoded, idx, m, layout, &cfg.decoder, p)?);
        let t = g.constant(target);
        tgts.push(g.gather_rows(t, idx)?);
    }
    let loss = reconstruction_loss(g, &recs, &tgts)?;
    Ok(MaskedForward {
        loss,
        reconstructions: recs,
        plan,
        encoder_tokens,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 2e-3,
        }
    }
}

/// Mask stream for one sample visit of one step.
pub fn mask_stream(seed: u64, step: usize, sample_id: u64) -> RngStream {
    RngStream::derive(seed, StreamKind::Mask, &[step as u64, sample_id])
}

/// One optimizer update over `batch`; returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    batch: &[&MultimodalSample],
    params: &mut ParamStore,
    opt: &mut Adam,
    layout: &TokenLayout,
    cfg: &MaeConfig,
    lr: f64,
    seed: u64,
    step: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("pretraining batch is empty"));
    }
    let mut grads = Gradients::default();
    let mut total = 0.0;
    for s in batch {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let mut rng = mask_stream(seed, step, s.sample_id);
        let fw = masked_forward(&mut g, s, layout, cfg, &b, &mut rng)?;
        total += g.value(fw.loss).data()[0];
        g.backward(fw.loss)?;
        grads.accumulate(b.gradients(&g));
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    opt.step(params, &grads, lr);
    Ok(total / n)
}

/// Seeded, epoch-shuffled mini-batch pretraining. Returns the per-epoch mean
/// loss curve.
pub fn pretrain(
    samples: &[&MultimodalSample],
    params: &mut ParamStore,
    layout: &TokenLayout,
    cfg: &MaeConfig,
    train: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("pretraining dataset is empty"));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("pretrain batch size must be positive".into()));
    }
    let steps_per_epoch = samples.len().div_ceil(train.batch_size);
    let total = steps_per_epoch * train.epochs;
    let mut opt = Adam::default();
    let mut curve = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        RngStream::derive(seed, StreamKind::Shuffle, &[epoch as u64]).shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<&MultimodalSample> = chunk.iter().map(|&i| samples[i]).collect();
            let lr = cosine_lr(train.lr, step, total);
            sum += pretrain_step(&batch, params, &mut opt, layout, cfg, lr, seed, step)? * batch.len() as f64;
            step += 1;
        }
        let mean = sum / samples.len() as f64;
        on_epoch(epoch, mean);
        curve.push(mean);
    }
    Ok(curve)
}

/// Mean reconstruction loss over `samples` at fixed parameters, with masks
/// drawn from a dedicated evaluation stream.
pub fn mean_reconstruction_loss(
    samples: &[&MultimodalSample],
    params: &ParamStore,
    layout: &TokenLayout,
    cfg: &MaeConfig,
    seed: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let mut rng = RngStream::derive(seed, StreamKind::Mask, &[u64::MAX, s.sample_id]);
        let fw = masked_forward(&mut g, s, layout, cfg, &b, &mut rng)?;
        sum += g.value(fw.loss).data()[0];
    }
    Ok(sum / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::init_params;
    use crate::numerics::gradcheck::grad_check_params;
    use crate::synthdata::{generate_sample, DatasetSpec, SensorSpec, VideoGeometry};

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            num_classes: 2,
            samples_per_class: 1,
            video: VideoGeometry {
                frames: 2,
                height: 4,
                width: 4,
                channels: 1,
            },
            sensors: vec![
                SensorSpec { length: 8, channels: 2 },
                SensorSpec { length: 8, channels: 2 },
            ],
            ..DatasetSpec::default()
        }
    }

    fn tiny_cfg() -> MaeConfig {
        MaeConfig {
            embed: EmbedConfig {
                tubelet_t: 2,
                patch_h: 2,
                patch_w: 2,
                width: 8,
                sensor_window: 4,
                sensor_stride: 2,
                sensor_dim: 4,
            },
            encoder: EncoderConfig {
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            decoder: DecoderConfig {
                depth: 1,
                heads: 2,
                width: 4,
                mlp_ratio: 2,
                context: DecoderContext::Modality,
            },
            mask: MaskConfig {
                video_ratio: 0.5,
                sensor_ratio: 0.5,
                ..MaskConfig::default()
            },
        }
    }

    fn tiny_params(spec: &DatasetSpec, cfg: &MaeConfig) -> (ParamStore, TokenLayout) {
        let layout = TokenLayout::new(spec, &cfg.embed).unwrap();
        let shapes = SampleShapes {
            video_channels: 1,
            sensor_channels: vec![2, 2],
        };
        let mut p = ParamStore::new();
        let mut r = RngStream::new(3, 0);
        init_params(&mut p, &spec.video, &spec.sensors, &cfg.embed, &mut r);
        init_encoder(&mut p, &cfg.encoder, cfg.embed.width, &mut r);
        init_decoders(&mut p, &cfg.decoder, &layout, &shapes, &cfg.embed, &mut r);
        (p, layout)
    }

    fn random_tokens(g: &mut Graph, n: usize, d: usize, seed: u64) -> TokenSequence {
        let mut r = RngStream::new(seed, 1);
        let t = Tensor::matrix(n, d, (0..n * d).map(|_| r.normal()).collect()).unwrap();
        TokenSequence {
            tokens: g.constant(t),
            positions: (0..n).map(|t| Position::Sensor { modality: 0, t }).collect(),
        }
    }

    #[test]
    fn encode_preserves_shape_and_rejects_empty() {
        let cfg = tiny_cfg();
        let (p, _) = tiny_params(&tiny_spec(), &cfg);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = random_tokens(&mut g, 6, 8, 0);
        let y = encode(&mut g, &x, &cfg.encoder, &b).unwrap();
        assert_eq!(g.shape(y.tokens), &[6, 8]);
        let empty = TokenSequence {
            tokens: g.constant(Tensor::from_parts(vec![0, 8], vec![])),
            positions: vec![],
        };
        assert!(encode(&mut g, &empty, &cfg.encoder, &b).is_err());
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let cfg = tiny_cfg();
        let (p, _) = tiny_params(&tiny_spec(), &cfg);
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let x = random_tokens(&mut g, 6, 8, 4);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = TokenSequence {
            tokens: g.gather_rows(x.tokens, &perm).unwrap(),
            positions: perm.iter().map(|&i| x.positions[i]).collect(),
        };
        let y = encode(&mut g, &x, &cfg.encoder, &b).unwrap();
        let yp = encode(&mut g, &xp, &cfg.encoder, &b).unwrap();
        let (y, yp) = (g.value(y.tokens).clone(), g.value(yp.tokens).clone());
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in yp.row(r).iter().zip(y.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let (p, _) = tiny_params(&tiny_spec(), &cfg);
        let mut enc = ParamStore::new();
        enc.merge_prefixed(&p, &["enc."]);
        let rep = grad_check_params(
            |g, b| {
                let x = random_tokens(g, 6, 8, 9);
                let y = encode(g, &x, &cfg.encoder, b)?;
                let w = random_tokens(g, 6, 8, 10);
                let m = g.mul(y.tokens, w.tokens)?;
                Ok(g.sum(m))
            },
            &enc,
            1e-4,
            1e-4,
            usize::MAX,
            1.0,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn decode_shapes() {
        let cfg = tiny_cfg();
        let spec = tiny_spec();
        let (p, layout) = tiny_params(&spec, &cfg);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let enc = TokenSequence {
            tokens: g.constant(Tensor::filled(&[3, 8], 0.1)),
            positions: vec![
                Position::Video { t: 0, h: 0, w: 1 },
                Position::Sensor { modality: 0, t: 1 },
                Position::Sensor { modality: 1, t: 0 },
            ],
        };
        let r = decode_modality(&mut g, &enc, &[0, 2, 3], Modality::Video, &layout, &cfg.decoder, &b).unwrap();
        assert_eq!(g.shape(r), &[3, 8]);
        let r = decode_modality(&mut g, &enc, &[2], Modality::Sensor(0), &layout, &cfg.decoder, &b).unwrap();
        assert_eq!(g.shape(r), &[1, 8]);
        let r = decode_modality(&mut g, &enc, &[], Modality::Sensor(1), &layout, &cfg.decoder, &b).unwrap();
        assert_eq!(g.shape(r), &[0, 8]);
        assert!(decode_modality(&mut g, &enc, &[0], Modality::Sensor(7), &layout, &cfg.decoder, &b).is_err());
        assert!(decode_modality(&mut g, &enc, &[9], Modality::Sensor(0), &layout, &cfg.decoder, &b).is_err());
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = reconstruction_loss(&mut g, &[t], &[t]).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let r = g.add_scalar(t, 1.0);
        let l = reconstruction_loss(&mut g, &[r], &[t]).unwrap();
        assert!((g.value(l).data()[0] - 1.0).abs() < 1e-12);

        let a = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let a_t = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let b_t = g.constant(Tensor::matrix(1, 1, vec![1.5f64.sqrt()]).unwrap());
        let l = reconstruction_loss(&mut g, &[a, b], &[a_t, b_t]).unwrap();
        assert!((g.value(l).data()[0] - 1.0).abs() < 1e-12);

        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(reconstruction_loss(&mut g, &[a], &[bad]).is_err());
    }

    #[test]
    fn full_pipeline_gradients() {
        let cfg = tiny_cfg();
        let spec = tiny_spec();
        let (p, layout) = tiny_params(&spec, &cfg);
        let sample = generate_sample(&spec, 1, 0).unwrap();
        let rep = grad_check_params(
            |g, b| {
                let mut r = RngStream::new(5, 5);
                Ok(masked_forward(g, &sample, &layout, &cfg, b, &mut r)?.loss)
            },
            &p,
            1e-5,
            1e-4,
            6,
            1.0,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn encoder_sees_only_visible_tokens() {
        let spec = DatasetSpec {
            num_classes: 1,
            samples_per_class: 1,
            ..DatasetSpec::default()
        };
        let cfg = MaeConfig {
            embed: EmbedConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            mask: MaskConfig::default(),
        };
        let layout = TokenLayout::new(&spec, &cfg.embed).unwrap();
        let shapes = SampleShapes {
            video_channels: 1,
            sensor_channels: vec![3; 4],
        };
        let mut p = ParamStore::new();
        let mut r = RngStream::new(0, 0);
        init_params(&mut p, &spec.video, &spec.sensors, &cfg.embed, &mut r);
        init_encoder(&mut p, &cfg.encoder, cfg.embed.width, &mut r);
        init_decoders(&mut p, &cfg.decoder, &layout, &shapes, &cfg.embed, &mut r);
        let sample = generate_sample(&spec, 0, 0).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let fw = masked_forward(&mut g, &sample, &layout, &cfg, &b, &mut RngStream::new(1, 1)).unwrap();
        // 2×2 spatial grid: round(0.15·4) = 1 column over 4 time steps; 16 sensor
        // tokens: 16 − round(0.85·16) = 2 visible per stream.
        assert_eq!(fw.encoder_tokens, 4 + 4 * 2);
    }

    #[test]
    fn learning_rate_zero_leaves_params() {
        let cfg = tiny_cfg();
        let spec = tiny_spec();
        let (mut p, layout) = tiny_params(&spec, &cfg);
        let before = p.clone();
        let s = generate_sample(&spec, 0, 0).unwrap();
        let mut opt = Adam::default();
        pretrain_step(&[&s], &mut p, &mut opt, &layout, &cfg, 0.0, 0, 0).unwrap();
        assert_eq!(p, before);
    }
}
