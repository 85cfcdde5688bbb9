//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::embedding::EmbedConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Scaling};
use crate::mae::{DecoderConfig, DecoderContext, EncoderConfig, PretrainConfig};
use crate::masking::{MaskConfig, MaskStrategy};
use crate::model::{FusionMode, HeadKind, ModelConfig};
use crate::oneshot::{EpisodeShape, FinetuneConfig};
use crate::synthdata::{DatasetSpec, SensorSpec, VideoGeometry};

/// Every tunable of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub data_seed: u64,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sensors: usize,
    pub sensor_length: usize,
    pub sensor_channels: usize,
    pub noise_sigma: f64,
    pub redundancy: f64,

    pub embed: EmbedConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mask: MaskConfig,
    pub pretrain: PretrainConfig,
    pub fusion: FusionConfig,
    pub fusion_mode: FusionMode,
    pub head: HeadKind,
    pub finetune: FinetuneConfig,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            seed: 0,
            data_seed: d.seed,
            num_classes: d.num_classes,
            samples_per_class: d.samples_per_class,
            test_classes: 5,
            frames: d.video.frames,
            height: d.video.height,
            width: d.video.width,
            channels: d.video.channels,
            sensors: d.sensors.len(),
            sensor_length: d.sensors[0].length,
            sensor_channels: d.sensors[0].channels,
            noise_sigma: d.noise_sigma,
            redundancy: d.sensor_redundancy,
            embed: EmbedConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            mask: MaskConfig::default(),
            pretrain: PretrainConfig::default(),
            fusion: FusionConfig::default(),
            fusion_mode: FusionMode::Cross,
            head: HeadKind::LayerNorm,
            finetune: FinetuneConfig::default(),
            eval_episodes: 500,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Every key, in canonical (sorted) order.
pub const KEYS: &[&str] = &[
    "data.channels",
    "data.frames",
    "data.height",
    "data.noise_sigma",
    "data.num_classes",
    "data.redundancy",
    "data.samples_per_class",
    "data.seed",
    "data.sensor_channels",
    "data.sensor_length",
    "data.sensors",
    "data.test_classes",
    "data.width",
    "embed.patch_h",
    "embed.patch_w",
    "embed.sensor_dim",
    "embed.sensor_stride",
    "embed.sensor_window",
    "embed.tubelet_t",
    "embed.width",
    "eval.episodes",
    "finetune.episodes",
    "finetune.lr",
    "finetune.momentum",
    "fusion.head_dim",
    "fusion.heads",
    "fusion.mode",
    "fusion.out_width",
    "fusion.scaling",
    "mae.decoder_context",
    "mae.decoder_depth",
    "mae.decoder_heads",
    "mae.decoder_mlp_ratio",
    "mae.decoder_width",
    "mae.encoder_depth",
    "mae.encoder_heads",
    "mae.mlp_ratio",
    "mask.ratio",
    "mask.sensor_ratio",
    "mask.strategy",
    "oneshot.head",
    "oneshot.queries",
    "oneshot.shots",
    "oneshot.ways",
    "pretrain.batch_size",
    "pretrain.epochs",
    "pretrain.lr",
    "seed",
];

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.num_classes" => self.num_classes = parse(key, v)?,
            "data.samples_per_class" => self.samples_per_class = parse(key, v)?,
            "data.test_classes" => self.test_classes = parse(key, v)?,
            "data.frames" => self.frames = parse(key, v)?,
            "data.height" => self.height = parse(key, v)?,
            "data.width" => self.width = parse(key, v)?,
            "data.channels" => self.channels = parse(key, v)?,
            "data.sensors" => self.sensors = parse(key, v)?,
            "data.sensor_length" => self.sensor_length = parse(key, v)?,
            "data.sensor_channels" => self.sensor_channels = parse(key, v)?,
            "data.noise_sigma" => self.noise_sigma = parse(key, v)?,
            "data.redundancy" => self.redundancy = parse(key, v)?,
            "embed.tubelet_t" => self.embed.tubelet_t = parse(key, v)?,
            "embed.patch_h" => self.embed.patch_h = parse(key, v)?,
            "embed.patch_w" => self.embed.patch_w = parse(key, v)?,
            "embed.width" => self.embed.width = parse(key, v)?,
            "embed.sensor_window" => self.embed.sensor_window = parse(key, v)?,
            "embed.sensor_stride" => self.embed.sensor_stride = parse(key, v)?,
            "embed.sensor_dim" => self.embed.sensor_dim = parse(key, v)?,
            "mae.encoder_depth" => self.encoder.depth = parse(key, v)?,
            "mae.encoder_heads" => self.encoder.heads = parse(key, v)?,
            "mae.mlp_ratio" => self.encoder.mlp_ratio = parse(key, v)?,
            "mae.decoder_depth" => self.decoder.depth = parse(key, v)?,
            "mae.decoder_heads" => self.decoder.heads = parse(key, v)?,
            "mae.decoder_width" => self.decoder.width = parse(key, v)?,
            "mae.decoder_mlp_ratio" => self.decoder.mlp_ratio = parse(key, v)?,
            "mae.decoder_context" => self.decoder.context = DecoderContext::from_str(v)?,
            "mask.strategy" => self.mask.strategy = MaskStrategy::from_str(v)?,
            "mask.ratio" => self.mask.video_ratio = parse(key, v)?,
            "mask.sensor_ratio" => self.mask.sensor_ratio = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "fusion.heads" => self.fusion.heads = parse(key, v)?,
            "fusion.head_dim" => self.fusion.head_dim = parse(key, v)?,
            "fusion.out_width" => self.fusion.out_width = parse(key, v)?,
            "fusion.scaling" => self.fusion.scaling = Scaling::from_str(v)?,
            "fusion.mode" => self.fusion_mode = FusionMode::from_str(v)?,
            "oneshot.head" => self.head = HeadKind::from_str(v)?,
            "oneshot.ways" => self.finetune.shape.ways = parse(key, v)?,
            "oneshot.shots" => self.finetune.shape.shots = parse(key, v)?,
            "oneshot.queries" => self.finetune.shape.queries = parse(key, v)?,
            "finetune.episodes" => self.finetune.episodes = parse(key, v)?,
            "finetune.lr" => self.finetune.lr = parse(key, v)?,
            "finetune.momentum" => self.finetune.momentum = parse(key, v)?,
            "eval.episodes" => self.eval_episodes = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Textual value of one key.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.num_classes" => self.num_classes.to_string(),
            "data.samples_per_class" => self.samples_per_class.to_string(),
            "data.test_classes" => self.test_classes.to_string(),
            "data.frames" => self.frames.to_string(),
            "data.height" => self.height.to_string(),
            "data.width" => self.width.to_string(),
            "data.channels" => self.channels.to_string(),
            "data.sensors" => self.sensors.to_string(),
            "data.sensor_length" => self.sensor_length.to_string(),
            "data.sensor_channels" => self.sensor_channels.to_string(),
            "data.noise_sigma" => self.noise_sigma.to_string(),
            "data.redundancy" => self.redundancy.to_string(),
            "embed.tubelet_t" => self.embed.tubelet_t.to_string(),
            "embed.patch_h" => self.embed.patch_h.to_string(),
            "embed.patch_w" => self.embed.patch_w.to_string(),
            "embed.width" => self.embed.width.to_string(),
            "embed.sensor_window" => self.embed.sensor_window.to_string(),
            "embed.sensor_stride" => self.embed.sensor_stride.to_string(),
            "embed.sensor_dim" => self.embed.sensor_dim.to_string(),
            "mae.encoder_depth" => self.encoder.depth.to_string(),
            "mae.encoder_heads" => self.encoder.heads.to_string(),
            "mae.mlp_ratio" => self.encoder.mlp_ratio.to_string(),
            "mae.decoder_depth" => self.decoder.depth.to_string(),
            "mae.decoder_heads" => self.decoder.heads.to_string(),
            "mae.decoder_width" => self.decoder.width.to_string(),
            "mae.decoder_mlp_ratio" => self.decoder.mlp_ratio.to_string(),
            "mae.decoder_context" => self.decoder.context.to_string(),
            "mask.strategy" => self.mask.strategy.to_string(),
            "mask.ratio" => self.mask.video_ratio.to_string(),
            "mask.sensor_ratio" => self.mask.sensor_ratio.to_string(),
            "pretrain.epochs" => self.pretrain.epochs.to_string(),
            "pretrain.batch_size" => self.pretrain.batch_size.to_string(),
            "pretrain.lr" => self.pretrain.lr.to_string(),
            "fusion.heads" => self.fusion.heads.to_string(),
            "fusion.head_dim" => self.fusion.head_dim.to_string(),
            "fusion.out_width" => self.fusion.out_width.to_string(),
            "fusion.scaling" => self.fusion.scaling.to_string(),
            "fusion.mode" => self.fusion_mode.to_string(),
            "oneshot.head" => self.head.to_string(),
            "oneshot.ways" => self.finetune.shape.ways.to_string(),
            "oneshot.shots" => self.finetune.shape.shots.to_string(),
            "oneshot.queries" => self.finetune.shape.queries.to_string(),
            "finetune.episodes" => self.finetune.episodes.to_string(),
            "finetune.lr" => self.finetune.lr.to_string(),
            "finetune.momentum" => self.finetune.momentum.to_string(),
            "eval.episodes" => self.eval_episodes.to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        })
    }

    /// Parses config text over the defaults and validates the result.
    /// `mask.ratio` also sets `mask.sensor_ratio` unless the latter is given.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut sensor_ratio_given = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            sensor_ratio_given |= k == "mask.sensor_ratio";
            cfg.set(k, v)?;
        }
        if !sensor_ratio_given {
            cfg.mask.sensor_ratio = cfg.mask.video_ratio;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text: every key in sorted order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_classes: self.num_classes,
            samples_per_class: self.samples_per_class,
            video: VideoGeometry {
                frames: self.frames,
                height: self.height,
                width: self.width,
                channels: self.channels,
            },
            sensors: vec![
                SensorSpec {
                    length: self.sensor_length,
                    channels: self.sensor_channels,
                };
                self.sensors
            ],
            noise_sigma: self.noise_sigma,
            sensor_redundancy: self.redundancy,
            seed: self.data_seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            embed: self.embed.clone(),
            encoder: self.encoder,
            decoder: self.decoder,
            mask: self.mask,
            fusion: self.fusion,
            fusion_mode: self.fusion_mode,
            head: self.head,
        }
    }

    pub fn episode_shape(&self) -> EpisodeShape {
        self.finetune.shape
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        let spec = self.dataset_spec();
        spec.validate().map_err(config)?;
        if self.test_classes == 0 || self.test_classes >= self.num_classes {
            return Err(Error::Config(format!(
                "data.test_classes must be in 1..{}, got {}",
                self.num_classes, self.test_classes
            )));
        }
        let model = self.model();
        model.validate()?;
        crate::model::layout(&spec, &model).map_err(config)?;
        self.finetune.shape.validate()?;
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be positive".into()));
        }
        for (k, v) in [("pretrain.lr", self.pretrain.lr), ("finetune.lr", self.finetune.lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{k} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.finetune.momentum) {
            return Err(Error::Config("finetune.momentum must be in [0, 1)".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted_and_complete() {
        let mut sorted = KEYS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, KEYS);
        let cfg = RunConfig::default();
        for k in KEYS {
            let v = cfg.get(k).unwrap();
            let mut c = cfg.clone();
            c.set(k, &v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn canonical_round_trip() {
        let cfg = RunConfig::parse("# comment\nmask.ratio = 0.75 # trailing\n\nfusion.scaling=exp\n").unwrap();
        assert_eq!(cfg.mask.video_ratio, 0.75);
        assert_eq!(cfg.mask.sensor_ratio, 0.75);
        assert_eq!(cfg.fusion.scaling, Scaling::Exp);
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
    }

    #[test]
    fn unknown_and_malformed_keys_are_fatal() {
        let err = RunConfig::parse("mask.ratoi = 0.5").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("mask.ratoi"));
        assert!(RunConfig::parse("mask.ratio").is_err());
        assert!(RunConfig::parse("mask.ratio = many").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn preconditions_checked_at_load() {
        assert!(RunConfig::parse("mask.ratio = 1.5").is_err());
        assert!(RunConfig::parse("embed.patch_h = 5").is_err());
        assert!(RunConfig::parse("mae.encoder_heads = 3").is_err());
        assert!(RunConfig::parse("data.test_classes = 13").is_err());
        assert!(RunConfig::parse("oneshot.ways = 1").is_err());
    }
}
