//! Synthetic multimodal "activity" data: a video of a Gaussian blob moving on a
//! class-specific trajectory plus sensor streams whose phase tracks the blob.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::numerics::{RngStream, StreamKind, Tensor};

/// Per-sample standard deviation of the trajectory phase offset (radians).
const PHASE_JITTER: f64 = 0.25;
/// Per-sample relative jitter of the angular frequency.
const FREQ_JITTER: f64 = 0.04;
/// Per-sample relative jitter of sensor amplitude.
const GAIN_JITTER: f64 = 0.1;
/// Blob standard deviation in normalized image units.
const BLOB_SD: f64 = 0.12;
/// Per-sample, per-channel sensor bias (standard deviation).
const SENSOR_OFFSET_SD: f64 = 1.0;
/// Per-sample video background level, uniform in `[0, max)`.
const BACKGROUND_MAX: f64 = 0.4;
/// Per-sample shift of the trajectory centre (standard deviation).
const CENTER_JITTER: f64 = 0.08;
const HARMONICS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SensorSpec {
    pub length: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub video: VideoGeometry,
    pub sensors: Vec<SensorSpec>,
    pub noise_sigma: f64,
    /// 1 makes every sensor stream a copy of the first (plus noise).
    pub sensor_redundancy: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 13,
            samples_per_class: 50,
            video: VideoGeometry {
                frames: 8,
                height: 32,
                width: 32,
                channels: 1,
            },
            sensors: vec![
                SensorSpec {
                    length: 128,
                    channels: 3
                };
                4
            ],
            noise_sigma: 0.1,
            sensor_redundancy: 0.5,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let v = &self.video;
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::invalid("num_classes and samples_per_class must be positive"));
        }
        if v.frames == 0 || v.height == 0 || v.width == 0 || v.channels == 0 {
            return Err(Error::invalid("video extents must be positive"));
        }
        if self.sensors.iter().any(|s| s.length == 0 || s.channels == 0) {
            return Err(Error::invalid("sensor extents must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.sensor_redundancy) {
            return Err(Error::invalid("sensor_redundancy must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    /// Number of modalities including video.
    pub fn num_modalities(&self) -> usize {
        1 + self.sensors.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    /// `[frames, height, width, channels]`, values in `[0, 1]`.
    pub video: Tensor,
    /// One `[length, channels]` array per sensor stream.
    pub sensors: Vec<Tensor>,
    pub label: usize,
    pub sample_id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    pub meta_train: Vec<usize>,
    pub meta_test: Vec<usize>,
}

impl ClassSplit {
    pub fn side(&self, side: SplitSide) -> &[usize] {
        match side {
            SplitSide::MetaTrain => &self.meta_train,
            SplitSide::MetaTest => &self.meta_test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSide {
    MetaTrain,
    MetaTest,
}

/// Harmonic mixture for one sensor channel.
#[derive(Clone, Debug)]
struct ChannelPattern {
    amp: [f64; HARMONICS],
    phase: [f64; HARMONICS],
}

impl ChannelPattern {
    fn eval(&self, phi: f64) -> f64 {
        (0..HARMONICS)
            .map(|h| self.amp[h] * ((h + 1) as f64 * phi + self.phase[h]).sin())
            .sum()
    }
}

/// Everything that is fixed per class.
#[derive(Clone, Debug)]
struct ClassProfile {
    cycles: f64,
    phase: f64,
    amp_x: f64,
    amp_y: f64,
    y_ratio: f64,
    y_phase: f64,
    /// `[stream][channel]`.
    sensors: Vec<Vec<ChannelPattern>>,
}

const CLASS_TAG: u64 = 0xC1A5;
const SAMPLE_TAG: u64 = 0x5A4E;

fn class_profile(spec: &DatasetSpec, class_id: usize) -> ClassProfile {
    let mut r = RngStream::derive(spec.seed, StreamKind::Data, &[CLASS_TAG, class_id as u64]);
    let cycles = r.uniform_in(0.6, 2.2);
    let phase = r.uniform_in(0.0, TAU);
    let amp_x = r.uniform_in(0.18, 0.32);
    let amp_y = r.uniform_in(0.18, 0.32);
    let y_ratio = if r.uniform() < 0.5 { 1.0 } else { 2.0 };
    let y_phase = r.uniform_in(0.0, TAU);
    let sensors = spec
        .sensors
        .iter()
        .map(|s| {
            (0..s.channels)
                .map(|_| {
                    let mut amp = [0.0; HARMONICS];
                    let mut ph = [0.0; HARMONICS];
                    for h in 0..HARMONICS {
                        amp[h] = r.uniform_in(0.3, 1.0) * if r.uniform() < 0.5 { -1.0 } else { 1.0 };
                        ph[h] = r.uniform_in(0.0, TAU);
                    }
                    ChannelPattern { amp, phase: ph }
                })
                .collect()
        })
        .collect();
    ClassProfile {
        cycles,
        phase,
        amp_x,
        amp_y,
        y_ratio,
        y_phase,
        sensors,
    }
}

/// Generates sample `sample_index` of class `class_id`; a pure function of
/// `(spec, class_id, sample_index)`.
pub fn generate_sample(
    spec: &DatasetSpec,
    class_id: usize,
    sample_index: usize,
) -> Result<MultimodalSample> {
    if class_id >= spec.num_classes {
        return Err(Error::invalid(format!(
            "class id {class_id} out of range for {} classes",
            spec.num_classes
        )));
    }
    let profile = class_profile(spec, class_id);
    let mut r = RngStream::derive(
        spec.seed,
        StreamKind::Data,
        &[SAMPLE_TAG, class_id as u64, sample_index as u64],
    );
    let phase0 = profile.phase + PHASE_JITTER * r.normal();
    let omega = TAU * profile.cycles * (1.0 + FREQ_JITTER * r.normal());
    let gain = 1.0 + GAIN_JITTER * r.normal();
    let phi = |tau: f64| omega * tau + phase0;
    let background = BACKGROUND_MAX * r.uniform();
    let center_x = 0.5 + CENTER_JITTER * r.normal();
    let center_y = 0.5 + CENTER_JITTER * r.normal();
    let offsets: Vec<Vec<f64>> = spec
        .sensors
        .iter()
        .map(|s| (0..s.channels).map(|_| SENSOR_OFFSET_SD * r.normal()).collect())
        .collect();

    // Video.
    let v = spec.video;
    let mut video = Vec::with_capacity(v.frames * v.height * v.width * v.channels);
    let two_var = 2.0 * BLOB_SD * BLOB_SD;
    for f in 0..v.frames {
        let p = phi(f as f64 / v.frames as f64);
        let cx = center_x + profile.amp_x * p.cos();
        let cy = center_y + profile.amp_y * (profile.y_ratio * p + profile.y_phase).sin();
        for i in 0..v.height {
            let y = (i as f64 + 0.5) / v.height as f64;
            for j in 0..v.width {
                let x = (j as f64 + 0.5) / v.width as f64;
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                let base = background + (1.0 - background) * (-d2 / two_var).exp();
                for _ in 0..v.channels {
                    let noisy = base + spec.noise_sigma * r.normal();
                    video.push(noisy.clamp(0.0, 1.0));
                }
            }
        }
    }
    let video = Tensor::new(vec![v.frames, v.height, v.width, v.channels], video)?;

    // Sensors: stream 0 is the reference pattern; later streams blend a
    // resampled copy of it with their own class pattern.
    let red = spec.sensor_redundancy;
    let reference = &profile.sensors;
    let mut sensors = Vec::with_capacity(spec.sensors.len());
    for (s_idx, s) in spec.sensors.iter().enumerate() {
        let mut data = Vec::with_capacity(s.length * s.channels);
        for k in 0..s.length {
            let p = phi(k as f64 / s.length as f64);
            for ch in 0..s.channels {
                let own = gain * reference[s_idx][ch].eval(p) + offsets[s_idx][ch];
                let clean = if s_idx == 0 {
                    own
                } else {
                    let c0 = ch % reference[0].len();
                    let copy = gain * reference[0][c0].eval(p) + offsets[0][c0];
                    red * copy + (1.0 - red) * own
                };
                data.push(clean);
            }
        }
        sensors.push(data);
    }
    // Noise is drawn after all clean signals so that it never shifts them.
    let sensors = spec
        .sensors
        .iter()
        .zip(sensors)
        .map(|(s, mut data)| {
            if spec.noise_sigma > 0.0 {
                data.iter_mut().for_each(|x| *x += spec.noise_sigma * r.normal());
            }
            Tensor::new(vec![s.length, s.channels], data)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MultimodalSample {
        video,
        sensors,
        label: class_id,
        sample_id: (class_id * spec.samples_per_class + sample_index) as u64,
    })
}

/// All `num_classes × samples_per_class` samples, class-major.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<MultimodalSample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.num_samples());
    for c in 0..spec.num_classes {
        for i in 0..spec.samples_per_class {
            out.push(generate_sample(spec, c, i)?);
        }
    }
    Ok(out)
}

/// Uniformly random disjoint split of `0..num_classes`.
pub fn class_split(num_classes: usize, num_test_classes: usize, seed: u64) -> Result<ClassSplit> {
    if num_test_classes == 0 || num_test_classes >= num_classes {
        return Err(Error::invalid(format!(
            "need 0 < test classes ({num_test_classes}) < classes ({num_classes})"
        )));
    }
    let mut r = RngStream::derive(seed, StreamKind::Split, &[num_classes as u64]);
    let mut ids: Vec<usize> = (0..num_classes).collect();
    r.shuffle(&mut ids);
    let mut meta_test = ids[..num_test_classes].to_vec();
    let mut meta_train = ids[num_test_classes..].to_vec();
    meta_test.sort_unstable();
    meta_train.sort_unstable();
    Ok(ClassSplit {
        meta_train,
        meta_test,
    })
}
