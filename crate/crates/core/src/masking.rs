//! Tube masking for video tokens, synchronized time masking shared by every
//! sensor stream, and independent random masking as the ablation baseline.

use std::fmt;
use std::str::FromStr;

use crate::embedding::{Position, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{Graph, RngStream};

/// `round_half_up(ratio × population)`.
pub fn masked_count(ratio: f64, population: usize) -> usize {
    // The epsilon absorbs representation error in products such as 0.85 × 10.
    let n = (ratio * population as f64 + 0.5 + 1e-9).floor() as usize;
    n.min(population)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskStrategy {
    Synchronized,
    Random,
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::Synchronized => "synchronized",
            MaskStrategy::Random => "random",
        })
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synchronized" | "sync" => Ok(MaskStrategy::Synchronized),
            "random" => Ok(MaskStrategy::Random),
            other => Err(Error::Config(format!("unknown mask strategy `{other}`"))),
        }
    }
}

/// Video token mask over a `(t, h, w)` grid; every masked spatial position is
/// masked at all temporal indices.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoMask {
    pub grid: (usize, usize, usize),
    /// Flat `(t·h_tokens + h)·w_tokens + w` indexing.
    pub masked: Vec<bool>,
    pub ratio: f64,
}

impl VideoMask {
    pub fn is_masked(&self, t: usize, h: usize, w: usize) -> bool {
        let (_, gh, gw) = self.grid;
        self.masked[(t * gh + h) * gw + w]
    }

    /// Masked token indices in canonical (t, h, w) order.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// True when every spatial column has one value over time.
    pub fn is_tube(&self) -> bool {
        let (gt, gh, gw) = self.grid;
        (0..gh).all(|h| (0..gw).all(|w| (0..gt).all(|t| self.is_masked(t, h, w) == self.is_masked(0, h, w))))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorMask {
    pub num_time_tokens: usize,
    /// Sorted ascending.
    pub masked_time_indices: Vec<usize>,
    pub ratio: f64,
}

pub fn tube_mask(grid: (usize, usize, usize), ratio: f64, rng: &mut RngStream) -> Result<VideoMask> {
    check_ratio(ratio)?;
    let (gt, gh, gw) = grid;
    let spatial = gh * gw;
    let chosen = rng.subset(spatial, masked_count(ratio, spatial));
    let mut masked = vec![false; gt * spatial];
    for t in 0..gt {
        for &s in &chosen {
            masked[t * spatial + s] = true;
        }
    }
    Ok(VideoMask { grid, masked, ratio })
}

/// One time-index subset; callers apply the same object to every sensor.
pub fn synchronized_mask(num_time_tokens: usize, ratio: f64, rng: &mut RngStream) -> Result<SensorMask> {
    check_ratio(ratio)?;
    Ok(SensorMask {
        num_time_tokens,
        masked_time_indices: rng.subset(num_time_tokens, masked_count(ratio, num_time_tokens)),
        ratio,
    })
}

/// Independent uniform subset of `0..num_tokens`, sorted.
pub fn random_mask(num_tokens: usize, ratio: f64, rng: &mut RngStream) -> Result<Vec<usize>> {
    check_ratio(ratio)?;
    Ok(rng.subset(num_tokens, masked_count(ratio, num_tokens)))
}

/// Sensor masks of a plan: one shared mask, or one per stream.
#[derive(Clone, Debug, PartialEq)]
pub enum SensorMasks {
    Shared(SensorMask),
    PerModality(Vec<SensorMask>),
}

impl SensorMasks {
    pub fn for_modality(&self, i: usize) -> &SensorMask {
        match self {
            SensorMasks::Shared(m) => m,
            SensorMasks::PerModality(v) => &v[i],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub video: VideoMask,
    pub sensors: SensorMasks,
    pub strategy: MaskStrategy,
    pub stream_id: u64,
}

/// Ratios used to build a [`MaskPlan`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    pub video_ratio: f64,
    pub sensor_ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Synchronized,
            video_ratio: 0.85,
            sensor_ratio: 0.85,
        }
    }
}

/// Draws a full plan for one sample. The video mask is independent of the
/// sensor mask under both strategies.
pub fn plan_masks(
    cfg: &MaskConfig,
    video_grid: (usize, usize, usize),
    sensor_tokens: &[usize],
    rng: &mut RngStream,
) -> Result<MaskPlan> {
    let video = tube_mask(video_grid, cfg.video_ratio, rng)?;
    let sensors = match cfg.strategy {
        MaskStrategy::Synchronized => {
            let Some(&n) = sensor_tokens.first() else {
                return Ok(MaskPlan {
                    video,
                    sensors: SensorMasks::PerModality(vec![]),
                    strategy: cfg.strategy,
                    stream_id: rng.stream_id(),
                });
            };
            if sensor_tokens.iter().any(|&m| m != n) {
                return Err(Error::invalid(format!(
                    "synchronized masking needs equal sensor token counts, got {sensor_tokens:?}"
                )));
            }
            SensorMasks::Shared(synchronized_mask(n, cfg.sensor_ratio, rng)?)
        }
        MaskStrategy::Random => SensorMasks::PerModality(
            sensor_tokens
                .iter()
                .map(|&n| {
                    Ok(SensorMask {
                        num_time_tokens: n,
                        masked_time_indices: random_mask(n, cfg.sensor_ratio, rng)?,
                        ratio: cfg.sensor_ratio,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(MaskPlan {
        video,
        sensors,
        strategy: cfg.strategy,
        stream_id: rng.stream_id(),
    })
}

/// Splits `tokens` into the visible subsequence (original order and position
/// tags preserved) and the masked row indices.
pub fn apply_mask(
    g: &mut Graph,
    tokens: &TokenSequence,
    masked: &[usize],
) -> Result<(TokenSequence, Vec<usize>)> {
    let n = tokens.len();
    let mut is_masked = vec![false; n];
    for &i in masked {
        if i >= n {
            return Err(Error::invalid(format!("mask index {i} out of range for {n} tokens")));
        }
        is_masked[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
    let masked_positions: Vec<usize> = (0..n).filter(|&i| is_masked[i]).collect();
    let visible = g.gather_rows(tokens.tokens, &keep)?;
    let positions: Vec<Position> = keep.iter().map(|&i| tokens.positions[i]).collect();
    Ok((
        TokenSequence {
            tokens: visible,
            positions,
        },
        masked_positions,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn rounding_rule() {
        assert_eq!(masked_count(0.85, 20), 17);
        assert_eq!(masked_count(0.5, 4), 2);
        assert_eq!(masked_count(0.75, 16), 12);
        assert_eq!(masked_count(0.85, 10), 9);
        assert_eq!(masked_count(0.85, 4), 3);
        assert_eq!(masked_count(0.5, 5), 3);
        assert_eq!(masked_count(1.0, 7), 7);
        assert_eq!(masked_count(0.0, 7), 0);
    }

    #[test]
    fn tube_examples() {
        let mut r = RngStream::new(0, 0);
        let m = tube_mask((2, 4, 4), 0.75, &mut r).unwrap();
        assert_eq!(m.count(), 24);
        assert!(m.is_tube());
        assert_eq!(tube_mask((2, 4, 4), 0.0, &mut r).unwrap().count(), 0);
        assert_eq!(tube_mask((2, 4, 4), 1.0, &mut r).unwrap().count(), 32);
        assert!(tube_mask((2, 4, 4), 1.1, &mut r).is_err());
        assert!(tube_mask((2, 4, 4), -0.1, &mut r).is_err());
    }

    #[test]
    fn synchronized_examples() {
        let mut r = RngStream::new(0, 0);
        assert_eq!(synchronized_mask(20, 0.85, &mut r).unwrap().masked_time_indices.len(), 17);
        assert_eq!(synchronized_mask(4, 0.5, &mut r).unwrap().masked_time_indices.len(), 2);
        let plan = plan_masks(&MaskConfig::default(), (4, 2, 2), &[16, 16, 16], &mut r).unwrap();
        assert_eq!(plan.sensors.for_modality(0), plan.sensors.for_modality(2));
        assert!(std::ptr::eq(plan.sensors.for_modality(0), plan.sensors.for_modality(1)));
        assert!(synchronized_mask(4, 2.0, &mut r).is_err());
    }

    #[test]
    fn synchronized_rejects_unequal_token_counts() {
        let mut r = RngStream::new(0, 0);
        assert!(plan_masks(&MaskConfig::default(), (4, 2, 2), &[16, 8], &mut r).is_err());
    }

    #[test]
    fn random_examples() {
        let mut r = RngStream::new(0, 0);
        assert_eq!(random_mask(20, 0.85, &mut r).unwrap().len(), 17);
        assert!(random_mask(20, 0.0, &mut r).unwrap().is_empty());
        assert!(random_mask(20, 1.5, &mut r).is_err());
    }

    #[test]
    fn same_stream_same_mask() {
        let a = tube_mask((4, 6, 6), 0.85, &mut RngStream::new(9, 3)).unwrap();
        let b = tube_mask((4, 6, 6), 0.85, &mut RngStream::new(9, 3)).unwrap();
        assert_eq!(a, b);
    }

    fn seq(g: &mut Graph, n: usize) -> TokenSequence {
        let t = Tensor::matrix(n, 2, (0..2 * n).map(|v| v as f64).collect()).unwrap();
        TokenSequence {
            tokens: g.constant(t),
            positions: (0..n).map(|t| Position::Sensor { modality: 0, t }).collect(),
        }
    }

    #[test]
    fn apply_mask_examples() {
        let mut g = Graph::new();
        let s = seq(&mut g, 4);

        let (vis, masked) = apply_mask(&mut g, &s, &[]).unwrap();
        assert_eq!(g.value(vis.tokens), g.value(s.tokens));
        assert_eq!(vis.positions, s.positions);
        assert!(masked.is_empty());

        let (vis, masked) = apply_mask(&mut g, &s, &[0, 1, 2, 3]).unwrap();
        assert!(vis.is_empty());
        assert_eq!(masked, vec![0, 1, 2, 3]);

        let (vis, masked) = apply_mask(&mut g, &s, &[3, 1]).unwrap();
        assert_eq!(masked, vec![1, 3]);
        assert_eq!(g.value(vis.tokens).data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(
            vis.positions,
            vec![Position::Sensor { modality: 0, t: 0 }, Position::Sensor { modality: 0, t: 2 }]
        );

        assert!(apply_mask(&mut g, &s, &[4]).is_err());
    }
}
