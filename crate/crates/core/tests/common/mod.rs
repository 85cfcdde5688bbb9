//! Independent oracles shared by the property suite and the acceptance gate.
#![allow(dead_code)]

use mumae::embedding::{Position, TokenLayout, TokenSequence};
use mumae::mae::plan_indices;
use mumae::masking::{apply_mask, plan_masks, tube_mask, MaskConfig, MaskStrategy};
use mumae::numerics::{Graph, RngStream, StreamKind, Tensor};
use mumae::oneshot::classify;

pub const RATIOS_PERCENT: [u64; 6] = [0, 50, 75, 85, 95, 100];
pub const GRIDS: [(usize, usize, usize); 3] = [(4, 2, 2), (3, 4, 5), (2, 3, 3)];
pub const SENSOR_TOKENS: [usize; 3] = [16, 7, 10];

/// Round-half-up of `percent/100 × n` in integer arithmetic.
pub fn expected_count(percent: u64, n: usize) -> usize {
    ((percent as usize * n + 50) / 100).min(n)
}

fn token_sequence(g: &mut Graph, layout: &TokenLayout) -> TokenSequence {
    let mut positions = Vec::new();
    for m in layout.modalities() {
        positions.extend(layout.modality_positions(m));
    }
    TokenSequence {
        tokens: g.constant(Tensor::zeros(&[positions.len(), 1])),
        positions,
    }
}

/// Every masking invariant for one seed; returns failure descriptions.
pub fn masking_failures(seed: u64) -> Vec<String> {
    let mut fails = Vec::new();
    for &percent in &RATIOS_PERCENT {
        let ratio = percent as f64 / 100.0;
        for &grid in &GRIDS {
            let (gt, gh, gw) = grid;
            let mut rng = RngStream::derive(seed, StreamKind::Mask, &[percent, (gt * 100 + gh * 10 + gw) as u64]);
            let m = match tube_mask(grid, ratio, &mut rng) {
                Ok(m) => m,
                Err(e) => {
                    fails.push(format!("seed {seed} ratio {ratio} grid {grid:?}: {e}"));
                    continue;
                }
            };
            let spatial = gh * gw;
            for s in 0..spatial {
                let first = m.masked[s];
                if (1..gt).any(|t| m.masked[t * spatial + s] != first) {
                    fails.push(format!("seed {seed} ratio {ratio} grid {grid:?}: column {s} is not a tube"));
                }
            }
            let in_frame0 = (0..spatial).filter(|&s| m.masked[s]).count();
            if in_frame0 != expected_count(percent, spatial) || m.count() != gt * in_frame0 {
                fails.push(format!(
                    "seed {seed} ratio {ratio} grid {grid:?}: {in_frame0} masked per frame, want {}",
                    expected_count(percent, spatial)
                ));
            }
        }
        for &n in &SENSOR_TOKENS {
            for strategy in [MaskStrategy::Synchronized, MaskStrategy::Random] {
                let layout = TokenLayout {
                    video_grid: (4, 2, 2),
                    sensor_tokens: vec![n; 4],
                };
                let cfg = MaskConfig {
                    strategy,
                    video_ratio: ratio,
                    sensor_ratio: ratio,
                };
                let mut rng = RngStream::derive(seed, StreamKind::Mask, &[percent, n as u64, strategy as u64]);
                let plan = match plan_masks(&cfg, layout.video_grid, &layout.sensor_tokens, &mut rng) {
                    Ok(p) => p,
                    Err(e) => {
                        fails.push(format!("seed {seed} ratio {ratio} n {n} {strategy}: {e}"));
                        continue;
                    }
                };
                let local = plan_indices(&plan, &layout);
                for (i, idx) in local.iter().enumerate().skip(1) {
                    let distinct = idx.windows(2).all(|w| w[0] < w[1]) && idx.iter().all(|&t| t < n);
                    if idx.len() != expected_count(percent, n) || !distinct {
                        fails.push(format!("seed {seed} ratio {ratio} n {n} {strategy}: sensor {i} masks {idx:?}"));
                    }
                }
                if strategy == MaskStrategy::Synchronized {
                    // What the encoder sees: visible time indices per stream.
                    let mut g = Graph::new();
                    let seq = token_sequence(&mut g, &layout);
                    let mut global = Vec::new();
                    let mut offset = 0;
                    for (m, idx) in layout.modalities().into_iter().zip(&local) {
                        global.extend(idx.iter().map(|&i| offset + i));
                        offset += layout.modality_positions(m).len();
                    }
                    let (visible, _) = apply_mask(&mut g, &seq, &global).expect("valid indices");
                    let times = |k: usize| -> Vec<usize> {
                        visible
                            .positions
                            .iter()
                            .filter_map(|p| match p {
                                Position::Sensor { modality, t } if *modality == k => Some(*t),
                                _ => None,
                            })
                            .collect()
                    };
                    let t0 = times(0);
                    for k in 1..4 {
                        if times(k) != t0 {
                            fails.push(format!("seed {seed} ratio {ratio} n {n}: sensor {k} visible times differ"));
                        }
                    }
                }
            }
        }
    }
    fails
}

/// `exp(−(1 − cos))` normalized, written out directly.
pub fn classify_direct(query: &[f64], supports: &[Vec<f64>]) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let w: Vec<f64> = supports
        .iter()
        .map(|s| {
            let cos = dot(query, s) / (dot(query, query).sqrt() * dot(s, s).sqrt());
            (-(1.0 - cos)).exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// One random classifier trial; returns a failure description if any.
pub fn classify_trial(seed: u64) -> Option<String> {
    let mut r = RngStream::derive(seed, StreamKind::Episode, &[9, 9]);
    let d = 2 + (r.next_u64() % 15) as usize;
    let c = 2 + (r.next_u64() % 9) as usize;
    let scale = 10f64.powf(r.uniform_in(-2.0, 2.0));
    let vec = |r: &mut RngStream| -> Vec<f64> { (0..d).map(|_| scale * r.normal()).collect() };
    let q = vec(&mut r);
    let supports: Vec<Vec<f64>> = (0..c).map(|_| vec(&mut r)).collect();
    let p = match classify(&q, &supports) {
        Ok(p) => p,
        Err(e) => return Some(format!("trial {seed}: {e}")),
    };
    let want = classify_direct(&q, &supports);
    let max_diff = p.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if max_diff > 1e-10 {
        return Some(format!("trial {seed}: deviation {max_diff:e}"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Some(format!("trial {seed}: probabilities sum to {total}"));
    }
    let dist = |s: &Vec<f64>| {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        1.0 - dot(&q, s) / (dot(&q, &q).sqrt() * dot(s, s).sqrt())
    };
    let argmax = (0..c).max_by(|&a, &b| p[a].total_cmp(&p[b])).expect("nonempty");
    let argmin = (0..c).min_by(|&a, &b| dist(&supports[a]).total_cmp(&dist(&supports[b]))).expect("nonempty");
    if argmax != argmin && (dist(&supports[argmax]) - dist(&supports[argmin])).abs() > 1e-12 {
        return Some(format!("trial {seed}: argmax {argmax} but nearest {argmin}"));
    }
    None
}
