//! Episodic C-way K-shot learning: episode sampling, the cosine-softmax
//! nearest-prototype classifier, the episode loss, finetuning and evaluation.

use std::collections::BTreeMap;

use crate::embedding::TokenLayout;
use crate::error::{Error, Result};
use crate::model::{embed, embed_frozen, ModelConfig};
use crate::numerics::optim::SgdMomentum;
use crate::numerics::{Graph, ParamStore, RngStream, StreamKind, Tensor, Var};
use crate::synthdata::MultimodalSample;

/// Floor applied to the true-class probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Sample indices of every class present in a dataset.
#[derive(Clone, Debug, Default)]
pub struct ClassIndex {
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl ClassIndex {
    pub fn new(samples: &[MultimodalSample]) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class.entry(s.label).or_default().push(i);
        }
        Self { by_class }
    }

    pub fn samples_of(&self, class: usize) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }
}

/// One C-way K-shot task. Entries are `(dataset index, slot)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub queries: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            queries: 5,
        }
    }
}

impl EpisodeShape {
    /// Queries drawn from slot `k` (queries are dealt round-robin).
    pub fn queries_for_slot(&self, k: usize) -> usize {
        self.queries / self.ways + usize::from(k < self.queries % self.ways)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots == 0 || self.queries == 0 {
            return Err(Error::Config(format!(
                "episodes need at least 2 ways, 1 shot and 1 query, got {}-way {}-shot {} queries",
                self.ways, self.shots, self.queries
            )));
        }
        Ok(())
    }
}

/// Draws classes uniformly without replacement from `side`, then support and
/// query samples without replacement within each class.
pub fn sample_episode(index: &ClassIndex, side: &[usize], shape: &EpisodeShape, rng: &mut RngStream) -> Result<Episode> {
    shape.validate()?;
    if side.len() < shape.ways {
        return Err(Error::invalid(format!(
            "{}-way episode needs {} classes, split side has {}",
            shape.ways,
            shape.ways,
            side.len()
        )));
    }
    let classes: Vec<usize> = rng.choose(side.len(), shape.ways).into_iter().map(|i| side[i]).collect();
    let mut support = Vec::with_capacity(shape.ways * shape.shots);
    let mut queries = Vec::with_capacity(shape.queries);
    for (slot, &c) in classes.iter().enumerate() {
        let pool = index.samples_of(c);
        let need = shape.shots + shape.queries_for_slot(slot);
        if pool.len() < need {
            return Err(Error::invalid(format!(
                "class {c} has {} samples, episode needs {need}",
                pool.len()
            )));
        }
        let picked = rng.choose(pool.len(), need);
        support.extend(picked[..shape.shots].iter().map(|&i| (pool[i], slot)));
        queries.extend(picked[shape.shots..].iter().map(|&i| (pool[i], slot)));
    }
    Ok(Episode {
        classes,
        support,
        queries,
    })
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine distance of a zero vector is undefined"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// `p_k ∝ exp(−D_cos(query, s_k))`.
pub fn classify(query: &[f64], supports: &[Vec<f64>]) -> Result<Vec<f64>> {
    if supports.len() < 2 {
        return Err(Error::invalid(format!("classify needs at least 2 supports, got {}", supports.len())));
    }
    let logits = supports
        .iter()
        .map(|s| Ok(-cosine_distance(query, s)?))
        .collect::<Result<Vec<f64>>>()?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Mean over queries of `−log p_true`; the flag reports whether any true-class
/// probability was floored at [`PROB_FLOOR`].
pub fn episode_loss(probs: &[Vec<f64>], truth: &[usize]) -> Result<(f64, bool)> {
    if probs.len() != truth.len() || probs.is_empty() {
        return Err(Error::invalid(format!(
            "{} probability vectors for {} labels",
            probs.len(),
            truth.len()
        )));
    }
    let mut clamped = false;
    let mut sum = 0.0;
    for (p, &t) in probs.iter().zip(truth) {
        let pt = *p
            .get(t)
            .ok_or_else(|| Error::invalid(format!("label {t} outside {} classes", p.len())))?;
        if pt < PROB_FLOOR {
            clamped = true;
        }
        sum -= pt.max(PROB_FLOOR).ln();
    }
    Ok((sum / probs.len() as f64, clamped))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Class prototypes: mean of each slot's support embeddings.
pub fn prototypes(support: &[(Vec<f64>, usize)], ways: usize) -> Vec<Vec<f64>> {
    let dim = support.first().map_or(0, |(e, _)| e.len());
    let mut sums = vec![vec![0.0; dim]; ways];
    let mut counts = vec![0usize; ways];
    for (e, slot) in support {
        for (s, x) in sums[*slot].iter_mut().zip(e) {
            *s += x;
        }
        counts[*slot] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= c.max(1) as f64);
    }
    sums
}

/// Differentiable episode loss and per-query correctness from stacked query
/// `[Q × d]` and prototype `[C × d]` embeddings.
pub fn episode_loss_graph(g: &mut Graph, queries: Var, protos: Var, truth: &[usize]) -> Result<(Var, Vec<bool>)> {
    let qn = g.normalize_rows(queries)?;
    let pn = g.normalize_rows(protos)?;
    let sims = g.matmul_nt(qn, pn)?;
    // −D_cos = sim − 1; the constant shift leaves the softmax unchanged.
    let logp = g.log_softmax_rows(sims);
    let picked = g.pick_cols(logp, truth)?;
    let mean = g.mean(picked)?;
    let loss = g.scale(mean, -1.0);
    let s = g.value(sims);
    let correct = truth
        .iter()
        .enumerate()
        .map(|(i, &t)| argmax(s.row(i)) == t)
        .collect();
    Ok((loss, correct))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub episodes: usize,
    pub lr: f64,
    pub momentum: f64,
    pub shape: EpisodeShape,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            episodes: 3000,
            // Best pretrained-arm accuracy in a 0.001..0.01 sweep at the
            // default model size; larger steps wash out pretrained features.
            lr: 0.003,
            momentum: 0.9,
            shape: EpisodeShape::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneLog {
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
}

/// Episodic training on `side` classes with momentum SGD; every parameter is
/// updated.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    params: &mut ParamStore,
    dataset: &[MultimodalSample],
    side: &[usize],
    layout: &TokenLayout,
    model: &ModelConfig,
    cfg: &FinetuneConfig,
    seed: u64,
    mut on_episode: impl FnMut(usize, f64, f64),
) -> Result<FinetuneLog> {
    let index = ClassIndex::new(dataset);
    let mut opt = SgdMomentum::new(cfg.momentum);
    let mut log = FinetuneLog::default();
    for ep in 0..cfg.episodes {
        let mut rng = RngStream::derive(seed, StreamKind::Episode, &[0, ep as u64]);
        let episode = sample_episode(&index, side, &cfg.shape, &mut rng)?;
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let mut sup = Vec::new();
        for &(i, _) in &episode.support {
            sup.push(embed(&mut g, &dataset[i], layout, model, &b)?);
        }
        let mut qs = Vec::new();
        for &(i, _) in &episode.queries {
            qs.push(embed(&mut g, &dataset[i], layout, model, &b)?);
        }
        let protos = prototype_rows(&mut g, &sup, &episode.support, cfg.shape.ways)?;
        let queries = g.concat_rows(&qs)?;
        let truth: Vec<usize> = episode.queries.iter().map(|&(_, s)| s).collect();
        let (loss, correct) = episode_loss_graph(&mut g, queries, protos, &truth)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::invalid(format!("episode {ep} produced a non-finite loss")));
        }
        g.backward(loss)?;
        opt.step(params, &b.gradients(&g), cfg.lr);
        let acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
        on_episode(ep, lv, acc);
        log.losses.push(lv);
        log.accuracies.push(acc);
    }
    Ok(log)
}

/// Per-slot mean of support embedding rows, stacked `[C × d]`.
fn prototype_rows(g: &mut Graph, rows: &[Var], support: &[(usize, usize)], ways: usize) -> Result<Var> {
    let mut protos = Vec::with_capacity(ways);
    for slot in 0..ways {
        let members: Vec<Var> = rows
            .iter()
            .zip(support)
            .filter(|(_, &(_, s))| s == slot)
            .map(|(&v, _)| v)
            .collect();
        let stacked = g.concat_rows(&members)?;
        protos.push(g.mean_rows(stacked)?);
    }
    g.concat_rows(&protos)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean: f64,
    /// Sample standard deviation across episodes; undefined for one episode.
    pub sd: Option<f64>,
    /// `1.96·sd/√episodes`.
    pub ci95: Option<f64>,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_episode: Vec<f64>) -> Result<Self> {
        let n = per_episode.len();
        if n == 0 {
            return Err(Error::invalid("no episodes evaluated"));
        }
        let mean = per_episode.iter().sum::<f64>() / n as f64;
        let sd = (n > 1).then(|| {
            (per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        let ci95 = sd.map(|s| 1.96 * s / (n as f64).sqrt());
        Ok(Self {
            episodes: n,
            mean,
            sd,
            ci95,
            per_episode,
        })
    }
}

/// Accuracy of one episode given each sample's embedding.
pub fn episode_accuracy(episode: &Episode, embedding_of: impl Fn(usize) -> Vec<f64>, ways: usize) -> Result<f64> {
    let support: Vec<(Vec<f64>, usize)> = episode.support.iter().map(|&(i, s)| (embedding_of(i), s)).collect();
    let protos = prototypes(&support, ways);
    let mut correct = 0;
    for &(i, slot) in &episode.queries {
        let p = classify(&embedding_of(i), &protos)?;
        if argmax(&p) == slot {
            correct += 1;
        }
    }
    Ok(correct as f64 / episode.queries.len() as f64)
}

/// Accuracy over `episodes` episodes on `side` classes. Episode `e` draws from
/// its own stream `(seed, e)`, so the report does not depend on order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &ParamStore,
    dataset: &[MultimodalSample],
    side: &[usize],
    layout: &TokenLayout,
    model: &ModelConfig,
    shape: &EpisodeShape,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &c in side {
        for (i, s) in dataset.iter().enumerate().filter(|(_, s)| s.label == c) {
            cache.insert(i, embed_frozen(s, layout, model, params)?);
        }
    }
    evaluate_embeddings(dataset, side, |i| cache[&i].clone(), shape, episodes, seed)
}

/// [`evaluate`] with precomputed embeddings.
pub fn evaluate_embeddings(
    dataset: &[MultimodalSample],
    side: &[usize],
    embedding_of: impl Fn(usize) -> Vec<f64>,
    shape: &EpisodeShape,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let index = ClassIndex::new(dataset);
    let accs = (0..episodes)
        .map(|e| {
            let ep = sample_episode(&index, side, shape, &mut eval_stream(seed, e))?;
            episode_accuracy(&ep, &embedding_of, shape.ways)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_accuracies(accs)
}

pub fn eval_stream(seed: u64, episode: usize) -> RngStream {
    RngStream::derive(seed, StreamKind::Episode, &[1, episode as u64])
}

/// Stacks one-shot embeddings into `[n × d]`.
pub fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}
