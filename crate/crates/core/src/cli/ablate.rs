//! Ablation sweeps: pretrain, finetune and evaluate one cell per setting.
//!
//! A sweep file holds either axis lines, whose cartesian product gives the
//! cells in the order written,
//!
//! ```text
//! mask.strategy = synchronized random
//! mask.ratio = 0.75 0.85
//! pretraining = on scratch
//! fusion = cross no-cross
//! fusion.scaling = sqrt exp
//! ```
//!
//! or explicit `cell = <strategy> <ratio> <pretraining> <fusion> <scaling>`
//! lines. Axes left out take the run config's value. The names `table3` and
//! `table2` select built-in sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use super::checkpoint::Checkpoint;
use super::commands::{eval_params, initial_params, metrics_path, restore_params};
use super::config::RunConfig;
use super::dataset::Dataset;
use super::metrics::{fmt_value, run_id, MetricRecord, MetricsWriter, Phase};
use crate::error::{Error, Result};
use crate::fusion::Scaling;
use crate::mae::pretrain;
use crate::masking::MaskStrategy;
use crate::model::{layout, FusionMode};
use crate::oneshot::{finetune, EvalReport};
use crate::synthdata::MultimodalSample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub pretrained: bool,
    pub fusion: FusionMode,
    pub scaling: Scaling,
}

impl Cell {
    fn key(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.strategy,
            fmt_value(self.ratio),
            if self.pretrained { "on" } else { "scratch" },
            self.fusion,
            self.scaling
        )
    }

    /// Settings that pretraining depends on.
    fn pretrain_key(&self) -> (String, String) {
        (self.strategy.to_string(), fmt_value(self.ratio))
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.mask.strategy = self.strategy;
        c.mask.video_ratio = self.ratio;
        c.mask.sensor_ratio = self.ratio;
        c.fusion_mode = self.fusion;
        c.fusion.scaling = self.scaling;
        c
    }
}

pub const TABLE3: &str = "\
cell = random 0.85 on cross sqrt
cell = synchronized 0.75 on cross sqrt
cell = synchronized 0.85 on cross sqrt
cell = synchronized 0.95 on cross sqrt
";

pub const TABLE2: &str = "\
pretraining = on scratch
fusion = cross no-cross
";

fn parse_pretraining(v: &str) -> Result<bool> {
    match v {
        "on" => Ok(true),
        "scratch" | "off" => Ok(false),
        other => Err(Error::Config(format!("unknown pretraining setting `{other}`"))),
    }
}

fn parse_ratio(v: &str) -> Result<f64> {
    let r: f64 = v.parse().map_err(|_| Error::Config(format!("invalid mask ratio `{v}`")))?;
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("mask ratio {r} outside [0, 1]")));
    }
    Ok(r)
}

/// Resolves a preset name or reads a sweep file.
pub fn sweep_text(spec: &str) -> Result<String> {
    match spec {
        "table3" => Ok(TABLE3.to_string()),
        "table2" => Ok(TABLE2.to_string()),
        path => std::fs::read_to_string(path).map_err(|e| Error::Config(format!("sweep `{path}`: {e}"))),
    }
}

/// Cells of a sweep, duplicates removed. Returns the cells and one warning per
/// dropped duplicate.
pub fn parse_sweep(text: &str, base: &RunConfig) -> Result<(Vec<Cell>, Vec<String>)> {
    let mut strategies = vec![base.mask.strategy];
    let mut ratios = vec![base.mask.video_ratio];
    let mut pretraining = vec![true];
    let mut fusions = vec![base.fusion_mode];
    let mut scalings = vec![base.fusion.scaling];
    let mut explicit = Vec::new();
    let mut axes = false;
    let mut seen_axes = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep line {}: expected `key = values`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        let vals: Vec<&str> = v.split_whitespace().collect();
        if vals.is_empty() {
            return Err(Error::Config(format!("sweep line {}: `{k}` has no values", n + 1)));
        }
        if k != "cell" {
            if seen_axes.contains(&k.to_string()) {
                return Err(Error::Config(format!("sweep axis `{k}` given twice")));
            }
            seen_axes.push(k.to_string());
            axes = true;
        }
        match k {
            "mask.strategy" => strategies = vals.iter().map(|s| MaskStrategy::from_str(s)).collect::<Result<_>>()?,
            "mask.ratio" => ratios = vals.iter().map(|s| parse_ratio(s)).collect::<Result<_>>()?,
            "pretraining" => pretraining = vals.iter().map(|s| parse_pretraining(s)).collect::<Result<_>>()?,
            "fusion" => fusions = vals.iter().map(|s| FusionMode::from_str(s)).collect::<Result<_>>()?,
            "fusion.scaling" => scalings = vals.iter().map(|s| Scaling::from_str(s)).collect::<Result<_>>()?,
            "cell" => {
                if vals.len() != 5 {
                    return Err(Error::Config(format!(
                        "sweep line {}: a cell needs strategy, ratio, pretraining, fusion and scaling",
                        n + 1
                    )));
                }
                explicit.push(Cell {
                    strategy: MaskStrategy::from_str(vals[0])?,
                    ratio: parse_ratio(vals[1])?,
                    pretrained: parse_pretraining(vals[2])?,
                    fusion: FusionMode::from_str(vals[3])?,
                    scaling: Scaling::from_str(vals[4])?,
                });
            }
            other => return Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
    if axes && !explicit.is_empty() {
        return Err(Error::Config("a sweep uses either axis lines or cell lines, not both".into()));
    }
    let mut cells = explicit;
    if axes {
        for &strategy in &strategies {
            for &ratio in &ratios {
                for &pretrained in &pretraining {
                    for &fusion in &fusions {
                        for &scaling in &scalings {
                            cells.push(Cell {
                                strategy,
                                ratio,
                                pretrained,
                                fusion,
                                scaling,
                            });
                        }
                    }
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("sweep defines no cells".into()));
    }
    let mut unique: Vec<Cell> = Vec::new();
    let mut warnings = Vec::new();
    for c in cells {
        if unique.iter().any(|u| u.key() == c.key()) {
            warnings.push(format!("duplicate cell `{}` ignored", c.key()));
        } else {
            unique.push(c);
        }
    }
    Ok((unique, warnings))
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: std::result::Result<EvalReport, String>,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub results: Vec<CellResult>,
    pub table: String,
    pub warnings: Vec<String>,
}

impl AblationOutcome {
    pub fn all_ok(&self) -> bool {
        self.results.iter().all(|r| r.outcome.is_ok())
    }
}

/// Runs `jobs` over `workers` threads; results keep the input order.
fn run_parallel<T: Sync, R: Send>(jobs: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = Mutex::new(0usize);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                out.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    out.into_inner().expect("result lock").into_iter().map(|r| r.expect("every job ran")).collect()
}

fn pretrained_checkpoint(base: &RunConfig, data: &Dataset, cell: &Cell, train: &[&MultimodalSample], out_dir: &Path) -> Result<PathBuf> {
    let cfg = cell.apply(base);
    let model = cfg.model();
    let lay = layout(&data.spec, &model)?;
    let mut params = initial_params(&cfg, data)?;
    let path = out_dir.join(format!("pretrain_{}_{}.ckpt", cell.strategy, fmt_value(cell.ratio)));
    let run = run_id(&["ablate-pretrain", &cfg.to_text()]);
    let mut metrics = MetricsWriter::create(&metrics_path(&path))?;
    let mut failed = None;
    pretrain(train, &mut params, &lay, &model.mae(), &cfg.pretrain, cfg.seed, |e, loss| {
        if failed.is_none() {
            failed = metrics.write(&MetricRecord::new(&run, Phase::Pretrain, e).num("loss", loss)).err();
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    Checkpoint {
        params,
        config_text: cfg.to_text(),
        seed: cfg.seed,
    }
    .save(&path)?;
    Ok(path)
}

fn run_cell(base: &RunConfig, data: &Dataset, cell: &Cell, train: &[MultimodalSample], pretrained: Option<&Path>, out_dir: &Path, index: usize) -> Result<EvalReport> {
    let cfg = cell.apply(base);
    let model = cfg.model();
    let lay = layout(&data.spec, &model)?;
    let mut params = match pretrained {
        Some(p) => restore_params(&cfg, data, &Checkpoint::load(p)?)?,
        None => initial_params(&cfg, data)?,
    };
    finetune(&mut params, train, &data.split.meta_train, &lay, &model, &cfg.finetune, cfg.seed, |_, _, _| {})?;
    eval_params(&cfg, data, &params, &cell.key(), &out_dir.join(format!("cell_{index}.metrics")))
}

/// Runs every cell of the sweep and writes `table.txt` and `metrics.txt` into
/// `out_dir`. Pretraining is shared between cells that differ only after it.
pub fn ablate(base: &RunConfig, data: &Dataset, sweep: &str, out_dir: &Path, workers: usize) -> Result<AblationOutcome> {
    let (cells, warnings) = parse_sweep(&sweep_text(sweep)?, base)?;
    for c in &cells {
        c.apply(base).validate()?;
    }
    if data.split.meta_train.len() < 2 {
        return Err(Error::invalid("ablation needs at least 2 meta-train classes"));
    }
    std::fs::create_dir_all(out_dir)?;
    let train = data.load_classes(&data.split.meta_train)?;
    let refs: Vec<&MultimodalSample> = train.iter().collect();

    let mut keys: Vec<Cell> = Vec::new();
    for c in cells.iter().filter(|c| c.pretrained) {
        if !keys.iter().any(|k| k.pretrain_key() == c.pretrain_key()) {
            keys.push(*c);
        }
    }
    let pre = run_parallel(&keys, workers, |c| pretrained_checkpoint(base, data, c, &refs, out_dir).map_err(|e| e.to_string()));
    let pre: BTreeMap<(String, String), std::result::Result<PathBuf, String>> =
        keys.iter().map(|c| c.pretrain_key()).zip(pre).collect();

    let indexed: Vec<(usize, Cell)> = cells.iter().copied().enumerate().collect();
    let outcomes = run_parallel(&indexed, workers, |&(i, c)| {
        let start = if c.pretrained {
            match &pre[&c.pretrain_key()] {
                Ok(p) => Some(p.as_path()),
                Err(e) => return Err(format!("pretraining failed: {e}")),
            }
        } else {
            None
        };
        run_cell(base, data, &c, &train, start, out_dir, i).map_err(|e| e.to_string())
    });
    let results: Vec<CellResult> = cells
        .iter()
        .zip(outcomes)
        .map(|(&cell, outcome)| CellResult { cell, outcome })
        .collect();

    let table = render_table(&results);
    std::fs::write(out_dir.join("table.txt"), &table)?;
    let run = run_id(&["ablate", &base.to_text(), &sweep_text(sweep)?]);
    let mut m = String::new();
    for (i, r) in results.iter().enumerate() {
        let c = &r.cell;
        let mut rec = MetricRecord::new(&run, Phase::Eval, i)
            .text("strategy", &c.strategy.to_string())
            .num("ratio", c.ratio)
            .text("pretraining", if c.pretrained { "on" } else { "scratch" })
            .text("fusion", &c.fusion.to_string())
            .text("scaling", &c.scaling.to_string());
        rec = match &r.outcome {
            Ok(rep) => rec
                .text("status", "ok")
                .num("accuracy", rep.mean)
                .text("sd", &rep.sd.map_or("undefined".into(), fmt_value))
                .text("ci95", &rep.ci95.map_or("undefined".into(), fmt_value)),
            Err(_) => rec.text("status", "FAILED"),
        };
        let _ = writeln!(m, "{}", rec.line());
    }
    std::fs::write(out_dir.join("metrics.txt"), m)?;
    Ok(AblationOutcome { results, table, warnings })
}

/// Aligned plain-text table, one row per cell in sweep order.
pub fn render_table(results: &[CellResult]) -> String {
    let header = ["strategy", "ratio", "pretraining", "fusion", "scaling", "accuracy", "sd"];
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let c = &r.cell;
            let mut row = vec![
                c.strategy.to_string(),
                format!("{:.0}%", c.ratio * 100.0),
                if c.pretrained { "on" } else { "scratch" }.to_string(),
                c.fusion.to_string(),
                c.scaling.to_string(),
            ];
            match &r.outcome {
                Ok(rep) => {
                    row.push(format!("{:.2}%", rep.mean * 100.0));
                    row.push(rep.sd.map_or("-".into(), |s| format!("{:.2}", s * 100.0)));
                }
                Err(_) => {
                    row.push("FAILED".into());
                    row.push("-".into());
                }
            }
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|j| rows.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0))
        .collect();
    let fmt_row = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = fmt_row(header.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in &rows {
        out.push_str(&fmt_row(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
