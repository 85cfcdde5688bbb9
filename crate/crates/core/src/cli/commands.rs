//! The harness commands, callable from the binary and from tests.

use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::dataset::{self, Dataset};
use super::metrics::{run_id, MetricRecord, MetricsWriter, Phase};
use crate::error::{Error, Result};
use crate::mae::pretrain;
use crate::model::{init_params, layout, FusionMode};
use crate::numerics::ParamStore;
use crate::oneshot::{evaluate, finetune, EvalReport};
use crate::synthdata::MultimodalSample;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MissingData(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

/// Metrics file written next to an artifact.
pub fn metrics_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".metrics");
    PathBuf::from(s)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

/// Config embedded in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<RunConfig> {
    let ck = Checkpoint::load(path)?;
    RunConfig::parse(&ck.config_text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))
}

pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<String> {
    dataset::generate(cfg, out, force)
}

/// Fresh parameters for `cfg` on `data`.
pub fn initial_params(cfg: &RunConfig, data: &Dataset) -> Result<ParamStore> {
    init_params(&data.spec, &cfg.model(), cfg.seed)
}

/// Fresh parameters overwritten by a checkpoint, which must hold exactly the
/// same arrays with the same shapes.
pub fn restore_params(cfg: &RunConfig, data: &Dataset, ck: &Checkpoint) -> Result<ParamStore> {
    let mut p = initial_params(cfg, data)?;
    if ck.params.len() != p.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} arrays, model has {}",
            ck.params.len(),
            p.len()
        )));
    }
    for (name, value) in ck.params.iter() {
        let slot = p
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected array `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "array `{name}` has shape {:?}, model expects {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value.clone();
    }
    Ok(p)
}

fn save(cfg: &RunConfig, params: ParamStore, out: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint {
        params,
        config_text: cfg.to_text(),
        seed: cfg.seed,
    };
    ck.save(out)?;
    Ok(ck)
}

fn meta_train(data: &Dataset) -> Result<Vec<MultimodalSample>> {
    if data.split.meta_train.is_empty() {
        return Err(Error::MissingData("dataset has no meta-train classes".into()));
    }
    data.load_classes(&data.split.meta_train)
}

/// Masked-autoencoder pretraining on meta-train samples. Writes the
/// checkpoint to `out` and one record per epoch to `out.metrics`.
pub fn pretrain_cmd(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<Vec<f64>> {
    let model = cfg.model();
    let lay = layout(&data.spec, &model)?;
    let samples = meta_train(data)?;
    let refs: Vec<&MultimodalSample> = samples.iter().collect();
    let mut params = initial_params(cfg, data)?;
    let run = run_id(&["pretrain", &cfg.to_text()]);
    let mut metrics = MetricsWriter::create(&metrics_path(out))?;
    let mut failed = None;
    let curve = pretrain(&refs, &mut params, &lay, &model.mae(), &cfg.pretrain, cfg.seed, |e, loss| {
        if failed.is_none() {
            failed = metrics
                .write(&MetricRecord::new(&run, Phase::Pretrain, e).num("loss", loss))
                .err();
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    save(cfg, params, out)?;
    Ok(curve)
}

/// Where finetuning starts from.
#[derive(Clone, Debug)]
pub enum Init {
    Scratch,
    Checkpoint(PathBuf),
}

/// Episodic finetuning on meta-train classes. `cfg.fusion_mode` selects the
/// fusion arm.
pub fn finetune_cmd(cfg: &RunConfig, data: &Dataset, init: &Init, out: &Path) -> Result<Vec<f64>> {
    if data.split.meta_train.len() < 2 {
        return Err(Error::invalid(format!(
            "finetuning needs at least 2 meta-train classes, the manifest marks {}",
            data.split.meta_train.len()
        )));
    }
    let model = cfg.model();
    let lay = layout(&data.spec, &model)?;
    let mut params = match init {
        Init::Scratch => initial_params(cfg, data)?,
        Init::Checkpoint(p) => restore_params(cfg, data, &Checkpoint::load(p)?)?,
    };
    let samples = meta_train(data)?;
    let origin = match init {
        Init::Scratch => "scratch".to_string(),
        Init::Checkpoint(p) => format!("{:08x}", crc32fast::hash(&std::fs::read(p)?)),
    };
    let run = run_id(&["finetune", &cfg.to_text(), &origin]);
    let mut metrics = MetricsWriter::create(&metrics_path(out))?;
    let mut failed = None;
    let log = finetune(
        &mut params,
        &samples,
        &data.split.meta_train,
        &lay,
        &model,
        &cfg.finetune,
        cfg.seed,
        |ep, loss, acc| {
            if failed.is_none() {
                failed = metrics
                    .write(&MetricRecord::new(&run, Phase::Finetune, ep).num("loss", loss).num("accuracy", acc))
                    .err();
            }
        },
    )?;
    if let Some(e) = failed {
        return Err(e);
    }
    save(cfg, params, out)?;
    Ok(log.losses)
}

/// One-shot evaluation on meta-test classes with `cfg.eval_episodes`
/// episodes. Per-episode records and a summary go to `metrics_out`.
pub fn eval_cmd(cfg: &RunConfig, data: &Dataset, checkpoint: &Path, metrics_out: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let params = restore_params(cfg, data, &ck)?;
    eval_params(cfg, data, &params, &format!("{:08x}", crc32fast::hash(&ck.to_bytes()?)), metrics_out)
}

pub fn eval_params(cfg: &RunConfig, data: &Dataset, params: &ParamStore, origin: &str, metrics_out: &Path) -> Result<EvalReport> {
    let model = cfg.model();
    let lay = layout(&data.spec, &model)?;
    if data.split.meta_test.is_empty() {
        return Err(Error::MissingData("dataset has no meta-test classes".into()));
    }
    let samples = data.load_classes(&data.split.meta_test)?;
    let report = evaluate(
        params,
        &samples,
        &data.split.meta_test,
        &lay,
        &model,
        &cfg.episode_shape(),
        cfg.eval_episodes,
        cfg.seed,
    )?;
    let run = run_id(&["eval", &cfg.to_text(), origin]);
    let mut metrics = MetricsWriter::create(metrics_out)?;
    for (e, &a) in report.per_episode.iter().enumerate() {
        metrics.write(&MetricRecord::new(&run, Phase::Eval, e).num("accuracy", a))?;
    }
    metrics.write(&summary_record(&run, &report))?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), super::metrics::fmt_value)
}

/// Final eval record, stepped one past the last episode.
pub fn summary_record(run: &str, r: &EvalReport) -> MetricRecord {
    MetricRecord::new(run, Phase::Eval, r.episodes)
        .text("summary", "true")
        .num("mean", r.mean)
        .text("sd", &opt(r.sd))
        .text("ci95", &opt(r.ci95))
        .num("episodes", r.episodes as f64)
}

/// Human-readable report line.
pub fn format_report(r: &EvalReport) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "undefined (1 episode)".to_string(), |v| format!("{v:.4}"));
    format!(
        "episodes {}\nmean accuracy {:.4}\nsd {}\nci95 ±{}",
        r.episodes,
        r.mean,
        f(r.sd),
        f(r.ci95)
    )
}

/// Applies the `--no-cross` flag.
pub fn with_no_cross(mut cfg: RunConfig, no_cross: bool) -> RunConfig {
    if no_cross {
        cfg.fusion_mode = FusionMode::NoCross;
    }
    cfg
}
