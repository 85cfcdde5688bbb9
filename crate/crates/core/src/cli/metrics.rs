//! Line-oriented metric records.
//!
//! One record per line, space-separated `key:value` fields, always starting
//! with `run:<id> phase:<phase> step:<n>`. Values never contain spaces.
//! Wall-clock durations go to a separate `.timing` sidecar so the metrics file
//! itself stays byte-reproducible.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
    Eval,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Eval => "eval",
        }
    }
}

/// Deterministic run id from whatever identifies the run.
pub fn run_id(parts: &[&str]) -> String {
    let mut h = crc32fast::Hasher::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update(&[0]);
    }
    format!("{:08x}", h.finalize())
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt_value(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub run: String,
    pub phase: Phase,
    pub step: usize,
    pub values: Vec<(String, String)>,
}

impl MetricRecord {
    pub fn new(run: &str, phase: Phase, step: usize) -> Self {
        Self {
            run: run.to_string(),
            phase,
            step,
            values: Vec::new(),
        }
    }

    pub fn num(mut self, key: &str, v: f64) -> Self {
        self.values.push((key.to_string(), fmt_value(v)));
        self
    }

    pub fn text(mut self, key: &str, v: &str) -> Self {
        debug_assert!(!v.contains(char::is_whitespace));
        self.values.push((key.to_string(), v.to_string()));
        self
    }

    pub fn line(&self) -> String {
        let mut s = format!("run:{} phase:{} step:{}", self.run, self.phase.as_str(), self.step);
        for (k, v) in &self.values {
            let _ = write!(s, " {k}:{v}");
        }
        s
    }

    /// Parses one line back into `(key, value)` pairs in order.
    pub fn fields(line: &str) -> Vec<(&str, &str)> {
        line.split(' ').filter_map(|f| f.split_once(':')).collect()
    }
}

/// Appends records to a metrics file and durations to its sidecar.
pub struct MetricsWriter {
    file: File,
    timing: File,
    started: Instant,
    last_step: Option<(Phase, usize)>,
}

pub fn timing_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".timing");
    PathBuf::from(s)
}

impl MetricsWriter {
    /// Truncates `path`; a rerun replaces the previous run's records.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        let timing = File::create(timing_path(path))?;
        Ok(Self {
            file,
            timing,
            started: Instant::now(),
            last_step: None,
        })
    }

    /// Opens `path` for appending.
    pub fn append(path: &Path) -> Result<Self> {
        let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p);
        Ok(Self {
            file: open(path)?,
            timing: open(&timing_path(path))?,
            started: Instant::now(),
            last_step: None,
        })
    }

    pub fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        if let Some((phase, step)) = self.last_step {
            debug_assert!(phase != rec.phase || rec.step > step, "step index must increase within a phase");
        }
        self.last_step = Some((rec.phase, rec.step));
        writeln!(self.file, "{}", rec.line())?;
        writeln!(
            self.timing,
            "run:{} phase:{} step:{} wall_s:{:.3}",
            rec.run,
            rec.phase.as_str(),
            rec.step,
            self.started.elapsed().as_secs_f64()
        )?;
        Ok(())
    }
}
