//! On-disk synthetic dataset: a manifest plus one framed array file per sample.
//!
//! Manifest lines are `key = value`: the `data.*` generation keys,
//! `split.meta_train` / `split.meta_test` class lists, and one
//! `sample = <id> <class> <file>` line per sample.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::checkpoint::{read_arrays, write_arrays};
use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::{class_split, generate_sample, ClassSplit, DatasetSpec, MultimodalSample};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub id: u64,
    pub class: usize,
    pub file: String,
}

fn sample_file(id: u64) -> String {
    format!("sample_{id:06}.bin")
}

fn list(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes the dataset described by `cfg` into `dir`. Refuses a non-empty
/// directory unless `force`.
pub fn generate(cfg: &RunConfig, dir: &Path, force: bool) -> Result<String> {
    let spec = cfg.dataset_spec();
    spec.validate()?;
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() && !force {
        return Err(Error::invalid(format!(
            "{} exists and is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let split = class_split(spec.num_classes, cfg.test_classes, spec.seed)?;
    let mut manifest = String::from("# synthetic multimodal dataset\n");
    for line in cfg.to_text().lines().filter(|l| l.starts_with("data.")) {
        manifest.push_str(line);
        manifest.push('\n');
    }
    let _ = writeln!(manifest, "split.meta_train = {}", list(&split.meta_train));
    let _ = writeln!(manifest, "split.meta_test = {}", list(&split.meta_test));
    for c in 0..spec.num_classes {
        for i in 0..spec.samples_per_class {
            let s = generate_sample(&spec, c, i)?;
            let file = sample_file(s.sample_id);
            let mut arrays = vec![("video".to_string(), s.video)];
            arrays.extend(s.sensors.into_iter().enumerate().map(|(k, t)| (format!("sensor{k}"), t)));
            write_arrays(&dir.join(&file), &arrays)?;
            let _ = writeln!(manifest, "sample = {} {} {}", s.sample_id, c, file);
        }
    }
    std::fs::write(dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// An opened dataset directory. Every sample read is recorded so tests can
/// audit which classes a command touched.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub spec: DatasetSpec,
    pub split: ClassSplit,
    pub entries: Vec<Entry>,
    accessed: Mutex<BTreeSet<u64>>,
}

fn missing(dir: &Path, what: impl std::fmt::Display) -> Error {
    Error::MissingData(format!("{}: {what}", dir.display()))
}

fn parse_classes(v: &str) -> Option<Vec<usize>> {
    v.split_whitespace().map(|c| c.parse().ok()).collect()
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST)).map_err(|e| missing(dir, format!("cannot read manifest: {e}")))?;
        let mut cfg = RunConfig::default();
        let mut meta_train = None;
        let mut meta_test = None;
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || missing(dir, format!("manifest line {}: `{line}`", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "split.meta_train" => meta_train = Some(parse_classes(v).ok_or_else(bad)?),
                "split.meta_test" => meta_test = Some(parse_classes(v).ok_or_else(bad)?),
                "sample" => {
                    let f: Vec<&str> = v.split_whitespace().collect();
                    if f.len() != 3 {
                        return Err(bad());
                    }
                    entries.push(Entry {
                        id: f[0].parse().map_err(|_| bad())?,
                        class: f[1].parse().map_err(|_| bad())?,
                        file: f[2].to_string(),
                    });
                }
                _ if k.starts_with("data.") => cfg.set(k, v).map_err(|e| missing(dir, e))?,
                _ => return Err(bad()),
            }
        }
        let spec = cfg.dataset_spec();
        spec.validate().map_err(|e| missing(dir, e))?;
        let split = ClassSplit {
            meta_train: meta_train.ok_or_else(|| missing(dir, "manifest lacks split.meta_train"))?,
            meta_test: meta_test.ok_or_else(|| missing(dir, "manifest lacks split.meta_test"))?,
        };
        Ok(Self {
            root: dir.to_path_buf(),
            spec,
            split,
            entries,
            accessed: Mutex::new(BTreeSet::new()),
        })
    }

    fn load_entry(&self, e: &Entry) -> Result<MultimodalSample> {
        let path = self.root.join(&e.file);
        let arrays = read_arrays(&path).map_err(|err| missing(&path, err))?;
        let get = |name: &str| -> Result<Tensor> {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| missing(&path, format!("no `{name}` array")))
        };
        let v = &self.spec.video;
        let video = get("video")?;
        if video.shape() != [v.frames, v.height, v.width, v.channels] {
            return Err(missing(&path, format!("video shape {:?} does not match the manifest", video.shape())));
        }
        let mut sensors = Vec::new();
        for (k, s) in self.spec.sensors.iter().enumerate() {
            let t = get(&format!("sensor{k}"))?;
            if t.shape() != [s.length, s.channels] {
                return Err(missing(&path, format!("sensor{k} shape {:?} does not match the manifest", t.shape())));
            }
            sensors.push(t);
        }
        self.accessed.lock().expect("audit lock").insert(e.id);
        Ok(MultimodalSample {
            video,
            sensors,
            label: e.class,
            sample_id: e.id,
        })
    }

    /// Loads every sample of `classes`, in manifest order.
    pub fn load_classes(&self, classes: &[usize]) -> Result<Vec<MultimodalSample>> {
        let out: Vec<MultimodalSample> = self
            .entries
            .iter()
            .filter(|e| classes.contains(&e.class))
            .map(|e| self.load_entry(e))
            .collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(missing(&self.root, format!("no samples for classes {classes:?}")));
        }
        Ok(out)
    }

    /// Ids of every sample read so far.
    pub fn accessed(&self) -> BTreeSet<u64> {
        self.accessed.lock().expect("audit lock").clone()
    }

    /// Class of each sample id in the manifest.
    pub fn class_of(&self, id: u64) -> Option<usize> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::parse("data.num_classes = 4\ndata.samples_per_class = 2\ndata.test_classes = 2\n").unwrap()
    }

    #[test]
    fn generate_then_open() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&tiny(), dir.path(), false).unwrap();
        assert_eq!(manifest.lines().filter(|l| l.starts_with("sample =")).count(), 8);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.spec, tiny().dataset_spec());
        assert_eq!(ds.split.meta_train.len() + ds.split.meta_test.len(), 4);
        assert!(ds.accessed().is_empty());
        let train = ds.load_classes(&ds.split.meta_train).unwrap();
        assert_eq!(train.len(), 4);
        let fresh = generate_sample(&ds.spec, train[0].label, 0).unwrap();
        assert!(train[0].video.max_abs_diff(&fresh.video) < 1e-6);
        for id in ds.accessed() {
            assert!(ds.split.meta_train.contains(&ds.class_of(id).unwrap()));
        }
    }

    #[test]
    fn refuses_non_empty_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x"), "x").unwrap();
        assert!(generate(&tiny(), dir.path(), false).is_err());
        assert!(generate(&tiny(), dir.path(), true).is_ok());
    }

    #[test]
    fn missing_manifest_is_missing_data() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::MissingData(_))));
    }
}
