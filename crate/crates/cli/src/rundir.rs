//! Run directories: named by config hash and seed, guarded by a lock file,
//! holding the resolved config, artifacts and append-only logs.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kdslu_core::config::ExperimentConfig;
use serde::{Deserialize, Serialize};

use crate::report::MetricLine;

pub const LOCK_FILE: &str = "run.lock";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";

pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-s{}", cfg.hash(), cfg.seed)
}

#[derive(Debug)]
pub struct RunDir {
    pub id: String,
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Creates (or reopens) the run directory and takes its lock. The
    /// resolved config is written on first use and must match afterwards.
    pub fn open(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let id = run_id(cfg);
        let path = root.join(&id);
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("run directory {} is locked by another process ({})", path.display(), lock.display())
            }
            Err(e) => return Err(e).context("taking run lock"),
        }
        let dir = Self { id, path, lock };
        let cfg_path = dir.path.join(CONFIG_FILE);
        let text = cfg.to_toml();
        match fs::read_to_string(&cfg_path) {
            Ok(old) if old != text => bail!("{} holds a different config", cfg_path.display()),
            Ok(_) => {}
            Err(_) => fs::write(&cfg_path, text)?,
        }
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn append_metrics(&self, lines: &[MetricLine]) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.file(METRICS_FILE))?;
        let mut buf = String::new();
        for l in lines {
            buf.push_str(&serde_json::to_string(l)?);
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn append_record(&self, rec: &RunRecord) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.file(RECORDS_FILE))?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub name: String,
    pub step: u64,
    pub value: f64,
}

/// Everything one command produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub stage: String,
    pub config: serde_json::Value,
    pub series: Vec<MetricPoint>,
    pub final_metrics: BTreeMap<String, f64>,
    pub checkpoints: Vec<String>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub fn new(run_id: &str, stage: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            run_id: run_id.into(),
            stage: stage.into(),
            config: serde_json::to_value(cfg).expect("config serializes"),
            series: vec![],
            final_metrics: BTreeMap::new(),
            checkpoints: vec![],
            wall_clock_s: 0.0,
        }
    }

    /// Appends a series; steps must keep increasing within one metric name.
    pub fn push_series(&mut self, name: &str, points: impl IntoIterator<Item = (u64, f64)>) {
        let mut last = self.series.iter().filter(|p| p.name == name).map(|p| p.step).max();
        for (step, value) in points {
            assert!(last.is_none_or(|l| step > l), "metric `{name}` step {step} not increasing");
            last = Some(step);
            self.series.push(MetricPoint { name: name.into(), step, value });
        }
    }

    pub fn metric_lines(&self) -> Vec<MetricLine> {
        self.series
            .iter()
            .map(|p| MetricLine {
                run_id: self.run_id.clone(),
                stage: self.stage.clone(),
                name: p.name.clone(),
                step: p.step,
                value: p.value,
            })
            .collect()
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines().filter(|l| !l.is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Writes `bytes` to `path` via a temporary sibling so readers never see a
/// partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
