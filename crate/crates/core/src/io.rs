//! On-disk layout of a run directory.
//!
//! | file               | content                                             |
//! |--------------------|-----------------------------------------------------|
//! | `config.toml`      | the exact config that produced the run              |
//! | `metrics.csv`      | `step,train_loss,eval_loss,lr,p`, one row per step  |
//! | `events.jsonl`     | one operation event per line                        |
//! | `importance.csv`   | `step,adapter,rank,frobenius,frobenius_scored,score`|
//! | `checkpoint.json`  | final model and optimizer (completed runs only)     |
//! | `summary.json`     | status, losses, event count, task fingerprint       |
//!
//! Empty CSV fields mean "not recorded at this step". Every file is a pure
//! function of the config, so reruns are byte-identical.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::beam::{Mode, OperationEvent};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar};
use crate::train::{run, ImportanceSample, MetricRow, RunOutput, RunRecord, RunStatus};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub precision: Precision,
    pub status: RunStatus,
    pub steps_run: usize,
    pub initial_eval_loss: f64,
    pub final_eval_loss: Option<f64>,
    pub events: usize,
    pub task_seed: u64,
    pub task_fingerprint: String,
    /// File name of the checkpoint, absent for aborted runs.
    pub checkpoint: Option<String>,
}

impl Summary {
    pub fn of(record: &RunRecord, checkpoint: Option<&str>) -> Self {
        Self {
            mode: record.mode,
            seed: record.seed,
            precision: record.precision,
            status: record.status.clone(),
            steps_run: record.metrics.len(),
            initial_eval_loss: record.initial_eval_loss,
            final_eval_loss: record.final_eval_loss(),
            events: record.events.len(),
            task_seed: record.task_seed,
            task_fingerprint: record.task_fingerprint.clone(),
            checkpoint: checkpoint.map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImportanceRow {
    step: usize,
    adapter: usize,
    rank: usize,
    frobenius: f64,
    frobenius_scored: f64,
    score: f64,
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["step", "train_loss", "eval_loss", "lr", "p"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub fn write_events(path: &Path, events: &[OperationEvent]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<OperationEvent>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_importance(path: &Path, samples: &[ImportanceSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        for rank in 0..s.score.len() {
            w.serialize(ImportanceRow {
                step: s.step,
                adapter: s.adapter,
                rank,
                frobenius: s.frobenius[rank],
                frobenius_scored: s.frobenius_scored[rank],
                score: s.score[rank],
            })?;
        }
    }
    if samples.is_empty() {
        w.write_record(["step", "adapter", "rank", "frobenius", "frobenius_scored", "score"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_importance(path: &Path) -> Result<Vec<ImportanceSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<ImportanceSample> = Vec::new();
    for row in r.deserialize() {
        let row: ImportanceRow = row?;
        let same = out
            .last()
            .is_some_and(|s| s.step == row.step && s.adapter == row.adapter);
        if !same {
            out.push(ImportanceSample {
                step: row.step,
                adapter: row.adapter,
                frobenius: Vec::new(),
                frobenius_scored: Vec::new(),
                score: Vec::new(),
            });
        }
        let s = out.last_mut().expect("pushed above");
        if row.rank != s.score.len() {
            return Err(Error::contract(format!(
                "{}: rank {} out of order at step {}",
                path.display(),
                row.rank,
                row.step
            )));
        }
        s.frobenius.push(row.frobenius);
        s.frobenius_scored.push(row.frobenius_scored);
        s.score.push(row.score);
    }
    Ok(out)
}

/// Paths of the files in one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.file(CONFIG_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.file(METRICS_FILE)
    }

    pub fn events(&self) -> PathBuf {
        self.file(EVENTS_FILE)
    }

    pub fn importance(&self) -> PathBuf {
        self.file(IMPORTANCE_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.file(CHECKPOINT_FILE)
    }

    pub fn summary(&self) -> PathBuf {
        self.file(SUMMARY_FILE)
    }

    pub fn read_summary(&self) -> Result<Summary> {
        Ok(serde_json::from_str(&fs::read_to_string(self.summary())?)?)
    }
}

/// Writes every output of a finished (or aborted) run into `dir`.
pub fn write_run<T: Scalar>(dir: &Path, cfg: &RunConfig, out: &RunOutput<T>) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    let rd = RunDir::new(dir);
    fs::write(rd.config(), cfg.to_toml_string()?)?;
    write_metrics(&rd.metrics(), &out.record.metrics)?;
    write_events(&rd.events(), &out.record.events)?;
    write_importance(&rd.importance(), &out.record.importance)?;

    let checkpoint = if out.record.is_completed() {
        let ck = Checkpoint::capture(
            &out.model,
            &out.optimizer,
            &out.task,
            cfg.mode,
            cfg.seed,
            out.record.metrics.len(),
        );
        ck.save(&rd.checkpoint())?;
        Some(CHECKPOINT_FILE)
    } else {
        let stale = rd.checkpoint();
        if stale.exists() {
            fs::remove_file(stale)?;
        }
        None
    };
    let summary = Summary::of(&out.record, checkpoint);
    fs::write(rd.summary(), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Runs `cfg` at its configured precision and, when `dir` is given, writes
/// the run directory. Diverged runs are returned, not turned into errors.
pub fn execute(cfg: &RunConfig, dir: Option<&Path>) -> Result<RunRecord> {
    fn go<T: Scalar>(cfg: &RunConfig, dir: Option<&Path>) -> Result<RunRecord> {
        let out = run::<T>(cfg)?;
        if let Some(d) = dir {
            write_run(d, cfg, &out)?;
        }
        Ok(out.record)
    }
    match cfg.precision {
        Precision::F64 => go::<f64>(cfg, dir),
        Precision::F32 => go::<f32>(cfg, dir),
    }
}
