//! Paired-seed sweeps over one config axis, each cell compared with a plain
//! low-rank baseline trained on the same seeds.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{EventStatus, Mode};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::execute;
use crate::train::{RunRecord, RunStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rank,
    PInit,
    DeltaT,
    Ablation,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Rank => "rank",
            SweepAxis::PInit => "p_init",
            SweepAxis::DeltaT => "delta_t",
            SweepAxis::Ablation => "ablation",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" | "r" => Ok(SweepAxis::Rank),
            "p_init" => Ok(SweepAxis::PInit),
            "delta_t" => Ok(SweepAxis::DeltaT),
            "ablation" | "mode" => Ok(SweepAxis::Ablation),
            _ => Err(Error::config(format!(
                "unknown sweep axis `{s}` (expected rank, p_init, delta_t or ablation)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Count(usize),
    Real(f64),
    Mode(Mode),
}

impl std::fmt::Display for SweepValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepValue::Count(n) => write!(f, "{n}"),
            SweepValue::Real(x) => write!(f, "{x}"),
            SweepValue::Mode(m) => write!(f, "{m}"),
        }
    }
}

impl SweepValue {
    pub fn parse(axis: SweepAxis, s: &str) -> Result<Self> {
        let bad = || Error::config(format!("`{s}` is not a valid {} value", axis.as_str()));
        match axis {
            SweepAxis::Rank | SweepAxis::DeltaT => s.trim().parse().map(SweepValue::Count).map_err(|_| bad()),
            SweepAxis::PInit => s.trim().parse().map(SweepValue::Real).map_err(|_| bad()),
            SweepAxis::Ablation => s.trim().parse().map(SweepValue::Mode),
        }
    }

    /// Applies this value to a copy of `base`.
    pub fn apply(self, axis: SweepAxis, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match (axis, self) {
            (SweepAxis::Rank, SweepValue::Count(r)) => cfg.model.rank = r,
            (SweepAxis::DeltaT, SweepValue::Count(d)) => cfg.beam.delta_t = d,
            (SweepAxis::PInit, SweepValue::Real(p)) => cfg.beam.p_init = p,
            (SweepAxis::Ablation, SweepValue::Mode(m)) => cfg.mode = m,
            _ => {
                return Err(Error::config(format!(
                    "value {self} does not belong to axis {}",
                    axis.as_str()
                )))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn parse(axis: &str, values: &str, seeds: Vec<u64>) -> Result<Self> {
        let axis: SweepAxis = axis.parse()?;
        let values = values
            .split(',')
            .filter(|v| !v.trim().is_empty())
            .map(|v| SweepValue::parse(axis, v))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::config("sweep needs at least one value"));
        }
        if seeds.is_empty() {
            return Err(Error::config("sweep needs at least one seed"));
        }
        Ok(Self { axis, values, seeds })
    }
}

/// Outcome of one run inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_eval_loss: f64,
    pub baseline_loss: f64,
    /// `K` of the first applied operation on adapter 0, if any.
    pub first_event_k: Option<usize>,
    /// Scores that first decision was made on.
    pub first_event_scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub value: String,
    pub mode: Mode,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub value: SweepValue,
    pub mode: Mode,
    pub runs: Vec<SeedResult>,
    pub mean: f64,
    pub stddev: f64,
    pub baseline_mean: f64,
    pub baseline_stddev: f64,
    /// Seeds where the cell's loss is at most the baseline's.
    pub wins: usize,
    /// 1 for the lowest mean among the cells.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
    pub failures: Vec<RunFailure>,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn first_event(record: &RunRecord) -> (Option<usize>, Option<Vec<f64>>) {
    record
        .events
        .iter()
        .find(|e| e.adapter == 0 && e.status == EventStatus::Applied)
        .map(|e| (Some(e.k), Some(e.scores.clone())))
        .unwrap_or((None, None))
}

fn final_loss(cfg: &RunConfig, dir: Option<PathBuf>) -> std::result::Result<RunRecord, String> {
    let record = execute(cfg, dir.as_deref()).map_err(|e| e.to_string())?;
    match record.status {
        RunStatus::Completed if record.final_eval_loss().is_some() => Ok(record),
        RunStatus::Completed => Err("run finished without an evaluation".into()),
        RunStatus::Diverged { step, loss } => Err(format!("diverged at step {step} (loss {loss})")),
    }
}

/// Runs every (value, seed) pair plus a plain baseline per distinct baseline
/// config, in parallel. Failed runs are recorded and skipped; a cell whose
/// baseline failed for a seed drops that seed.
pub fn run_sweep(base: &RunConfig, spec: &SweepSpec, out: Option<&Path>) -> Result<SweepSummary> {
    let cells: Vec<RunConfig> = spec
        .values
        .iter()
        .map(|v| v.apply(spec.axis, base))
        .collect::<Result<_>>()?;

    // Baselines differ only where the axis changes the baseline itself.
    let baseline_of = |cfg: &RunConfig| {
        let mut b = cfg.clone();
        b.mode = Mode::Lora;
        b.beam = base.beam.clone();
        b
    };
    let mut baselines: Vec<RunConfig> = Vec::new();
    let mut baseline_idx = Vec::with_capacity(cells.len());
    for c in &cells {
        let b = baseline_of(c);
        let i = baselines.iter().position(|x| *x == b).unwrap_or_else(|| {
            baselines.push(b);
            baselines.len() - 1
        });
        baseline_idx.push(i);
    }

    let dir_for = |label: String, seed: u64| out.map(|o| o.join(label).join(format!("seed-{seed}")));
    let mut jobs: Vec<(usize, bool, u64)> = Vec::new();
    for i in 0..baselines.len() {
        jobs.extend(spec.seeds.iter().map(|&s| (i, true, s)));
    }
    for i in 0..cells.len() {
        jobs.extend(spec.seeds.iter().map(|&s| (i, false, s)));
    }
    let results: Vec<std::result::Result<RunRecord, String>> = jobs
        .par_iter()
        .map(|&(i, is_base, seed)| {
            let (mut cfg, label) = if is_base {
                (baselines[i].clone(), format!("baseline-{i}"))
            } else {
                (
                    cells[i].clone(),
                    format!("{}={}", spec.axis.as_str(), spec.values[i]),
                )
            };
            cfg.seed = seed;
            final_loss(&cfg, dir_for(label, seed))
        })
        .collect();

    let mut base_loss: BTreeMap<(usize, u64), f64> = BTreeMap::new();
    let mut cell_runs: BTreeMap<(usize, u64), RunRecord> = BTreeMap::new();
    let mut failures = Vec::new();
    for (&(i, is_base, seed), res) in jobs.iter().zip(results) {
        match res {
            Ok(rec) if is_base => {
                base_loss.insert((i, seed), rec.final_eval_loss().expect("checked"));
            }
            Ok(rec) => {
                cell_runs.insert((i, seed), rec);
            }
            Err(error) => {
                let (value, mode) = if is_base {
                    (format!("baseline-{i}"), Mode::Lora)
                } else {
                    (spec.values[i].to_string(), cells[i].mode)
                };
                log::warn!("sweep run {value} seed {seed} failed: {error}");
                failures.push(RunFailure {
                    value,
                    mode,
                    seed,
                    error,
                });
            }
        }
    }

    let mut summaries: Vec<CellSummary> = cells
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let runs: Vec<SeedResult> = spec
                .seeds
                .iter()
                .filter_map(|&seed| {
                    let rec = cell_runs.get(&(i, seed))?;
                    let baseline_loss = *base_loss.get(&(baseline_idx[i], seed))?;
                    let (first_event_k, first_event_scores) = first_event(rec);
                    Some(SeedResult {
                        seed,
                        final_eval_loss: rec.final_eval_loss().expect("checked"),
                        baseline_loss,
                        first_event_k,
                        first_event_scores,
                    })
                })
                .collect();
            let losses: Vec<f64> = runs.iter().map(|r| r.final_eval_loss).collect();
            let base: Vec<f64> = runs.iter().map(|r| r.baseline_loss).collect();
            let (mean, stddev) = mean_std(&losses);
            let (baseline_mean, baseline_stddev) = mean_std(&base);
            CellSummary {
                value: spec.values[i],
                mode: cfg.mode,
                wins: runs.iter().filter(|r| r.final_eval_loss <= r.baseline_loss).count(),
                runs,
                mean,
                stddev,
                baseline_mean,
                baseline_stddev,
                position: 0,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..summaries.len()).collect();
    order.sort_by(|&a, &b| summaries[a].mean.total_cmp(&summaries[b].mean).then(a.cmp(&b)));
    for (pos, &i) in order.iter().enumerate() {
        summaries[i].position = pos + 1;
    }

    Ok(SweepSummary {
        axis: spec.axis,
        seeds: spec.seeds.clone(),
        cells: summaries,
        failures,
    })
}

impl SweepSummary {
    pub fn cell(&self, value: SweepValue) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.value == value)
    }

    /// `axis,value,mode,n,mean,stddev,baseline_mean,baseline_stddev,wins,position`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "axis",
            "value",
            "mode",
            "n",
            "mean",
            "stddev",
            "baseline_mean",
            "baseline_stddev",
            "wins",
            "position",
        ])?;
        for c in &self.cells {
            w.write_record([
                self.axis.as_str().to_string(),
                c.value.to_string(),
                c.mode.to_string(),
                c.runs.len().to_string(),
                c.mean.to_string(),
                c.stddev.to_string(),
                c.baseline_mean.to_string(),
                c.baseline_stddev.to_string(),
                c.wins.to_string(),
                c.position.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_values() {
        let s = SweepSpec::parse("rank", "4,8", vec![0]).unwrap();
        assert_eq!(s.values, vec![SweepValue::Count(4), SweepValue::Count(8)]);
        let s = SweepSpec::parse("ablation", "prune_only,static_p", vec![0]).unwrap();
        assert_eq!(s.values[1], SweepValue::Mode(Mode::StaticP));
        assert!(SweepSpec::parse("rank", "x", vec![0]).is_err());
        assert!(SweepSpec::parse("width", "1", vec![0]).is_err());
        assert!(SweepSpec::parse("rank", "4", vec![]).is_err());
    }

    #[test]
    fn apply_checks_axis() {
        let base = RunConfig::default();
        let c = SweepValue::Real(0.9).apply(SweepAxis::PInit, &base).unwrap();
        assert_eq!(c.beam.p_init, 0.9);
        assert!(SweepValue::Real(0.9).apply(SweepAxis::Rank, &base).is_err());
        assert!(SweepValue::Real(1.5).apply(SweepAxis::PInit, &base).is_err());
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
