//! Offline analyses of trained adapters: prune sweeps and importance
//! profiles.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lora::ImportanceMode;
use crate::model::AdapterModel;
use crate::task::TaskData;
use crate::tensor::{Precision, Scalar};
use crate::train::{evaluate, ImportanceSample};

/// Fractions 0, 0.1, ..., 1.0.
pub fn decile_fractions() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Number of ranks a fraction `f` of `r` prunes.
pub fn pruned_count(f: f64, r: usize) -> usize {
    ((f * r as f64).round() as usize).min(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrder {
    /// Zero the least important ranks first.
    #[default]
    LeastFirst,
    MostFirst,
}

impl SweepOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepOrder::LeastFirst => "least_first",
            SweepOrder::MostFirst => "most_first",
        }
    }
}

impl std::str::FromStr for SweepOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least_first" | "least" => Ok(SweepOrder::LeastFirst),
            "most_first" | "most" => Ok(SweepOrder::MostFirst),
            _ => Err(Error::config(format!(
                "unknown sweep order `{s}` (expected least_first or most_first)"
            ))),
        }
    }
}

/// Rank indices ordered for pruning; ties go to the lower index.
pub fn prune_order(importance: &[f64], order: SweepOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..importance.len()).collect();
    idx.sort_by(|&i, &j| {
        let c = importance[i].total_cmp(&importance[j]);
        match order {
            SweepOrder::LeastFirst => c,
            SweepOrder::MostFirst => c.reverse(),
        }
        .then(i.cmp(&j))
    });
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePoint {
    pub fraction: f64,
    /// Ranks zeroed in each adapter.
    pub pruned: usize,
    pub eval_loss: f64,
    /// `eval_loss` minus the unpruned loss.
    pub delta: f64,
}

/// Zeroes the given fraction of ranks in every adapter of a copy of `model`
/// and evaluates it. `model` itself is never touched.
pub fn prune_sweep<T: Scalar>(
    model: &AdapterModel<T>,
    data: &TaskData<T>,
    mode: ImportanceMode,
    order: SweepOrder,
    fractions: &[f64],
) -> Result<Vec<PrunePoint>> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::config(format!("prune fraction {f} outside [0, 1]")));
    }
    let baseline = evaluate(model, data)?;
    let orders: Vec<Vec<usize>> = model
        .adapters()
        .map(|ad| prune_order(&ad.rank_importance(mode).to_f64_vec(), order))
        .collect();
    fractions
        .iter()
        .map(|&f| {
            let mut m = model.clone();
            let mut pruned = 0;
            for (ad, ord) in m.adapters_mut().zip(&orders) {
                pruned = pruned_count(f, ad.rank());
                let set: BTreeSet<usize> = ord[..pruned].iter().copied().collect();
                ad.zero_ranks(&set)?;
            }
            let eval_loss = evaluate(&m, data)?;
            Ok(PrunePoint {
                fraction: f,
                pruned,
                eval_loss,
                delta: eval_loss - baseline,
            })
        })
        .collect()
}

/// Prune sweep on a stored checkpoint, against its regenerated eval split.
pub fn prune_sweep_checkpoint(
    ck: &Checkpoint,
    mode: ImportanceMode,
    order: SweepOrder,
    fractions: &[f64],
) -> Result<Vec<PrunePoint>> {
    let task = ck.task()?;
    match ck.precision {
        Precision::F64 => {
            let (m, _) = ck.restore::<f64>()?;
            prune_sweep(&m, &task.data(), mode, order, fractions)
        }
        Precision::F32 => {
            let (m, _) = ck.restore::<f32>()?;
            prune_sweep(&m, &task.data(), mode, order, fractions)
        }
    }
}

pub fn write_prune_csv<W: Write>(out: W, order: SweepOrder, points: &[PrunePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["order", "fraction", "pruned", "eval_loss", "delta"])?;
    for p in points {
        w.write_record([
            order.as_str().to_string(),
            p.fraction.to_string(),
            p.pruned.to_string(),
            p.eval_loss.to_string(),
            p.delta.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Ten quantiles (at 0.1, ..., 1.0) of `values`, linear interpolation
/// between order statistics.
pub fn deciles(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return vec![0.0; 10];
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    (1..=10)
        .map(|j| {
            let pos = j as f64 / 10.0 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        })
        .collect()
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    pub step: usize,
    pub adapter: usize,
    pub decile: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub adapter: usize,
    pub rank: usize,
    pub value: f64,
}

/// Spatial (sorted deciles at the last logged step) and temporal (every
/// logged step, every rank) views of logged importance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceProfile {
    pub mode: ImportanceMode,
    pub spatial: Vec<DecileRow>,
    pub temporal: Vec<TrajectoryRow>,
}

pub fn importance_profile(samples: &[ImportanceSample], mode: ImportanceMode) -> Result<ImportanceProfile> {
    let Some(last) = samples.iter().map(|s| s.step).max() else {
        return Err(Error::config(
            "the run has no importance samples; set `train.importance_every` above 0 and rerun",
        ));
    };
    let spatial = samples
        .iter()
        .filter(|s| s.step == last)
        .flat_map(|s| {
            deciles(s.values(mode))
                .into_iter()
                .enumerate()
                .map(move |(j, value)| DecileRow {
                    step: s.step,
                    adapter: s.adapter,
                    decile: j + 1,
                    value,
                })
        })
        .collect();
    let temporal = samples
        .iter()
        .flat_map(|s| {
            s.values(mode)
                .iter()
                .enumerate()
                .map(move |(rank, &value)| TrajectoryRow {
                    step: s.step,
                    adapter: s.adapter,
                    rank,
                    value,
                })
        })
        .collect();
    Ok(ImportanceProfile {
        mode,
        spatial,
        temporal,
    })
}

impl ImportanceProfile {
    pub fn write_spatial<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.spatial {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_temporal<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.temporal {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(step, variance of Frobenius importance across ranks)` for one adapter.
pub fn frobenius_variance_trajectory(samples: &[ImportanceSample], adapter: usize) -> Vec<(usize, f64)> {
    samples
        .iter()
        .filter(|s| s.adapter == adapter)
        .map(|s| (s.step, variance(&s.frobenius)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pruned_counts_round() {
        assert_eq!(pruned_count(0.3, 8), 2);
        assert_eq!(pruned_count(0.3, 4), 1);
        assert_eq!(pruned_count(0.5, 5), 3);
        assert_eq!(pruned_count(1.0, 16), 16);
        assert_eq!(pruned_count(0.0, 16), 0);
    }

    #[test]
    fn prune_order_ties_to_lower_index() {
        let imp = [0.2, 0.1, 0.2, 0.5];
        assert_eq!(prune_order(&imp, SweepOrder::LeastFirst), vec![1, 0, 2, 3]);
        assert_eq!(prune_order(&imp, SweepOrder::MostFirst), vec![3, 0, 2, 1]);
    }

    #[test]
    fn decile_values() {
        assert_eq!(deciles(&[0.0; 8]), vec![0.0; 10]);
        let v: Vec<f64> = (0..11).map(f64::from).collect();
        let d = deciles(&v);
        for (j, x) in d.iter().enumerate() {
            assert!((x - (j + 1) as f64).abs() < 1e-12);
        }
        assert_eq!(deciles(&[3.0])[9], 3.0);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(variance(&[1.0, 1.0]), 0.0);
        assert!((variance(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn profile_needs_samples() {
        let err = importance_profile(&[], ImportanceMode::Frobenius).unwrap_err();
        assert!(err.to_string().contains("importance_every"));
    }
}
