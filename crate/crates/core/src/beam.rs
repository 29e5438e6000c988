//! Periodic rank pruning and expansion driven by the adapter scores.
//!
//! Every `delta_t` optimizer steps (inside the operation window) each adapter
//! is inspected:
//!
//! 1. the threshold `p` follows a cosine ramp from `p_init` to 1,
//! 2. the number of operable ranks `K` comes from a top-p cut of the sorted
//!    normalized scores,
//! 3. the `K` weakest ranks are overwritten with mid-interval copies of the
//!    `K` strongest ranks, Adam moments included,
//! 4. the score logits of each (pruned, expanded) pair are set to their mean.
//!
//! The copies come from a [`Snapshot`] taken halfway between operations, so
//! the duplicate and its source start from different points and do not
//! evolve in lockstep.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{Factor, LoraAdapter};
use crate::model::AdapterModel;
use crate::optim::{AdamState, Moments, ParamId, SliceAxis};
use crate::tensor::{softmax, Scalar, Tensor};

/// Slack used when comparing cumulative score mass against `p`.
pub const CUMSUM_SLACK: f64 = 1e-12;
/// Allowed deviation of a score vector's sum from one.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Scores, pruning with expansion, cosine threshold.
    #[default]
    Beamlora,
    /// Textbook low-rank adapter: no scores, no operations.
    Lora,
    /// Weak ranks are zeroed; nothing is expanded into their slots.
    PruneOnly,
    /// `K` from the scores, but the pruned and expanded ranks are drawn at
    /// random.
    RandomSelect,
    /// Threshold held at `p_init` for the whole run.
    StaticP,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Beamlora,
        Mode::Lora,
        Mode::PruneOnly,
        Mode::RandomSelect,
        Mode::StaticP,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Beamlora => "beamlora",
            Mode::Lora => "lora",
            Mode::PruneOnly => "prune_only",
            Mode::RandomSelect => "random_select",
            Mode::StaticP => "static_p",
        }
    }

    pub fn uses_scores(self) -> bool {
        self != Mode::Lora
    }

    pub fn operates(self) -> bool {
        self != Mode::Lora
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown mode `{s}` (expected beamlora, lora, prune_only, random_select or static_p)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamSchedule {
    p_init: f64,
    delta_t: usize,
    total_steps: usize,
    op_window_end: usize,
}

impl BeamSchedule {
    pub fn new(p_init: f64, delta_t: usize, total_steps: usize, op_window_end: usize) -> Result<Self> {
        if !(p_init > 0.0 && p_init < 1.0) {
            return Err(Error::config(format!("p_init must lie in (0, 1), got {p_init}")));
        }
        if delta_t < 2 {
            return Err(Error::config(format!("delta_t must be at least 2, got {delta_t}")));
        }
        if op_window_end > total_steps {
            return Err(Error::config(format!(
                "operation window end {op_window_end} exceeds total steps {total_steps}"
            )));
        }
        Ok(Self {
            p_init,
            delta_t,
            total_steps,
            op_window_end,
        })
    }

    /// Window defaults to the first two thirds of training.
    pub fn with_default_window(p_init: f64, delta_t: usize, total_steps: usize) -> Result<Self> {
        Self::new(p_init, delta_t, total_steps, default_window_end(total_steps))
    }

    pub fn p_init(&self) -> f64 {
        self.p_init
    }

    pub fn delta_t(&self) -> usize {
        self.delta_t
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn op_window_end(&self) -> usize {
        self.op_window_end
    }

    /// `p(t) = p_init + ½(1 − p_init)(1 − cos(πt/T))`.
    pub fn threshold_at(&self, t: usize) -> Result<f64> {
        threshold_at(t, self)
    }

    pub fn is_operation_step(&self, step: usize) -> bool {
        step > 0 && step % self.delta_t == 0 && step <= self.op_window_end
    }

    /// Offset of the snapshot inside each interval.
    pub fn snapshot_offset(&self) -> usize {
        self.delta_t / 2
    }

    pub fn operation_steps(&self) -> Vec<usize> {
        (1..=self.op_window_end / self.delta_t)
            .map(|n| n * self.delta_t)
            .collect()
    }
}

pub fn default_window_end(total_steps: usize) -> usize {
    total_steps * 2 / 3
}

pub fn threshold_at(t: usize, schedule: &BeamSchedule) -> Result<f64> {
    let total = schedule.total_steps;
    if t > total {
        return Err(Error::contract(format!(
            "threshold requested at step {t} beyond total {total}"
        )));
    }
    if t == total {
        return Ok(1.0);
    }
    let frac = if total == 0 { 0.0 } else { t as f64 / total as f64 };
    let p = schedule.p_init + 0.5 * (1.0 - schedule.p_init) * (1.0 - (PI * frac).cos());
    Ok(p.min(1.0))
}

fn check_distribution(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::contract("empty score vector"));
    }
    let sum: f64 = s.iter().sum();
    if s.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::contract(format!(
            "scores must be a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// Number of ranks to operate on for scores `s` at threshold `p`.
///
/// With `s` sorted descending and `i*` the first (1-based) position whose
/// cumulative mass reaches `p`, `K = r − i*`, capped at `⌊r/2⌋` so the
/// weakest-`K` and strongest-`K` sets can be disjoint. `K = 0` for `p ≥ 1`.
pub fn operable_count(s: &[f64], p: f64) -> Result<usize> {
    check_distribution(s)?;
    if p >= 1.0 {
        return Ok(0);
    }
    let r = s.len();
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut cut = r;
    for (i, v) in sorted.iter().enumerate() {
        cum += v;
        if cum >= p - CUMSUM_SLACK {
            cut = i + 1;
            break;
        }
    }
    Ok((r - cut).min(r / 2))
}

/// Weakest-`K` and strongest-`K` rank indices.
///
/// `prune` is ordered from weakest up, `expand` from strongest down, so
/// `prune[j]` pairs with `expand[j]`. Ties go to the lower index, and the
/// strongest set is drawn only from ranks not already chosen for pruning.
pub fn select_sets(s: &[f64], k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let r = s.len();
    if k > r / 2 {
        return Err(Error::contract(format!(
            "K = {k} exceeds floor(r/2) = {}",
            r / 2
        )));
    }
    let mut asc: Vec<usize> = (0..r).collect();
    asc.sort_by(|&i, &j| s[i].total_cmp(&s[j]).then(i.cmp(&j)));
    let prune: Vec<usize> = asc[..k].to_vec();

    let mut desc: Vec<usize> = (0..r).filter(|i| !prune.contains(i)).collect();
    desc.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let expand = desc[..k].to_vec();
    Ok((prune, expand))
}

/// Uniformly random disjoint sets of size `k`, used by the
/// [`Mode::RandomSelect`] ablation.
pub fn random_sets<R: rand::Rng + ?Sized>(r: usize, k: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if k > r / 2 {
        return Err(Error::contract(format!("K = {k} exceeds floor(r/2)")));
    }
    let mut idx: Vec<usize> = (0..r).collect();
    idx.shuffle(rng);
    Ok((idx[..k].to_vec(), idx[k..2 * k].to_vec()))
}

/// Deep copy of one adapter's trainable state and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSnapshot<T: Scalar = f64> {
    pub b: Tensor<T>,
    pub a: Tensor<T>,
    pub logits: Tensor<T>,
    pub moments: BTreeMap<Factor, Moments<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T: Scalar = f64> {
    pub step: usize,
    pub adapters: Vec<AdapterSnapshot<T>>,
}

impl<T: Scalar> Snapshot<T> {
    /// Copies every adapter of `model` together with its moments.
    pub fn take(step: usize, model: &AdapterModel<T>, opt: &AdamState<T>) -> Self {
        let adapters = model
            .adapters()
            .enumerate()
            .map(|(idx, ad)| AdapterSnapshot {
                b: ad.factor(Factor::B).clone(),
                a: ad.factor(Factor::A).clone(),
                logits: ad.factor(Factor::Logits).clone(),
                moments: Factor::ALL
                    .into_iter()
                    .filter_map(|f| opt.moments(ParamId::new(idx, f)).map(|m| (f, m.clone())))
                    .collect(),
            })
            .collect();
        Self { step, adapters }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStatus {
    Applied,
    /// No snapshot was available for this interval.
    SkippedNoSnapshot,
}

/// One operation on one adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationEvent {
    pub step: usize,
    pub adapter: usize,
    pub mode: Mode,
    pub p: f64,
    pub k: usize,
    pub prune: Vec<usize>,
    pub expand: Vec<usize>,
    /// `(pruned, expanded)` pairs, weakest with strongest first.
    pub pairs: Vec<(usize, usize)>,
    /// Normalized scores the decision was made on.
    pub scores: Vec<f64>,
    pub status: EventStatus,
}

/// Normalized scores computed in double precision from an adapter's logits.
pub fn scores_f64<T: Scalar>(adapter: &LoraAdapter<T>) -> Vec<f64> {
    softmax(&adapter.factor(Factor::Logits).cast::<f64>())
        .expect("logits are finite")
        .into_data()
}

fn mean_tensor<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64_lossy(0.5);
    x.add(y).expect("same shape").scale(half)
}

/// Moves snapshot copies of the ranks in `expand` into the slots listed in
/// `prune` and averages the score logits of each pair.
///
/// `prune[j]` receives `b`, `a` and their Adam moments from the snapshot of
/// rank `expand[j]`. Then the logits of both ranks are set to their mean, as
/// are the logits' own moments when the optimizer tracks them. Ranks outside
/// both lists are not touched.
pub fn prune_expand<T: Scalar>(
    adapter: &mut LoraAdapter<T>,
    adapter_index: usize,
    opt: &mut AdamState<T>,
    snapshot: &AdapterSnapshot<T>,
    prune: &[usize],
    expand: &[usize],
) -> Result<Vec<(usize, usize)>> {
    let r = adapter.rank();
    if prune.len() != expand.len() {
        return Err(Error::contract("prune and expand sets differ in size"));
    }
    for &i in prune.iter().chain(expand) {
        if i >= r {
            return Err(Error::RankIndex { index: i, rank: r });
        }
    }
    if prune.iter().any(|i| expand.contains(i)) {
        return Err(Error::contract("prune and expand sets overlap"));
    }
    if snapshot.b.shape() != adapter.factor(Factor::B).shape()
        || snapshot.a.shape() != adapter.factor(Factor::A).shape()
    {
        return Err(Error::Dimension {
            op: "snapshot transplant",
            lhs: snapshot.b.shape().to_vec(),
            rhs: adapter.factor(Factor::B).shape().to_vec(),
        });
    }

    let pairs: Vec<(usize, usize)> = prune.iter().copied().zip(expand.iter().copied()).collect();

    for &(dst, src) in &pairs {
        adapter.set_rank(dst, snapshot.b.column(src).data(), snapshot.a.row(src).data())?;
        for f in [Factor::B, Factor::A] {
            let id = ParamId::new(adapter_index, f);
            if opt.moments(id).is_none() {
                continue;
            }
            let Some(snap) = snapshot.moments.get(&f) else {
                return Err(Error::contract(format!("snapshot lacks moments for {f:?}")));
            };
            let (m, v) = match f {
                Factor::B => (snap.m.column(src), snap.v.column(src)),
                _ => (snap.m.row(src), snap.v.row(src)),
            };
            opt.write_moments(id, dst, &m, &v)?;
        }
    }

    let logit_id = ParamId::new(adapter_index, Factor::Logits);
    for &(dst, src) in &pairs {
        let logits = adapter.factor_mut(Factor::Logits);
        let half = T::from_f64_lossy(0.5);
        let mean = (logits.data()[dst] + logits.data()[src]) * half;
        logits.data_mut()[dst] = mean;
        logits.data_mut()[src] = mean;

        if opt.moments(logit_id).is_some() {
            let (md, vd) = opt.slice_moments(logit_id, dst, SliceAxis::Element)?;
            let (ms, vs) = opt.slice_moments(logit_id, src, SliceAxis::Element)?;
            let m = mean_tensor(&md, &ms);
            let v = mean_tensor(&vd, &vs);
            opt.write_moments(logit_id, dst, &m, &v)?;
            opt.write_moments(logit_id, src, &m, &v)?;
        }
    }
    Ok(pairs)
}

/// Zeroes the listed ranks and their moments (the prune-only ablation).
pub fn prune_only<T: Scalar>(
    adapter: &mut LoraAdapter<T>,
    adapter_index: usize,
    opt: &mut AdamState<T>,
    prune: &[usize],
) -> Result<()> {
    adapter.zero_ranks(&prune.iter().copied().collect())?;
    for f in [Factor::B, Factor::A] {
        let id = ParamId::new(adapter_index, f);
        if opt.moments(id).is_none() {
            continue;
        }
        let len = match f {
            Factor::B => adapter.out_dim(),
            _ => adapter.in_dim(),
        };
        let z = Tensor::zeros(&[len]);
        for &i in prune {
            opt.write_moments(id, i, &z, &z)?;
        }
    }
    Ok(())
}

/// Drives operations and snapshots across a training run.
#[derive(Debug, Clone)]
pub struct BeamController<T: Scalar = f64> {
    schedule: BeamSchedule,
    mode: Mode,
    last_op_step: usize,
    snapshot: Option<Snapshot<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> BeamController<T> {
    pub fn new(schedule: BeamSchedule, mode: Mode, seed: u64) -> Self {
        Self {
            schedule,
            mode,
            last_op_step: 0,
            snapshot: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn schedule(&self) -> &BeamSchedule {
        &self.schedule
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn snapshot(&self) -> Option<&Snapshot<T>> {
        self.snapshot.as_ref()
    }

    pub fn last_operation_step(&self) -> usize {
        self.last_op_step
    }

    /// Step at which the current interval's snapshot is due.
    pub fn snapshot_step(&self) -> usize {
        self.last_op_step + self.schedule.snapshot_offset()
    }

    fn next_operation_step(&self) -> usize {
        self.last_op_step + self.schedule.delta_t
    }

    /// Threshold used for an operation at `step`.
    pub fn threshold(&self, step: usize) -> Result<f64> {
        match self.mode {
            Mode::StaticP => Ok(self.schedule.p_init),
            _ => self.schedule.threshold_at(step),
        }
    }

    /// Stores a deep copy of all adapters and their moments. Must be called
    /// exactly at [`BeamController::snapshot_step`].
    pub fn capture_snapshot(
        &mut self,
        step: usize,
        model: &AdapterModel<T>,
        opt: &AdamState<T>,
    ) -> Result<()> {
        if step != self.snapshot_step() {
            return Err(Error::contract(format!(
                "snapshot at step {step}, but this interval's snapshot step is {}",
                self.snapshot_step()
            )));
        }
        self.snapshot = Some(Snapshot::take(step, model, opt));
        Ok(())
    }

    /// Called once after each optimizer step. Takes the snapshot at the
    /// midpoint of each interval and operates on every adapter at interval
    /// ends; returns one event per adapter on operation steps.
    pub fn maybe_operate(
        &mut self,
        step: usize,
        model: &mut AdapterModel<T>,
        opt: &mut AdamState<T>,
    ) -> Result<Vec<OperationEvent>> {
        if !self.mode.operates() {
            return Ok(Vec::new());
        }
        if self.schedule.is_operation_step(step) {
            let events = self.operate(step, model, opt)?;
            self.last_op_step = step;
            self.snapshot = None;
            return Ok(events);
        }
        if step == self.snapshot_step() && self.next_operation_step() <= self.schedule.op_window_end {
            self.capture_snapshot(step, model, opt)?;
        }
        Ok(Vec::new())
    }

    fn operate(
        &mut self,
        step: usize,
        model: &mut AdapterModel<T>,
        opt: &mut AdamState<T>,
    ) -> Result<Vec<OperationEvent>> {
        let p = self.threshold(step)?;
        let snapshot = self.snapshot.take();
        let mut events = Vec::new();
        for (idx, adapter) in model.adapters_mut().enumerate() {
            let scores = scores_f64(adapter);
            let k = operable_count(&scores, p)?;
            let (prune, expand) = match self.mode {
                Mode::RandomSelect => random_sets(adapter.rank(), k, &mut self.rng)?,
                _ => select_sets(&scores, k)?,
            };
            let mut event = OperationEvent {
                step,
                adapter: idx,
                mode: self.mode,
                p,
                k,
                prune: prune.clone(),
                expand: expand.clone(),
                pairs: Vec::new(),
                scores,
                status: EventStatus::Applied,
            };

            match self.mode {
                Mode::PruneOnly => {
                    prune_only(adapter, idx, opt, &prune)?;
                    event.expand.clear();
                }
                _ if k == 0 => {}
                _ => match snapshot.as_ref().and_then(|s| s.adapters.get(idx)) {
                    Some(snap) => {
                        event.pairs = prune_expand(adapter, idx, opt, snap, &prune, &expand)?;
                    }
                    None => {
                        warn!(
                            "step {step}: no snapshot for adapter {idx}, skipping prune/expand of {k} ranks"
                        );
                        event.status = EventStatus::SkippedNoSnapshot;
                    }
                },
            }
            events.push(event);
        }
        Ok(events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(p_init: f64, dt: usize, total: usize) -> BeamSchedule {
        BeamSchedule::new(p_init, dt, total, total).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let s = sched(0.95, 10, 100);
        assert_eq!(s.threshold_at(0).unwrap(), 0.95);
        assert_eq!(s.threshold_at(100).unwrap(), 1.0);
        assert!((s.threshold_at(50).unwrap() - 0.975).abs() < 1e-12);
        assert!(s.threshold_at(101).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(BeamSchedule::new(1.0, 10, 100, 100).is_err());
        assert!(BeamSchedule::new(0.0, 10, 100, 100).is_err());
        assert!(BeamSchedule::new(0.9, 1, 100, 100).is_err());
        assert!(BeamSchedule::new(0.9, 10, 100, 101).is_err());
        assert_eq!(
            BeamSchedule::with_default_window(0.9, 10, 300).unwrap().op_window_end(),
            200
        );
    }

    #[test]
    fn operation_steps_for_five_operations() {
        let s = sched(0.95, 1200, 6000);
        assert_eq!(s.operation_steps(), vec![1200, 2400, 3600, 4800, 6000]);
    }

    #[test]
    fn operable_count_examples() {
        assert_eq!(operable_count(&[0.4, 0.3, 0.2, 0.1], 0.9).unwrap(), 1);
        assert_eq!(operable_count(&[0.25; 4], 1.0).unwrap(), 0);
        assert_eq!(operable_count(&[0.7, 0.1, 0.1, 0.1], 0.6).unwrap(), 2);
        assert!(operable_count(&[0.5, 0.6], 0.9).is_err());
        assert!(operable_count(&[], 0.9).is_err());
    }

    #[test]
    fn select_sets_examples() {
        let (p, e) = select_sets(&[0.4, 0.3, 0.2, 0.1], 1).unwrap();
        assert_eq!((p, e), (vec![3], vec![0]));
        let (p, e) = select_sets(&[0.4, 0.3, 0.2, 0.1], 0).unwrap();
        assert!(p.is_empty() && e.is_empty());
        let (p, e) = select_sets(&[1.0 / 6.0; 6], 2).unwrap();
        assert_eq!((p, e), (vec![0, 1], vec![2, 3]));
        assert!(select_sets(&[0.25; 4], 3).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("beam".parse::<Mode>().is_err());
    }
}
