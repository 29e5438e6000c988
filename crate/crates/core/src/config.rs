//! Run configuration, stored as TOML.
//!
//! ```toml
//! schema_version = 1
//! seed = 0
//! mode = "beamlora"        # beamlora | lora | prune_only | random_select | static_p
//! precision = "f64"        # f64 | f32
//! out_dir = "runs/default"
//!
//! [task]        # see TaskConfig
//! [model]       # rank, scale, score_parity, init_std, train_scores
//! [optimizer]   # lr, beta1, beta2, eps, weight_decay, schedule
//! [beam]        # p_init, delta_t, op_window_end (optional)
//! [train]       # steps, batch_size, eval_every, importance_every
//! ```
//!
//! Every section may be omitted and falls back to the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::beam::{default_window_end, BeamSchedule, Mode};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::task::TaskConfig;
use crate::tensor::Precision;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub rank: usize,
    /// Multiplier on the adapter branch.
    pub scale: f64,
    /// Multiply `scale` by the rank for scored adapters, so uniform initial
    /// scores (1/r each) give the same branch magnitude as an unscored
    /// adapter with `scale`.
    pub score_parity: bool,
    /// Std of the Gaussian init of `A`.
    pub init_std: f64,
    /// Whether score logits receive gradient updates.
    pub train_scores: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            scale: 1.0,
            score_parity: true,
            init_std: 0.02,
            train_scores: true,
        }
    }
}

impl ModelSpec {
    /// Branch multiplier actually used for the given mode.
    pub fn effective_scale(&self, mode: Mode) -> f64 {
        if mode.uses_scores() && self.score_parity {
            self.scale * self.rank as f64
        } else {
            self.scale
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: 1e-2,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            schedule: LrSchedule::Constant,
        }
    }
}

impl OptimizerSpec {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate for the 1-based optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = (step.saturating_sub(1)) as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamSpec {
    pub p_init: f64,
    pub delta_t: usize,
    /// Last step at which operations may fire; two thirds of the run when
    /// absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub op_window_end: Option<usize>,
}

impl Default for BeamSpec {
    fn default() -> Self {
        Self {
            p_init: 0.95,
            delta_t: 100,
            op_window_end: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    /// Eval cadence in steps; the last step is always evaluated.
    pub eval_every: usize,
    /// Cadence of per-rank importance logging; 0 disables it.
    pub importance_every: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 750,
            batch_size: 32,
            eval_every: 25,
            importance_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: Mode,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    pub model: ModelSpec,
    pub optimizer: OptimizerSpec,
    pub beam: BeamSpec,
    pub train: TrainSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            mode: Mode::Beamlora,
            precision: Precision::F64,
            out_dir: PathBuf::from("runs/default"),
            task: TaskConfig::default(),
            model: ModelSpec::default(),
            optimizer: OptimizerSpec::default(),
            beam: BeamSpec::default(),
            train: TrainSpec::default(),
        }
    }
}

/// Finds the 1-based line on which a dotted `key` (`section.field`, a bare
/// top-level field, or a bare section name) is assigned or opened.
fn locate(source: &str, key: &str) -> Option<usize> {
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (Some(s), Some(f)),
        None => (None, Some(key)),
    };
    let mut current: Option<String> = None;
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            if section.is_none() && Some(name.trim()) == field {
                return Some(i + 1);
            }
            current = Some(name.trim().to_string());
            continue;
        }
        let assigns = field.is_some_and(|f| {
            t.strip_prefix(f)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        });
        if assigns && current.as_deref() == section {
            return Some(i + 1);
        }
    }
    None
}

impl RunConfig {
    pub fn from_toml_str(source: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(source)?;
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => {
                let line = msg
                    .split('`')
                    .nth(1)
                    .and_then(|key| locate(source, key));
                match line {
                    Some(l) => Error::Config(format!("line {l}: {msg}")),
                    None => Error::Config(msg),
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Toml(t) => Error::Config(format!("{}: {t}", path.display())),
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Semantic checks. Messages name the offending key in backticks.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "`schema_version` {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.task
            .validate()
            .map_err(|e| match e {
                Error::Config(m) => Error::config(format!("`task` section: {m}")),
                other => other,
            })?;
        let m = &self.model;
        if m.rank == 0 || m.rank > self.task.d.min(self.task.k) {
            return Err(Error::config(format!(
                "`model.rank` = {} must lie in 1..=min(d, k) = {}",
                m.rank,
                self.task.d.min(self.task.k)
            )));
        }
        if !(m.scale.is_finite() && m.init_std.is_finite() && m.init_std >= 0.0) {
            return Err(Error::config("`model.scale` and `model.init_std` must be finite"));
        }
        let o = &self.optimizer;
        let bad_opt = [
            ("lr", !(o.lr >= 0.0 && o.lr.is_finite())),
            ("beta1", !(0.0..1.0).contains(&o.beta1)),
            ("beta2", !(0.0..1.0).contains(&o.beta2)),
            ("eps", o.eps.is_nan() || o.eps <= 0.0),
            ("weight_decay", o.weight_decay.is_nan() || o.weight_decay < 0.0),
        ];
        if let Some((key, _)) = bad_opt.iter().find(|(_, bad)| *bad) {
            return Err(Error::config(format!("`optimizer.{key}` is out of range in {o:?}")));
        }
        let t = &self.train;
        if t.steps == 0 {
            return Err(Error::config("`train.steps` must be positive"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("`train.batch_size` must be positive"));
        }
        if t.eval_every == 0 {
            return Err(Error::config("`train.eval_every` must be positive"));
        }
        if self.mode.operates() {
            let b = &self.beam;
            let key = if !(b.p_init > 0.0 && b.p_init < 1.0) {
                "p_init"
            } else if b.delta_t < 2 {
                "delta_t"
            } else {
                "op_window_end"
            };
            self.schedule()
                .map_err(|e| match e {
                    Error::Config(m) => Error::config(format!("`beam.{key}`: {m}")),
                    other => other,
                })?;
        }
        Ok(())
    }

    pub fn op_window_end(&self) -> usize {
        self.beam
            .op_window_end
            .unwrap_or_else(|| default_window_end(self.train.steps))
    }

    pub fn schedule(&self) -> Result<BeamSchedule> {
        BeamSchedule::new(
            self.beam.p_init,
            self.beam.delta_t,
            self.train.steps,
            self.op_window_end(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::from_toml_str("seed = 1\n[model]\nrnak = 4\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("rnak"), "{err}");
    }

    #[test]
    fn semantic_error_reports_line() {
        let src = "seed = 1\n\n[model]\nrank = 99\n";
        let err = RunConfig::from_toml_str(src).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn semantic_errors_find_the_right_section() {
        let src = "[beam]\ndelta_t = 10\n\n[optimizer]\nlr = 0.1\nbeta1 = 1.5\n";
        let err = RunConfig::from_toml_str(src).unwrap_err().to_string();
        assert!(err.contains("line 6") && err.contains("beta1"), "{err}");

        let src = "[train]\nsteps = 10\n[beam]\np_init = 1.5\n";
        let err = RunConfig::from_toml_str(src).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");

        let src = "seed = 2\n[task]\nd = 4\nk = 4\n";
        let err = RunConfig::from_toml_str(src).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn bad_schema_version() {
        let err = RunConfig::from_toml_str("schema_version = 7\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 1") && err.contains("schema_version"), "{err}");
    }

    #[test]
    fn cosine_lr() {
        let o = OptimizerSpec {
            schedule: LrSchedule::Cosine,
            lr: 1.0,
            ..OptimizerSpec::default()
        };
        assert_eq!(o.lr_at(1, 100), 1.0);
        assert!((o.lr_at(51, 100) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn parity_scale() {
        let m = ModelSpec {
            rank: 8,
            scale: 0.5,
            ..ModelSpec::default()
        };
        assert_eq!(m.effective_scale(Mode::Beamlora), 4.0);
        assert_eq!(m.effective_scale(Mode::Lora), 0.5);
    }
}
