//! Versioned JSON checkpoints of a trained model and its optimizer.
//!
//! Arrays are stored as `{ shape, data }` with the values widened to f64,
//! which is exact for both supported precisions, so a save/load round trip is
//! bitwise. The task is not stored; it is regenerated from `task` and
//! `task_seed` and checked against `task_fingerprint`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::beam::Mode;
use crate::error::{Error, Result};
use crate::lora::{Factor, LoraAdapter};
use crate::model::{AdapterModel, Layer, LossKind};
use crate::optim::{AdamConfig, AdamState, Moments, ParamId};
use crate::task::{gen_teacher_student, TaskConfig, TeacherStudentTask};
use crate::tensor::{Precision, Scalar, Tensor};

pub const FORMAT: &str = "beamlora-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ArrayRecord {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.to_f64_vec(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Ok(Tensor::<f64>::new(self.shape.clone(), self.data.clone())?.cast())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerRecord {
    Frozen {
        weight: ArrayRecord,
    },
    Adapted {
        base: ArrayRecord,
        b: ArrayRecord,
        a: ArrayRecord,
        logits: ArrayRecord,
        scale: f64,
        scored: bool,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub adapter: usize,
    pub factor: Factor,
    pub m: ArrayRecord,
    pub v: ArrayRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: AdamConfig,
    pub step: u64,
    pub slots: Vec<SlotRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub precision: Precision,
    pub mode: Mode,
    pub seed: u64,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
    pub loss: LossKind,
    pub task: TaskConfig,
    pub task_seed: u64,
    pub task_fingerprint: String,
    pub layers: Vec<LayerRecord>,
    pub optimizer: OptimizerRecord,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        model: &AdapterModel<T>,
        optimizer: &AdamState<T>,
        task: &TeacherStudentTask,
        mode: Mode,
        seed: u64,
        step: usize,
    ) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Frozen(w) => LayerRecord::Frozen {
                    weight: ArrayRecord::from_tensor(w),
                },
                Layer::Adapted(ad) => LayerRecord::Adapted {
                    base: ArrayRecord::from_tensor(ad.base()),
                    b: ArrayRecord::from_tensor(ad.factor(Factor::B)),
                    a: ArrayRecord::from_tensor(ad.factor(Factor::A)),
                    logits: ArrayRecord::from_tensor(ad.factor(Factor::Logits)),
                    scale: ad.scale().as_f64(),
                    scored: ad.is_scored(),
                    seed: ad.seed(),
                },
            })
            .collect();
        let slots = optimizer
            .ids()
            .map(|id| {
                let mo = optimizer.moments(id).expect("listed id has moments");
                SlotRecord {
                    adapter: id.adapter,
                    factor: id.factor,
                    m: ArrayRecord::from_tensor(&mo.m),
                    v: ArrayRecord::from_tensor(&mo.v),
                }
            })
            .collect();
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            precision: T::PRECISION,
            mode,
            seed,
            step,
            loss: model.loss_kind(),
            task: task.config.clone(),
            task_seed: task.seed,
            task_fingerprint: task.fingerprint.clone(),
            layers,
            optimizer: OptimizerRecord {
                config: *optimizer.config(),
                step: optimizer.step_count(),
                slots,
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT {
            return Err(Error::config(format!("not a checkpoint: format `{}`", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::config(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the model and optimizer at precision `T`.
    pub fn restore<T: Scalar>(&self) -> Result<(AdapterModel<T>, AdamState<T>)> {
        if self.precision != T::PRECISION {
            return Err(Error::config(format!(
                "checkpoint holds {} data, requested {}",
                self.precision,
                T::PRECISION
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    LayerRecord::Frozen { weight } => Layer::Frozen(weight.to_tensor()?),
                    LayerRecord::Adapted {
                        base,
                        b,
                        a,
                        logits,
                        scale,
                        scored,
                        seed,
                    } => Layer::Adapted(LoraAdapter::from_parts(
                        base.to_tensor()?,
                        b.to_tensor()?,
                        a.to_tensor()?,
                        logits.to_tensor()?,
                        T::from_f64_lossy(*scale),
                        *scored,
                        *seed,
                    )?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = AdapterModel::new(layers, self.loss)?;

        let mut opt = AdamState::new(self.optimizer.config);
        for s in &self.optimizer.slots {
            let id = ParamId::new(s.adapter, s.factor);
            let m = s.m.to_tensor()?;
            let v = s.v.to_tensor()?;
            let owner = model
                .adapter(s.adapter)
                .ok_or_else(|| Error::config(format!("optimizer slot for missing adapter {}", s.adapter)))?;
            if m.shape() != owner.factor(s.factor).shape() || v.shape() != m.shape() {
                return Err(Error::Dimension {
                    op: "checkpoint moments",
                    lhs: m.shape().to_vec(),
                    rhs: owner.factor(s.factor).shape().to_vec(),
                });
            }
            opt.set_moments(id, Moments { m, v })?;
        }
        opt.set_step_count(self.optimizer.step);
        Ok((model, opt))
    }

    /// Regenerates the task and checks it against the stored fingerprint.
    pub fn task(&self) -> Result<TeacherStudentTask> {
        let task = gen_teacher_student(&self.task, self.task_seed)?;
        if task.fingerprint != self.task_fingerprint {
            return Err(Error::contract(format!(
                "regenerated task fingerprint {} does not match checkpoint {}",
                task.fingerprint, self.task_fingerprint
            )));
        }
        Ok(task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::train::run;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.task.d = 6;
        cfg.task.k = 5;
        cfg.task.spectrum = vec![2.0, 1.0];
        cfg.task.n_train = 16;
        cfg.task.n_eval = 8;
        cfg.model.rank = 4;
        cfg.train.steps = 12;
        cfg.train.batch_size = 4;
        cfg.beam.delta_t = 4;
        cfg
    }

    #[test]
    fn round_trip_is_bitwise() {
        let out = run::<f64>(&tiny()).unwrap();
        let ck = Checkpoint::capture(&out.model, &out.optimizer, &out.task, Mode::Beamlora, 0, 12);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(ck, back);
        let (model, opt) = back.restore::<f64>().unwrap();
        assert_eq!(model, out.model);
        assert_eq!(opt, out.optimizer);
        assert_eq!(back.task().unwrap(), out.task);
    }

    #[test]
    fn f32_round_trip() {
        let mut cfg = tiny();
        cfg.precision = Precision::F32;
        let out = run::<f32>(&cfg).unwrap();
        let ck = Checkpoint::capture(&out.model, &out.optimizer, &out.task, cfg.mode, 0, 12);
        let (model, _) = Checkpoint::from_json(&ck.to_json().unwrap())
            .unwrap()
            .restore::<f32>()
            .unwrap();
        assert_eq!(model, out.model);
        assert!(ck.restore::<f64>().is_err());
    }

    #[test]
    fn rejects_foreign_format() {
        let out = run::<f64>(&tiny()).unwrap();
        let mut ck = Checkpoint::capture(&out.model, &out.optimizer, &out.task, Mode::Lora, 0, 12);
        ck.version = 99;
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
        ck.version = VERSION;
        ck.format = "other".into();
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
    }
}
