//! Training loop, evaluation and the per-run record.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::beam::{BeamController, BeamSchedule, Mode, OperationEvent};
use crate::config::{ModelSpec, OptimizerSpec, RunConfig};
use crate::error::{Error, Result};
use crate::lora::{Factor, ImportanceMode, LoraAdapter};
use crate::model::{select_columns, AdapterModel, Layer};
use crate::optim::{AdamState, ParamId};
use crate::task::{gen_teacher_student, TaskData, TeacherStudentTask};
use crate::tensor::{Precision, Scalar, Tensor};

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Init = 1,
    Batches = 2,
    Controller = 3,
}

/// SplitMix64 finalizer over `seed` and the stream tag.
pub fn derive_seed(seed: u64, stream: SeedStream, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub lr: f64,
    /// Threshold of the rank controller at this step (operating modes only).
    pub p: Option<f64>,
}

/// Per-rank importance of one adapter at one step, in all three measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSample {
    pub step: usize,
    pub adapter: usize,
    pub frobenius: Vec<f64>,
    pub frobenius_scored: Vec<f64>,
    pub score: Vec<f64>,
}

impl ImportanceSample {
    pub fn values(&self, mode: ImportanceMode) -> &[f64] {
        match mode {
            ImportanceMode::Frobenius => &self.frobenius,
            ImportanceMode::FrobeniusScored => &self.frobenius_scored,
            ImportanceMode::Score => &self.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize, loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub precision: Precision,
    pub task_seed: u64,
    pub task_fingerprint: String,
    pub initial_eval_loss: f64,
    pub metrics: Vec<MetricRow>,
    pub events: Vec<OperationEvent>,
    pub importance: Vec<ImportanceSample>,
    pub status: RunStatus,
}

impl RunRecord {
    /// Eval loss of the last evaluated step.
    pub fn final_eval_loss(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.eval_loss)
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub mode: Mode,
    /// Rank controller schedule; `None` disables operations.
    pub beam: Option<BeamSchedule>,
    pub train_scores: bool,
    pub eval_every: usize,
    pub importance_every: usize,
}

impl TrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            steps: cfg.train.steps,
            batch_size: cfg.train.batch_size,
            optimizer: cfg.optimizer.clone(),
            mode: cfg.mode,
            beam: if cfg.mode.operates() {
                Some(cfg.schedule()?)
            } else {
                None
            },
            train_scores: cfg.model.train_scores,
            eval_every: cfg.train.eval_every,
            importance_every: cfg.train.importance_every,
        })
    }
}

/// Student with one adapter per task layer, initialized from `seed`.
pub fn build_student<T: Scalar>(
    task: &TeacherStudentTask,
    spec: &ModelSpec,
    mode: Mode,
    seed: u64,
) -> Result<AdapterModel<T>> {
    let layers = task
        .bases
        .iter()
        .enumerate()
        .map(|(i, base)| {
            let ad = LoraAdapter::new(
                base.cast::<T>(),
                spec.rank,
                T::from_f64_lossy(spec.init_std),
                derive_seed(seed, SeedStream::Init, i as u64),
            )?
            .with_scale(T::from_f64_lossy(spec.effective_scale(mode)));
            Ok(Layer::Adapted(if mode.uses_scores() {
                ad
            } else {
                ad.without_scores()
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    AdapterModel::new(layers, task.config.loss)
}

/// Optimizer with zeroed moments for every trainable tensor of `model`.
pub fn build_optimizer<T: Scalar>(
    model: &AdapterModel<T>,
    spec: &OptimizerSpec,
    train_scores: bool,
) -> AdamState<T> {
    let mut opt = AdamState::new(spec.adam());
    for (i, ad) in model.adapters().enumerate() {
        opt.register(ParamId::new(i, Factor::B), ad.factor(Factor::B).shape());
        opt.register(ParamId::new(i, Factor::A), ad.factor(Factor::A).shape());
        if ad.is_scored() && train_scores {
            opt.register(ParamId::new(i, Factor::Logits), &[ad.rank()]);
        }
    }
    opt
}

/// Mean eval-split loss.
pub fn evaluate<T: Scalar>(model: &AdapterModel<T>, data: &TaskData<T>) -> Result<f64> {
    model.evaluate(&data.x_eval, &data.y_eval)
}

fn importance_samples<T: Scalar>(step: usize, model: &AdapterModel<T>) -> Vec<ImportanceSample> {
    model
        .adapters()
        .enumerate()
        .map(|(i, ad)| ImportanceSample {
            step,
            adapter: i,
            frobenius: ad.rank_importance(ImportanceMode::Frobenius).to_f64_vec(),
            frobenius_scored: ad.rank_importance(ImportanceMode::FrobeniusScored).to_f64_vec(),
            score: ad.rank_importance(ImportanceMode::Score).to_f64_vec(),
        })
        .collect()
}

struct Batcher {
    n: usize,
    size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut b = Self {
            n,
            size: size.min(n),
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        if b.size == n {
            b.pos = 0;
        }
        b
    }

    fn next(&mut self) -> &[usize] {
        if self.size == self.n {
            return &self.order;
        }
        if self.pos + self.size > self.n {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        out
    }
}

/// Trains `model` in place and returns the run record.
///
/// Each step: forward and backward on a minibatch, one Adam update, then the
/// rank controller (when a schedule is given). A non-finite loss stops the
/// run with [`RunStatus::Diverged`]; the record up to that point is kept.
pub fn train<T: Scalar>(
    model: &mut AdapterModel<T>,
    task: &TeacherStudentTask,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(RunRecord, AdamState<T>)> {
    if opts.steps == 0 || opts.batch_size == 0 || opts.eval_every == 0 {
        return Err(Error::config("steps, batch_size and eval_every must be positive"));
    }
    let data = task.data::<T>();
    let train_scores = opts.train_scores && opts.mode.uses_scores();
    let mut opt = build_optimizer(model, &opts.optimizer, train_scores);
    let mut controller = opts
        .beam
        .filter(|_| opts.mode.operates())
        .map(|s| BeamController::<T>::new(s, opts.mode, derive_seed(seed, SeedStream::Controller, 0)));
    let mut batcher = Batcher::new(
        data.x_train.cols(),
        opts.batch_size,
        derive_seed(seed, SeedStream::Batches, 0),
    );

    let mut record = RunRecord {
        mode: opts.mode,
        seed,
        precision: T::PRECISION,
        task_seed: task.seed,
        task_fingerprint: task.fingerprint.clone(),
        initial_eval_loss: evaluate(model, &data)?,
        metrics: Vec::with_capacity(opts.steps),
        events: Vec::new(),
        importance: Vec::new(),
        status: RunStatus::Completed,
    };
    if opts.importance_every > 0 {
        record.importance.extend(importance_samples(0, model));
    }

    for step in 1..=opts.steps {
        let idx = batcher.next();
        let x = select_columns(&data.x_train, idx);
        let y = data.y_train.select(idx);

        let mut tape = Tape::new();
        let vars = model.loss_on(&mut tape, &x, &y, train_scores)?;
        let loss = tape.value(vars.loss).data()[0].as_f64();
        if !loss.is_finite() {
            log::error!("step {step}: loss {loss}, aborting run");
            record.status = RunStatus::Diverged { step, loss };
            break;
        }
        let mut grads = tape.backward(vars.loss)?;

        let mut owned = Vec::new();
        for (i, v) in vars.adapters.iter().enumerate() {
            let gb = grads.take(v.b).unwrap_or_else(|| Tensor::zeros(tape.value(v.b).shape()));
            let ga = grads.take(v.a).unwrap_or_else(|| Tensor::zeros(tape.value(v.a).shape()));
            let gl = v.logits.map(|l| {
                grads
                    .take(l)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(l).shape()))
            });
            owned.push((i, gb, ga, gl));
        }
        drop(tape);

        let lr = opts.optimizer.lr_at(step, opts.steps);
        {
            let mut params = Vec::new();
            for (ad, (i, gb, ga, gl)) in model.adapters_mut().zip(&owned) {
                let (b, a, logits) = ad.factors_mut();
                params.push((ParamId::new(*i, Factor::B), b, gb));
                params.push((ParamId::new(*i, Factor::A), a, ga));
                if let Some(gl) = gl {
                    params.push((ParamId::new(*i, Factor::Logits), logits, gl));
                }
            }
            opt.step_with_lr(&mut params, lr)?;
        }

        let mut p = None;
        if let Some(ctrl) = controller.as_mut() {
            p = Some(ctrl.threshold(step)?);
            record.events.extend(ctrl.maybe_operate(step, model, &mut opt)?);
        }

        let eval_loss = if step % opts.eval_every == 0 || step == opts.steps {
            Some(evaluate(model, &data)?)
        } else {
            None
        };
        record.metrics.push(MetricRow {
            step,
            train_loss: loss,
            eval_loss,
            lr,
            p,
        });
        if opts.importance_every > 0 && step % opts.importance_every == 0 {
            record.importance.extend(importance_samples(step, model));
        }
    }
    Ok((record, opt))
}

/// Everything produced by [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput<T: Scalar> {
    pub task: TeacherStudentTask,
    pub model: AdapterModel<T>,
    pub optimizer: AdamState<T>,
    pub record: RunRecord,
}

/// Generates the task, builds the student and trains it per `cfg`. The task
/// and the student init both derive from `cfg.seed`, so two configs that
/// differ only in mode are a paired comparison.
pub fn run<T: Scalar>(cfg: &RunConfig) -> Result<RunOutput<T>> {
    cfg.validate()?;
    if T::PRECISION != cfg.precision {
        return Err(Error::config(format!(
            "config asks for {} but the run was instantiated at {}",
            cfg.precision,
            T::PRECISION
        )));
    }
    let task = gen_teacher_student(&cfg.task, cfg.seed)?;
    let mut model = build_student::<T>(&task, &cfg.model, cfg.mode, cfg.seed)?;
    let opts = TrainOptions::from_config(cfg)?;
    let (record, optimizer) = train(&mut model, &task, &opts, cfg.seed)?;
    Ok(RunOutput {
        task,
        model,
        optimizer,
        record,
    })
}

/// Final eval loss of a run at the configured precision.
pub fn run_final_loss(cfg: &RunConfig) -> Result<(f64, RunRecord)> {
    let record = match cfg.precision {
        Precision::F64 => run::<f64>(cfg)?.record,
        Precision::F32 => run::<f32>(cfg)?.record,
    };
    if let RunStatus::Diverged { step, loss } = record.status {
        return Err(Error::Diverged { step, loss });
    }
    let loss = record
        .final_eval_loss()
        .ok_or_else(|| Error::contract("run finished without an evaluation"))?;
    Ok((loss, record))
}
