//! Staged training: distillation and task stages, AdamW, periodic
//! validation and best-checkpoint selection.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_record, ExampleRecord, FeatureStore};
use crate::distill::{
    check_compatible, item_loss, loss_distil_graph, DistillationBatchItem, DistillationConfig, LossBreakdown,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy_exact, accuracy_vqa_soft, annotation_multiset, predict};
use crate::model::{EncoderOutput, Gradients, Model, ModelConfig, ParamGroup, WordTagImageTriple};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenize::SubwordVocab;
use crate::vocab::{encode_targets, majority_answer, AnswerVocabulary, EncodedTarget, TargetMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageObjective {
    Distillation,
    Task,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub epochs: usize,
    /// Optional cap on optimization steps within the stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub learning_rate: f64,
    #[serde(default)]
    pub frozen: Vec<ParamGroup>,
    pub objective: StageObjective,
}

impl StageConfig {
    fn new(name: &str, epochs: usize, learning_rate: f64, frozen: &[ParamGroup], objective: StageObjective) -> Self {
        Self {
            name: name.into(),
            epochs,
            max_steps: None,
            learning_rate,
            frozen: frozen.to_vec(),
            objective,
        }
    }

    pub fn trainable(&self, group: ParamGroup) -> bool {
        !self.frozen.contains(&group)
    }
}

/// Everything but the classifier.
pub const BACKBONE: [ParamGroup; 3] = [ParamGroup::Embeddings, ParamGroup::ImageProjection, ParamGroup::Encoder];

fn default_batch_size() -> usize {
    32
}
fn default_interval() -> u64 {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Validation fires whenever the global step is a multiple of this.
    #[serde(default = "default_interval")]
    pub validation_interval: u64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    fn with_stages(stages: Vec<StageConfig>) -> Self {
        Self {
            stages,
            optimizer: AdamWConfig::default(),
            batch_size: default_batch_size(),
            validation_interval: default_interval(),
            seed: 0,
        }
    }

    /// 10 epochs of distillation at 1e-4.
    pub fn full_kd() -> Self {
        Self::with_stages(vec![StageConfig::new(
            "kd",
            10,
            1e-4,
            &[],
            StageObjective::Distillation,
        )])
    }

    /// 5 classifier-only epochs at 1e-4, then 15 full epochs at 5e-5.
    pub fn full_finetune() -> Self {
        Self::with_stages(vec![
            StageConfig::new("finetune-head", 5, 1e-4, &BACKBONE, StageObjective::Task),
            StageConfig::new("finetune-full", 15, 5e-5, &[], StageObjective::Task),
        ])
    }

    /// 5 classifier-only epochs at 1e-4, then 25 full epochs at 5e-5.
    pub fn full_aug() -> Self {
        Self::with_stages(vec![
            StageConfig::new("aug-head", 5, 1e-4, &BACKBONE, StageObjective::Task),
            StageConfig::new("aug-full", 25, 5e-5, &[], StageObjective::Task),
        ])
    }

    /// Small-corpus distillation: a flat 2e-3 rate for 500 steps.
    pub fn desk_kd() -> Self {
        let mut s = StageConfig::new("kd", 1000, 2e-3, &[], StageObjective::Distillation);
        s.max_steps = Some(500);
        Self {
            batch_size: 16,
            validation_interval: 100,
            ..Self::with_stages(vec![s])
        }
    }

    pub fn desk_finetune() -> Self {
        Self {
            batch_size: 8,
            validation_interval: 100,
            ..Self::with_stages(vec![
                StageConfig::new("finetune-head", 10, 3e-3, &BACKBONE, StageObjective::Task),
                StageConfig::new("finetune-full", 400, 1e-3, &[], StageObjective::Task),
            ])
        }
    }

    pub fn desk_aug() -> Self {
        Self {
            batch_size: 8,
            validation_interval: 100,
            ..Self::with_stages(vec![
                StageConfig::new("aug-head", 5, 3e-3, &BACKBONE, StageObjective::Task),
                StageConfig::new("aug-full", 20, 1e-3, &[], StageObjective::Task),
            ])
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "full-kd" => Self::full_kd(),
            "full-finetune" => Self::full_finetune(),
            "full-aug" => Self::full_aug(),
            "desk-kd" => Self::desk_kd(),
            "desk-finetune" => Self::desk_finetune(),
            "desk-aug" => Self::desk_aug(),
            other => return Err(Error::config(format!("unknown training preset {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.validation_interval == 0 {
            return Err(Error::config("validation_interval must be at least 1"));
        }
        for s in &self.stages {
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return Err(Error::config(format!(
                    "stage {}: learning rate must be positive",
                    s.name
                )));
            }
        }
        Ok(())
    }

    fn require(&self, objective: StageObjective) -> Result<()> {
        self.validate()?;
        match self.stages.iter().find(|s| s.objective != objective) {
            Some(s) => Err(Error::config(format!(
                "stage {} has objective {:?}, expected {objective:?}",
                s.name, s.objective
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub stage: String,
    /// Batch-mean training loss.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub step: u64,
    pub stage: String,
    /// Higher is better: accuracy for task stages, negated mean
    /// distillation loss for distillation stages.
    pub metric: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub step: u64,
    pub metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepLog>,
    pub validations: Vec<ValidationLog>,
    pub best: Option<BestCheckpoint>,
}

impl RunRecord {
    pub fn last_step(&self) -> u64 {
        self.steps.last().map_or(0, |s| s.step)
    }

    /// Appends another run's history, shifted to start after this one.
    pub fn extend(&mut self, other: RunRecord) {
        let offset = self.last_step();
        let shift = |s: u64| s + offset;
        self.steps.extend(other.steps.into_iter().map(|mut s| {
            s.step = shift(s.step);
            s
        }));
        self.validations.extend(other.validations.into_iter().map(|mut v| {
            v.step = shift(v.step);
            v
        }));
        if let Some(b) = other.best {
            if self.best.is_none_or(|cur| b.metric > cur.metric) {
                self.best = Some(BestCheckpoint {
                    step: shift(b.step),
                    metric: b.metric,
                });
            }
        }
    }
}

struct BatchResult<T> {
    loss: f64,
    breakdown: Option<LossBreakdown>,
    grads: Gradients<T>,
}

/// Runs `f` over `0..n` on a few threads and returns results in index order.
fn map_ordered<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |t| t.get())
        .min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| scope.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Per-item dropout stream, independent of how a batch is split across threads.
fn item_rng(seed: u64, step: u64, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(1 << 20).wrapping_add(slot as u64));
    rng
}

fn mean_batch<T: Scalar>(model: &Model<T>, parts: Vec<(f64, Option<LossBreakdown>, Gradients<T>)>) -> BatchResult<T> {
    let n = parts.len();
    let scale = T::of(1.0 / n as f64);
    let mut grads = Gradients {
        grads: vec![None; model.params().len()],
    };
    let mut loss = 0.0;
    let mut breakdowns = Vec::new();
    for (l, b, g) in parts {
        loss += l;
        grads.add_scaled(&g, scale);
        breakdowns.extend(b);
    }
    BatchResult {
        loss: loss / n as f64,
        breakdown: (!breakdowns.is_empty()).then(|| LossBreakdown::mean(&breakdowns)),
        grads,
    }
}

/// Validation metric of a model; higher is better.
type Validator<'a, T> = dyn Fn(&Model<T>) -> Result<f64> + 'a;

/// Shared loop: epochs of shuffled mini-batches, one optimizer step per
/// batch, validation at multiples of the interval, best-state tracking.
struct Loop<'a, T> {
    config: &'a TrainConfig,
    record: RunRecord,
    step: u64,
    best_state: Option<Vec<Matrix<T>>>,
}

impl<'a, T: Scalar> Loop<'a, T> {
    fn new(config: &'a TrainConfig) -> Self {
        Self {
            config,
            record: RunRecord::default(),
            step: 0,
            best_state: None,
        }
    }

    fn run(
        mut self,
        model: &mut Model<T>,
        n_items: usize,
        batch: impl Fn(&Model<T>, &[usize], u64, &StageConfig) -> Result<BatchResult<T>>,
        validate: Option<&Validator<'_, T>>,
    ) -> Result<RunRecord> {
        let mut optimizer = AdamW::new(self.config.optimizer, model.params().len())?;
        for (si, stage) in self.config.stages.iter().enumerate() {
            let mut order: Vec<usize> = (0..n_items).collect();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(si as u64));
            let mut stage_steps = 0u64;
            'epochs: for _ in 0..stage.epochs {
                order.shuffle(&mut shuffle_rng);
                for chunk in order.chunks(self.config.batch_size) {
                    if stage.max_steps.is_some_and(|m| stage_steps >= m) {
                        break 'epochs;
                    }
                    self.step += 1;
                    stage_steps += 1;
                    let result = batch(model, chunk, self.step, stage).map_err(|e| match e {
                        Error::Numeric(msg) => Error::Numeric(format!(
                            "stage {} step {} items {:?}: {msg}",
                            stage.name, self.step, chunk
                        )),
                        other => other,
                    })?;
                    if !result.loss.is_finite() {
                        return Err(Error::Numeric(format!(
                            "stage {} step {}: loss {} on items {:?}; breakdown {}",
                            stage.name,
                            self.step,
                            result.loss,
                            chunk,
                            serde_json::to_string(&result.breakdown).unwrap_or_default()
                        )));
                    }
                    optimizer.step(model.params_mut(), &result.grads, stage.learning_rate)?;
                    self.record.steps.push(StepLog {
                        step: self.step,
                        stage: stage.name.clone(),
                        loss: result.loss,
                        breakdown: result.breakdown,
                    });
                    if self.step.is_multiple_of(self.config.validation_interval) {
                        if let Some(v) = validate {
                            self.validate(model, stage, v)?;
                        }
                    }
                }
            }
        }
        if let Some(state) = self.best_state.take() {
            for (p, v) in model.params_mut().iter_mut().zip(state) {
                p.value = v;
            }
        }
        Ok(self.record)
    }

    fn validate(&mut self, model: &Model<T>, stage: &StageConfig, v: &Validator<'_, T>) -> Result<()> {
        let metric = v(model)?;
        log::info!("step {} ({}): validation metric {metric:.6}", self.step, stage.name);
        self.record.validations.push(ValidationLog {
            step: self.step,
            stage: stage.name.clone(),
            metric,
        });
        if self.record.best.is_none_or(|b| metric > b.metric) {
            self.record.best = Some(BestCheckpoint {
                step: self.step,
                metric,
            });
            self.best_state = Some(model.params().iter().map(|p| p.value.clone()).collect());
        }
        Ok(())
    }
}

/// Teacher hidden states on the retained layers, computed once in
/// evaluation mode.
pub fn teacher_outputs<T: Scalar>(
    teacher: &Model<T>,
    items: &[DistillationBatchItem<T>],
    layers: &BTreeSet<usize>,
) -> Result<Vec<EncoderOutput<T>>> {
    map_ordered(items.len(), |i| teacher.forward(&items[i].teacher_input, layers, None))
        .into_iter()
        .collect()
}

/// Mean evaluation-mode distillation loss.
pub fn mean_distillation_loss<T: Scalar>(
    teacher: &Model<T>,
    student: &Model<T>,
    items: &[DistillationBatchItem<T>],
    cfg: &DistillationConfig,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::contract("distillation loss over an empty dataset"));
    }
    let layers = check_compatible(teacher.config(), student.config(), cfg)?;
    let totals = map_ordered(items.len(), |i| {
        item_loss(&items[i], teacher, student, cfg, &layers).map(|b| b.total)
    });
    let mut sum = 0.0;
    for t in totals {
        sum += t?;
    }
    Ok(sum / items.len() as f64)
}

/// Optimizes the student on the distillation loss alone. The teacher is
/// only read.
pub fn run_kd_stage<T: Scalar>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    train: &[DistillationBatchItem<T>],
    valid: &[DistillationBatchItem<T>],
    dcfg: &DistillationConfig,
    tcfg: &TrainConfig,
) -> Result<RunRecord> {
    tcfg.require(StageObjective::Distillation)?;
    let layers = check_compatible(teacher.config(), student.config(), dcfg)?;
    if train.is_empty() && tcfg.stages.iter().any(|s| s.epochs > 0) {
        return Err(Error::contract("distillation needs at least one parallel example"));
    }
    let cached = teacher_outputs(teacher, train, &layers)?;
    let use_dropout = student.config().dropout > 0.0 || student.config().attention_dropout > 0.0;
    let seed = tcfg.seed;

    let batch = |model: &Model<T>, idx: &[usize], step: u64, stage: &StageConfig| -> Result<BatchResult<T>> {
        let parts = map_ordered(idx.len(), |k| {
            let i = idx[k];
            let mut rng = item_rng(seed, step, k);
            let mut breakdown = None;
            let (loss, grads) = model.gradients(
                |g| stage.trainable(g),
                |graph, bound| {
                    let gl = loss_distil_graph(
                        graph,
                        model,
                        bound,
                        &train[i],
                        &cached[i],
                        dcfg,
                        &layers,
                        use_dropout.then_some(&mut rng),
                    )?;
                    breakdown = Some(gl.breakdown(graph));
                    Ok(gl.total)
                },
            )?;
            Ok((loss.as_f64(), breakdown, grads))
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(mean_batch(model, parts))
    };
    let validate = |m: &Model<T>| -> Result<f64> { Ok(-mean_distillation_loss(teacher, m, valid, dcfg)?) };
    let v: Option<&Validator<'_, T>> = if valid.is_empty() { None } else { Some(&validate) };
    Loop::new(tcfg).run(student, train.len(), batch, v)
}

/// One task example ready for the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample<T> {
    pub question_id: String,
    pub question: String,
    pub input: WordTagImageTriple<T>,
    pub target: EncodedTarget,
    /// Majority reference answer.
    pub reference: String,
    /// Annotator multiset (may be shorter than ten).
    pub annotations: Vec<String>,
}

/// Tokenizes and encodes records. Uncovered records are dropped in single
/// mode and kept with all-zero targets in soft mode. Returns the examples
/// and the number dropped.
pub fn prepare_task_examples<T: Scalar>(
    records: &[ExampleRecord],
    vocab: &SubwordVocab,
    answers: &AnswerVocabulary,
    mode: TargetMode,
    config: &ModelConfig,
    store: Option<&FeatureStore>,
) -> Result<(Vec<TaskExample<T>>, usize)> {
    let mut out = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        let reference = majority_answer(&r.answers)
            .ok_or_else(|| Error::contract(format!("record {} has no answers", r.question_id)))?
            .to_string();
        let target = match mode {
            TargetMode::Single => encode_targets(&[(reference.clone(), 1)], answers, mode)?,
            TargetMode::Soft => encode_targets(&r.answers, answers, mode)?,
        };
        if mode == TargetMode::Single && !target.covered {
            dropped += 1;
            continue;
        }
        out.push(TaskExample {
            question_id: r.question_id.clone(),
            question: r.question.clone(),
            input: assemble_record(r, vocab, config, store)?,
            target,
            reference,
            annotations: annotation_multiset(&r.answers),
        });
    }
    Ok((out, dropped))
}

/// Exact-match accuracy against the majority answer.
pub fn task_accuracy<T: Scalar>(
    model: &Model<T>,
    examples: &[TaskExample<T>],
    answers: &AnswerVocabulary,
) -> Result<f64> {
    let inputs: Vec<WordTagImageTriple<T>> = examples.iter().map(|e| e.input.clone()).collect();
    let preds = predict(model, &inputs)?;
    let refs: Vec<&str> = examples.iter().map(|e| e.reference.as_str()).collect();
    accuracy_exact(&preds, &refs, answers)
}

fn validation_accuracy<T: Scalar>(
    model: &Model<T>,
    examples: &[TaskExample<T>],
    answers: &AnswerVocabulary,
    mode: TargetMode,
) -> Result<f64> {
    if mode == TargetMode::Soft && examples.iter().all(|e| e.annotations.len() == 10) {
        let inputs: Vec<WordTagImageTriple<T>> = examples.iter().map(|e| e.input.clone()).collect();
        let preds = predict(model, &inputs)?;
        let ann: Vec<Vec<String>> = examples.iter().map(|e| e.annotations.clone()).collect();
        return accuracy_vqa_soft(&preds, &ann, answers);
    }
    task_accuracy(model, examples, answers)
}

/// Runs every task stage of `tcfg` in order (for example classifier-only,
/// then full) and leaves the model at the best validated state.
pub fn run_task_stages<T: Scalar>(
    model: &mut Model<T>,
    train: &[TaskExample<T>],
    valid: &[TaskExample<T>],
    answers: &AnswerVocabulary,
    mode: TargetMode,
    tcfg: &TrainConfig,
) -> Result<RunRecord> {
    tcfg.require(StageObjective::Task)?;
    if train.is_empty() {
        return Err(Error::contract("task training needs at least one example"));
    }
    if model.config().num_classes != answers.len() {
        return Err(Error::contract(format!(
            "model has {} classes, answer vocabulary has {}",
            model.config().num_classes,
            answers.len()
        )));
    }
    let use_dropout = model.config().dropout > 0.0 || model.config().attention_dropout > 0.0;
    let seed = tcfg.seed;
    let last = BTreeSet::from([model.config().num_layers]);
    let batch = |m: &Model<T>, idx: &[usize], step: u64, stage: &StageConfig| -> Result<BatchResult<T>> {
        let parts = map_ordered(idx.len(), |k| {
            let ex = &train[idx[k]];
            let mut rng = item_rng(seed, step, k);
            let (loss, grads) = m.gradients(
                |g| stage.trainable(g),
                |graph, bound| {
                    let out =
                        m.forward_graph(graph, bound, &ex.input, (0, 0), &last, use_dropout.then_some(&mut rng))?;
                    let logits = m.classify_graph(graph, bound, &out)?;
                    match mode {
                        TargetMode::Single => {
                            let class = ex
                                .target
                                .class()
                                .ok_or_else(|| Error::contract(format!("example {} has no class", ex.question_id)))?;
                            Ok(graph.softmax_xent(logits, class))
                        }
                        TargetMode::Soft => {
                            Ok(graph.bce_logits(logits, ex.target.scores.iter().map(|&s| T::of(s)).collect()))
                        }
                    }
                },
            )?;
            Ok((loss.as_f64(), None, grads))
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(mean_batch(m, parts))
    };
    let validate = |m: &Model<T>| validation_accuracy(m, valid, answers, mode);
    let v: Option<&Validator<'_, T>> = if valid.is_empty() { None } else { Some(&validate) };
    Loop::new(tcfg).run(model, train.len(), batch, v)
}

/// Classifier-only then full fine-tuning on the task data.
pub fn run_finetune_stage<T: Scalar>(
    model: &mut Model<T>,
    train: &[TaskExample<T>],
    valid: &[TaskExample<T>],
    answers: &AnswerVocabulary,
    mode: TargetMode,
    tcfg: &TrainConfig,
) -> Result<RunRecord> {
    run_task_stages(model, train, valid, answers, mode, tcfg)
}

/// The same machinery on machine-translated task data.
pub fn run_aug_stage<T: Scalar>(
    model: &mut Model<T>,
    train: &[TaskExample<T>],
    valid: &[TaskExample<T>],
    answers: &AnswerVocabulary,
    mode: TargetMode,
    tcfg: &TrainConfig,
) -> Result<RunRecord> {
    run_task_stages(model, train, valid, answers, mode, tcfg)
}
