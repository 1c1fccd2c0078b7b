//! Adafactor optimization and the multi-task training loop shared by the
//! denoising, prompt pre-training and fine-tuning stages.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{ModelParameters, TokenBatch};
use crate::promptkit::PromptedExample;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr * min(1, sqrt(warmup / step))`.
    InverseSqrt { warmup: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdafactorConfig {
    pub learning_rate: f64,
    pub decay_exponent: f64,
    pub clip_threshold: f64,
    pub eps1: f64,
    pub schedule: LrSchedule,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay_exponent: 0.8,
            clip_threshold: 1.0,
            eps1: 1e-30,
            schedule: LrSchedule::Constant,
        }
    }
}

impl AdafactorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::config("clip_threshold", "must be positive"));
        }
        Ok(())
    }

    pub fn rate_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::InverseSqrt { warmup } => {
                self.learning_rate * (warmup.max(1) as f64 / step.max(1) as f64).sqrt().min(1.0)
            }
        }
    }
}

/// Second-moment statistics for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum Accumulator {
    /// Row and column sums for a parameter viewed as `[rows, cols]`, where
    /// `cols` is the last axis.
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full(Vec<f64>),
}

impl Accumulator {
    fn for_shape(shape: &[usize]) -> Self {
        match shape {
            [.., c] if shape.len() >= 2 => {
                let rows = shape[..shape.len() - 1].iter().product();
                Accumulator::Factored {
                    row: vec![0.0; rows],
                    col: vec![0.0; *c],
                }
            }
            _ => Accumulator::Full(vec![0.0; shape.iter().product()]),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Accumulator::Factored { row, col } => row.len() + col.len(),
            Accumulator::Full(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            Accumulator::Factored { row, col } => Box::new(row.iter().chain(col).copied()),
            Accumulator::Full(v) => Box::new(v.iter().copied()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdafactorState {
    pub step: u64,
    pub accumulators: Vec<Accumulator>,
}

impl AdafactorState {
    pub fn new<T: crate::tensor::Float>(params: &ModelParameters<T>) -> Self {
        Self {
            step: 0,
            accumulators: params.tensors().iter().map(|t| Accumulator::for_shape(t.shape())).collect(),
        }
    }

    pub fn total_floats(&self) -> usize {
        self.accumulators.iter().map(Accumulator::len).sum()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.accumulators.iter().all(|a| a.values().all(|v| v >= 0.0))
    }
}

/// One Adafactor update without momentum. `grads[i]` of `None` means the
/// parameter received no gradient and is treated as zero.
pub fn adafactor_step(
    params: &mut ModelParameters<f32>,
    grads: &[Option<Vec<f32>>],
    state: &mut AdafactorState,
    config: &AdafactorConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.accumulators.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} accumulators",
            params.len(),
            grads.len(),
            state.accumulators.len()
        )));
    }
    let step = state.step + 1;
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Training {
                    param: params.names()[i].clone(),
                    step,
                    message: format!("non-finite gradient value {bad}"),
                });
            }
        }
    }
    state.step = step;
    let beta = 1.0 - (step as f64).powf(-config.decay_exponent);
    let lr = config.rate_at(step);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let shape = params.tensors()[i].shape().to_vec();
        let mut update = vec![0.0f64; g.len()];
        match &mut state.accumulators[i] {
            Accumulator::Factored { row, col } => {
                let cols = col.len();
                let rows = row.len();
                let mut row_sum = vec![0.0f64; rows];
                let mut col_sum = vec![0.0f64; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let sq = (g[r * cols + c] as f64).powi(2) + config.eps1;
                        row_sum[r] += sq;
                        col_sum[c] += sq;
                    }
                }
                for (a, s) in row.iter_mut().zip(&row_sum) {
                    *a = beta * *a + (1.0 - beta) * s;
                }
                for (a, s) in col.iter_mut().zip(&col_sum) {
                    *a = beta * *a + (1.0 - beta) * s;
                }
                let total: f64 = row.iter().sum();
                for r in 0..rows {
                    for c in 0..cols {
                        let v = row[r] * col[c] / total;
                        update[r * cols + c] = g[r * cols + c] as f64 / v.sqrt();
                    }
                }
            }
            Accumulator::Full(acc) => {
                for ((a, &gv), u) in acc.iter_mut().zip(g).zip(update.iter_mut()) {
                    *a = beta * *a + (1.0 - beta) * ((gv as f64).powi(2) + config.eps1);
                    *u = gv as f64 / a.sqrt();
                }
            }
        }
        let rms = (update.iter().map(|u| u * u).sum::<f64>() / update.len().max(1) as f64).sqrt();
        let denom = (rms / config.clip_threshold).max(1.0);
        let t = params.tensor_mut(i);
        debug_assert_eq!(t.shape(), shape.as_slice());
        for (w, u) in t.data_mut().iter_mut().zip(&update) {
            *w -= (lr * u / denom) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Denoise,
    UfaPretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Denoise => "denoise",
            Stage::UfaPretrain => "ufa_pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingStrategy {
    #[default]
    RoundRobin,
    Proportional,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub stage: Stage,
    /// Task names with mixing weights, in round-robin order.
    pub tasks: Vec<(String, f64)>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides the epoch-derived step count when set.
    pub max_steps: Option<u64>,
    /// Dev evaluation period in steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    pub seed: u64,
    pub mixing: MixingStrategy,
    pub optimizer: AdafactorConfig,
}

impl TrainPlan {
    pub fn new(stage: Stage, tasks: &[&str]) -> Self {
        Self {
            stage,
            tasks: tasks.iter().map(|t| (t.to_string(), 1.0)).collect(),
            batch_size: 32,
            epochs: 20,
            max_steps: None,
            eval_every: 0,
            seed: 0,
            mixing: MixingStrategy::RoundRobin,
            optimizer: AdafactorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Plan("plan lists no tasks".into()));
        }
        if let Some((t, w)) = self.tasks.iter().find(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Plan(format!("task `{t}` has invalid mixing weight {w}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Plan("batch_size must be positive".into()));
        }
        if self.max_steps.is_none() && self.epochs == 0 {
            return Err(Error::Plan("either epochs or max_steps must be positive".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub task: String,
    pub input: TokenBatch,
    pub target: TokenBatch,
}

/// Consecutive groups of `batch_size` examples, right-padded with `pad_id`.
pub fn batchify(examples: &[&PromptedExample], batch_size: usize, pad_id: u32) -> Vec<Batch> {
    examples
        .chunks(batch_size.max(1))
        .map(|chunk| Batch {
            task: chunk[0].task_name.clone(),
            input: TokenBatch::from_rows(&chunk.iter().map(|e| e.input_ids.as_slice()).collect::<Vec<_>>(), pad_id),
            target: TokenBatch::from_rows(&chunk.iter().map(|e| e.target_ids.as_slice()).collect::<Vec<_>>(), pad_id),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogEntry {
    Step { step: u64, task: String, loss: f64 },
    Eval { step: u64, dev: BTreeMap<String, f64>, checkpoint: String },
}

impl LogEntry {
    pub fn to_json(&self) -> Value {
        match self {
            LogEntry::Step { step, task, loss } => json!({"step": step, "task": task, "loss": loss}),
            LogEntry::Eval { step, dev, checkpoint } => {
                json!({"step": step, "dev": dev, "checkpoint": checkpoint})
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn step_tasks(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Step { task, .. } => Some(task.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| format!("{}\n", e.to_json())).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Checkpoint with the highest dev value of `metric`; ties go to the
/// earliest evaluation.
pub fn select_best(log: &TrainLog, metric: &str) -> Result<String> {
    let mut best: Option<(f64, &str)> = None;
    let mut seen = false;
    for e in &log.entries {
        if let LogEntry::Eval { dev, checkpoint, .. } = e {
            seen = true;
            if let Some(&v) = dev.get(metric) {
                if best.map_or(true, |(b, _)| v > b) {
                    best = Some((v, checkpoint));
                }
            }
        }
    }
    match best {
        Some((_, c)) => Ok(c.to_string()),
        None if seen => Err(Error::Selection(format!("no evaluation reports metric `{metric}`"))),
        None => Err(Error::Selection("training log holds no dev evaluations".into())),
    }
}

/// Result of one training stage. `snapshots` holds the parameters at each
/// dev evaluation, keyed by checkpoint id.
pub struct StageOutcome {
    pub params: ModelParameters<f32>,
    pub log: TrainLog,
    pub snapshots: Vec<(String, ModelParameters<f32>)>,
    pub steps: u64,
}

impl StageOutcome {
    pub fn snapshot(&self, id: &str) -> Option<&ModelParameters<f32>> {
        self.snapshots.iter().find(|(c, _)| c == id).map(|(_, p)| p)
    }

    /// Parameters of the best dev checkpoint under `metric`.
    pub fn best(&self, metric: &str) -> Result<&ModelParameters<f32>> {
        let id = select_best(&self.log, metric)?;
        self.snapshot(&id)
            .ok_or_else(|| Error::Selection(format!("checkpoint `{id}` was not retained")))
    }
}

/// Endless per-task batch stream: reshuffles the task's examples each pass.
struct TaskStream<'a> {
    examples: &'a [PromptedExample],
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    pad_id: u32,
}

impl<'a> TaskStream<'a> {
    fn new(examples: &'a [PromptedExample], batch_size: usize, pad_id: u32) -> Self {
        Self {
            examples,
            order: Vec::new(),
            cursor: 0,
            batch_size,
            pad_id,
        }
    }

    fn batches_per_epoch(&self) -> u64 {
        self.examples.len().div_ceil(self.batch_size) as u64
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> Batch {
        if self.cursor >= self.order.len() {
            self.order = (0..self.examples.len()).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let chunk: Vec<&PromptedExample> = self.order[self.cursor..end].iter().map(|&i| &self.examples[i]).collect();
        self.cursor = end;
        batchify(&chunk, self.batch_size, self.pad_id).remove(0)
    }
}

/// Dev evaluator called at each evaluation point.
pub type Evaluator<'e> = dyn FnMut(&ModelParameters<f32>, u64) -> Result<BTreeMap<String, f64>> + 'e;

/// Runs one stage from `params`. Every task in the plan needs a nonempty
/// dataset. The step count is `max_steps` or `epochs` passes over the union
/// of task datasets.
pub fn run_stage(
    plan: &TrainPlan,
    params: ModelParameters<f32>,
    datasets: &BTreeMap<String, Vec<PromptedExample>>,
    pad_id: u32,
    mut evaluator: Option<&mut Evaluator<'_>>,
) -> Result<StageOutcome> {
    plan.validate()?;
    let mut streams = Vec::with_capacity(plan.tasks.len());
    for (task, _) in &plan.tasks {
        match datasets.get(task) {
            Some(d) if !d.is_empty() => streams.push(TaskStream::new(d, plan.batch_size, pad_id)),
            _ => return Err(Error::Plan(format!("task `{task}` has an empty dataset"))),
        }
    }
    let total_steps = plan
        .max_steps
        .unwrap_or_else(|| plan.epochs as u64 * streams.iter().map(TaskStream::batches_per_epoch).sum::<u64>());
    let weights: Vec<f64> = plan
        .tasks
        .iter()
        .zip(&streams)
        .map(|((_, w), s)| w * s.examples.len() as f64)
        .collect();
    let weight_total: f64 = weights.iter().sum();

    let mut data_rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = AdafactorState::new(&params);
    let mut params = params;
    let mut log = TrainLog::default();
    let mut snapshots = Vec::new();

    for step in 1..=total_steps {
        let t = match plan.mixing {
            MixingStrategy::RoundRobin => ((step - 1) % streams.len() as u64) as usize,
            MixingStrategy::Proportional => {
                let mut x = data_rng.gen::<f64>() * weight_total;
                let mut pick = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if x < *w {
                        pick = i;
                        break;
                    }
                    x -= w;
                }
                pick
            }
        };
        let batch = streams[t].next(&mut data_rng);
        let loss = train_step(&mut params, &mut state, &batch, &plan.optimizer, Some(&mut dropout_rng))?;
        log.entries.push(LogEntry::Step {
            step,
            task: plan.tasks[t].0.clone(),
            loss,
        });
        let due = (plan.eval_every > 0 && step % plan.eval_every == 0) || step == total_steps;
        if let (true, Some(eval)) = (due, evaluator.as_deref_mut()) {
            let dev = eval(&params, step)?;
            let checkpoint = format!("{}-step{step}", plan.stage.as_str());
            log.entries.push(LogEntry::Eval {
                step,
                dev,
                checkpoint: checkpoint.clone(),
            });
            snapshots.push((checkpoint, params.clone()));
        }
    }
    Ok(StageOutcome {
        params,
        log,
        snapshots,
        steps: total_steps,
    })
}

/// Forward, backward and one optimizer update on a single batch; returns
/// the batch loss.
pub fn train_step(
    params: &mut ModelParameters<f32>,
    state: &mut AdafactorState,
    batch: &Batch,
    optimizer: &AdafactorConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    let (loss, grads) = {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let loss = params.loss_on_tape(&mut tape, &vars, &batch.input, &batch.target, rng)?;
        let value = tape.value(loss).item() as f64;
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| tape.take_grad(v)).collect();
        (value, grads)
    };
    adafactor_step(params, &grads, state, optimizer)?;
    Ok(loss)
}

/// Mean loss over `examples` in evaluation mode.
pub fn mean_loss(params: &ModelParameters<f32>, examples: &[PromptedExample], batch_size: usize, pad_id: u32) -> Result<f64> {
    let refs: Vec<&PromptedExample> = examples.iter().collect();
    let mut total = 0.0;
    let mut tokens = 0usize;
    for b in batchify(&refs, batch_size, pad_id) {
        let n = b.target.ids.iter().filter(|&&t| t != pad_id).count();
        total += params.loss(&b.input, &b.target)? as f64 * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(total / tokens as f64)
}
