//! Streaming next-batch training: every batch is first scored with the
//! current parameters (and logged), then trained on.

pub mod metrics;
pub mod optim;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::error::{Error, Result};
use crate::features::Request;
use crate::numerics::kernels::sigmoid;
use crate::numerics::Real;
use crate::stack::{loss, OneTrans};

pub use metrics::{auc, uauc};
pub use optim::{adagrad_update, clip_grads, rmsprop_update, OptimizerConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Impressions per batch; a batch never splits a request.
    pub batch_size: usize,
    /// Stop after this many updates; the report is then marked partial.
    pub max_steps: Option<u64>,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_steps: None,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small batches with [`OptimizerConfig::desk_scale`].
    pub fn desk_scale() -> Self {
        Self {
            batch_size: 16,
            max_steps: None,
            optimizer: OptimizerConfig::desk_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub day: u32,
    pub user_id: String,
    pub task: Task,
    pub prediction: f64,
    pub label: u8,
    /// Parameter revision that produced the prediction.
    pub version: u64,
    /// Index of the batch the impression belongs to.
    pub batch: u64,
}

/// Predictions logged before each update, plus per-impression losses.
#[derive(Debug, Clone, Default)]
pub struct EvalLedger {
    pub entries: Vec<LedgerEntry>,
    /// `(day, loss)` per impression.
    pub losses: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DayMetrics {
    pub day: u32,
    pub task: Task,
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
    pub impressions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSummary {
    pub task: Task,
    /// Macro-average over days where the metric exists.
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
}

impl EvalLedger {
    pub fn daily_metrics(&self, tasks: &[Task]) -> Vec<DayMetrics> {
        let mut days: Vec<u32> = self.entries.iter().map(|e| e.day).collect();
        days.sort_unstable();
        days.dedup();
        let mut out = Vec::new();
        for &day in &days {
            for &task in tasks {
                let rows: Vec<&LedgerEntry> = self.entries.iter().filter(|e| e.day == day && e.task == task).collect();
                let p: Vec<f64> = rows.iter().map(|e| e.prediction).collect();
                let l: Vec<u8> = rows.iter().map(|e| e.label).collect();
                let u: Vec<&str> = rows.iter().map(|e| e.user_id.as_str()).collect();
                out.push(DayMetrics {
                    day,
                    task,
                    auc: auc(&p, &l),
                    uauc: uauc(&p, &l, &u),
                    impressions: rows.len(),
                });
            }
        }
        out
    }

    /// True iff every prediction came from the parameters left by the
    /// previous batch.
    pub fn eval_precedes_training(&self) -> bool {
        self.entries.iter().all(|e| e.version == e.batch)
    }

    /// Mean impression loss on the last logged day.
    pub fn final_day_loss(&self) -> Option<f64> {
        let day = self.losses.iter().map(|l| l.0).max()?;
        let last: Vec<f64> = self.losses.iter().filter(|l| l.0 == day).map(|l| l.1).collect();
        Some(last.iter().sum::<f64>() / last.len() as f64)
    }
}

fn macro_average(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingReport {
    pub days: Vec<DayMetrics>,
    pub summary: Vec<TaskSummary>,
    pub steps: u64,
    pub impressions: usize,
    pub final_loss: Option<f64>,
    /// Training stopped at `max_steps` before the stream ended.
    pub partial: bool,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl TrainingReport {
    pub fn from_ledger(ledger: &EvalLedger, tasks: &[Task], steps: u64, partial: bool) -> Self {
        let days = ledger.daily_metrics(tasks);
        let summary = tasks
            .iter()
            .map(|&task| TaskSummary {
                task,
                auc: macro_average(days.iter().filter(|d| d.task == task).map(|d| d.auc)),
                uauc: macro_average(days.iter().filter(|d| d.task == task).map(|d| d.uauc)),
            })
            .collect();
        Self {
            days,
            summary,
            steps,
            impressions: ledger.losses.len(),
            final_loss: ledger.final_day_loss(),
            partial,
        }
    }

    pub fn summary_for(&self, task: Task) -> Option<&TaskSummary> {
        self.summary.iter().find(|s| s.task == task)
    }

    /// `day,task,auc,uauc` per day and task, then one `all` row per task
    /// holding the macro-averages.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("day,task,auc,uauc\n");
        for d in &self.days {
            let _ = writeln!(s, "{},{},{},{}", d.day, d.task.name(), fmt_opt(d.auc), fmt_opt(d.uauc));
        }
        for t in &self.summary {
            let _ = writeln!(s, "all,{},{},{}", t.task.name(), fmt_opt(t.auc), fmt_opt(t.uauc));
        }
        s
    }
}

/// Groups a request stream into batches of at least `batch_size`
/// impressions, never crossing a day boundary.
pub struct Batches<I> {
    stream: I,
    batch_size: usize,
    pending: Option<Request>,
}

impl<I: Iterator<Item = Result<Request>>> Batches<I> {
    pub fn new(stream: I, batch_size: usize) -> Self {
        Self {
            stream,
            batch_size,
            pending: None,
        }
    }
}

impl<I: Iterator<Item = Result<Request>>> Iterator for Batches<I> {
    type Item = Result<Vec<Request>>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut batch: Vec<Request> = self.pending.take().into_iter().collect();
        let mut size: usize = batch.iter().map(|r| r.candidates.len()).sum();
        while size < self.batch_size {
            match self.stream.next() {
                None => break,
                Some(Err(e)) => return Some(Err(e)),
                Some(Ok(r)) => {
                    if batch.first().is_some_and(|f| f.day() != r.day()) {
                        self.pending = Some(r);
                        break;
                    }
                    size += r.candidates.len();
                    batch.push(r);
                }
            }
        }
        (!batch.is_empty()).then_some(Ok(batch))
    }
}

fn label(task: Task, click: u8, conv: u8) -> Option<u8> {
    match task {
        Task::Ctr => Some(click),
        Task::Cvr => (click == 1).then_some(conv),
    }
}

/// Scores one batch into the ledger; when `update` is given, also trains on it.
pub fn process_batch<T: Real>(
    model: &mut OneTrans<T>,
    batch: &[Request],
    batch_index: u64,
    ledger: &mut EvalLedger,
    update: Option<&mut OptimizerState<T>>,
) -> Result<()> {
    let tasks = model.config.tasks.clone();
    let mut grads = update.as_ref().map(|_| model.zero_grads());
    let mut count = 0usize;
    for r in batch {
        for c in &r.candidates {
            let (logits, cache) = model.forward_train(r, c)?;
            for (&task, &z) in tasks.iter().zip(&logits) {
                if let Some(l) = label(task, c.click, c.conv) {
                    ledger.entries.push(LedgerEntry {
                        day: r.day(),
                        user_id: r.user_id.clone(),
                        task,
                        prediction: sigmoid(z).to_f64().unwrap_or(f64::NAN),
                        label: l,
                        version: model.revision(),
                        batch: batch_index,
                    });
                }
            }
            let (value, d_logits) = loss(&logits, &tasks, c.click, c.conv);
            ledger.losses.push((r.day(), value.to_f64().unwrap_or(f64::NAN)));
            if let Some(g) = grads.as_mut() {
                model.backward(&cache, &d_logits, g)?;
            }
            count += 1;
        }
    }
    if let (Some(state), Some(mut g)) = (update, grads) {
        if count == 0 {
            return Ok(());
        }
        let inv = T::one() / T::from_usize(count).expect("fits");
        crate::params::scale(&mut g.dense, inv);
        g.sparse.scale(inv);
        let c = &state.config;
        clip_grads(&mut g, T::from_f64_lossy(c.dense_clip), T::from_f64_lossy(c.sparse_clip));
        state.apply(model, &g);
    }
    Ok(())
}

/// Chronological next-batch loop: log predictions, then update.
pub fn next_batch_loop<T: Real>(
    stream: impl Iterator<Item = Result<Request>>,
    model: &mut OneTrans<T>,
    state: &mut OptimizerState<T>,
    ledger: &mut EvalLedger,
    config: &TrainConfig,
) -> Result<TrainingReport> {
    config.validate()?;
    let mut steps = 0u64;
    let mut partial = false;
    let batches = Batches::new(stream, config.batch_size);
    let start_version = model.revision();
    for batch in batches {
        if config.max_steps.is_some_and(|m| steps >= m) {
            partial = true;
            break;
        }
        let batch = batch?;
        process_batch(model, &batch, start_version + steps, ledger, Some(state))?;
        steps += 1;
        if steps.is_multiple_of(50) {
            log::info!("step {steps}: {} impressions logged", ledger.losses.len());
        }
    }
    Ok(TrainingReport::from_ledger(ledger, &model.config.tasks, steps, partial))
}

/// Scores a stream without training.
pub fn evaluate<T: Real>(
    stream: impl Iterator<Item = Result<Request>>,
    model: &mut OneTrans<T>,
    batch_size: usize,
) -> Result<TrainingReport> {
    let mut ledger = EvalLedger::default();
    let version = model.revision();
    for batch in Batches::new(stream, batch_size.max(1)) {
        process_batch(model, &batch?, version, &mut ledger, None)?;
    }
    Ok(TrainingReport::from_ledger(&ledger, &model.config.tasks, 0, false))
}
