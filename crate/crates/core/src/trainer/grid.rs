use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, EvalReport, TaskSpec, TrainConfig};
use crate::data::SplitPair;
use crate::error::{Error, Result};
use crate::model::Model;

/// One line of the results table: a task's accuracy on one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task_id: String,
    pub mode: String,
    /// Source ids joined with `+`.
    pub sources: String,
    pub targets: String,
    pub target_domain: String,
    pub accuracy: f64,
    pub epochs_run: usize,
    pub wall_seconds: f64,
}

impl ResultRow {
    /// Equal apart from timing.
    pub fn same_result(&self, other: &ResultRow) -> bool {
        ResultRow {
            wall_seconds: 0.0,
            ..self.clone()
        } == ResultRow {
            wall_seconds: 0.0,
            ..other.clone()
        }
    }
}

pub struct TaskOutcome {
    pub task: TaskSpec,
    pub model: Model,
    pub report: EvalReport,
    pub wall_seconds: f64,
}

impl TaskOutcome {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.report
            .evaluations
            .iter()
            .map(|e| ResultRow {
                task_id: self.task.id.clone(),
                mode: self.task.mode.to_string(),
                sources: self.task.sources.join("+"),
                targets: self.task.targets.join("+"),
                target_domain: e.domain_id.clone(),
                accuracy: e.accuracy,
                epochs_run: self.report.epochs_run,
                wall_seconds: self.wall_seconds,
            })
            .collect()
    }
}

/// Trains every task on a pool of `threads` workers. Outcomes come back in
/// task order regardless of completion order; each task owns its model and
/// random streams, so results do not depend on `threads`.
pub fn run_tasks(
    tasks: &[TaskSpec],
    cfg: &TrainConfig,
    data: &BTreeMap<String, SplitPair>,
    threads: usize,
) -> Result<Vec<TaskOutcome>> {
    for t in tasks {
        t.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                let start = Instant::now();
                let (model, report) = train(task, cfg, data)?;
                Ok(TaskOutcome {
                    task: task.clone(),
                    model,
                    report,
                    wall_seconds: start.elapsed().as_secs_f64(),
                })
            })
            .collect()
    })
}

/// Results table for `tasks`, one row per (task, target) in task order.
pub fn run_grid(
    tasks: &[TaskSpec],
    cfg: &TrainConfig,
    data: &BTreeMap<String, SplitPair>,
    threads: usize,
) -> Result<Vec<ResultRow>> {
    Ok(run_tasks(tasks, cfg, data, threads)?
        .iter()
        .flat_map(TaskOutcome::rows)
        .collect())
}
