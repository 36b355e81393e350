//! In-process batch evaluation jobs.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use heliot_core::engine::Engine;
use heliot_core::eval::{run_batch_with_progress, summarize, write_predictions_csv, EvaluationReport};
use heliot_core::generator::SyntheticCase;
use parking_lot::RwLock;
use serde::Serialize;
use tokio::sync::Semaphore;

pub const DEFAULT_BATCH_WORKERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done | JobState::Failed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BatchJob {
    pub job_id: String,
    pub state: JobState,
    pub progress: Progress,
    pub result_location: Option<String>,
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub summary: Option<EvaluationReport>,
}

struct Entry {
    job: BatchJob,
    results_csv: Option<Arc<Vec<u8>>>,
}

/// Job table plus the worker budget. Jobs beyond the budget stay queued.
pub struct JobRegistry {
    jobs: RwLock<HashMap<String, Entry>>,
    workers: Arc<Semaphore>,
    concurrency: usize,
}

impl JobRegistry {
    pub fn new(workers: usize) -> Self {
        JobRegistry {
            jobs: RwLock::default(),
            workers: Arc::new(Semaphore::new(workers.max(1))),
            concurrency: workers.max(1),
        }
    }

    pub fn get(&self, id: &str) -> Option<BatchJob> {
        self.jobs.read().get(id).map(|e| e.job.clone())
    }

    pub fn results(&self, id: &str) -> Option<Result<Arc<Vec<u8>>, JobState>> {
        self.jobs
            .read()
            .get(id)
            .map(|e| e.results_csv.clone().ok_or(e.job.state))
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Entry)) {
        if let Some(e) = self.jobs.write().get_mut(id) {
            f(e);
        }
    }

    fn transition(&self, id: &str, next: JobState) {
        self.update(id, |e| {
            debug_assert!(e.job.state.can_become(next), "{:?} -> {next:?}", e.job.state);
            if e.job.state.can_become(next) {
                e.job.state = next;
            }
        });
    }

    /// Registers a job and starts it in the background.
    pub fn submit(self: &Arc<Self>, engine: Engine, cases: Vec<SyntheticCase>) -> BatchJob {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let job = BatchJob {
            job_id: id.clone(),
            state: JobState::Queued,
            progress: Progress {
                completed: 0,
                total: cases.len(),
            },
            result_location: None,
            error: None,
            created_at: Utc::now(),
            summary: None,
        };
        self.jobs.write().insert(
            id.clone(),
            Entry {
                job: job.clone(),
                results_csv: None,
            },
        );
        let registry = Arc::clone(self);
        tokio::spawn(async move { registry.run(id, engine, cases).await });
        job
    }

    async fn run(self: Arc<Self>, id: String, engine: Engine, cases: Vec<SyntheticCase>) {
        let Ok(_permit) = Arc::clone(&self.workers).acquire_owned().await else {
            return;
        };
        self.transition(&id, JobState::Running);
        let progress = {
            let registry = Arc::clone(&self);
            let id = id.clone();
            move || registry.update(&id, |e| e.job.progress.completed += 1)
        };
        let outcome = run_batch_with_progress(&cases, &engine, 1, self.concurrency, &progress).await;
        let finished = outcome.and_then(|batch| {
            let report = summarize(&cases, &batch)?;
            let mut csv = Vec::new();
            write_predictions_csv(&cases, &batch.runs[0], &mut csv)?;
            Ok((report, csv))
        });
        match finished {
            Ok((report, csv)) => {
                self.update(&id, |e| {
                    e.results_csv = Some(Arc::new(csv));
                    e.job.summary = Some(report);
                    e.job.result_location = Some(format!("/api/batches/{}/results.csv", e.job.job_id));
                });
                self.transition(&id, JobState::Done);
                tracing::info!(job = %id, "batch finished");
            }
            Err(err) => {
                self.update(&id, |e| e.job.error = Some(err.to_string()));
                self.transition(&id, JobState::Failed);
                tracing::warn!(job = %id, error = %err, "batch failed");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions() {
        use JobState::*;
        let all = [Queued, Running, Done, Failed];
        let allowed: Vec<_> = all
            .iter()
            .flat_map(|a| all.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_become(*b))
            .collect();
        assert_eq!(allowed, vec![(Queued, Running), (Running, Done), (Running, Failed)]);
    }
}
