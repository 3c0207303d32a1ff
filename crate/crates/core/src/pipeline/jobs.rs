//! In-process job queue with persisted job records.

use super::PipelineConfig;
use crate::predict::{BatchSource, TrainRequest};
use crate::store::{new_id, JsonStore, StoreError};
use chrono::{DateTime, Utc};
use dashmap::DashMap;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Reflectance,
    Train,
    PredictBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Progress {
    pub done_items: u64,
    pub total_items: u64,
}

/// What a job does; enough to run it again after a restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JobSpec {
    Reflectance { dataset_id: String, config: PipelineConfig, matrix_id: String },
    Train { request: TrainRequest, model_id: String },
    PredictBatch { model_id: String, source: BatchSource, prediction_id: String },
}

impl JobSpec {
    pub fn kind(&self) -> JobKind {
        match self {
            JobSpec::Reflectance { .. } => JobKind::Reflectance,
            JobSpec::Train { .. } => JobKind::Train,
            JobSpec::PredictBatch { .. } => JobKind::PredictBatch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: Progress,
    pub result_ref: Option<String>,
    pub error: Option<String>,
    pub owner: String,
    pub spec: JobSpec,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// Executes jobs taken off the queue. Returns the result id or an error
/// message.
pub trait JobRunner: Send + Sync {
    fn run(&self, job: &Job, handle: &JobHandle) -> Result<String, String>;
}

struct Shared {
    store: JsonStore<Job>,
    cancels: DashMap<String, Arc<AtomicBool>>,
}

/// Progress reporting and cancellation for the job being run.
pub struct JobHandle {
    id: String,
    shared: Arc<Shared>,
    cancel: Arc<AtomicBool>,
}

impl JobHandle {
    pub fn job_id(&self) -> &str {
        &self.id
    }

    pub fn cancel_flag(&self) -> &AtomicBool {
        &self.cancel
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    fn update_running(&self, f: impl FnOnce(&mut Progress)) {
        let _ = self.shared.store.update(&self.id, |j| {
            if j.state == JobState::Running {
                f(&mut j.progress);
                j.updated_at = Utc::now();
            }
        });
    }

    pub fn set_total(&self, total: u64) {
        self.update_running(|p| p.total_items = total);
    }

    pub fn advance(&self) {
        self.update_running(|p| p.done_items += 1);
    }
}

/// Jobs run at most once each, on a fixed pool of worker threads. Records are
/// written through to disk; on reopen, queued jobs are re-enqueued and jobs
/// caught mid-run are marked failed.
pub struct JobQueue {
    shared: Arc<Shared>,
    tx: Mutex<Option<Sender<String>>>,
    submit_lock: Mutex<()>,
    pending: Mutex<Vec<String>>,
}

impl JobQueue {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let store: JsonStore<Job> = JsonStore::open(dir)?;
        let mut pending = Vec::new();
        let mut jobs = store.values();
        jobs.sort_by(|a, b| a.created_at.cmp(&b.created_at));
        for j in jobs {
            match j.state {
                JobState::Queued => pending.push(j.job_id),
                JobState::Running => {
                    store.update(&j.job_id, |j| finish(j, Err("interrupted".into())))?;
                }
                _ => {}
            }
        }
        Ok(JobQueue {
            shared: Arc::new(Shared { store, cancels: DashMap::new() }),
            tx: Mutex::new(None),
            submit_lock: Mutex::new(()),
            pending: Mutex::new(pending),
        })
    }

    /// Spawns `workers` threads. The runner is held weakly so the queue's
    /// owner can also own the runner; workers exit when the queue is dropped.
    pub fn start(&self, runner: Weak<dyn JobRunner>, workers: usize) {
        let (tx, rx) = channel::<String>();
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..workers.max(1) {
            let rx = rx.clone();
            let shared = self.shared.clone();
            let runner = runner.clone();
            std::thread::spawn(move || worker(rx, shared, runner));
        }
        for id in self.pending.lock().drain(..) {
            let _ = tx.send(id);
        }
        *self.tx.lock() = Some(tx);
    }

    pub fn submit(&self, owner: &str, spec: JobSpec) -> Result<Job, StoreError> {
        let _guard = self.submit_lock.lock();
        self.enqueue(owner, spec)
    }

    /// Submits unless a queued or running job matches `same`, in which case
    /// that job is returned as the error.
    pub fn submit_unique(
        &self,
        owner: &str,
        spec: JobSpec,
        same: impl Fn(&Job) -> bool,
    ) -> Result<Result<Job, Job>, StoreError> {
        let _guard = self.submit_lock.lock();
        if let Some(existing) = self.shared.store.values().into_iter().find(|j| !j.state.is_terminal() && same(j)) {
            return Ok(Err(existing));
        }
        self.enqueue(owner, spec).map(Ok)
    }

    fn enqueue(&self, owner: &str, spec: JobSpec) -> Result<Job, StoreError> {
        let now = Utc::now();
        let job = Job {
            job_id: new_id("job"),
            kind: spec.kind(),
            state: JobState::Queued,
            progress: Progress::default(),
            result_ref: None,
            error: None,
            owner: owner.to_string(),
            spec,
            created_at: now,
            updated_at: now,
        };
        self.shared.store.put(&job.job_id, &job)?;
        match self.tx.lock().as_ref() {
            Some(tx) => {
                let _ = tx.send(job.job_id.clone());
            }
            None => self.pending.lock().push(job.job_id.clone()),
        }
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.shared.store.get(id)
    }

    pub fn list(&self) -> Vec<Job> {
        let mut jobs = self.shared.store.values();
        jobs.sort_by(|a, b| b.created_at.cmp(&a.created_at));
        jobs
    }

    pub fn find(&self, pred: impl Fn(&Job) -> bool) -> Option<Job> {
        self.shared.store.values().into_iter().find(|j| pred(j))
    }

    /// Moves a queued or running job to failed("cancelled"); the worker sees
    /// the flag at its next check. Terminal jobs are returned unchanged.
    pub fn cancel(&self, id: &str) -> Result<Option<Job>, StoreError> {
        let job = self.shared.store.update(id, |j| {
            if !j.state.is_terminal() {
                finish(j, Err("cancelled".into()));
            }
            j.clone()
        })?;
        if let Some(flag) = self.shared.cancels.get(id) {
            flag.store(true, Ordering::SeqCst);
        }
        Ok(job)
    }

    /// Polls until the job is terminal or `timeout` elapses.
    pub fn wait(&self, id: &str, timeout: Duration) -> Option<Job> {
        let deadline = Instant::now() + timeout;
        loop {
            let job = self.get(id)?;
            if job.state.is_terminal() || Instant::now() >= deadline {
                return Some(job);
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

impl Drop for JobQueue {
    fn drop(&mut self) {
        self.tx.lock().take();
    }
}

fn finish(job: &mut Job, outcome: Result<String, String>) {
    match outcome {
        Ok(result) => {
            job.state = JobState::Done;
            job.result_ref = Some(result);
            job.progress.done_items = job.progress.total_items.max(job.progress.done_items);
        }
        Err(e) => {
            job.state = JobState::Failed;
            job.error = Some(e);
        }
    }
    job.updated_at = Utc::now();
}

fn worker(rx: Arc<Mutex<Receiver<String>>>, shared: Arc<Shared>, runner: Weak<dyn JobRunner>) {
    loop {
        let id = match rx.lock().recv() {
            Ok(id) => id,
            Err(_) => return,
        };
        let cancel = Arc::new(AtomicBool::new(false));
        shared.cancels.insert(id.clone(), cancel.clone());
        let claimed = shared.store.update(&id, |j| {
            if j.state != JobState::Queued {
                return None;
            }
            j.state = JobState::Running;
            j.updated_at = Utc::now();
            Some(j.clone())
        });
        let Ok(Some(Some(job))) = claimed else {
            shared.cancels.remove(&id);
            continue;
        };
        let Some(runner) = runner.upgrade() else {
            let _ = shared.store.update(&id, |j| finish(j, Err("interrupted".into())));
            return;
        };
        let handle = JobHandle { id: id.clone(), shared: shared.clone(), cancel };
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| runner.run(&job, &handle)))
            .unwrap_or_else(|_| Err("internal error: job panicked".into()));
        let _ = shared.store.update(&id, |j| {
            if j.state == JobState::Running {
                finish(j, outcome);
            }
        });
        shared.cancels.remove(&id);
    }
}
