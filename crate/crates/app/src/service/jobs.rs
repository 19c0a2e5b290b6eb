//! Job records and their progress events.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::watch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Stage1,
    SessionBuild,
}

/// Declared in lifecycle order; a job only ever moves forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub fraction: f64,
    pub step: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: Progress,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub result: Option<Value>,
    pub error: Option<String>,
}

/// One server-sent event. `seq` counts events of the job from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub seq: usize,
    /// `progress`, `done` or `failed`.
    pub event: String,
    pub data: Value,
}

struct Entry {
    job: Job,
    events: Vec<JobEvent>,
    /// Number of events so far; SSE streams wait on it.
    notify: watch::Sender<usize>,
}

#[derive(Default)]
pub struct JobRegistry {
    entries: Mutex<HashMap<String, Entry>>,
}

impl JobRegistry {
    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, Entry>> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn insert(&self, job: Job) {
        let (notify, _) = watch::channel(0);
        self.lock().insert(job.job_id.clone(), Entry { job, events: Vec::new(), notify });
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.lock().get(id).map(|e| e.job.clone())
    }

    pub fn subscribe(&self, id: &str) -> Option<watch::Receiver<usize>> {
        self.lock().get(id).map(|e| e.notify.subscribe())
    }

    /// Events from index `from` on, and whether the job has finished.
    pub fn events_since(&self, id: &str, from: usize) -> Option<(Vec<JobEvent>, bool)> {
        self.lock().get(id).map(|e| (e.events.get(from..).unwrap_or_default().to_vec(), e.job.status.is_finished()))
    }

    fn push(entry: &mut Entry, event: &str, data: Value) {
        let seq = entry.events.len();
        entry.events.push(JobEvent { seq, event: event.to_string(), data });
        entry.notify.send_replace(entry.events.len());
    }

    fn set_status(entry: &mut Entry, status: JobStatus) {
        if status > entry.job.status {
            entry.job.status = status;
        }
    }

    /// Records step `step` of `total`; progress never moves backwards.
    pub fn progress(&self, id: &str, step: usize, total: usize, data: Value) {
        let mut jobs = self.lock();
        let Some(entry) = jobs.get_mut(id) else { return };
        Self::set_status(entry, JobStatus::Running);
        let fraction = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
        let p = &mut entry.job.progress;
        if fraction >= p.fraction {
            *p = Progress { fraction, step, total };
        }
        Self::push(entry, "progress", data);
    }

    pub fn start(&self, id: &str) {
        if let Some(entry) = self.lock().get_mut(id) {
            Self::set_status(entry, JobStatus::Running);
        }
    }

    pub fn finish(&self, id: &str, result: Value) {
        let mut jobs = self.lock();
        let Some(entry) = jobs.get_mut(id) else { return };
        if entry.job.status.is_finished() {
            return;
        }
        entry.job.progress.fraction = 1.0;
        entry.job.progress.step = entry.job.progress.total;
        entry.job.result = Some(result.clone());
        Self::set_status(entry, JobStatus::Done);
        Self::push(entry, "done", result);
    }

    pub fn fail(&self, id: &str, error: String) {
        let mut jobs = self.lock();
        let Some(entry) = jobs.get_mut(id) else { return };
        if entry.job.status.is_finished() {
            return;
        }
        entry.job.error = Some(error.clone());
        Self::set_status(entry, JobStatus::Failed);
        Self::push(entry, "failed", serde_json::json!({ "error": error }));
    }
}

/// Which steps of a `total`-step phase get an event: about fifty buckets,
/// plus the last step.
pub fn is_bucket_end(step: usize, total: usize) -> bool {
    let bucket = (total / 50).max(1);
    (step + 1) % bucket == 0 || step + 1 == total
}
