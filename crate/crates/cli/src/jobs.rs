//! Asynchronous jobs with forward-only status and bounded parallelism.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use colosla_core::canonical::{sha256_hex, to_canonical_string};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Extract,
    Label,
    Relabel,
    Train,
    Simulate,
}

impl JobKind {
    pub fn parse(s: &str) -> Option<JobKind> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    /// SHA-256 of the canonical request parameters.
    pub inputs_digest: String,
    pub outputs: Vec<PathBuf>,
    pub log_tail: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

const LOG_TAIL: usize = 20;

impl JobRecord {
    fn advance(&mut self, next: JobStatus) {
        assert!(next > self.status, "job {} cannot go from {:?} to {:?}", self.job_id, self.status, next);
        self.status = next;
    }

    fn log(&mut self, line: impl Into<String>) {
        self.log_tail.push(line.into());
        let n = self.log_tail.len();
        if n > LOG_TAIL {
            self.log_tail.drain(..n - LOG_TAIL);
        }
    }
}

/// What a finished job hands back.
#[derive(Debug, Default)]
pub struct JobOutput {
    pub outputs: Vec<PathBuf>,
    pub log: Vec<String>,
}

#[derive(Clone)]
pub struct JobQueue {
    records: Arc<Mutex<BTreeMap<String, JobRecord>>>,
    permits: Arc<Semaphore>,
    dir: Option<PathBuf>,
}

impl JobQueue {
    /// `dir` receives `<job_id>.json` on every status change.
    pub fn new(workers: usize, dir: Option<PathBuf>) -> Self {
        Self { records: Arc::default(), permits: Arc::new(Semaphore::new(workers.max(1))), dir }
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.records.lock().unwrap().get(id).cloned()
    }

    pub fn list(&self) -> Vec<JobRecord> {
        self.records.lock().unwrap().values().cloned().collect()
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) {
        let snapshot = {
            let mut map = self.records.lock().unwrap();
            let Some(rec) = map.get_mut(id) else { return };
            f(rec);
            rec.clone()
        };
        if let Some(dir) = &self.dir {
            let write = std::fs::create_dir_all(dir)
                .and_then(|_| std::fs::write(dir.join(format!("{id}.json")), serde_json::to_vec_pretty(&snapshot).unwrap_or_default()));
            if let Err(e) = write {
                tracing::warn!(job = id, error = %e, "could not persist job record");
            }
        }
    }

    /// Queue `work` on the blocking pool. Returns the queued record.
    pub fn submit<F>(&self, kind: JobKind, params: &serde_json::Value, work: F) -> JobRecord
    where
        F: FnOnce() -> Result<JobOutput, String> + Send + 'static,
    {
        let inputs_digest = sha256_hex(to_canonical_string(params).unwrap_or_default().as_bytes());
        let job_id = {
            let mut map = self.records.lock().unwrap();
            let id = format!("job-{:06}", map.len() + 1);
            map.insert(
                id.clone(),
                JobRecord {
                    job_id: id.clone(),
                    kind,
                    status: JobStatus::Queued,
                    inputs_digest,
                    outputs: Vec::new(),
                    log_tail: Vec::new(),
                    error: None,
                },
            );
            id
        };
        self.update(&job_id, |r| r.log("queued"));
        let queue = self.clone();
        let id = job_id.clone();
        tokio::spawn(async move {
            let _permit = queue.permits.clone().acquire_owned().await;
            queue.update(&id, |r| {
                r.advance(JobStatus::Running);
                r.log("running");
            });
            let result = tokio::task::spawn_blocking(work).await.unwrap_or_else(|e| Err(format!("job panicked: {e}")));
            queue.update(&id, |r| match result {
                Ok(out) => {
                    for l in out.log {
                        r.log(l);
                    }
                    r.outputs = out.outputs;
                    r.advance(JobStatus::Done);
                    r.log("done");
                }
                Err(e) => {
                    r.log(format!("failed: {e}"));
                    r.error = Some(e);
                    r.advance(JobStatus::Failed);
                }
            });
        });
        self.get(&job_id).expect("just inserted")
    }

    /// Wait until the job leaves queued/running.
    pub async fn wait(&self, id: &str) -> Option<JobRecord> {
        loop {
            let rec = self.get(id)?;
            if rec.status >= JobStatus::Done {
                return Some(rec);
            }
            tokio::time::sleep(std::time::Duration::from_millis(20)).await;
        }
    }
}
