//! Persistent jobs and the single-consumer inpaint queue.

use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{GatewayError, Result};
use crate::workspace::{atomic_write, valid_id};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Train,
    Cam,
    Inpaint,
    Saliency,
    Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    /// queued → running → done | failed; nothing else.
    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done) | (JobState::Running, JobState::Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub payload: serde_json::Value,
    #[serde(default)]
    pub result: Option<serde_json::Value>,
    #[serde(default)]
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl Job {
    pub fn new(kind: JobKind, payload: serde_json::Value) -> Self {
        let now = Utc::now();
        Self {
            job_id: format!("job-{}", uuid::Uuid::new_v4().simple()),
            kind,
            state: JobState::Queued,
            payload,
            result: None,
            error: None,
            created_at: now,
            updated_at: now,
        }
    }

    pub fn transition(&mut self, next: JobState) -> Result<()> {
        if !self.state.can_become(next) {
            return Err(GatewayError::conflict(
                "ILLEGAL_JOB_TRANSITION",
                format!("job {} cannot go from {:?} to {:?}", self.job_id, self.state, next),
            ));
        }
        self.state = next;
        self.updated_at = Utc::now();
        Ok(())
    }

    pub fn finish(&mut self, outcome: std::result::Result<serde_json::Value, String>) -> Result<()> {
        match outcome {
            Ok(v) => {
                self.transition(JobState::Done)?;
                self.result = Some(v);
            }
            Err(e) => {
                self.transition(JobState::Failed)?;
                self.error = Some(e);
            }
        }
        Ok(())
    }
}

/// One JSON file per job under `<workspace>/jobs`.
#[derive(Clone, Debug)]
pub struct JobStore {
    dir: PathBuf,
}

impl JobStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, job_id: &str) -> PathBuf {
        self.dir.join(format!("{job_id}.json"))
    }

    pub fn save(&self, job: &Job) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(job).map_err(|e| GatewayError::internal(e.to_string()))?;
        atomic_write(&self.path(&job.job_id), &bytes)?;
        Ok(())
    }

    pub fn get(&self, job_id: &str) -> Result<Job> {
        if !valid_id(job_id) {
            return Err(GatewayError::not_found("job", job_id));
        }
        let bytes = match std::fs::read(self.path(job_id)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(GatewayError::not_found("job", job_id)),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_slice(&bytes).map_err(|e| GatewayError::internal(format!("job {job_id}: {e}")))
    }

    pub fn list(&self) -> Result<Vec<Job>> {
        let mut out = Vec::new();
        let entries = match std::fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                if let Some(id) = path.file_stem().and_then(|s| s.to_str()) {
                    out.push(self.get(id)?);
                }
            }
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.job_id.cmp(&b.job_id)));
        Ok(out)
    }

    /// Loads, transitions and saves.
    pub fn transition(&self, job_id: &str, next: JobState) -> Result<Job> {
        let mut job = self.get(job_id)?;
        job.transition(next)?;
        self.save(&job)?;
        Ok(job)
    }

    /// After a restart: jobs caught running are failed, queued ones are
    /// returned in submission order for re-enqueueing.
    pub fn recover(&self) -> Result<Vec<String>> {
        let mut pending = Vec::new();
        for mut job in self.list()? {
            match job.state {
                JobState::Running => {
                    job.finish(Err("interrupted by server restart".into()))?;
                    self.save(&job)?;
                }
                JobState::Queued => pending.push(job.job_id),
                _ => {}
            }
        }
        Ok(pending)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_forward_transitions() {
        use JobState::*;
        let all = [Queued, Running, Done, Failed];
        for a in all {
            for b in all {
                let ok = matches!((a, b), (Queued, Running) | (Running, Done) | (Running, Failed));
                assert_eq!(a.can_become(b), ok, "{a:?} -> {b:?}");
            }
        }
        let mut job = Job::new(JobKind::Inpaint, serde_json::json!({}));
        assert_eq!(job.transition(Done).unwrap_err().status, 409);
        job.transition(Running).unwrap();
        job.finish(Ok(serde_json::json!(1))).unwrap();
        assert_eq!(job.transition(Running).unwrap_err().code, "ILLEGAL_JOB_TRANSITION");
    }

    #[test]
    fn store_recovers_after_restart() {
        let dir = tempfile::tempdir().unwrap();
        let store = JobStore::new(dir.path());
        let queued = Job::new(JobKind::Inpaint, serde_json::json!({"n": 1}));
        let mut running = Job::new(JobKind::Inpaint, serde_json::json!({"n": 2}));
        running.transition(JobState::Running).unwrap();
        store.save(&queued).unwrap();
        store.save(&running).unwrap();
        assert_eq!(store.recover().unwrap(), vec![queued.job_id.clone()]);
        let after = store.get(&running.job_id).unwrap();
        assert_eq!(after.state, JobState::Failed);
        assert!(after.error.unwrap().contains("restart"));
        assert_eq!(store.get("job-missing").unwrap_err().status, 404);
    }
}
