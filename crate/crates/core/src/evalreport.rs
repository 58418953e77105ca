//! Before/after hotspot-probability scoring of redesign sessions and the
//! aggregate report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apcam::CamRequest;
use crate::classifier::{predict_proba, ClassifierModel};
use crate::inpaint::InpaintParams;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("session {0} has no readable chosen candidate: {1}")]
    MissingCandidate(String, String),
    #[error("session {0}: original image unreadable: {1}")]
    MissingOriginal(String, String),
    #[error("session {0}: {1}")]
    InvalidSession(String, String),
    #[error("no scored sessions")]
    NoScoredSessions,
    #[error("session store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::MissingCandidate(..) => "MISSING_CANDIDATE",
            EvalError::MissingOriginal(..) => "MISSING_ORIGINAL",
            EvalError::InvalidSession(..) => "INVALID_SESSION",
            EvalError::NoScoredSessions => "NO_SCORED_SESSIONS",
            EvalError::Store(_) => "SESSION_STORE",
            EvalError::Io(_) => "IO_ERROR",
        }
    }
}

/// CAM settings that produced the session's AP mask.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CamConfig {
    #[serde(flatten)]
    pub request: CamRequest,
    pub threshold: f64,
    pub min_area: Option<usize>,
}

/// One operator pass over one image. Paths are relative to the workspace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RedesignSession {
    pub session_id: String,
    pub image_id: String,
    pub original_path: String,
    #[serde(default)]
    pub cam: Option<CamConfig>,
    #[serde(default)]
    pub mask_id: Option<String>,
    #[serde(default)]
    pub inpaint: Option<InpaintParams>,
    /// Candidate ids produced by the inpaint job, in order.
    #[serde(default)]
    pub candidates: Vec<String>,
    #[serde(default)]
    pub chosen_candidate: Option<String>,
    #[serde(default)]
    pub chosen_path: Option<String>,
    #[serde(default)]
    pub p_before: Option<f64>,
    #[serde(default)]
    pub p_after: Option<f64>,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub operator_seconds: Option<f64>,
    #[serde(default)]
    pub revision: u32,
    #[serde(default)]
    pub recorded_at: Option<DateTime<Utc>>,
}

impl RedesignSession {
    pub fn is_scored(&self) -> bool {
        self.p_before.is_some() && self.p_after.is_some()
    }

    /// Marks `candidate_id` as chosen after checking it belongs to this session.
    pub fn choose(&mut self, candidate_id: &str, path: impl Into<String>) -> Result<(), EvalError> {
        if !self.candidates.iter().any(|c| c == candidate_id) {
            return Err(EvalError::InvalidSession(
                self.session_id.clone(),
                format!("candidate {candidate_id} is not part of this session"),
            ));
        }
        self.chosen_candidate = Some(candidate_id.to_string());
        self.chosen_path = Some(path.into());
        Ok(())
    }
}

fn load_rgb(path: &Path) -> Result<image::RgbImage, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    image::load_from_memory(&bytes)
        .map(|i| i.to_rgb8())
        .map_err(|e| format!("{}: {e}", path.display()))
}

/// `(p_before, p_after)`: hotspot probability of the original and of the
/// chosen candidate, both read from under `root`.
pub fn score_session<T: Scalar>(
    model: &ClassifierModel<T>,
    session: &RedesignSession,
    root: &Path,
) -> Result<(f64, f64), EvalError> {
    let id = &session.session_id;
    let original = load_rgb(&root.join(&session.original_path)).map_err(|e| EvalError::MissingOriginal(id.clone(), e))?;
    let chosen = session
        .chosen_path
        .as_ref()
        .ok_or_else(|| EvalError::MissingCandidate(id.clone(), "no candidate chosen".into()))?;
    let candidate = load_rgb(&root.join(chosen)).map_err(|e| EvalError::MissingCandidate(id.clone(), e))?;
    let before = predict_proba(model, &original).as_f64();
    let after = predict_proba(model, &candidate).as_f64();
    Ok((before, after))
}

/// Scores every session in parallel and stores the probabilities.
pub fn score_sessions<T: Scalar>(
    model: &ClassifierModel<T>,
    sessions: &mut [RedesignSession],
    root: &Path,
) -> Vec<Result<(), EvalError>> {
    sessions
        .par_iter_mut()
        .map(|s| {
            let (b, a) = score_session(model, s, root)?;
            s.p_before = Some(b);
            s.p_after = Some(a);
            Ok(())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub sessions: Vec<RedesignSession>,
    pub scored_sessions: usize,
    pub mean_p_before: f64,
    pub mean_p_after: f64,
    /// Mean of per-session `100 (p_before - p_after) / p_before`; `None` if
    /// every scored session had `p_before = 0`.
    pub mean_relative_drop_percent: Option<f64>,
    /// Sessions left out of the mean relative drop because `p_before = 0`.
    pub zero_before_excluded: usize,
    /// `100 (mean p_before - mean p_after) / mean p_before`.
    pub drop_of_means_percent: Option<f64>,
}

/// Order-independent mean: values are summed in ascending order.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn aggregate(model: &str, sessions: &[RedesignSession]) -> Result<EvalReport, EvalError> {
    let scored: Vec<(f64, f64)> = sessions
        .iter()
        .filter_map(|s| Some((s.p_before?, s.p_after?)))
        .collect();
    if scored.is_empty() {
        return Err(EvalError::NoScoredSessions);
    }
    let mean_before = stable_mean(scored.iter().map(|p| p.0).collect());
    let mean_after = stable_mean(scored.iter().map(|p| p.1).collect());
    let relative: Vec<f64> = scored
        .iter()
        .filter(|p| p.0 > 0.0)
        .map(|&(b, a)| 100.0 * (b - a) / b)
        .collect();
    let excluded = scored.len() - relative.len();
    let mut sessions = sessions.to_vec();
    sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    Ok(EvalReport {
        model: model.to_string(),
        scored_sessions: scored.len(),
        mean_p_before: mean_before,
        mean_p_after: mean_after,
        mean_relative_drop_percent: (!relative.is_empty()).then(|| stable_mean(relative)),
        zero_before_excluded: excluded,
        drop_of_means_percent: (mean_before > 0.0).then(|| 100.0 * (mean_before - mean_after) / mean_before),
        sessions,
    })
}

impl EvalReport {
    /// Summary row followed by one row per session.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(
            "model,sessions,mean_p_before,mean_p_after,mean_relative_drop_percent,drop_of_means_percent\n",
        );
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            self.model,
            self.scored_sessions,
            self.mean_p_before,
            self.mean_p_after,
            opt(self.mean_relative_drop_percent),
            opt(self.drop_of_means_percent)
        );
        out.push_str("\nsession_id,image_id,chosen_candidate,p_before,p_after,relative_drop_percent\n");
        for s in &self.sessions {
            let rel = match (s.p_before, s.p_after) {
                (Some(b), Some(a)) if b > 0.0 => Some(100.0 * (b - a) / b),
                _ => None,
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.session_id,
                s.image_id,
                s.chosen_candidate.as_deref().unwrap_or(""),
                opt(s.p_before),
                opt(s.p_after),
                opt(rel)
            );
        }
        out
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), EvalError> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&json, serde_json::to_vec_pretty(self).map_err(|e| EvalError::Store(e.to_string()))?)?;
        std::fs::write(&csv, self.to_csv())?;
        Ok((json, csv))
    }
}

/// Append-only JSON Lines store; every write is a new revision.
#[derive(Clone, Debug)]
pub struct SessionStore {
    path: PathBuf,
}

impl SessionStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Every revision in write order.
    pub fn history(&self) -> Result<Vec<RedesignSession>, EvalError> {
        let file = match std::fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| EvalError::Store(format!("line {}: {e}", i + 1)))?);
        }
        Ok(out)
    }

    /// Latest revision of each session, ordered by session id.
    pub fn latest(&self) -> Result<Vec<RedesignSession>, EvalError> {
        let mut map: BTreeMap<String, RedesignSession> = BTreeMap::new();
        for s in self.history()? {
            map.insert(s.session_id.clone(), s);
        }
        Ok(map.into_values().collect())
    }

    pub fn get(&self, session_id: &str) -> Result<Option<RedesignSession>, EvalError> {
        Ok(self.history()?.into_iter().rev().find(|s| s.session_id == session_id))
    }

    /// Appends `session` as the next revision and returns what was written.
    pub fn append(&self, mut session: RedesignSession) -> Result<RedesignSession, EvalError> {
        let prev = self.get(&session.session_id)?;
        session.revision = prev.map(|p| p.revision + 1).unwrap_or(0);
        session.recorded_at = Some(Utc::now());
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut line = serde_json::to_string(&session).map_err(|e| EvalError::Store(e.to_string()))?;
        line.push('\n');
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(session)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{build_model, Backbone, ModelSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scored(id: &str, b: f64, a: f64) -> RedesignSession {
        RedesignSession {
            session_id: id.into(),
            p_before: Some(b),
            p_after: Some(a),
            ..Default::default()
        }
    }

    #[test]
    fn single_session() {
        let r = aggregate("m", &[scored("s", 0.8, 0.6)]).unwrap();
        assert_relative_eq!(r.mean_relative_drop_percent.unwrap(), 25.0, epsilon = 1e-12);
        assert_relative_eq!(r.drop_of_means_percent.unwrap(), 25.0, epsilon = 1e-12);
    }

    #[test]
    fn unchanged_sessions() {
        let r = aggregate("m", &[scored("a", 0.9, 0.9), scored("b", 0.4, 0.4)]).unwrap();
        assert_eq!(r.mean_relative_drop_percent, Some(0.0));
        assert_eq!(r.drop_of_means_percent, Some(0.0));
    }

    #[test]
    fn definitions_differ() {
        let r = aggregate("m", &[scored("a", 1.0, 0.5), scored("b", 0.2, 0.2)]).unwrap();
        assert_relative_eq!(r.mean_relative_drop_percent.unwrap(), 25.0, epsilon = 1e-12);
        // (0.6 - 0.35) / 0.6
        assert_relative_eq!(r.drop_of_means_percent.unwrap(), 100.0 * 0.25 / 0.6, epsilon = 1e-12);
    }

    #[test]
    fn zero_before_is_excluded_and_counted() {
        let r = aggregate("m", &[scored("a", 0.0, 0.0), scored("b", 0.5, 0.25)]).unwrap();
        assert_eq!(r.zero_before_excluded, 1);
        assert_eq!(r.mean_relative_drop_percent, Some(50.0));
        let only_zero = aggregate("m", &[scored("a", 0.0, 0.0)]).unwrap();
        assert_eq!((only_zero.mean_relative_drop_percent, only_zero.drop_of_means_percent), (None, None));
    }

    #[test]
    fn no_scored_sessions() {
        let unscored = RedesignSession { session_id: "x".into(), ..Default::default() };
        assert_eq!(aggregate("m", &[unscored]).unwrap_err().code(), "NO_SCORED_SESSIONS");
        assert_eq!(aggregate("m", &[]).unwrap_err().code(), "NO_SCORED_SESSIONS");
    }

    #[test]
    fn scoring_reads_images() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model::<f32>(&ModelSpec::new(Backbone::Tinycnn, false, 32)).unwrap();
        let img = image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([(x * 8) as u8, (y * 8) as u8, 30]));
        img.save(dir.path().join("orig.png")).unwrap();
        img.save(dir.path().join("cand.png")).unwrap();
        let mut s = RedesignSession {
            session_id: "s1".into(),
            image_id: "img".into(),
            original_path: "orig.png".into(),
            candidates: vec!["c0".into()],
            ..Default::default()
        };
        assert_eq!(score_session(&model, &s, dir.path()).unwrap_err().code(), "MISSING_CANDIDATE");
        assert!(s.choose("c9", "x.png").is_err());
        s.choose("c0", "cand.png").unwrap();
        let (b, a) = score_session(&model, &s, dir.path()).unwrap();
        assert_eq!(b, a);
        s.chosen_path = Some("gone.png".into());
        assert_eq!(score_session(&model, &s, dir.path()).unwrap_err().code(), "MISSING_CANDIDATE");
        std::fs::write(dir.path().join("bad.png"), b"not an image").unwrap();
        s.chosen_path = Some("bad.png".into());
        assert_eq!(score_session(&model, &s, dir.path()).unwrap_err().code(), "MISSING_CANDIDATE");
    }

    #[test]
    fn store_revisions_and_recompute() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path().join("sessions.jsonl"));
        assert!(store.latest().unwrap().is_empty());
        store.append(scored("a", 0.9, 0.5)).unwrap();
        store.append(scored("b", 0.7, 0.6)).unwrap();
        let rev = store.append(scored("a", 0.9, 0.3)).unwrap();
        assert_eq!(rev.revision, 1);
        assert_eq!(store.history().unwrap().len(), 3);
        let latest = store.latest().unwrap();
        assert_eq!(latest.len(), 2);
        assert_eq!(latest[0].p_after, Some(0.3));

        let report = aggregate("m", &latest).unwrap();
        let (json, csv) = report.save(dir.path(), "report").unwrap();
        let back: EvalReport = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
        assert_eq!(back, report);
        assert_eq!(aggregate("m", &back.sessions).unwrap(), report);
        assert!(std::fs::read_to_string(csv).unwrap().contains("mean_relative_drop_percent,drop_of_means_percent"));
    }

    fn pairs() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..30)
    }

    proptest! {
        #[test]
        fn nonnegative_when_every_session_drops(ps in pairs()) {
            let sessions: Vec<_> = ps.iter().enumerate().map(|(i, &(x, y))| scored(&i.to_string(), x.max(y), x.min(y))).collect();
            let r = aggregate("m", &sessions).unwrap();
            if let Some(v) = r.mean_relative_drop_percent { prop_assert!(v >= 0.0); }
            if let Some(v) = r.drop_of_means_percent { prop_assert!(v >= 0.0); }
        }

        #[test]
        fn permutation_invariant(ps in pairs(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let sessions: Vec<_> = ps.iter().enumerate().map(|(i, &(b, a))| scored(&format!("{i:03}"), b, a)).collect();
            let mut shuffled = sessions.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(aggregate("m", &sessions).unwrap(), aggregate("m", &shuffled).unwrap());
        }
    }
}
