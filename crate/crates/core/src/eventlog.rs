//! Predict/observe data custody.
//!
//! Every served decision is appended as a [`PredictionEvent`]; outcomes arrive
//! later as [`ObservationEvent`]s keyed by `decision_id`. [`EventLog::join_events`]
//! pairs the two inside the use case's join window and
//! [`EventLog::build_dataset`] assembles a retention-respecting, content-hashed
//! [`DatasetSnapshot`] for training.
//!
//! On disk each use case owns a directory with two newline-delimited JSON
//! files, `predictions.ndjson` and `observations.ndjson`, one record per line.
//! Appends for one use case are serialized behind a mutex; readers take a
//! consistent prefix by cloning under the same lock.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::FeatureVector;
use crate::usecase::ValidatedSpec;

/// Default minimum number of joined rows needed to build a dataset.
pub const DEFAULT_MIN_ROWS: usize = 500;

const PREDICTIONS_FILE: &str = "predictions.ndjson";
const OBSERVATIONS_FILE: &str = "observations.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEvent {
    pub decision_id: String,
    pub use_case: String,
    pub unit_id: String,
    pub timestamp: i64,
    pub features: FeatureVector,
    pub action: String,
    pub propensity: f64,
    pub policy_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEvent {
    pub decision_id: String,
    pub timestamp: i64,
    pub metric_values: BTreeMap<String, f64>,
}

/// A prediction paired with its (possibly defaulted) outcome: one training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinedExample {
    pub decision_id: String,
    pub unit_id: String,
    /// Prediction timestamp.
    pub timestamp: i64,
    pub features: FeatureVector,
    pub action: String,
    pub propensity: f64,
    pub policy_version: String,
    pub metric_values: BTreeMap<String, f64>,
    pub joined_at: i64,
    /// An observation arrived but outside the join window and was dropped.
    pub late: bool,
    /// Labels are the configured timeout defaults.
    pub timed_out: bool,
}

/// Counters that explain what the join did with every event.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinDiagnostics {
    pub joined: usize,
    /// Predictions still inside their window with no observation yet.
    pub pending: usize,
    /// Observations whose decision_id matches no prediction.
    pub orphan_count: usize,
    /// Observations that arrived after the join window closed.
    pub late_count: usize,
    /// Predictions labeled with timeout defaults.
    pub timeout_count: usize,
    /// Repeated observations for an already observed decision.
    pub duplicate_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinResult {
    pub examples: Vec<JoinedExample>,
    pub diagnostics: JoinDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSnapshot {
    pub use_case: String,
    pub schema_version: u32,
    pub rows: Vec<JoinedExample>,
    pub content_hash: String,
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SnapshotManifest {
    use_case: String,
    schema_version: u32,
    content_hash: String,
    created_at: i64,
    n_rows: usize,
}

impl DatasetSnapshot {
    /// Builds a snapshot, sorting rows by decision_id and hashing them.
    pub fn new(use_case: &str, schema_version: u32, mut rows: Vec<JoinedExample>, created_at: i64) -> Self {
        rows.sort_by(|a, b| a.decision_id.cmp(&b.decision_id));
        let content_hash = hash_rows(&rows);
        Self { use_case: use_case.to_string(), schema_version, rows, content_hash, created_at }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes `rows.ndjson` and `manifest.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), EventLogError> {
        fs::create_dir_all(dir)?;
        let mut rows = String::new();
        for r in &self.rows {
            rows.push_str(&serde_json::to_string(r)?);
            rows.push('\n');
        }
        fs::write(dir.join("rows.ndjson"), rows)?;
        let manifest = SnapshotManifest {
            use_case: self.use_case.clone(),
            schema_version: self.schema_version,
            content_hash: self.content_hash.clone(),
            created_at: self.created_at,
            n_rows: self.rows.len(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a snapshot directory back, verifying the content hash.
    pub fn read_from(dir: &Path) -> Result<Self, EventLogError> {
        let manifest: SnapshotManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let rows: Vec<JoinedExample> = read_ndjson(&dir.join("rows.ndjson"))?;
        let snap = Self::new(&manifest.use_case, manifest.schema_version, rows, manifest.created_at);
        if snap.content_hash != manifest.content_hash {
            return Err(EventLogError::CorruptSnapshot { expected: manifest.content_hash, found: snap.content_hash });
        }
        Ok(snap)
    }
}

/// Hex SHA-256 over the canonical JSON of each row, newline separated.
pub fn hash_rows(rows: &[JoinedExample]) -> String {
    let mut h = Sha256::new();
    for r in rows {
        h.update(serde_json::to_vec(r).expect("rows serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("unknown use case `{0}`")]
    UnknownUseCase(String),
    #[error("propensity {0} outside (0, 1]")]
    BadPropensity(f64),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("decision_id `{0}` already logged")]
    DuplicateDecision(String),
    #[error("insufficient data: {have} joined rows inside retention, need {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("snapshot hash mismatch: manifest {expected}, rows {found}")]
    CorruptSnapshot { expected: String, found: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationAck {
    /// An earlier observation for the same decision exists; this one will
    /// not be used by the join.
    pub duplicate: bool,
}

struct CaseLog {
    spec: ValidatedSpec,
    predictions: Vec<PredictionEvent>,
    decision_ids: HashSet<String>,
    idempotency: HashMap<String, String>,
    observations: Vec<ObservationEvent>,
    observed: HashSet<String>,
    pred_file: Option<File>,
    obs_file: Option<File>,
}

impl CaseLog {
    fn index_prediction(&mut self, ev: &PredictionEvent) {
        self.decision_ids.insert(ev.decision_id.clone());
        if let Some(k) = &ev.idempotency_key {
            self.idempotency.entry(k.clone()).or_insert_with(|| ev.decision_id.clone());
        }
    }
}

/// Append-only predict/observe log for any number of use cases.
pub struct EventLog {
    root: Option<PathBuf>,
    cases: RwLock<BTreeMap<String, Arc<Mutex<CaseLog>>>>,
}

impl Default for EventLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self { root: None, cases: RwLock::new(BTreeMap::new()) }
    }

    /// A log persisted under `root/<use_case>/`.
    pub fn durable(root: impl Into<PathBuf>) -> Self {
        Self { root: Some(root.into()), cases: RwLock::new(BTreeMap::new()) }
    }

    /// Makes a use case known to the log, replaying any records already on
    /// disk. Registering twice replaces the spec but keeps the events.
    pub fn register(&self, spec: ValidatedSpec) -> Result<(), EventLogError> {
        let mut cases = self.cases.write().expect("event log lock");
        if let Some(existing) = cases.get(&spec.id) {
            existing.lock().expect("case lock").spec = spec;
            return Ok(());
        }
        let mut case = CaseLog {
            spec: spec.clone(),
            predictions: Vec::new(),
            decision_ids: HashSet::new(),
            idempotency: HashMap::new(),
            observations: Vec::new(),
            observed: HashSet::new(),
            pred_file: None,
            obs_file: None,
        };
        if let Some(root) = &self.root {
            let dir = root.join(&spec.id);
            fs::create_dir_all(&dir)?;
            let preds: Vec<PredictionEvent> = read_ndjson(&dir.join(PREDICTIONS_FILE))?;
            for p in &preds {
                case.index_prediction(p);
            }
            case.predictions = preds;
            case.observations = read_ndjson(&dir.join(OBSERVATIONS_FILE))?;
            case.observed = case.observations.iter().map(|o| o.decision_id.clone()).collect();
            case.pred_file = Some(open_append(&dir.join(PREDICTIONS_FILE))?);
            case.obs_file = Some(open_append(&dir.join(OBSERVATIONS_FILE))?);
        }
        cases.insert(spec.id.clone(), Arc::new(Mutex::new(case)));
        Ok(())
    }

    pub fn is_registered(&self, use_case: &str) -> bool {
        self.cases.read().expect("event log lock").contains_key(use_case)
    }

    fn case(&self, use_case: &str) -> Result<Arc<Mutex<CaseLog>>, EventLogError> {
        self.cases
            .read()
            .expect("event log lock")
            .get(use_case)
            .cloned()
            .ok_or_else(|| EventLogError::UnknownUseCase(use_case.to_string()))
    }

    /// Appends a prediction and returns its decision id.
    ///
    /// An empty `decision_id` is assigned `<use_case>-<sequence>`. Replaying an
    /// event with an already seen `idempotency_key` returns the original id
    /// without appending.
    pub fn log_prediction(&self, mut ev: PredictionEvent) -> Result<String, EventLogError> {
        let case = self.case(&ev.use_case)?;
        let mut case = case.lock().expect("case lock");
        if let Some(k) = &ev.idempotency_key {
            if let Some(id) = case.idempotency.get(k) {
                return Ok(id.clone());
            }
        }
        if !(ev.propensity > 0.0 && ev.propensity <= 1.0) {
            return Err(EventLogError::BadPropensity(ev.propensity));
        }
        if case.spec.decision_space.index_of(&ev.action).is_none() {
            return Err(EventLogError::UnknownAction(ev.action));
        }
        if ev.decision_id.is_empty() {
            ev.decision_id = format!("{}-{:010}", ev.use_case, case.predictions.len());
        }
        if case.decision_ids.contains(&ev.decision_id) {
            return Err(EventLogError::DuplicateDecision(ev.decision_id));
        }
        if let Some(f) = case.pred_file.as_mut() {
            append_line(f, &ev)?;
        }
        case.index_prediction(&ev);
        let id = ev.decision_id.clone();
        case.predictions.push(ev);
        Ok(id)
    }

    /// Appends an observation. Observations may precede their prediction;
    /// ones that never match are counted as orphans at join time.
    pub fn log_observation(&self, use_case: &str, ev: ObservationEvent) -> Result<ObservationAck, EventLogError> {
        let case = self.case(use_case)?;
        let mut case = case.lock().expect("case lock");
        if let Some(bad) = ev.metric_values.keys().find(|m| case.spec.metric(m).is_none()) {
            return Err(EventLogError::UnknownMetric(bad.clone()));
        }
        if let Some(f) = case.obs_file.as_mut() {
            append_line(f, &ev)?;
        }
        let duplicate = !case.observed.insert(ev.decision_id.clone());
        case.observations.push(ev);
        Ok(ObservationAck { duplicate })
    }

    /// Consistent copy of the logged predictions.
    pub fn predictions(&self, use_case: &str) -> Result<Vec<PredictionEvent>, EventLogError> {
        Ok(self.case(use_case)?.lock().expect("case lock").predictions.clone())
    }

    pub fn observations(&self, use_case: &str) -> Result<Vec<ObservationEvent>, EventLogError> {
        Ok(self.case(use_case)?.lock().expect("case lock").observations.clone())
    }

    pub fn prediction_count(&self, use_case: &str) -> Result<usize, EventLogError> {
        Ok(self.case(use_case)?.lock().expect("case lock").predictions.len())
    }

    /// Joins predictions with observations as of `now`.
    pub fn join_events(&self, use_case: &str, now: i64) -> Result<JoinResult, EventLogError> {
        let (spec, preds, obs) = {
            let case = self.case(use_case)?;
            let case = case.lock().expect("case lock");
            (case.spec.clone(), case.predictions.clone(), case.observations.clone())
        };
        Ok(join(&spec, &preds, &obs, now))
    }

    /// Joined rows whose prediction falls inside retention, sorted by
    /// decision_id and content-hashed.
    pub fn build_dataset(&self, use_case: &str, now: i64, min_rows: usize) -> Result<DatasetSnapshot, EventLogError> {
        let spec = self.case(use_case)?.lock().expect("case lock").spec.clone();
        let joined = self.join_events(use_case, now)?;
        let horizon = now - spec.retention_secs();
        let rows: Vec<JoinedExample> = joined.examples.into_iter().filter(|r| r.timestamp >= horizon).collect();
        if rows.is_empty() || rows.len() < min_rows {
            return Err(EventLogError::InsufficientData { have: rows.len(), need: min_rows.max(1) });
        }
        Ok(DatasetSnapshot::new(use_case, spec.features.version, rows, now))
    }
}

/// Pure join of a log prefix; deterministic in (events, now, spec).
pub fn join(spec: &ValidatedSpec, preds: &[PredictionEvent], obs: &[ObservationEvent], now: i64) -> JoinResult {
    let window = spec.join_window_secs();
    let mut diag = JoinDiagnostics::default();

    let mut first: HashMap<&str, &ObservationEvent> = HashMap::new();
    for o in obs.iter().filter(|o| o.timestamp <= now) {
        if first.contains_key(o.decision_id.as_str()) {
            diag.duplicate_count += 1;
        } else {
            first.insert(&o.decision_id, o);
        }
    }
    let predicted: HashSet<&str> = preds.iter().map(|p| p.decision_id.as_str()).collect();
    diag.orphan_count = first.keys().filter(|id| !predicted.contains(*id)).count();

    let defaults = |values: Option<&BTreeMap<String, f64>>| -> BTreeMap<String, f64> {
        spec.metrics
            .iter()
            .map(|m| {
                let v = values.and_then(|vs| vs.get(&m.name).copied()).unwrap_or(m.timeout_default);
                (m.name.clone(), v)
            })
            .collect()
    };

    let mut examples = Vec::new();
    for p in preds.iter().filter(|p| p.timestamp <= now) {
        let mut late = false;
        if let Some(o) = first.get(p.decision_id.as_str()) {
            if o.timestamp - p.timestamp <= window {
                examples.push(example(p, defaults(Some(&o.metric_values)), o.timestamp, false, false));
                diag.joined += 1;
                continue;
            }
            late = true;
            diag.late_count += 1;
        }
        if now > p.timestamp + window {
            examples.push(example(p, defaults(None), p.timestamp + window, late, true));
            diag.timeout_count += 1;
            diag.joined += 1;
        } else {
            diag.pending += 1;
        }
    }
    JoinResult { examples, diagnostics: diag }
}

fn example(p: &PredictionEvent, metric_values: BTreeMap<String, f64>, joined_at: i64, late: bool, timed_out: bool) -> JoinedExample {
    JoinedExample {
        decision_id: p.decision_id.clone(),
        unit_id: p.unit_id.clone(),
        timestamp: p.timestamp,
        features: p.features.clone(),
        action: p.action.clone(),
        propensity: p.propensity,
        policy_version: p.policy_version.clone(),
        metric_values,
        joined_at,
        late,
        timed_out,
    }
}

fn open_append(path: &Path) -> std::io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

fn append_line<T: Serialize>(f: &mut File, record: &T) -> Result<(), EventLogError> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    f.flush()?;
    Ok(())
}

/// Reads newline-delimited JSON records; a missing file reads as empty.
pub fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EventLogError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
