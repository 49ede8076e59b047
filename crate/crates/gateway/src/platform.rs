use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use selfserve_core::eventlog::{EventLog, ObservationEvent, PredictionEvent};
use selfserve_core::features::{canonicalize, FeatureVector};
use selfserve_core::lifecycle::{
    check_missing_features, check_output_anomaly, evaluate_freshness, AlertKind, AlertLog, CanaryReport, Evidence, FreshnessConfig, LifecycleError, Manifest, ModelBundle, RecordReason,
    ReferenceWindow, Registry, Verdict,
};
use selfserve_core::policy::{decide, ModelOutputs};
use selfserve_core::prep::compute_psi;
use selfserve_core::rng::derive_seed;
use selfserve_core::simlab::Trace;
use selfserve_core::usecase::{validate_spec, UseCaseSpec, ValidatedSpec};

use crate::api::*;
use crate::error::{ApiError, ApiResult, ErrorCode};
use crate::jobs::{JobRecord, JobRequest, JobStatus};
use crate::store::{read_json, write_json_atomic, Store};

pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

/// Default window of recent traffic inspected by the health check.
pub const HEALTH_WINDOW_SECS: i64 = 86_400;
/// Fewest recent decisions for which drift is evaluated.
pub const MIN_HEALTH_DECISIONS: usize = 100;
pub const DEFAULT_WORKERS: usize = 2;

/// A settable clock for tests and scenarios.
#[derive(Debug, Clone, Default)]
pub struct ManualClock(Arc<AtomicI64>);

impl ManualClock {
    pub fn new(t: i64) -> Self {
        Self(Arc::new(AtomicI64::new(t)))
    }

    pub fn set(&self, t: i64) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: i64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }

    pub fn now(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }

    pub fn as_clock(&self) -> Clock {
        let c = self.clone();
        Arc::new(move || c.now())
    }
}

pub fn system_clock() -> Clock {
    Arc::new(|| std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs() as i64))
}

pub struct PlatformOptions {
    pub clock: Clock,
    pub workers: usize,
}

impl Default for PlatformOptions {
    fn default() -> Self {
        Self { clock: system_clock(), workers: DEFAULT_WORKERS }
    }
}

pub(crate) struct Serving {
    pub manifest: Manifest,
    pub bundle: Arc<ModelBundle>,
}

/// Mutable state of one use case; guarded by a per-use-case mutex so that
/// registry and record updates have a single writer.
pub(crate) struct CaseState {
    pub spec: ValidatedSpec,
    pub registry: Registry,
    pub alerts: AlertLog,
    pub candidates: Vec<Candidate>,
    pub fronts: Vec<RewardFrontView>,
    pub reference: Option<ReferenceWindow>,
    pub timeline: Vec<PsiPoint>,
    pub serving: Option<Serving>,
    /// Champion output summaries over the reference window.
    pub reference_outputs: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct AuditRecord {
    at: i64,
    action: String,
    candidate: String,
    manifest: String,
    replaced: Option<String>,
    note: String,
    canary: Option<Verdict>,
}

type Task = Box<dyn FnOnce() + Send>;

pub(crate) struct JobTable {
    pub records: BTreeMap<String, JobRecord>,
    pub next: u64,
}

pub struct Platform {
    pub(crate) store: Store,
    pub(crate) events: EventLog,
    cases: RwLock<BTreeMap<String, Arc<Mutex<CaseState>>>>,
    pub(crate) jobs: Mutex<JobTable>,
    pub(crate) job_changed: Condvar,
    queue: Mutex<mpsc::Sender<Task>>,
    clock: Clock,
}

/// One scalar per model output: the score, or the best action's value.
pub fn output_summary(o: &ModelOutputs) -> f64 {
    match o {
        ModelOutputs::Score(s) => *s,
        ModelOutputs::PerAction(v) => v.iter().filter_map(|m| m.first().copied()).fold(f64::NEG_INFINITY, f64::max),
        ModelOutputs::ActionValues(v) => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn fnv1a(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.bytes().chain([0u8]) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl Platform {
    pub fn open(root: impl Into<PathBuf>) -> ApiResult<Arc<Self>> {
        Self::open_with(root, PlatformOptions::default())
    }

    /// Opens or creates a data root and reloads every persisted use case.
    /// Jobs that were queued or running when the previous process stopped
    /// are marked failed.
    pub fn open_with(root: impl Into<PathBuf>, opts: PlatformOptions) -> ApiResult<Arc<Self>> {
        let store = Store::new(root);
        std::fs::create_dir_all(store.root())?;
        let (tx, rx) = mpsc::channel::<Task>();
        let rx = Arc::new(std::sync::Mutex::new(rx));
        for i in 0..opts.workers.max(1) {
            let rx = Arc::clone(&rx);
            thread::Builder::new()
                .name(format!("job-worker-{i}"))
                .spawn(move || loop {
                    let task = rx.lock().expect("job queue").recv();
                    match task {
                        Ok(t) => t(),
                        Err(_) => break,
                    }
                })
                .map_err(ApiError::internal)?;
        }
        let platform = Self {
            events: EventLog::durable(store.events_dir()),
            store,
            cases: RwLock::new(BTreeMap::new()),
            jobs: Mutex::new(JobTable { records: BTreeMap::new(), next: 1 }),
            job_changed: Condvar::new(),
            queue: Mutex::new(tx),
            clock: opts.clock,
        };
        platform.reload()?;
        Ok(Arc::new(platform))
    }

    fn reload(&self) -> ApiResult<()> {
        for id in self.store.use_case_ids()? {
            let spec: UseCaseSpec = read_json(&self.store.case_file(&id, "spec.json"))?.expect("listed use cases have a spec");
            let spec = ValidatedSpec::assume_valid(spec);
            self.events.register(spec.clone())?;
            let registry = self.store.read_registry(&id)?;
            let serving = match registry.champion() {
                Some(m) => Some(Serving { manifest: m.clone(), bundle: Arc::new(self.store.bundle(m)?) }),
                None => None,
            };
            let f = |name: &str| self.store.case_file(&id, name);
            let mut st = CaseState {
                spec,
                registry,
                alerts: read_json(&f("alerts.json"))?.unwrap_or_default(),
                candidates: read_json(&f("candidates.json"))?.unwrap_or_default(),
                fronts: read_json(&f("fronts.json"))?.unwrap_or_default(),
                reference: read_json(&f("reference.json"))?,
                timeline: read_json(&f("timeline.json"))?.unwrap_or_default(),
                serving,
                reference_outputs: None,
            };
            st.reference_outputs = reference_outputs(&st);
            self.cases.write().insert(id, Arc::new(Mutex::new(st)));
        }
        let dir = self.store.jobs_dir();
        if dir.exists() {
            let mut table = self.jobs.lock();
            for entry in std::fs::read_dir(&dir)?.filter_map(Result::ok) {
                if entry.path().extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let Some(mut rec) = read_json::<JobRecord>(&entry.path())? else { continue };
                if matches!(rec.status, JobStatus::Queued | JobStatus::Running) {
                    rec.fail(ApiError::internal("interrupted by restart"), self.now());
                    write_json_atomic(&entry.path(), &rec)?;
                }
                table.next = table.next.max(rec.seq + 1);
                table.records.insert(rec.id.clone(), rec);
            }
        }
        Ok(())
    }

    pub fn now(&self) -> i64 {
        (self.clock)()
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// The durable predict/observe log.
    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub(crate) fn case(&self, id: &str) -> ApiResult<Arc<Mutex<CaseState>>> {
        self.cases.read().get(id).cloned().ok_or_else(|| ApiError::unknown_use_case(id))
    }

    pub fn use_case_ids(&self) -> Vec<String> {
        self.cases.read().keys().cloned().collect()
    }

    /// Validates and persists a new use case. Re-onboarding an existing id
    /// replaces its spec and keeps its history.
    pub fn onboard(&self, spec: UseCaseSpec) -> ApiResult<OnboardResponse> {
        let valid = validate_spec(&spec)?;
        let id = valid.id.clone();
        write_json_atomic(&self.store.case_file(&id, "spec.json"), &*valid)?;
        self.events.register(valid.clone())?;
        let mut cases = self.cases.write();
        match cases.get(&id) {
            Some(existing) => existing.lock().spec = valid.clone(),
            None => {
                let st = CaseState {
                    spec: valid.clone(),
                    registry: Registry::new(&id),
                    alerts: AlertLog::default(),
                    candidates: Vec::new(),
                    fronts: Vec::new(),
                    reference: None,
                    timeline: Vec::new(),
                    serving: None,
                    reference_outputs: None,
                };
                cases.insert(id.clone(), Arc::new(Mutex::new(st)));
            }
        }
        Ok(OnboardResponse { recommended_features: recommended_features(&valid.features), id })
    }

    pub fn use_case(&self, id: &str) -> ApiResult<UseCaseView> {
        let case = self.case(id)?;
        let st = case.lock();
        Ok(UseCaseView {
            spec: (*st.spec).clone(),
            champion: st.registry.head().cloned(),
            policy_version: st.serving.as_ref().map(|s| s.manifest.id.clone()),
            predictions: self.events.prediction_count(id)?,
            candidates: st.candidates.len(),
        })
    }

    /// Serves one decision: canonicalize, encode, score, apply the policy,
    /// then log. The response is built from the logged event, so the
    /// caller never sees a decision that is not durable.
    pub fn decide(&self, id: &str, req: DecideRequest) -> ApiResult<DecideResponse> {
        let case = self.case(id)?;
        let st = case.lock();
        let serving = st.serving.as_ref().ok_or_else(|| ApiError::new(ErrorCode::NoChampion, format!("use case `{id}` has no deployed champion")))?;
        if let Some(key) = &req.idempotency_key {
            if let Some(ev) = self.events.predictions(id)?.into_iter().find(|p| p.idempotency_key.as_ref() == Some(key)) {
                return Ok(DecideResponse { decision_id: ev.decision_id, action: ev.action, propensity: ev.propensity, policy_version: ev.policy_version });
            }
        }
        let canon = canonicalize(&req.features, &st.spec.features)?;
        let x = serving.manifest.plan.apply(&canon.vector, st.spec.features.version).map_err(LifecycleError::from)?;
        let outputs = serving.bundle.outputs(&x)?;
        let seed = match req.seed {
            Some(s) => s,
            None => derive_seed(fnv1a(&[id, &req.unit_id]), self.events.prediction_count(id)? as u64),
        };
        let d = decide(&serving.manifest.policy, &outputs, seed).map_err(LifecycleError::from)?;
        let ev = PredictionEvent {
            decision_id: String::new(),
            use_case: id.to_string(),
            unit_id: req.unit_id,
            timestamp: req.timestamp.unwrap_or_else(|| self.now()),
            features: canon.vector,
            action: serving.manifest.actions[d.action].clone(),
            propensity: d.propensity,
            policy_version: serving.manifest.id.clone(),
            idempotency_key: req.idempotency_key,
        };
        let (action, propensity, policy_version) = (ev.action.clone(), ev.propensity, ev.policy_version.clone());
        let decision_id = self.events.log_prediction(ev)?;
        Ok(DecideResponse { decision_id, action, propensity, policy_version })
    }

    /// Action distribution the champion would serve for `features`.
    pub fn serving_probs(&self, id: &str, features: &FeatureVector) -> ApiResult<(String, Vec<f64>)> {
        let case = self.case(id)?;
        let st = case.lock();
        let serving = st.serving.as_ref().ok_or_else(|| ApiError::new(ErrorCode::NoChampion, format!("use case `{id}` has no deployed champion")))?;
        let canon = canonicalize(features, &st.spec.features)?;
        let x = serving.manifest.plan.apply(&canon.vector, st.spec.features.version).map_err(LifecycleError::from)?;
        let probs = serving.manifest.policy.action_probs(&serving.bundle.outputs(&x)?).map_err(LifecycleError::from)?;
        Ok((serving.manifest.id.clone(), probs))
    }

    pub fn observe(&self, id: &str, req: ObserveRequest) -> ApiResult<ObserveResponse> {
        self.case(id)?;
        let ev = ObservationEvent { decision_id: req.decision_id, timestamp: req.timestamp.unwrap_or_else(|| self.now()), metric_values: req.metric_values };
        let decision_id = ev.decision_id.clone();
        let ack = self.events.log_observation(id, ev)?;
        Ok(ObserveResponse { decision_id, duplicate: ack.duplicate })
    }

    /// Logs a simulated trace as behavior data, e.g. to bootstrap a use case
    /// before its first champion. Returns the number of decisions logged.
    pub fn ingest_trace(&self, id: &str, trace: &Trace, prefix: &str, policy_version: &str, t0: i64) -> ApiResult<usize> {
        self.case(id)?;
        let events = trace.to_events(id, prefix, policy_version, t0);
        let n = events.len();
        for (p, o) in events {
            self.events.log_prediction(p)?;
            self.events.log_observation(id, o)?;
        }
        Ok(n)
    }

    pub fn candidates(&self, id: &str) -> ApiResult<CandidatesView> {
        let case = self.case(id)?;
        let st = case.lock();
        if st.candidates.is_empty() {
            return Err(ApiError::new(ErrorCode::NoTuningRun, format!("use case `{id}` has no completed training or tuning run")));
        }
        Ok(CandidatesView { use_case: id.to_string(), champion: st.registry.head().map(|r| r.manifest.clone()), candidates: st.candidates.clone(), fronts: st.fronts.clone() })
    }

    pub fn candidate(&self, id: &str, candidate: &str) -> ApiResult<Candidate> {
        let case = self.case(id)?;
        let st = case.lock();
        find_candidate(&st, candidate).cloned()
    }

    /// Makes a candidate the champion. The first deployment needs no canary;
    /// later ones need a promote verdict against the current champion or an
    /// operator override, which is written to the audit log.
    pub fn deploy(&self, id: &str, req: DeployRequest) -> ApiResult<DeployResponse> {
        let case = self.case(id)?;
        let mut st = case.lock();
        let cand = find_candidate(&st, &req.candidate)?.clone();
        let now = self.now();
        let head = st.registry.head().map(|r| r.manifest.clone());
        let passing = cand.canary.as_ref().filter(|c| Some(&c.champion) == head.as_ref() && c.challenger == cand.manifest_id && c.verdict == Verdict::Promote);
        let override_note = req.override_reason.as_deref().map(str::trim).filter(|s| !s.is_empty());
        let reason = match (&head, passing, override_note) {
            (None, _, _) => RecordReason::Initial,
            (Some(_), Some(_), _) => RecordReason::Promote,
            (Some(_), None, Some(note)) => RecordReason::Override { note: note.to_string() },
            (Some(h), None, None) => {
                let why = match &cand.canary {
                    None => "no canary has been run".to_string(),
                    Some(c) if &c.champion != h => format!("canary ran against {}, current champion is {h}", c.champion),
                    Some(c) => format!("canary verdict is reject: {}", c.reasons.join("; ")),
                };
                return Err(ApiError::new(ErrorCode::CanaryRejected, format!("candidate {} cannot be deployed: {why}", cand.id)).with_details(serde_json::to_value(&cand.canary)?));
            }
        };
        let bundle = Arc::new(self.store.bundle(st.registry.manifest(&cand.manifest_id).ok_or_else(|| ApiError::internal(format!("manifest {} not registered", cand.manifest_id)))?)?);
        let record = st.registry.promote(&cand.manifest_id, now, reason.clone())?;
        if let RecordReason::Override { note } = &reason {
            let audit = AuditRecord {
                at: now,
                action: "override-deploy".into(),
                candidate: cand.id.clone(),
                manifest: cand.manifest_id.clone(),
                replaced: head.clone(),
                note: note.clone(),
                canary: cand.canary.as_ref().map(|c| c.verdict),
            };
            self.store.append_audit(id, &audit)?;
        }
        self.install_champion(&mut st, bundle)?;
        self.store.write_registry(&st.registry)?;
        Ok(DeployResponse { record, policy_version: cand.manifest_id })
    }

    pub fn rollback(&self, id: &str) -> ApiResult<DeployResponse> {
        let case = self.case(id)?;
        let mut st = case.lock();
        let target = st.registry.head().and_then(|r| r.parent.clone()).ok_or(LifecycleError::NoParent)?;
        let bundle = Arc::new(self.store.bundle(st.registry.manifest(&target).ok_or_else(|| ApiError::internal(format!("manifest {target} not registered")))?)?);
        let record = st.registry.rollback(self.now())?;
        self.install_champion(&mut st, bundle)?;
        self.store.write_registry(&st.registry)?;
        Ok(DeployResponse { policy_version: record.manifest.clone(), record })
    }

    /// Points serving at the registry head and resets the reference window
    /// to the champion's training features.
    pub(crate) fn install_champion(&self, st: &mut CaseState, bundle: Arc<ModelBundle>) -> ApiResult<()> {
        let m = st.registry.champion().expect("installed after a promotion").clone();
        let snap = self.store.snapshot(&m.use_case, &m.dataset_hash)?;
        let reference = ReferenceWindow { manifest: m.id.clone(), trained_at: snap.created_at, features: snap.rows.into_iter().map(|r| r.features).collect() };
        write_json_atomic(&self.store.case_file(&m.use_case, "reference.json"), &reference)?;
        st.reference = Some(reference);
        st.serving = Some(Serving { manifest: m, bundle });
        st.reference_outputs = reference_outputs(st);
        Ok(())
    }

    /// Drift, staleness, missing-feature and output checks over the
    /// champion's recent traffic. Alerts raised here are persisted.
    pub fn health(&self, id: &str, window_secs: Option<i64>) -> ApiResult<HealthReport> {
        let case = self.case(id)?;
        let mut st = case.lock();
        let now = self.now();
        let window = window_secs.unwrap_or(HEALTH_WINDOW_SECS);
        let preds = self.events.predictions(id)?;
        let champion = st.registry.head().cloned();
        let recent: Vec<&PredictionEvent> = match &champion {
            Some(h) => preds.iter().filter(|p| p.policy_version == h.manifest && p.timestamp > now - window && p.timestamp <= now).collect(),
            None => Vec::new(),
        };
        let current: Vec<FeatureVector> = recent.iter().map(|p| p.features.clone()).collect();
        let st = &mut *st;

        let mut freshness = None;
        let mut output_psi = None;
        if let (Some(reference), true) = (&st.reference, current.len() >= MIN_HEALTH_DECISIONS) {
            let report = evaluate_freshness(reference, &current, &st.spec.features, now, &FreshnessConfig::default(), &mut st.alerts);
            st.timeline.push(PsiPoint { at: now, max_psi: report.drift.overall_max_psi });
            freshness = Some(report);
            if let (Some(serving), Some(ref_out)) = (&st.serving, &st.reference_outputs) {
                let cur: Vec<f64> = current
                    .iter()
                    .filter_map(|f| serving.manifest.plan.apply(f, st.spec.features.version).ok())
                    .filter_map(|x| serving.bundle.outputs(&x).ok())
                    .map(|o| output_summary(&o))
                    .collect();
                if let Ok(psi) = compute_psi(ref_out, &cur) {
                    output_psi = Some(psi);
                    let _ = check_output_anomaly(&mut st.alerts, &format!("outputs/{}", serving.manifest.id), ref_out, &cur, now);
                }
            }
        }
        let last: Vec<FeatureVector> = preds.iter().rev().take(selfserve_core::lifecycle::MISSING_WINDOW).map(|p| p.features.clone()).collect();
        let missing_feature_rate = selfserve_core::lifecycle::missing_feature_rate(&last);
        check_missing_features(&mut st.alerts, &format!("features/{id}"), &last, now);

        write_json_atomic(&self.store.case_file(id, "alerts.json"), &st.alerts)?;
        write_json_atomic(&self.store.case_file(id, "timeline.json"), &st.timeline)?;
        Ok(HealthReport {
            use_case: id.to_string(),
            champion,
            recent_decisions: current.len(),
            freshness,
            missing_feature_rate,
            output_psi,
            psi_timeline: st.timeline.clone(),
            alerts: st.alerts.alerts.clone(),
        })
    }

    pub fn audit_log(&self, id: &str) -> ApiResult<Vec<serde_json::Value>> {
        self.case(id)?;
        self.store.audit_records(id)
    }

    pub fn submit_job(self: &Arc<Self>, id: &str, request: JobRequest) -> ApiResult<JobRecord> {
        self.case(id)?;
        let rec = {
            let mut table = self.jobs.lock();
            let seq = table.next;
            table.next += 1;
            let rec = JobRecord::queued(seq, id, request, self.now());
            table.records.insert(rec.id.clone(), rec.clone());
            rec
        };
        self.persist_job(&rec)?;
        let me = Arc::clone(self);
        let job_id = rec.id.clone();
        self.queue.lock().send(Box::new(move || me.run_job(&job_id))).map_err(|_| ApiError::internal("job queue closed"))?;
        Ok(rec)
    }

    pub fn job(&self, job_id: &str) -> ApiResult<JobRecord> {
        self.jobs.lock().records.get(job_id).cloned().ok_or_else(|| ApiError::new(ErrorCode::UnknownJob, format!("unknown job `{job_id}`")))
    }

    /// Blocks until the job is done or failed.
    pub fn wait_job(&self, job_id: &str) -> ApiResult<JobRecord> {
        let mut table = self.jobs.lock();
        loop {
            let rec = table.records.get(job_id).ok_or_else(|| ApiError::new(ErrorCode::UnknownJob, format!("unknown job `{job_id}`")))?;
            if rec.status.is_terminal() {
                return Ok(rec.clone());
            }
            self.job_changed.wait(&mut table);
        }
    }

    pub(crate) fn persist_job(&self, rec: &JobRecord) -> ApiResult<()> {
        write_json_atomic(&self.store.jobs_dir().join(format!("{}.json", rec.id)), rec)
    }

    pub(crate) fn update_job(&self, job_id: &str, f: impl FnOnce(&mut JobRecord)) {
        let rec = {
            let mut table = self.jobs.lock();
            let rec = table.records.get_mut(job_id).expect("job exists");
            f(rec);
            rec.clone()
        };
        // A failed status write must not wedge waiters; the in-memory record
        // stays authoritative for this process.
        let _ = self.persist_job(&rec);
        self.job_changed.notify_all();
    }

    /// Stores a canary report on its candidate; a rejection raises a
    /// canary-reject alert.
    pub(crate) fn record_canary(&self, st: &mut CaseState, candidate: &str, report: &CanaryReport) -> ApiResult<Option<String>> {
        let now = self.now();
        let uc = st.spec.id.clone();
        let alert = (report.verdict == Verdict::Reject).then(|| {
            let ev = Evidence::new(format!("canary/{}/{}", report.champion, report.challenger))
                .with("loss_delta", report.loss_delta)
                .with("loss_gate", f64::from(u8::from(report.loss_gate)))
                .with("metric_gate", f64::from(u8::from(report.metric_gate)));
            st.alerts.raise(AlertKind::CanaryReject, ev, now)
        });
        let c = st.candidates.iter_mut().find(|c| c.id == candidate).expect("candidate exists");
        c.canary = Some(report.clone());
        write_json_atomic(&self.store.case_file(&uc, "candidates.json"), &st.candidates)?;
        write_json_atomic(&self.store.case_file(&uc, "alerts.json"), &st.alerts)?;
        Ok(alert)
    }

    pub(crate) fn save_candidates(&self, st: &CaseState) -> ApiResult<()> {
        write_json_atomic(&self.store.case_file(&st.spec.id, "candidates.json"), &st.candidates)?;
        write_json_atomic(&self.store.case_file(&st.spec.id, "fronts.json"), &st.fronts)
    }
}

pub(crate) fn find_candidate<'a>(st: &'a CaseState, id: &str) -> ApiResult<&'a Candidate> {
    st.candidates.iter().find(|c| c.id == id).ok_or_else(|| ApiError::new(ErrorCode::UnknownCandidate, format!("unknown candidate `{id}`")))
}

fn reference_outputs(st: &CaseState) -> Option<Vec<f64>> {
    let (serving, reference) = (st.serving.as_ref()?, st.reference.as_ref()?);
    let v: Vec<f64> = reference
        .features
        .iter()
        .filter_map(|f| serving.manifest.plan.apply(f, st.spec.features.version).ok())
        .filter_map(|x| serving.bundle.outputs(&x).ok())
        .map(|o| output_summary(&o))
        .collect();
    (!v.is_empty()).then_some(v)
}

/// Candidate ids are sequential per use case.
pub(crate) fn next_candidate_id(st: &CaseState) -> String {
    format!("cand-{:04}", st.candidates.len() + 1)
}
