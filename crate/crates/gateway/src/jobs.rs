//! Training, tuning and canary jobs. Jobs run on the platform's worker pool
//! and are polled through their [`JobRecord`].

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use selfserve_core::autoconf::{infer_task, select_model, CvData, LabelDiagnostics};
use selfserve_core::eventlog::{DatasetSnapshot, JoinedExample, DEFAULT_MIN_ROWS};
use selfserve_core::features::FeatureKind;
use selfserve_core::hte::{fit_meta_learner, segment_analysis, BaseLearner, LearnerKind, RctDataset, RctRow, SegmentReport};
use selfserve_core::lifecycle::{canary, counterfactual_estimate, snapshot_transitions, CanaryInput, Manifest, ManifestDraft, ModelBundle, ModelLayout, ModelSpec};
use selfserve_core::models::{Dataset, Hyperparams, ModelKind};
use selfserve_core::offeval::{ActionMeans, LoggedBanditDataset, LoggedRow, PolicyEvaluation};
use selfserve_core::policy::{DecisionPolicy, ModelOutputs};
use selfserve_core::prep::{fit_plan, split_by_unit, PreprocessPlan};
use selfserve_core::rl::{fqe, FqiConfig, GreedyQ, Representation};
use selfserve_core::simlab::{preset, MetricDef};
use selfserve_core::tuning::{tune_decision_policy, tune_reward, PolicyTuningInput, TuningOutcome};
use selfserve_core::usecase::{DecisionKind, Direction, TaskKind, ValidatedSpec};

use crate::api::{Candidate, CandidateSource, DeployRequest, FrontPoint, MetricEstimate, RewardFrontView};
use crate::error::{ApiError, ApiResult, ErrorCode};
use crate::platform::{find_candidate, next_candidate_id, CaseState, Platform};

const Z95: f64 = 1.959963984540054;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.3;
pub const DEFAULT_GAMMA: f64 = 0.9;
pub const DEFAULT_SEARCH_BUDGET: usize = 8;
pub const SEGMENTS: usize = 5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub seed: u64,
    /// Only rows predicted at or after this time are used.
    pub since: Option<i64>,
    pub min_rows: Option<usize>,
    pub validation_fraction: Option<f64>,
    /// Skips model selection for binary and regression tasks.
    pub model: Option<ModelKind>,
    pub hyperparams: Option<Hyperparams>,
    pub search_budget: Option<usize>,
    /// Label metric; defaults to the first maximized metric.
    pub metric: Option<String>,
    pub threshold: Option<f64>,
    /// Whether actions were randomized as an experiment. Inferred from the
    /// logged propensities when absent.
    pub experiment: Option<bool>,
    pub gamma: Option<f64>,
    pub reward_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneRewardParams {
    pub budget: usize,
    pub seed: u64,
    pub since: Option<i64>,
    pub min_rows: Option<usize>,
    pub gamma: Option<f64>,
}

impl Default for TuneRewardParams {
    fn default() -> Self {
        Self { budget: 24, seed: 0, since: None, min_rows: None, gamma: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunePolicyParams {
    pub budget: usize,
    pub seed: u64,
    pub n_per_arm: usize,
    /// Simulated time of the online stage.
    pub time: f64,
    pub metric: Option<String>,
    pub since: Option<i64>,
    pub min_rows: Option<usize>,
}

impl Default for TunePolicyParams {
    fn default() -> Self {
        Self { budget: 16, seed: 0, n_per_arm: 2000, time: 0.0, metric: None, since: None, min_rows: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryParams {
    pub candidate: String,
    /// Deploy the challenger when the verdict is promote.
    #[serde(default)]
    pub promote: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobRequest {
    Train(TrainParams),
    TuneReward(TuneRewardParams),
    TunePolicy(TunePolicyParams),
    Canary(CanaryParams),
}

impl JobRequest {
    pub fn kind(&self) -> JobKind {
        match self {
            JobRequest::Train(_) => JobKind::Train,
            JobRequest::TuneReward(_) => JobKind::TuneReward,
            JobRequest::TunePolicy(_) => JobKind::TunePolicy,
            JobRequest::Canary(_) => JobKind::Canary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Train,
    TuneReward,
    TunePolicy,
    Canary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub seq: u64,
    pub use_case: String,
    pub kind: JobKind,
    pub request: JobRequest,
    pub status: JobStatus,
    pub result: Option<Value>,
    pub error: Option<ApiError>,
    pub submitted_at: i64,
    pub started_at: Option<i64>,
    pub finished_at: Option<i64>,
    pub elapsed_ms: Option<u64>,
}

impl JobRecord {
    pub fn queued(seq: u64, use_case: &str, request: JobRequest, now: i64) -> Self {
        Self {
            id: format!("job-{seq:06}"),
            seq,
            use_case: use_case.to_string(),
            kind: request.kind(),
            request,
            status: JobStatus::Queued,
            result: None,
            error: None,
            submitted_at: now,
            started_at: None,
            finished_at: None,
            elapsed_ms: None,
        }
    }

    /// Queued to running; any other transition is refused.
    pub fn start(&mut self, now: i64) -> bool {
        if self.status != JobStatus::Queued {
            return false;
        }
        self.status = JobStatus::Running;
        self.started_at = Some(now);
        true
    }

    /// Running to done.
    pub fn finish(&mut self, result: Value, now: i64, elapsed_ms: u64) -> bool {
        if self.status != JobStatus::Running {
            return false;
        }
        self.status = JobStatus::Done;
        self.result = Some(result);
        self.finished_at = Some(now);
        self.elapsed_ms = Some(elapsed_ms);
        true
    }

    /// Queued or running to failed.
    pub fn fail(&mut self, error: ApiError, now: i64) -> bool {
        if self.status.is_terminal() {
            return false;
        }
        self.status = JobStatus::Failed;
        self.error = Some(error);
        self.finished_at = Some(now);
        true
    }
}

fn bad(e: impl std::fmt::Display) -> ApiError {
    ApiError::bad_request(e.to_string())
}

/// Snapshots and plan shared by every training-like job.
struct Prepared {
    spec: ValidatedSpec,
    parent: Option<String>,
    train: DatasetSnapshot,
    valid: DatasetSnapshot,
    plan: PreprocessPlan,
    now: i64,
}

fn primary_metric(spec: &ValidatedSpec, requested: Option<&str>) -> ApiResult<String> {
    match requested {
        Some(m) if spec.metric(m).is_some() => Ok(m.to_string()),
        Some(m) => Err(ApiError::new(ErrorCode::UnknownMetric, format!("unknown metric `{m}`"))),
        None => Ok(spec.metrics.iter().find(|m| m.direction == Direction::Maximize).unwrap_or(&spec.metrics[0]).name.clone()),
    }
}

/// A binary decision whose logged actions all share one propensity below 1
/// looks like a randomized experiment.
fn looks_randomized(spec: &ValidatedSpec, rows: &[JoinedExample]) -> bool {
    spec.decision_space.kind == DecisionKind::Binary && rows.first().is_some_and(|r0| r0.propensity < 1.0 && rows.iter().all(|r| (r.propensity - r0.propensity).abs() < 1e-12))
}

fn feature_names(plan: &PreprocessPlan) -> Vec<String> {
    plan.column_slices().into_iter().flat_map(|(name, r)| if r.len() == 1 { vec![name] } else { r.map(|i| format!("{name}[{i}]")).collect() }).collect()
}

fn estimates_from(eval: &PolicyEvaluation, estimator: &str) -> Vec<MetricEstimate> {
    eval.metrics
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let (v, se) = (eval.estimate[j], eval.std_error[j]);
            MetricEstimate { metric: m.clone(), estimator: estimator.into(), value: v, std_error: Some(se), ci: Some([v - Z95 * se, v + Z95 * se]) }
        })
        .collect()
}

fn fqi_spec(spec: &ValidatedSpec, weights: Vec<f64>, gamma: f64) -> ModelSpec {
    ModelSpec::Fqi {
        metrics: spec.metrics.iter().map(|m| m.name.clone()).collect(),
        signs: spec.metrics.iter().map(|m| m.direction.sign()).collect(),
        weights,
        gamma,
        config: FqiConfig { representation: Representation::Linear, ..Default::default() },
    }
}

fn fqe_estimates(m: &Manifest, bundle: &ModelBundle, valid: &DatasetSnapshot) -> ApiResult<Vec<MetricEstimate>> {
    let (ModelSpec::Fqi { metrics, gamma, config, .. }, ModelBundle::Fqi { q }) = (&m.model, bundle) else {
        return Err(ApiError::internal("not a Q-function manifest"));
    };
    let ts = snapshot_transitions(&m.plan, &m.actions, metrics, valid)?;
    let values = fqe(&ts, m.actions.len(), &GreedyQ { q, epsilon: m.policy.epsilon }, *gamma, config).map_err(bad)?;
    Ok(metrics.iter().zip(values).map(|(name, v)| MetricEstimate { metric: name.clone(), estimator: "fqe".into(), value: v, std_error: None, ci: None }).collect())
}

fn segments(spec: &ValidatedSpec, plan: &PreprocessPlan, train: &DatasetSnapshot, metric: &str, base: BaseLearner, seed: u64) -> Option<SegmentReport> {
    let actions = &spec.decision_space.actions;
    let metrics: Vec<String> = spec.metrics.iter().map(|m| m.name.clone()).collect();
    let rows: Vec<RctRow> = train
        .rows
        .iter()
        .filter_map(|r| {
            let x = plan.apply(&r.features, train.schema_version).ok()?;
            let variant = actions.iter().position(|a| a == &r.action)?;
            let outcomes = metrics.iter().map(|m| r.metric_values.get(m).copied()).collect::<Option<Vec<f64>>>()?;
            Some(RctRow { x, variant, outcomes })
        })
        .collect();
    let treated = rows.iter().filter(|r| r.variant == 1).count() as f64 / rows.len().max(1) as f64;
    let rct = RctDataset { features: feature_names(plan), metrics, propensity: treated, rows };
    let model = fit_meta_learner(LearnerKind::T, &rct, metric, &base, seed).ok()?;
    segment_analysis(&model, &rct, SEGMENTS).ok()
}

impl Platform {
    pub(crate) fn run_job(&self, job_id: &str) {
        let mut request = None;
        self.update_job(job_id, |r| {
            if r.start(self.now()) {
                request = Some((r.use_case.clone(), r.request.clone()));
            }
        });
        let Some((uc, request)) = request else { return };
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(|| match &request {
            JobRequest::Train(p) => self.job_train(&uc, job_id, p),
            JobRequest::TuneReward(p) => self.job_tune_reward(&uc, job_id, p),
            JobRequest::TunePolicy(p) => self.job_tune_policy(&uc, job_id, p),
            JobRequest::Canary(p) => self.job_canary(&uc, p),
        }))
        .unwrap_or_else(|panic| {
            let msg = panic.downcast_ref::<String>().cloned().or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            Err(ApiError::internal(format!("job panicked: {msg}")))
        });
        let now = self.now();
        let ms = t.elapsed().as_millis() as u64;
        self.update_job(job_id, |r| {
            match out {
                Ok(v) => r.finish(v, now, ms),
                Err(e) => r.fail(e, now),
            };
        });
    }

    fn prepare(&self, uc: &str, since: Option<i64>, min_rows: Option<usize>, validation_fraction: f64, seed: u64) -> ApiResult<Prepared> {
        let (spec, parent) = {
            let case = self.case(uc)?;
            let st = case.lock();
            (st.spec.clone(), st.registry.head().map(|r| r.manifest.clone()))
        };
        let now = self.now();
        let need = min_rows.unwrap_or(DEFAULT_MIN_ROWS).max(2);
        let snap = self.events.build_dataset(uc, now, 1)?;
        let rows: Vec<JoinedExample> = snap.rows.into_iter().filter(|r| since.is_none_or(|s| r.timestamp >= s)).collect();
        if rows.len() < need {
            return Err(ApiError::bad_request(format!("insufficient data: {} joined rows in the window, need {need}", rows.len())));
        }
        if !(0.0..1.0).contains(&validation_fraction) || validation_fraction == 0.0 {
            return Err(ApiError::bad_request(format!("validation fraction {validation_fraction} outside (0, 1)")));
        }
        let split = split_by_unit(&rows, |r| r.unit_id.as_str(), [1.0 - validation_fraction, validation_fraction, 0.0], seed).map_err(bad)?;
        if split.train.len() < 2 || split.validation.is_empty() {
            return Err(ApiError::bad_request("too few units to split into train and validation"));
        }
        let train = DatasetSnapshot::new(uc, snap.schema_version, split.train, now);
        let valid = DatasetSnapshot::new(uc, snap.schema_version, split.validation, now);
        self.store.put_snapshot(&train)?;
        self.store.put_snapshot(&valid)?;
        let plan = fit_plan(&train, &spec.features).map_err(bad)?;
        Ok(Prepared { spec, parent, train, valid, plan, now })
    }

    /// Registers a sealed manifest and its candidate in one critical section.
    fn commit_candidate(&self, uc: &str, m: Manifest, bundle: &ModelBundle, cand: impl FnOnce(String) -> Candidate) -> ApiResult<Candidate> {
        let case = self.case(uc)?;
        let mut st = case.lock();
        self.store.put_bundle(uc, &m.id, bundle)?;
        st.registry.register(m);
        self.store.write_registry(&st.registry)?;
        let c = cand(next_candidate_id(&st));
        st.candidates.push(c.clone());
        self.save_candidates(&st)?;
        Ok(c)
    }

    fn job_train(&self, uc: &str, job: &str, p: &TrainParams) -> ApiResult<Value> {
        let prep = self.prepare(uc, p.since, p.min_rows, p.validation_fraction.unwrap_or(DEFAULT_VALIDATION_FRACTION), p.seed)?;
        let spec = &prep.spec;
        let metric = primary_metric(spec, p.metric.as_deref())?;
        let labels: Vec<f64> = prep.train.rows.iter().filter_map(|r| r.metric_values.get(&metric).copied()).collect();
        let experiment = p.experiment.unwrap_or_else(|| looks_randomized(spec, &prep.train.rows));
        let task = infer_task(spec, &LabelDiagnostics::from_labels(&labels, experiment)).map_err(bad)?;
        let n = spec.decision_space.len();
        let eps = spec.exploration_epsilon;

        let mut leaderboard = None;
        let mut seg = None;
        let (model, policy) = match task {
            TaskKind::BinaryClassification | TaskKind::Regression => {
                if n != 2 {
                    return Err(ApiError::bad_request(format!("{task:?} serving needs two actions, decision space has {n}")));
                }
                let (kind, hyperparams) = match p.model {
                    Some(k) => (k, p.hyperparams.clone().unwrap_or_else(|| Hyperparams::default_for(k))),
                    None => {
                        let x = prep.plan.apply_all(prep.train.rows.iter().map(|r| &r.features), prep.train.schema_version).map_err(bad)?;
                        let units: Vec<String> = prep.train.rows.iter().map(|r| r.unit_id.clone()).collect();
                        let cv = CvData::new(Dataset::new(x, labels.clone()), &units, p.seed).map_err(bad)?;
                        let (_, lb) = select_model(task, &cv, p.search_budget.unwrap_or(DEFAULT_SEARCH_BUDGET), p.seed).map_err(bad)?;
                        let w = lb.winner();
                        let chosen = (w.kind, w.hyperparams.clone());
                        leaderboard = Some(lb);
                        chosen
                    }
                };
                let spec = ModelSpec::Supervised { kind, hyperparams, seed: p.seed, label: metric.clone(), layout: ModelLayout::Single };
                (spec, DecisionPolicy::threshold(p.threshold.unwrap_or(0.5), eps))
            }
            TaskKind::ContextualBandit | TaskKind::MulticlassValue | TaskKind::Hte => {
                if spec.metric(&metric).map(|m| m.direction) != Some(Direction::Maximize) {
                    return Err(ApiError::bad_request(format!("value policies rank actions by a maximized metric; `{metric}` is minimized")));
                }
                let kind = p.model.unwrap_or(ModelKind::Linear);
                let hyperparams = p.hyperparams.clone().unwrap_or_else(|| Hyperparams::default_for(kind));
                if task == TaskKind::Hte {
                    seg = segments(spec, &prep.plan, &prep.train, &metric, BaseLearner { kind, hyperparams: hyperparams.clone() }, p.seed);
                }
                let spec = ModelSpec::Supervised { kind, hyperparams, seed: p.seed, label: metric.clone(), layout: ModelLayout::PerAction };
                (spec, DecisionPolicy::value_argmax(vec![1.0], n, eps))
            }
            TaskKind::OfflineRL => {
                let m = spec.metrics.len();
                let weights = p.reward_weights.clone().unwrap_or_else(|| vec![1.0 / m as f64; m]);
                (fqi_spec(spec, weights, p.gamma.unwrap_or(DEFAULT_GAMMA)), DecisionPolicy::rl_greedy("bundle", n, eps))
            }
        };

        let draft = ManifestDraft { use_case: uc.into(), plan: prep.plan.clone(), model, actions: spec.decision_space.actions.clone(), policy, parent: prep.parent.clone(), created_at: prep.now };
        let (m, bundle) = Manifest::create(draft, &prep.train)?;
        let estimates = match &bundle {
            ModelBundle::Fqi { .. } => fqe_estimates(&m, &bundle, &prep.valid)?,
            ModelBundle::Supervised { .. } => estimates_from(&counterfactual_estimate(&m, &bundle, &prep.valid, &spec.metrics)?, "dr"),
        };
        let manifest_id = m.id.clone();
        let c = self.commit_candidate(uc, m, &bundle, |id| Candidate {
            id,
            manifest_id: manifest_id.clone(),
            source: CandidateSource::Train,
            job: job.into(),
            task,
            train_snapshot: prep.train.content_hash.clone(),
            validation_snapshot: prep.valid.content_hash.clone(),
            estimates,
            reward_weights: None,
            nondominated: None,
            segments: seg,
            leaderboard,
            canary: None,
            created_at: prep.now,
        })?;
        Ok(json!({ "task": task, "candidate": c.id, "manifest": manifest_id, "train_rows": prep.train.len(), "validation_rows": prep.valid.len() }))
    }

    fn job_tune_reward(&self, uc: &str, job: &str, p: &TuneRewardParams) -> ApiResult<Value> {
        let prep = self.prepare(uc, p.since, p.min_rows, DEFAULT_VALIDATION_FRACTION, p.seed)?;
        let spec = &prep.spec;
        let names: Vec<String> = spec.metrics.iter().map(|m| m.name.clone()).collect();
        let defs: Vec<MetricDef> = spec.metrics.iter().map(|m| MetricDef { name: m.name.clone(), direction: m.direction }).collect();
        let actions = spec.decision_space.actions.clone();
        let gamma = p.gamma.unwrap_or(DEFAULT_GAMMA);
        let cfg = FqiConfig { representation: Representation::Linear, ..Default::default() };
        let ts = snapshot_transitions(&prep.plan, &actions, &names, &prep.train)?;
        let front = tune_reward(&ts, actions.len(), &defs, gamma, p.budget, p.seed, &cfg).map_err(bad)?;

        let mut ids = vec![None; front.candidates.len()];
        for &i in &front.front {
            let rc = &front.candidates[i];
            let draft = ManifestDraft {
                use_case: uc.into(),
                plan: prep.plan.clone(),
                model: fqi_spec(spec, rc.weights.clone(), gamma),
                actions: actions.clone(),
                policy: DecisionPolicy::rl_greedy("bundle", actions.len(), spec.exploration_epsilon),
                parent: prep.parent.clone(),
                created_at: prep.now,
            };
            let (m, bundle) = Manifest::create(draft, &prep.train)?;
            let estimates = names.iter().zip(&rc.raw_values).map(|(n, v)| MetricEstimate { metric: n.clone(), estimator: "fqe".into(), value: *v, std_error: None, ci: None }).collect();
            let manifest_id = m.id.clone();
            let c = self.commit_candidate(uc, m, &bundle, |id| Candidate {
                id,
                manifest_id,
                source: CandidateSource::TuneReward,
                job: job.into(),
                task: TaskKind::OfflineRL,
                train_snapshot: prep.train.content_hash.clone(),
                validation_snapshot: prep.valid.content_hash.clone(),
                estimates,
                reward_weights: Some(rc.weights.clone()),
                nondominated: Some(true),
                segments: None,
                leaderboard: None,
                canary: None,
                created_at: prep.now,
            })?;
            ids[i] = Some(c.id);
        }
        let view = RewardFrontView {
            job: job.into(),
            metrics: names,
            points: front
                .candidates
                .iter()
                .zip(&ids)
                .map(|(c, id)| FrontPoint { trial: c.trial, weights: c.weights.clone(), values: c.values.clone(), raw_values: c.raw_values.clone(), nondominated: c.nondominated, candidate: id.clone() })
                .collect(),
            reference: front.reference.clone(),
            hypervolume: front.hypervolume,
        };
        let case = self.case(uc)?;
        let mut st = case.lock();
        st.fronts.push(view.clone());
        self.save_candidates(&st)?;
        Ok(json!({ "candidates": ids.into_iter().flatten().collect::<Vec<_>>(), "front": view }))
    }

    fn job_tune_policy(&self, uc: &str, job: &str, p: &TunePolicyParams) -> ApiResult<Value> {
        let (spec, champ, bundle) = {
            let case = self.case(uc)?;
            let st = case.lock();
            let s = st.serving.as_ref().ok_or_else(|| ApiError::new(ErrorCode::NoChampion, format!("use case `{uc}` has no deployed champion")))?;
            (st.spec.clone(), s.manifest.clone(), s.bundle.clone())
        };
        if !matches!(champ.model, ModelSpec::Supervised { .. }) {
            return Err(ApiError::bad_request("decision-policy tuning needs a supervised champion"));
        }
        let env_name = spec.sim_env.clone().ok_or_else(|| ApiError::bad_request("decision-policy tuning needs a use case bound to a simulation environment"))?;
        let env = preset(&env_name).map_err(bad)?;
        let cols = &spec.features.columns;
        if cols.iter().any(|c| c.kind != FeatureKind::Numeric) {
            return Err(ApiError::bad_request("simulated contexts map onto numeric feature columns only"));
        }
        let now = self.now();
        let rows: Vec<JoinedExample> = self.events.build_dataset(uc, now, 1)?.rows.into_iter().filter(|r| p.since.is_none_or(|s| r.timestamp >= s)).collect();
        let need = p.min_rows.unwrap_or(DEFAULT_MIN_ROWS);
        if rows.len() < need {
            return Err(ApiError::bad_request(format!("insufficient data: {} joined rows in the window, need {need}", rows.len())));
        }
        let env_metrics: Vec<String> = env.metrics().into_iter().map(|m| m.name).collect();
        let metric = primary_metric(&spec, p.metric.as_deref())?;
        let metric_idx = env_metrics.iter().position(|m| m == &metric).ok_or_else(|| ApiError::bad_request(format!("environment `{env_name}` has no metric `{metric}`")))?;
        let logged_rows = rows
            .iter()
            .map(|r| {
                let x = cols.iter().map(|c| r.features.get(&c.name).and_then(|v| v.as_num()).unwrap_or(f64::NAN)).collect();
                let action = champ.actions.iter().position(|a| a == &r.action).ok_or_else(|| ApiError::bad_request(format!("unknown action `{}`", r.action)))?;
                let rewards = env_metrics.iter().map(|m| r.metric_values.get(m).copied().ok_or_else(|| ApiError::bad_request(format!("row `{}` lacks metric `{m}`", r.decision_id)))).collect::<ApiResult<_>>()?;
                Ok(LoggedRow { x, action, propensity: r.propensity, rewards })
            })
            .collect::<ApiResult<Vec<_>>>()?;
        let logged = LoggedBanditDataset { n_actions: champ.actions.len(), metrics: env_metrics, rows: logged_rows };
        let q = ActionMeans::fit(&logged);
        let version = spec.features.version;
        let outputs = |x: &[f64]| -> ModelOutputs {
            let fv = cols.iter().zip(x).fold(selfserve_core::features::FeatureVector::new(), |fv, (c, v)| fv.with(&c.name, *v));
            let enc = champ.plan.apply(&fv, version).expect("numeric contexts encode");
            bundle.outputs(&enc).expect("champion scores encoded contexts")
        };
        let input = PolicyTuningInput { champion: &champ.policy, outputs: &outputs, logged: &logged, outcome_model: &q, env: &env, time: p.time, n_per_arm: p.n_per_arm, metric: metric_idx };
        let report = tune_decision_policy(&input, p.budget, p.seed).map_err(bad)?;

        let mut candidate = None;
        if report.outcome == TuningOutcome::Recommended {
            let logged_snap = DatasetSnapshot::new(uc, version, rows, now);
            self.store.put_snapshot(&logged_snap)?;
            let champ_snap = self.store.snapshot(uc, &champ.dataset_hash)?;
            let draft = ManifestDraft {
                use_case: uc.into(),
                plan: champ.plan.clone(),
                model: champ.model.clone(),
                actions: champ.actions.clone(),
                policy: report.recommended.clone(),
                parent: Some(champ.id.clone()),
                created_at: now,
            };
            let (m, new_bundle) = Manifest::create(draft, &champ_snap)?;
            let rec = report.recommended_trial.and_then(|t| report.candidates.iter().find(|c| c.trial == t));
            let mut estimates = rec.map(|c| estimates_from(&c.offline, "dr")).unwrap_or_default();
            if let Some(t) = rec.and_then(|c| c.online.as_ref()) {
                let se = (t.var_a / p.n_per_arm as f64).sqrt();
                estimates.push(MetricEstimate { metric: t.metric.clone(), estimator: "ab".into(), value: t.mean_a, std_error: Some(se), ci: Some([t.mean_a - Z95 * se, t.mean_a + Z95 * se]) });
            }
            let manifest_id = m.id.clone();
            let c = self.commit_candidate(uc, m, &new_bundle, |id| Candidate {
                id,
                manifest_id,
                source: CandidateSource::TunePolicy,
                job: job.into(),
                task: TaskKind::ContextualBandit,
                train_snapshot: champ_snap.content_hash.clone(),
                validation_snapshot: logged_snap.content_hash.clone(),
                estimates,
                reward_weights: None,
                nondominated: None,
                segments: None,
                leaderboard: None,
                canary: None,
                created_at: now,
            })?;
            candidate = Some(c.id);
        }
        Ok(json!({ "outcome": report.outcome, "candidate": candidate, "report": report }))
    }

    fn job_canary(&self, uc: &str, p: &CanaryParams) -> ApiResult<Value> {
        let (spec, champ, chall, cand) = {
            let case = self.case(uc)?;
            let st = case.lock();
            let cand = find_candidate(&st, &p.candidate)?.clone();
            let champ = st.registry.champion().cloned().ok_or_else(|| ApiError::new(ErrorCode::NoChampion, "no champion to compare against; the first deployment needs no canary"))?;
            let chall = st.registry.manifest(&cand.manifest_id).cloned().ok_or_else(|| ApiError::internal(format!("manifest {} not registered", cand.manifest_id)))?;
            (st.spec.clone(), champ, chall, cand)
        };
        let champion_data = self.store.snapshot(uc, &champ.dataset_hash)?;
        let challenger_data = self.store.snapshot(uc, &chall.dataset_hash)?;
        let validation = self.store.snapshot(uc, &cand.validation_snapshot)?;
        let report = canary(&CanaryInput {
            champion: &champ,
            champion_data: &champion_data,
            challenger: &chall,
            challenger_data: &challenger_data,
            validation: &validation,
            logged: &validation,
            metrics: &spec.metrics,
        })?;
        let alert = {
            let case = self.case(uc)?;
            let mut st: parking_lot::MutexGuard<'_, CaseState> = case.lock();
            self.record_canary(&mut st, &cand.id, &report)?
        };
        let deployed = if p.promote && report.verdict == selfserve_core::lifecycle::Verdict::Promote {
            Some(self.deploy(uc, DeployRequest { candidate: cand.id.clone(), override_reason: None })?)
        } else {
            None
        };
        Ok(json!({ "report": report, "alert": alert, "deployed": deployed }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_status_only_moves_forward() {
        let mut r = JobRecord::queued(1, "uc", JobRequest::Train(TrainParams::default()), 0);
        assert_eq!(r.id, "job-000001");
        assert!(!r.finish(json!({}), 1, 0));
        assert!(r.start(1));
        assert!(r.finish(json!({}), 2, 5));
        let mut r2 = JobRecord::queued(2, "uc", JobRequest::Train(TrainParams::default()), 0);
        assert!(r2.start(1));
        assert!(!r2.start(2));
        assert!(r2.fail(ApiError::internal("x"), 3));
        assert!(!r2.finish(json!({}), 4, 0));
        assert_eq!(r2.status, JobStatus::Failed);
        assert!(r.status.is_terminal());
    }

    #[test]
    fn job_requests_are_tagged_by_kind() {
        let r: JobRequest = serde_json::from_value(json!({ "kind": "tune_reward", "budget": 8 })).unwrap();
        assert_eq!(r, JobRequest::TuneReward(TuneRewardParams { budget: 8, ..Default::default() }));
        let r: JobRequest = serde_json::from_value(json!({ "kind": "canary", "candidate": "cand-0001" })).unwrap();
        assert_eq!(r.kind(), JobKind::Canary);
        assert!(serde_json::from_value::<JobRequest>(json!({ "kind": "bake" })).is_err());
    }
}
