//! End-to-end scenarios that drive a platform instance through simulated
//! traffic, for the CLI and the acceptance suite.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use selfserve_core::features::{FeatureColumn, FeatureSchema, FeatureVector};
use selfserve_core::lifecycle::{FreshnessAction, Verdict};
use selfserve_core::rng::derive_seed;
use selfserve_core::simlab::{preset, simulate_cohort, BanditEnv, EnvKind, EnvSpec, SimPolicy};
use selfserve_core::usecase::{DecisionSpace, Direction, ProductMetricSpec, UseCaseSpec};

use crate::api::{DecideRequest, DeployRequest, ObserveRequest};
use crate::error::{ApiError, ApiResult};
use crate::jobs::{CanaryParams, JobRecord, JobRequest, JobStatus, TrainParams};
use crate::platform::{ManualClock, Platform, PlatformOptions};

pub const SCENARIOS: &[&str] = &["drift-lifecycle", "custody"];
pub const DAY: i64 = 86_400;
const T0: i64 = 1_700_000_000;
/// Regret after recovery may exceed the pre-drift level by this factor.
pub const RECOVERY_TOLERANCE: f64 = 1.10;

fn bandit(env: &EnvSpec) -> ApiResult<&BanditEnv> {
    match &env.env {
        EnvKind::Bandit(b) => Ok(b),
        _ => Err(ApiError::bad_request(format!("`{}` is not a contextual bandit environment", env.name))),
    }
}

fn bandit_spec(id: &str, env: &EnvSpec, epsilon: f64) -> ApiResult<UseCaseSpec> {
    let b = bandit(env)?;
    let names: Vec<String> = env.action_names();
    Ok(UseCaseSpec {
        id: id.into(),
        decision_space: DecisionSpace::multiclass(&names.iter().map(String::as_str).collect::<Vec<_>>()),
        metrics: b.metrics.iter().map(|m| ProductMetricSpec::immediate(&m.name, m.direction)).collect(),
        features: FeatureSchema::new((1..=b.dim).map(|i| FeatureColumn::numeric(&format!("x{i}"), true)).collect()),
        task_hint: None,
        join_window: 3600,
        retention: 35,
        exploration_epsilon: epsilon,
        sim_env: Some(env.name.clone()),
    })
}

fn features(x: &[f64]) -> FeatureVector {
    x.iter().enumerate().fold(FeatureVector::new(), |fv, (i, v)| fv.with(&format!("x{}", i + 1), *v))
}

fn finished(p: &Platform, rec: JobRecord) -> ApiResult<JobRecord> {
    let done = p.wait_job(&rec.id)?;
    match done.status {
        JobStatus::Done => Ok(done),
        _ => Err(done.error.unwrap_or_else(|| ApiError::internal(format!("job {} failed", done.id)))),
    }
}

fn candidate_of(job: &JobRecord) -> ApiResult<String> {
    job.result.as_ref().and_then(|r| r["candidate"].as_str()).map(str::to_string).ok_or_else(|| ApiError::internal(format!("job {} produced no candidate", job.id)))
}

/// Onboards a bandit use case, logs uniformly random behavior data and
/// deploys the first trained champion.
fn bootstrap(p: &Arc<Platform>, clock: &ManualClock, id: &str, env: &EnvSpec, epsilon: f64, n: usize, seed: u64) -> ApiResult<()> {
    p.onboard(bandit_spec(id, env, epsilon)?)?;
    let k = env.n_actions();
    let uniform = move |_: &[f64]| vec![1.0 / k as f64; k];
    let trace = simulate_cohort(env, SimPolicy::Context(&uniform), n, 0.0, seed).map_err(|e| ApiError::bad_request(e.to_string()))?;
    p.ingest_trace(id, &trace, "boot-", "uniform", clock.now())?;
    clock.advance(3600);
    let job = finished(p, p.submit_job(id, JobRequest::Train(TrainParams { seed, ..Default::default() }))?)?;
    p.deploy(id, DeployRequest { candidate: candidate_of(&job)?, override_reason: None })?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub seed: u64,
    pub bootstrap: usize,
    pub per_cycle: usize,
    pub cycles: usize,
    pub epsilon: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self { seed: 7, bootstrap: 4000, per_cycle: 3000, cycles: 6, epsilon: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub sim_time: f64,
    pub policy_version: String,
    /// Mean expected regret of the served action distribution.
    pub regret: f64,
    pub max_psi: Option<f64>,
    pub retrained: bool,
    pub canary: Option<Verdict>,
    pub promoted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftLifecycleReport {
    pub config: DriftConfig,
    pub drift_at: f64,
    pub cycles: Vec<CycleReport>,
    pub retrains: usize,
    pub pre_drift_regret: f64,
    /// Max PSI of the first cycle served after the shift.
    pub drift_psi: Option<f64>,
    /// Regret of the first full cycle served by the promoted challenger.
    pub post_promotion_regret: Option<f64>,
    pub recovered: bool,
}

/// Serves the drifting three-arm bandit for `cycles` simulated days, one
/// health check per day. A retrain trigger trains on that day's traffic,
/// canaries the result against the champion and promotes on a pass.
pub fn drift_lifecycle(root: &Path, cfg: DriftConfig) -> ApiResult<DriftLifecycleReport> {
    let env = preset("bandit-drift").map_err(|e| ApiError::internal(e.to_string()))?;
    let b = bandit(&env)?.clone();
    let drift_at = env.drift.first().map_or(f64::INFINITY, |d| d.at);
    let clock = ManualClock::new(T0);
    let p = Platform::open_with(root, PlatformOptions { clock: clock.as_clock(), ..Default::default() })?;
    let id = "drift-demo";
    bootstrap(&p, &clock, id, &env, cfg.epsilon, cfg.bootstrap, cfg.seed)?;

    let k = env.n_actions();
    let uniform = move |_: &[f64]| vec![1.0 / k as f64; k];
    let mut cycles = Vec::new();
    for c in 0..cfg.cycles {
        let t = c as f64;
        clock.set(T0 + (c as i64 + 1) * DAY);
        let now = clock.now();
        let start = now - cfg.per_cycle as i64;
        let (cs, as_) = env.shifts_at(t, b.dim);
        let anchor: Vec<f64> = b.anchor.iter().zip(&as_).map(|(a, s)| a + s).collect();
        debug_assert_eq!(cs.len(), b.dim);
        let contexts = simulate_cohort(&env, SimPolicy::Context(&uniform), cfg.per_cycle, t, derive_seed(cfg.seed, 1000 + c as u64)).map_err(|e| ApiError::internal(e.to_string()))?;
        let mut regret = 0.0;
        let mut version = String::new();
        for (i, row) in contexts.rows.iter().enumerate() {
            let fv = features(&row.x);
            let means: Vec<f64> = (0..k).map(|a| b.mean(a, 0, &row.x, &anchor)).collect();
            let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (v, probs) = p.serving_probs(id, &fv)?;
            regret += probs.iter().zip(&means).map(|(pi, m)| pi * (best - m)).sum::<f64>();
            version = v;
            let resp = p.decide(id, DecideRequest { unit_id: format!("c{c}-u{i}"), features: fv, seed: Some(derive_seed(cfg.seed, ((c as u64) << 32) | i as u64)), timestamp: Some(start + i as i64), idempotency_key: None })?;
            let served = env.action_names().iter().position(|a| a == &resp.action).expect("served action is in the decision space");
            // The simulated row's noise is independent of the arm, so it is
            // reused for the served arm.
            let noise = row.outcomes[0] - b.mean(row.action, 0, &row.x, &anchor);
            let reward = means[served] + noise;
            p.observe(id, ObserveRequest { decision_id: resp.decision_id, metric_values: [(b.metrics[0].name.clone(), reward)].into(), timestamp: Some(start + i as i64) })?;
        }
        let health = p.health(id, Some(DAY))?;
        let mut report = CycleReport {
            cycle: c,
            sim_time: t,
            policy_version: version,
            regret: regret / cfg.per_cycle as f64,
            max_psi: health.freshness.as_ref().map(|f| f.drift.overall_max_psi),
            retrained: false,
            canary: None,
            promoted: false,
        };
        if health.freshness.as_ref().is_some_and(|f| f.action == FreshnessAction::Retrain) {
            report.retrained = true;
            let job = finished(&p, p.submit_job(id, JobRequest::Train(TrainParams { seed: cfg.seed + c as u64, since: Some(start), ..Default::default() }))?)?;
            let cand = candidate_of(&job)?;
            let canary = finished(&p, p.submit_job(id, JobRequest::Canary(CanaryParams { candidate: cand, promote: true }))?)?;
            let result = canary.result.unwrap_or_default();
            report.canary = serde_json::from_value(result["report"]["verdict"].clone()).ok();
            report.promoted = !result["deployed"].is_null();
        }
        cycles.push(report);
    }

    let pre: Vec<f64> = cycles.iter().filter(|c| c.sim_time < drift_at).map(|c| c.regret).collect();
    let pre_drift_regret = pre.iter().sum::<f64>() / pre.len().max(1) as f64;
    let drift_psi = cycles.iter().find(|c| c.sim_time >= drift_at).and_then(|c| c.max_psi);
    let post_promotion_regret = cycles.iter().position(|c| c.promoted).and_then(|i| cycles.get(i + 1)).map(|c| c.regret);
    Ok(DriftLifecycleReport {
        config: cfg,
        drift_at,
        retrains: cycles.iter().filter(|c| c.retrained).count(),
        pre_drift_regret,
        drift_psi,
        post_promotion_regret,
        recovered: post_promotion_regret.is_some_and(|r| r <= RECOVERY_TOLERANCE * pre_drift_regret),
        cycles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustodyReport {
    pub decisions: usize,
    pub joined: usize,
    /// Decisions whose joined row differs from what was served.
    pub mismatches: Vec<String>,
}

/// Serves decisions, observes each one and checks that the joined training
/// rows carry exactly the served features, action and propensity.
pub fn custody(root: &Path, seed: u64, n: usize) -> ApiResult<CustodyReport> {
    let env = preset("bandit-drift").map_err(|e| ApiError::internal(e.to_string()))?;
    let clock = ManualClock::new(T0);
    let p = Platform::open_with(root, PlatformOptions { clock: clock.as_clock(), ..Default::default() })?;
    let id = "custody-demo";
    bootstrap(&p, &clock, id, &env, 0.2, 2000, seed)?;
    clock.advance(60);
    let k = env.n_actions();
    let uniform = move |_: &[f64]| vec![1.0 / k as f64; k];
    let contexts = simulate_cohort(&env, SimPolicy::Context(&uniform), n, 0.0, derive_seed(seed, 99)).map_err(|e| ApiError::internal(e.to_string()))?;
    let mut served = Vec::with_capacity(n);
    for (i, row) in contexts.rows.iter().enumerate() {
        let fv = features(&row.x);
        let resp = p.decide(id, DecideRequest { unit_id: format!("cust-{i}"), features: fv.clone(), seed: Some(derive_seed(seed, i as u64)), timestamp: None, idempotency_key: None })?;
        p.observe(id, ObserveRequest { decision_id: resp.decision_id.clone(), metric_values: [("reward".to_string(), row.outcomes[0])].into(), timestamp: None })?;
        served.push((resp, fv));
    }
    let joined = p.events().join_events(id, clock.now())?.examples;
    let by_id: std::collections::HashMap<&str, _> = joined.iter().map(|r| (r.decision_id.as_str(), r)).collect();
    let mismatches = served
        .iter()
        .filter(|(resp, fv)| by_id.get(resp.decision_id.as_str()).is_none_or(|r| &r.features != fv || r.action != resp.action || r.propensity.to_bits() != resp.propensity.to_bits() || r.policy_version != resp.policy_version))
        .map(|(resp, _)| resp.decision_id.clone())
        .collect();
    Ok(CustodyReport { decisions: n, joined: served.iter().filter(|(r, _)| by_id.contains_key(r.decision_id.as_str())).count(), mismatches })
}

pub fn direction_label(d: Direction) -> &'static str {
    match d {
        Direction::Maximize => "maximize",
        Direction::Minimize => "minimize",
    }
}
