#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use selfserve_core::features::{FeatureColumn, FeatureSchema};
use selfserve_core::rl::State;
use selfserve_core::simlab::{preset, simulate_cohort, SimPolicy};
use selfserve_core::usecase::{DecisionSpace, Direction, ProductMetricSpec, UseCaseSpec};
use selfserve_gateway::{ManualClock, Platform, PlatformOptions};

pub const T0: i64 = 1_700_000_000;

pub fn platform(dir: &std::path::Path) -> (Arc<Platform>, ManualClock) {
    let clock = ManualClock::new(T0);
    let p = Platform::open_with(dir, PlatformOptions { clock: clock.as_clock(), ..Default::default() }).unwrap();
    (p, clock)
}

pub fn bandit_spec(id: &str) -> UseCaseSpec {
    UseCaseSpec {
        id: id.into(),
        decision_space: DecisionSpace::multiclass(&["a", "b", "c"]),
        metrics: vec![ProductMetricSpec::immediate("reward", Direction::Maximize)],
        features: FeatureSchema::new(vec![FeatureColumn::numeric("x1", true), FeatureColumn::numeric("x2", true)]),
        task_hint: None,
        join_window: 3600,
        retention: 35,
        exploration_epsilon: 0.1,
        sim_env: Some("bandit-drift".into()),
    }
}

pub fn chain_spec(id: &str) -> UseCaseSpec {
    UseCaseSpec {
        id: id.into(),
        decision_space: DecisionSpace::multiclass(&["hold", "nudge", "boost"]),
        metrics: vec![
            ProductMetricSpec::delayed_cumulative("engagement", Direction::Maximize),
            ProductMetricSpec::delayed_cumulative("cost", Direction::Minimize),
        ],
        features: FeatureSchema::new((1..=5).map(|i| FeatureColumn::numeric(&format!("x{i}"), true)).collect()),
        task_hint: None,
        join_window: 3600,
        retention: 35,
        exploration_epsilon: 0.05,
        sim_env: Some("chain-mdp-2metric".into()),
    }
}

/// Logs `n` uniformly random bandit-drift decisions at simulated time `t`.
pub fn ingest_bandit(p: &Platform, id: &str, n: usize, t: f64, seed: u64, prefix: &str, at: i64) {
    let env = preset("bandit-drift").unwrap();
    let uniform = |_: &[f64]| vec![1.0 / 3.0; 3];
    let trace = simulate_cohort(&env, SimPolicy::Context(&uniform), n, t, seed).unwrap();
    p.ingest_trace(id, &trace, prefix, "uniform", at).unwrap();
}

pub fn ingest_chain(p: &Platform, id: &str, units: usize, seed: u64, at: i64) {
    let env = preset("chain-mdp-2metric").unwrap();
    let uniform = |_: &State| vec![1.0 / 3.0; 3];
    let trace = simulate_cohort(&env, SimPolicy::State(&uniform), units, 0.0, seed).unwrap();
    p.ingest_trace(id, &trace, "boot-", "uniform", at).unwrap();
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_with(app, method, uri, body, None).await
}

pub async fn call_with(app: &Router, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}
