mod common;

use axum::http::StatusCode;
use serde_json::{json, Value};

use common::*;
use selfserve_gateway::http::router;
use selfserve_gateway::Platform;

#[tokio::test]
async fn onboarding_recommends_missing_base_features() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = platform(dir.path());
    let app = router(p, None);
    let (status, body) = call(&app, "POST", "/v1/usecases", Some(serde_json::to_value(bandit_spec("promo")).unwrap())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["id"], "promo");
    let names: Vec<&str> = body["recommended_features"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"tenure_days") && names.contains(&"platform"));

    let (status, body) = call(&app, "GET", "/v1/usecases", None).await;
    assert_eq!((status, body), (StatusCode::OK, json!(["promo"])));
    let (status, body) = call(&app, "GET", "/v1/usecases/promo", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["champion"], Value::Null);
}

#[tokio::test]
async fn onboarding_rejects_invalid_specs_with_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = platform(dir.path());
    let app = router(p, None);
    let mut spec = serde_json::to_value(bandit_spec("empty")).unwrap();
    spec["decision_space"]["actions"] = json!([]);
    let (status, body) = call(&app, "POST", "/v1/usecases", Some(spec)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "ValidationFailed");
    assert!(body["details"].as_array().unwrap().iter().any(|e| e["code"] == "EmptyDecisionSpace"), "{body}");

    let (status, body) = call(&app, "POST", "/v1/usecases", Some(json!({ "id": 3 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "BadRequest");
}

#[tokio::test]
async fn decide_reports_unknown_use_case_and_missing_champion() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = platform(dir.path());
    p.onboard(bandit_spec("promo")).unwrap();
    let app = router(p, None);
    let req = json!({ "unit_id": "u1", "features": { "x1": 0.1, "x2": 0.2 } });
    let (status, body) = call(&app, "POST", "/v1/usecases/nope/decide", Some(req.clone())).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::NOT_FOUND, json!("UnknownUseCase")));
    let (status, body) = call(&app, "POST", "/v1/usecases/promo/decide", Some(req)).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::CONFLICT, json!("NoChampion")));
    let (status, body) = call(&app, "GET", "/v1/usecases/promo/candidates", None).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::NOT_FOUND, json!("NoTuningRun")));
    let (status, body) = call(&app, "GET", "/v1/jobs/job-999999", None).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::NOT_FOUND, json!("UnknownJob")));
}

/// Onboards the bandit use case, trains on uniform traffic and deploys.
async fn deployed_bandit(p: &std::sync::Arc<Platform>, app: &axum::Router) -> String {
    p.onboard(bandit_spec("promo")).unwrap();
    ingest_bandit(p, "promo", 3000, 0.0, 1, "boot-", T0);
    let rec = train(p, app, json!({ "kind": "train", "seed": 1 })).await;
    let cand = rec["result"]["candidate"].as_str().unwrap().to_string();
    let (status, body) = call(app, "POST", "/v1/usecases/promo/deploy", Some(json!({ "candidate": cand }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["record"]["reason"]["type"], "initial", "{body}");
    body["policy_version"].as_str().unwrap().to_string()
}

async fn train(p: &std::sync::Arc<Platform>, app: &axum::Router, req: Value) -> Value {
    let (status, rec) = call(app, "POST", "/v1/usecases/promo/jobs", Some(req)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{rec}");
    assert_eq!(rec["status"], "queued");
    let id = rec["id"].as_str().unwrap().to_string();
    let pp = p.clone();
    tokio::task::spawn_blocking(move || pp.wait_job(&id).unwrap()).await.unwrap();
    let (status, rec) = call(app, "GET", &format!("/v1/jobs/{}", rec["id"].as_str().unwrap()), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(rec["status"], "done", "{rec}");
    rec
}

#[tokio::test]
async fn decisions_are_logged_exactly_as_served() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = platform(dir.path());
    let app = router(p.clone(), None);
    let version = deployed_bandit(&p, &app).await;

    let req = json!({ "unit_id": "u1", "features": { "x1": 0.3, "x2": -1.2 }, "idempotency_key": "k1" });
    let (status, d) = call(&app, "POST", "/v1/usecases/promo/decide", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK, "{d}");
    assert_eq!(d["policy_version"], version.as_str());
    let logged = p.events().predictions("promo").unwrap().into_iter().find(|e| e.decision_id == d["decision_id"].as_str().unwrap()).unwrap();
    assert_eq!(logged.action, d["action"].as_str().unwrap());
    assert_eq!(logged.propensity, d["propensity"].as_f64().unwrap());
    assert_eq!(logged.policy_version, version);
    assert_eq!(serde_json::to_value(&logged.features).unwrap(), req["features"]);

    let (_, again) = call(&app, "POST", "/v1/usecases/promo/decide", Some(req)).await;
    assert_eq!(again, d);

    let bad = json!({ "unit_id": "u2", "features": { "x1": "high", "x2": 0.0 } });
    let (status, body) = call(&app, "POST", "/v1/usecases/promo/decide", Some(bad)).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::UNPROCESSABLE_ENTITY, json!("TypeMismatch")));

    let obs = json!({ "decision_id": d["decision_id"], "metric_values": { "reward": 1.0 } });
    let (status, body) = call(&app, "POST", "/v1/usecases/promo/observe", Some(obs.clone())).await;
    assert_eq!((status, body["duplicate"].clone()), (StatusCode::OK, json!(false)));
    let (_, body) = call(&app, "POST", "/v1/usecases/promo/observe", Some(obs)).await;
    assert_eq!(body["duplicate"], true);
    let obs = json!({ "decision_id": d["decision_id"], "metric_values": { "clicks": 1.0 } });
    let (status, body) = call(&app, "POST", "/v1/usecases/promo/observe", Some(obs)).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::UNPROCESSABLE_ENTITY, json!("UnknownMetric")));
}

#[tokio::test]
async fn deployment_requires_a_passing_canary_or_an_audited_override() {
    let dir = tempfile::tempdir().unwrap();
    let (p, clock) = platform(dir.path());
    let app = router(p.clone(), None);
    let v1 = deployed_bandit(&p, &app).await;

    // Traffic after the context shift; a model trained on it beats the
    // champion there.
    clock.advance(3 * 86_400);
    let since = clock.now();
    ingest_bandit(&p, "promo", 6000, 3.0, 2, "late-", since);
    clock.advance(3600);
    let rec = train(&p, &app, json!({ "kind": "train", "seed": 2, "since": since })).await;
    let fresh = rec["result"]["candidate"].as_str().unwrap().to_string();

    let (status, body) = call(&app, "POST", "/v1/usecases/promo/deploy", Some(json!({ "candidate": fresh }))).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::CONFLICT, json!("CanaryRejected")), "{body}");

    let rec = train(&p, &app, json!({ "kind": "canary", "candidate": fresh })).await;
    assert_eq!(rec["result"]["report"]["verdict"], "promote", "{rec}");
    let (status, body) = call(&app, "POST", "/v1/usecases/promo/deploy", Some(json!({ "candidate": fresh }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let v2 = body["policy_version"].as_str().unwrap().to_string();
    assert_ne!(v1, v2);
    let (_, d) = call(&app, "POST", "/v1/usecases/promo/decide", Some(json!({ "unit_id": "u9", "features": { "x1": 1.0, "x2": 0.0 } }))).await;
    assert_eq!(d["policy_version"], v2.as_str());

    // The first champion has no canary against v2; only an override deploys it.
    let (_, cands) = call(&app, "GET", "/v1/usecases/promo/candidates", None).await;
    let old = cands["candidates"].as_array().unwrap().iter().find(|c| c["manifest_id"] == v1.as_str()).unwrap()["id"].clone();
    let (status, _) = call(&app, "POST", "/v1/usecases/promo/deploy", Some(json!({ "candidate": old }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, body) = call(&app, "POST", "/v1/usecases/promo/deploy", Some(json!({ "candidate": old, "override_reason": "pin for incident review" }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let (_, audit) = call(&app, "GET", "/v1/usecases/promo/audit", None).await;
    let audit = audit.as_array().unwrap();
    assert_eq!(audit.len(), 1);
    assert_eq!(audit[0]["note"], "pin for incident review");
    assert_eq!(audit[0]["replaced"], v2.as_str());

    let (status, body) = call(&app, "POST", "/v1/usecases/promo/rollback", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["policy_version"], v2.as_str());
}

#[tokio::test]
async fn reward_tuning_publishes_a_front_of_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let (p, clock) = platform(dir.path());
    p.onboard(chain_spec("nurture")).unwrap();
    ingest_chain(&p, "nurture", 300, 5, T0);
    clock.advance(3600);
    let app = router(p.clone(), None);
    let (status, rec) = call(&app, "POST", "/v1/usecases/nurture/jobs", Some(json!({ "kind": "tune_reward", "budget": 8, "seed": 3 }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = rec["id"].as_str().unwrap().to_string();
    let pp = p.clone();
    let done = tokio::task::spawn_blocking(move || pp.wait_job(&id).unwrap()).await.unwrap();
    assert_eq!(serde_json::to_value(done.status).unwrap(), "done", "{:?}", done.error);

    let (status, view) = call(&app, "GET", "/v1/usecases/nurture/candidates", None).await;
    assert_eq!(status, StatusCode::OK);
    let cands = view["candidates"].as_array().unwrap();
    assert!(!cands.is_empty());
    assert!(cands.iter().all(|c| c["source"] == "tune_reward" && c["estimates"].as_array().unwrap().len() == 2));
    let front = &view["fronts"][0];
    assert_eq!(front["metrics"], json!(["cost", "engagement"]));
    assert_eq!(front["points"].as_array().unwrap().len(), 8);
    assert!(front["hypervolume"]["value"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn state_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let version = {
        let (p, _) = platform(dir.path());
        let app = router(p.clone(), None);
        deployed_bandit(&p, &app).await
    };
    let (p, _) = platform(dir.path());
    let app = router(p, None);
    let (status, view) = call(&app, "GET", "/v1/usecases/promo", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["policy_version"], version.as_str());
    let (status, d) = call(&app, "POST", "/v1/usecases/promo/decide", Some(json!({ "unit_id": "u1", "features": { "x1": 0.0, "x2": 0.0 } }))).await;
    assert_eq!(status, StatusCode::OK, "{d}");
    assert_eq!(d["policy_version"], version.as_str());
    let (status, _) = call(&app, "GET", "/v1/jobs/job-000001", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = platform(dir.path());
    let app = router(p, Some("s3cret".into()));
    let (status, _) = call(&app, "GET", "/v1/usecases", None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call_with(&app, "GET", "/v1/usecases", None, Some("wrong")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call_with(&app, "GET", "/v1/usecases", None, Some("s3cret")).await;
    assert_eq!(status, StatusCode::OK);
}
