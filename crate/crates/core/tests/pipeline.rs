use std::collections::BTreeMap;

use proptest::prelude::*;

use selfserve_core::eventlog::{DatasetSnapshot, EventLog, EventLogError, ObservationEvent, PredictionEvent};
use selfserve_core::features::{FeatureColumn, FeatureSchema, FeatureVector};
use selfserve_core::policy::{decide, DecisionPolicy, ModelOutputs};
use selfserve_core::prep::fit_plan;
use selfserve_core::usecase::{validate_spec, DecisionSpace, Direction, ProductMetricSpec, UseCaseSpec};

const T0: i64 = 1_700_000_000;
const N: usize = 200;
const OBSERVED: usize = 180;

fn spec() -> UseCaseSpec {
    UseCaseSpec {
        id: "retention-offer".into(),
        decision_space: DecisionSpace::binary("hold", "offer"),
        metrics: vec![ProductMetricSpec::immediate("converted", Direction::Maximize)],
        features: FeatureSchema::new(vec![FeatureColumn::numeric("x1", true), FeatureColumn::numeric("x2", true)]),
        task_hint: None,
        join_window: 3600,
        retention: 35,
        exploration_epsilon: 0.1,
        sim_env: None,
    }
}

fn features(i: usize) -> FeatureVector {
    let x1 = ((i * 37) % 101) as f64 / 50.0 - 1.0;
    let x2 = ((i * 53) % 89) as f64 / 89.0;
    FeatureVector::new().with("x1", x1).with("x2", x2)
}

fn score(fv: &FeatureVector) -> f64 {
    let x1 = fv.0["x1"].as_num().unwrap();
    1.0 / (1.0 + (-3.0 * x1).exp())
}

/// Serves `N` decisions through a threshold policy and observes the first
/// `OBSERVED` of them.
fn serve(log: &EventLog, policy: &DecisionPolicy) -> Vec<PredictionEvent> {
    let actions = ["hold", "offer"];
    let mut served = Vec::new();
    for i in 0..N {
        let fv = features(i);
        let d = decide(policy, &ModelOutputs::Score(score(&fv)), i as u64).unwrap();
        let ev = PredictionEvent {
            decision_id: String::new(),
            use_case: "retention-offer".into(),
            unit_id: format!("u{}", i % 50),
            timestamp: T0 + i as i64,
            features: fv,
            action: actions[d.action].into(),
            propensity: d.propensity,
            policy_version: "v1".into(),
            idempotency_key: None,
        };
        let id = log.log_prediction(ev.clone()).unwrap();
        served.push(PredictionEvent { decision_id: id, ..ev });
    }
    for p in served.iter().take(OBSERVED) {
        let converted = if p.action == "offer" { 1.0 } else { 0.0 };
        let obs = ObservationEvent {
            decision_id: p.decision_id.clone(),
            timestamp: p.timestamp + 60,
            metric_values: BTreeMap::from([("converted".to_string(), converted)]),
        };
        log.log_observation("retention-offer", obs).unwrap();
    }
    served
}

#[test]
fn logged_decisions_survive_reopen_and_snapshot_identically() {
    let dir = tempfile::tempdir().unwrap();
    let validated = validate_spec(&spec()).unwrap();
    let policy = DecisionPolicy::threshold(0.5, 0.1);
    let now = T0 + 2 * 3600;

    let log = EventLog::durable(dir.path());
    log.register(validated.clone()).unwrap();
    let served = serve(&log, &policy);
    let first = log.build_dataset("retention-offer", now, 10).unwrap();

    let joined = log.join_events("retention-offer", now).unwrap();
    assert_eq!(joined.diagnostics.joined, N);
    assert_eq!(first.rows.iter().filter(|r| !r.timed_out).count(), OBSERVED);
    assert_eq!(joined.diagnostics.timeout_count, N - OBSERVED);
    assert_eq!(joined.diagnostics.orphan_count, 0);

    for row in &first.rows {
        let p = served.iter().find(|p| p.decision_id == row.decision_id).unwrap();
        assert_eq!(row.features, p.features);
        assert_eq!(row.action, p.action);
        assert_eq!(row.propensity.to_bits(), p.propensity.to_bits());
        let probs = policy.action_probs(&ModelOutputs::Score(score(&p.features))).unwrap();
        let a = usize::from(p.action == "offer");
        assert_eq!(row.propensity, probs[a]);
    }
    drop(log);

    let reopened = EventLog::durable(dir.path());
    reopened.register(validated).unwrap();
    assert_eq!(reopened.predictions("retention-offer").unwrap(), served);
    let second = reopened.build_dataset("retention-offer", now, 10).unwrap();
    assert_eq!(first.content_hash, second.content_hash);
    assert_eq!(first, second);

    let plan_a = fit_plan(&first, &spec().features).unwrap();
    let plan_b = fit_plan(&second, &spec().features).unwrap();
    assert_eq!(plan_a, plan_b);
    assert_eq!(plan_a.fitted_on, first.content_hash);
    let encoded = plan_a.apply(&first.rows[0].features, first.schema_version).unwrap();
    assert_eq!(encoded, plan_b.apply(&second.rows[0].features, second.schema_version).unwrap());
}

#[test]
fn stored_snapshots_detect_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let log = EventLog::in_memory();
    log.register(validate_spec(&spec()).unwrap()).unwrap();
    serve(&log, &DecisionPolicy::threshold(0.5, 0.1));
    let snap = log.build_dataset("retention-offer", T0 + 7200, 1).unwrap();

    let path = dir.path().join("snap");
    snap.write_to(&path).unwrap();
    assert_eq!(DatasetSnapshot::read_from(&path).unwrap(), snap);

    let rows = std::fs::read_to_string(path.join("rows.ndjson")).unwrap();
    std::fs::write(path.join("rows.ndjson"), rows.replacen("\"offer\"", "\"hold\"", 1)).unwrap();
    assert!(matches!(DatasetSnapshot::read_from(&path), Err(EventLogError::CorruptSnapshot { .. })));
}

proptest! {
    #[test]
    fn served_propensity_matches_the_policy_distribution(
        s in 0.0f64..1.0,
        theta in 0.0f64..=1.0,
        eps in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let policy = DecisionPolicy::threshold(theta, eps);
        let out = ModelOutputs::Score(s);
        let probs = policy.action_probs(&out).unwrap();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let d = decide(&policy, &out, seed).unwrap();
        prop_assert_eq!(d.propensity, probs[d.action]);
        prop_assert!(d.propensity >= eps / 2.0);
    }

    #[test]
    fn snapshot_hash_ignores_row_order(rotate in 0usize..N) {
        let log = EventLog::in_memory();
        log.register(validate_spec(&spec()).unwrap()).unwrap();
        serve(&log, &DecisionPolicy::threshold(0.5, 0.1));
        let snap = log.build_dataset("retention-offer", T0 + 7200, 1).unwrap();
        let mut rows = snap.rows.clone();
        rows.rotate_left(rotate);
        let again = DatasetSnapshot::new(&snap.use_case, snap.schema_version, rows, snap.created_at);
        prop_assert_eq!(again.content_hash, snap.content_hash);
    }
}
