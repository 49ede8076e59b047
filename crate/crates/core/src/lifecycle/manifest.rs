use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LifecycleError;
use crate::eventlog::{DatasetSnapshot, JoinedExample};
use crate::models::{train, Dataset, Hyperparams, ModelArtifact, ModelKind, Prediction};
use crate::policy::{DecisionPolicy, ModelOutputs};
use crate::prep::PreprocessPlan;
use crate::rl::{build_transitions, fit_fqi, FqiConfig, QFunction, State, Transition};

/// How supervised models map onto the decision space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelLayout {
    /// One model over every row; its score feeds the policy.
    Single,
    /// One model per action, each fit on the rows that took it.
    PerAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    Supervised {
        kind: ModelKind,
        hyperparams: Hyperparams,
        seed: u64,
        /// Metric used as the training label.
        label: String,
        layout: ModelLayout,
    },
    /// Fitted Q iteration on per-unit transitions, states encoded by the
    /// plan. `signs` turn each metric into maximize orientation.
    Fqi { metrics: Vec<String>, signs: Vec<f64>, weights: Vec<f64>, gamma: f64, config: FqiConfig },
}

/// Everything needed to rebuild a deployed artifact from its snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hex SHA-256 of the other fields.
    pub id: String,
    pub use_case: String,
    pub dataset_hash: String,
    pub schema_version: u32,
    pub plan: PreprocessPlan,
    pub model: ModelSpec,
    pub actions: Vec<String>,
    pub policy: DecisionPolicy,
    pub parent: Option<String>,
    pub created_at: i64,
    /// Digest of the trained [`ModelBundle`].
    pub artifact_digest: String,
}

/// The trained models behind one manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelBundle {
    Supervised { layout: ModelLayout, models: Vec<ModelArtifact> },
    Fqi { q: QFunction },
}

impl ModelBundle {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("bundle serializes")))
    }

    /// Policy inputs for one encoded context.
    pub fn outputs(&self, x: &[f64]) -> Result<ModelOutputs, LifecycleError> {
        Ok(match self {
            ModelBundle::Supervised { layout: ModelLayout::Single, models } => match models[0].predict(x)? {
                Prediction::Score(s) => ModelOutputs::Score(s),
                Prediction::Distribution(p) => ModelOutputs::ActionValues(p),
            },
            ModelBundle::Supervised { layout: ModelLayout::PerAction, models } => ModelOutputs::PerAction(models.iter().map(|m| m.score(x).map(|s| vec![s])).collect::<Result<_, _>>()?),
            ModelBundle::Fqi { q } => ModelOutputs::ActionValues(q.values(&State::Dense(x.to_vec()))?),
        })
    }

    /// Mean offline loss over labeled rows. Per-action bundles score each
    /// row with the model of the action it took. Q functions have no
    /// comparable supervised loss.
    pub fn loss(&self, manifest: &Manifest, snapshot: &DatasetSnapshot) -> Result<f64, LifecycleError> {
        let ModelBundle::Supervised { models, .. } = self else {
            return Err(LifecycleError::NoSupervisedLoss);
        };
        let sets = training_sets(manifest, snapshot)?;
        let (mut total, mut n) = (0.0, 0usize);
        for (model, data) in models.iter().zip(&sets) {
            if !data.is_empty() {
                total += model.loss(data)? * data.len() as f64;
                n += data.len();
            }
        }
        if n == 0 {
            return Err(LifecycleError::EmptySnapshot);
        }
        Ok(total / n as f64)
    }
}

fn label(row: &JoinedExample, metric: &str) -> Result<f64, LifecycleError> {
    row.metric_values.get(metric).copied().ok_or_else(|| LifecycleError::MissingLabel { decision_id: row.decision_id.clone(), metric: metric.to_string() })
}

/// Encodes a snapshot under the manifest's plan, split by layout.
fn training_sets(manifest: &Manifest, snapshot: &DatasetSnapshot) -> Result<Vec<Dataset>, LifecycleError> {
    let ModelSpec::Supervised { label: metric, layout, .. } = &manifest.model else {
        return Err(LifecycleError::NoSupervisedLoss);
    };
    let plan = &manifest.plan;
    let encode = |rows: &[&JoinedExample]| -> Result<Dataset, LifecycleError> {
        let x = plan.apply_all(rows.iter().map(|r| &r.features), snapshot.schema_version)?;
        let y = rows.iter().map(|r| label(r, metric)).collect::<Result<_, _>>()?;
        Ok(Dataset::new(x, y))
    };
    match layout {
        ModelLayout::Single => Ok(vec![encode(&snapshot.rows.iter().collect::<Vec<_>>())?]),
        ModelLayout::PerAction => {
            if let Some(r) = snapshot.rows.iter().find(|r| !manifest.actions.contains(&r.action)) {
                return Err(LifecycleError::UnknownAction(r.action.clone()));
            }
            manifest.actions.iter().map(|a| encode(&snapshot.rows.iter().filter(|r| &r.action == a).collect::<Vec<_>>())).collect()
        }
    }
}

/// Per-unit transitions over plan-encoded states, rewards in raw units.
/// Rows are ordered by timestamp, then decision id.
pub fn snapshot_transitions(plan: &PreprocessPlan, actions: &[String], metrics: &[String], snapshot: &DatasetSnapshot) -> Result<Vec<Transition>, LifecycleError> {
    let mut rows: Vec<JoinedExample> = snapshot.rows.clone();
    rows.sort_by(|a, b| (a.timestamp, &a.decision_id).cmp(&(b.timestamp, &b.decision_id)));
    let encoded: HashMap<String, Vec<f64>> = rows.iter().map(|r| Ok((r.decision_id.clone(), plan.apply(&r.features, snapshot.schema_version)?))).collect::<Result<_, LifecycleError>>()?;
    Ok(build_transitions(&rows, |r| State::Dense(encoded[&r.decision_id].clone()), |a| actions.iter().position(|x| x == a), metrics)?)
}

fn train_bundle(manifest: &Manifest, snapshot: &DatasetSnapshot) -> Result<ModelBundle, LifecycleError> {
    match &manifest.model {
        ModelSpec::Supervised { kind, hyperparams, seed, layout, .. } => {
            let plan_ref = manifest.plan.fitted_on.clone();
            let models = training_sets(manifest, snapshot)?
                .iter()
                .map(|d| {
                    let mut m = train(*kind, d, hyperparams, *seed, None)?;
                    m.plan_ref = Some(plan_ref.clone());
                    Ok(m)
                })
                .collect::<Result<_, LifecycleError>>()?;
            Ok(ModelBundle::Supervised { layout: *layout, models })
        }
        ModelSpec::Fqi { metrics, signs, weights, gamma, config } => {
            let mut ts = snapshot_transitions(&manifest.plan, &manifest.actions, metrics, snapshot)?;
            for t in &mut ts {
                t.rewards.iter_mut().zip(signs).for_each(|(r, s)| *r *= s);
            }
            Ok(ModelBundle::Fqi { q: fit_fqi(&ts, manifest.actions.len(), weights, *gamma, config)? })
        }
    }
}

/// Inputs to [`Manifest::create`] other than the snapshot.
#[derive(Debug, Clone)]
pub struct ManifestDraft {
    pub use_case: String,
    pub plan: PreprocessPlan,
    pub model: ModelSpec,
    pub actions: Vec<String>,
    pub policy: DecisionPolicy,
    pub parent: Option<String>,
    pub created_at: i64,
}

impl Manifest {
    /// Trains the draft on `snapshot` and seals the result into a manifest.
    pub fn create(draft: ManifestDraft, snapshot: &DatasetSnapshot) -> Result<(Manifest, ModelBundle), LifecycleError> {
        draft.policy.validate()?;
        let mut m = Manifest {
            id: String::new(),
            use_case: draft.use_case,
            dataset_hash: snapshot.content_hash.clone(),
            schema_version: snapshot.schema_version,
            plan: draft.plan,
            model: draft.model,
            actions: draft.actions,
            policy: draft.policy,
            parent: draft.parent,
            created_at: draft.created_at,
            artifact_digest: String::new(),
        };
        let bundle = train_bundle(&m, snapshot)?;
        m.artifact_digest = bundle.digest();
        m.id = m.compute_id();
        Ok((m, bundle))
    }

    pub fn compute_id(&self) -> String {
        let mut body = self.clone();
        body.id.clear();
        hex::encode(Sha256::digest(serde_json::to_vec(&body).expect("manifest serializes")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Retrains exactly what `manifest` describes. The snapshot must be the one
/// the manifest was sealed on.
pub fn train_from_manifest(manifest: &Manifest, snapshot: &DatasetSnapshot) -> Result<ModelBundle, LifecycleError> {
    if snapshot.content_hash != manifest.dataset_hash {
        return Err(LifecycleError::DatasetMismatch { expected: manifest.dataset_hash.clone(), got: snapshot.content_hash.clone() });
    }
    train_bundle(manifest, snapshot)
}

/// Retrains and checks the result against the sealed digest.
pub fn rebuild(manifest: &Manifest, snapshot: &DatasetSnapshot) -> Result<ModelBundle, LifecycleError> {
    let bundle = train_from_manifest(manifest, snapshot)?;
    let got = bundle.digest();
    if got != manifest.artifact_digest || manifest.compute_id() != manifest.id {
        return Err(LifecycleError::ManifestUnreproducible { manifest: manifest.id.clone(), expected: manifest.artifact_digest.clone(), got });
    }
    Ok(bundle)
}
