use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LifecycleError, Manifest};

pub const REGISTRY_FORMAT: u32 = 1;
const REGISTRY_FILE: &str = "registry.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RecordReason {
    Initial,
    Promote,
    /// Promoted past a rejecting canary by an operator.
    Override { note: String },
    Rollback,
}

/// One change of the serving champion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChampionRecord {
    pub seq: u64,
    pub manifest: String,
    /// Champion this record replaced in lineage order.
    pub parent: Option<String>,
    pub at: i64,
    pub reason: RecordReason,
}

/// Champion history and every manifest it references for one use case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub format: u32,
    pub use_case: String,
    pub manifests: BTreeMap<String, Manifest>,
    pub history: Vec<ChampionRecord>,
}

impl Registry {
    pub fn new(use_case: &str) -> Self {
        Self { format: REGISTRY_FORMAT, use_case: use_case.to_string(), manifests: BTreeMap::new(), history: Vec::new() }
    }

    pub fn head(&self) -> Option<&ChampionRecord> {
        self.history.last()
    }

    pub fn champion(&self) -> Option<&Manifest> {
        self.head().and_then(|r| self.manifests.get(&r.manifest))
    }

    pub fn manifest(&self, id: &str) -> Option<&Manifest> {
        self.manifests.get(id)
    }

    /// Stores a manifest without serving it.
    pub fn register(&mut self, m: Manifest) -> String {
        let id = m.id.clone();
        self.manifests.insert(id.clone(), m);
        id
    }

    fn push(&mut self, manifest: &str, parent: Option<String>, at: i64, reason: RecordReason) -> Result<ChampionRecord, LifecycleError> {
        if !self.manifests.contains_key(manifest) {
            return Err(LifecycleError::UnknownManifest(manifest.to_string()));
        }
        let rec = ChampionRecord { seq: self.history.len() as u64, manifest: manifest.to_string(), parent, at, reason };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Makes `manifest` the champion, keeping the current one as its parent.
    pub fn promote(&mut self, manifest: &str, at: i64, reason: RecordReason) -> Result<ChampionRecord, LifecycleError> {
        let parent = self.head().map(|r| r.manifest.clone());
        let reason = if parent.is_none() && reason == RecordReason::Promote { RecordReason::Initial } else { reason };
        self.push(manifest, parent, at, reason)
    }

    /// Restores the head's parent. The restored record inherits the parent
    /// lineage of the last record that served it.
    pub fn rollback(&mut self, at: i64) -> Result<ChampionRecord, LifecycleError> {
        let target = self.head().and_then(|r| r.parent.clone()).ok_or(LifecycleError::NoParent)?;
        let grand = self.history.iter().rev().find(|r| r.manifest == target).and_then(|r| r.parent.clone());
        self.push(&target, grand, at, RecordReason::Rollback)
    }

    /// Every record's parent is a stored manifest that served before it.
    pub fn lineage_is_consistent(&self) -> bool {
        self.history.iter().enumerate().all(|(i, r)| {
            self.manifests.contains_key(&r.manifest)
                && r.parent.as_ref().is_none_or(|p| self.manifests.contains_key(p) && self.history[..i].iter().any(|e| &e.manifest == p))
        })
    }

    /// Writes `registry.json` atomically through a temp file and rename.
    pub fn write_to(&self, dir: &Path) -> Result<(), LifecycleError> {
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!("{REGISTRY_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self).expect("registry serializes"))?;
        fs::rename(&tmp, dir.join(REGISTRY_FILE))?;
        Ok(())
    }

    /// Reads a registry, or an empty one when the directory has none.
    pub fn read_from(dir: &Path, use_case: &str) -> Result<Self, LifecycleError> {
        let path = dir.join(REGISTRY_FILE);
        if !path.exists() {
            return Ok(Self::new(use_case));
        }
        let r: Registry = serde_json::from_slice(&fs::read(path)?).map_err(|e| LifecycleError::Io(e.to_string()))?;
        if r.format != REGISTRY_FORMAT {
            return Err(LifecycleError::Io(format!("unsupported registry format {}", r.format)));
        }
        Ok(r)
    }
}
