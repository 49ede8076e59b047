//! On-disk layout under the data root:
//!
//! ```text
//! events/<use case>/{predictions,observations}.ndjson
//! usecases/<use case>/spec.json
//!                     registry/registry.json
//!                     models/<manifest id>.json
//!                     snapshots/<content hash>/
//!                     {alerts,candidates,reference,timeline}.json
//!                     audit.ndjson
//! jobs/<job id>.json
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use selfserve_core::eventlog::DatasetSnapshot;
use selfserve_core::lifecycle::{Manifest, ModelBundle, Registry};

use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// Writes through a temp file and rename so readers never see a torn file.
pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> ApiResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> ApiResult<Option<T>> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn events_dir(&self) -> PathBuf {
        self.root.join("events")
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.root.join("jobs")
    }

    pub fn case_dir(&self, uc: &str) -> PathBuf {
        self.root.join("usecases").join(uc)
    }

    pub fn case_file(&self, uc: &str, name: &str) -> PathBuf {
        self.case_dir(uc).join(name)
    }

    pub fn use_case_ids(&self) -> ApiResult<Vec<String>> {
        let dir = self.root.join("usecases");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = fs::read_dir(dir)?
            .filter_map(Result::ok)
            .filter(|e| e.path().join("spec.json").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn registry_dir(&self, uc: &str) -> PathBuf {
        self.case_dir(uc).join("registry")
    }

    pub fn write_registry(&self, reg: &Registry) -> ApiResult<()> {
        Ok(reg.write_to(&self.registry_dir(&reg.use_case))?)
    }

    pub fn read_registry(&self, uc: &str) -> ApiResult<Registry> {
        Ok(Registry::read_from(&self.registry_dir(uc), uc)?)
    }

    fn snapshot_dir(&self, uc: &str, hash: &str) -> PathBuf {
        self.case_dir(uc).join("snapshots").join(hash)
    }

    /// Stores a snapshot under its content hash; a no-op when present.
    pub fn put_snapshot(&self, snap: &DatasetSnapshot) -> ApiResult<()> {
        let dir = self.snapshot_dir(&snap.use_case, &snap.content_hash);
        if dir.join("manifest.json").exists() {
            return Ok(());
        }
        Ok(snap.write_to(&dir)?)
    }

    pub fn snapshot(&self, uc: &str, hash: &str) -> ApiResult<DatasetSnapshot> {
        let dir = self.snapshot_dir(uc, hash);
        if !dir.exists() {
            return Err(ApiError::internal(format!("snapshot {hash} missing from store")));
        }
        Ok(DatasetSnapshot::read_from(&dir)?)
    }

    pub fn put_bundle(&self, uc: &str, manifest: &str, bundle: &ModelBundle) -> ApiResult<()> {
        write_json_atomic(&self.case_dir(uc).join("models").join(format!("{manifest}.json")), bundle)
    }

    /// Loads a bundle and checks it against the manifest's sealed digest.
    pub fn bundle(&self, m: &Manifest) -> ApiResult<ModelBundle> {
        let path = self.case_dir(&m.use_case).join("models").join(format!("{}.json", m.id));
        let bundle: ModelBundle = read_json(&path)?.ok_or_else(|| ApiError::internal(format!("artifact for manifest {} missing", m.id)))?;
        if bundle.digest() != m.artifact_digest {
            return Err(ApiError::internal(format!("artifact for manifest {} does not match its digest", m.id)));
        }
        Ok(bundle)
    }

    pub fn append_audit<T: Serialize>(&self, uc: &str, record: &T) -> ApiResult<()> {
        let path = self.case_file(uc, "audit.ndjson");
        fs::create_dir_all(self.case_dir(uc))?;
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }

    pub fn audit_records(&self, uc: &str) -> ApiResult<Vec<serde_json::Value>> {
        let path = self.case_file(uc, "audit.ndjson");
        match fs::read_to_string(path) {
            Ok(s) => s.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }
}
