//! Versioned prompt sets for one run. Version 0 is the set the audit was
//! scanned with; re-tuning adds versions; only an explicit activation changes
//! which one is active.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use offscan_core::prompt::{PromptSet, Provenance};
use serde::Serialize;

use crate::error::{ServiceError, ServiceResult};

pub const REGISTRY_DIR: &str = "promptsets";
const ACTIVE_FILE: &str = "active";

pub struct PromptRegistry {
    dir: PathBuf,
    versions: BTreeMap<u32, PromptSet>,
    active: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VersionInfo {
    pub version: u32,
    pub active: bool,
    pub provenance: Provenance,
}

fn storage(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(format!("{}: {e}", path.display()))
}

/// Write-then-rename so readers never see a partial file.
fn write_atomic(path: &Path, contents: &[u8]) -> ServiceResult<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| storage(&tmp, e))?;
    f.write_all(contents).map_err(|e| storage(&tmp, e))?;
    f.sync_all().map_err(|e| storage(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| storage(path, e))
}

fn version_file(dir: &Path, v: u32) -> PathBuf {
    dir.join(format!("v{v:04}.json"))
}

impl PromptRegistry {
    /// Loads `dir`, seeding version 0 with `initial` when it is new.
    pub fn open(dir: &Path, initial: &PromptSet) -> ServiceResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| storage(dir, e))?;
        let mut versions = BTreeMap::new();
        versions.insert(0, initial.clone());
        let entries = std::fs::read_dir(dir).map_err(|e| storage(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| storage(dir, e))?.path();
            let Some(v) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix('v'))
                .and_then(|n| n.strip_suffix(".json"))
                .and_then(|n| n.parse::<u32>().ok())
            else {
                continue;
            };
            if v == 0 {
                continue;
            }
            versions.insert(v, PromptSet::load(&path)?);
        }
        let active_path = dir.join(ACTIVE_FILE);
        let active = match std::fs::read_to_string(&active_path) {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| storage(&active_path, format!("bad version {s:?}")))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(storage(&active_path, e)),
        };
        if !versions.contains_key(&active) {
            return Err(storage(&active_path, format!("active version {active} is missing")));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            versions,
            active,
        })
    }

    pub fn active_version(&self) -> u32 {
        self.active
    }

    pub fn active(&self) -> &PromptSet {
        &self.versions[&self.active]
    }

    pub fn get(&self, version: u32) -> Option<&PromptSet> {
        self.versions.get(&version)
    }

    pub fn list(&self) -> Vec<VersionInfo> {
        self.versions
            .iter()
            .map(|(&version, p)| VersionInfo {
                version,
                active: version == self.active,
                provenance: p.provenance.clone(),
            })
            .collect()
    }

    /// Stores a new version without activating it.
    pub fn add(&mut self, prompts: PromptSet) -> ServiceResult<u32> {
        let version = self.versions.keys().next_back().copied().unwrap_or(0) + 1;
        let json = prompts.to_json()?;
        write_atomic(&version_file(&self.dir, version), json.as_bytes())?;
        self.versions.insert(version, prompts);
        Ok(version)
    }

    pub fn activate(&mut self, version: u32) -> ServiceResult<()> {
        if !self.versions.contains_key(&version) {
            return Err(ServiceError::UnknownVersion(version));
        }
        write_atomic(&self.dir.join(ACTIVE_FILE), format!("{version}\n").as_bytes())?;
        self.active = version;
        Ok(())
    }
}
