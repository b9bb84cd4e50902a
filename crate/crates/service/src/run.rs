//! One audit run on disk: immutable records and summary, plus the mutable
//! verdict log and prompt-set registry that live beside them.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Component, Path, PathBuf};
use std::sync::{Mutex, RwLock};

use image::imageops::FilterType;
use offscan_core::audit::{audit_order, evidence, load_audit, AuditRecord, AuditSummary, Evidence};
use offscan_core::embedding::Embedding;
use offscan_core::encoder::{join_id, EmbeddingCache};
use offscan_core::prompt::PromptSet;
use offscan_core::smid::LabeledExample;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::registry::{PromptRegistry, REGISTRY_DIR};
use crate::verdicts::{Decision, Verdict, VerdictLog};

pub const AUDIT_FILE: &str = "audit.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PROMPTS_FILE: &str = "promptset.json";
pub const SOURCES_FILE: &str = "sources.json";
pub const VERDICT_FILE: &str = "verdicts.jsonl";

/// Where a run's images and embeddings live. Relative paths resolve against
/// the run directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSources {
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    /// Reference corpus for evidence lookups; the run's own cache if unset.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
}

impl RunSources {
    pub fn load(dir: &Path) -> ServiceResult<Self> {
        let path = dir.join(SOURCES_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(ServiceError::Storage(format!("{}: {e}", path.display()))),
        }
    }

    fn resolve(&self, base: &Path) -> Self {
        let fix = |p: &Option<PathBuf>| p.as_ref().map(|p| if p.is_relative() { base.join(p) } else { p.clone() });
        Self {
            cache: fix(&self.cache),
            image_root: fix(&self.image_root),
            corpus: fix(&self.corpus),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusFilter {
    #[default]
    Any,
    Unreviewed,
    Reviewed,
    Keep,
    Offensive,
    Unsure,
}

impl StatusFilter {
    fn admits(self, verdict: Option<&Verdict>) -> bool {
        match (self, verdict) {
            (Self::Any, _) => true,
            (Self::Unreviewed, v) => v.is_none(),
            (Self::Reviewed, v) => v.is_some(),
            (Self::Keep, Some(v)) => v.decision == Decision::Keep,
            (Self::Offensive, Some(v)) => v.decision == Decision::Offensive,
            (Self::Unsure, Some(v)) => v.decision == Decision::Unsure,
            (_, None) => false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct FlaggedQuery {
    pub cursor: Option<String>,
    pub limit: Option<usize>,
    pub class_dir: Option<String>,
    pub min_score: Option<f64>,
    pub max_score: Option<f64>,
    #[serde(default)]
    pub status: StatusFilter,
    /// Include records below the flag threshold.
    #[serde(default)]
    pub include_unflagged: bool,
}

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReviewItem {
    #[serde(flatten)]
    pub record: AuditRecord,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Page {
    pub items: Vec<ReviewItem>,
    pub next_cursor: Option<String>,
    /// Number of records matching the filters across all pages.
    pub total: usize,
}

/// Opaque keyset cursor: the (score, id) of the last item served.
pub fn encode_cursor(record: &AuditRecord) -> String {
    let mut bytes = record.offensive_score.to_bits().to_be_bytes().to_vec();
    bytes.extend_from_slice(record.id.as_bytes());
    hex::encode(bytes)
}

fn decode_cursor(cursor: &str) -> ServiceResult<(f64, String)> {
    let bytes = hex::decode(cursor).map_err(|_| ServiceError::BadCursor)?;
    if bytes.len() < 8 {
        return Err(ServiceError::BadCursor);
    }
    let bits = u64::from_be_bytes(bytes[..8].try_into().expect("length checked"));
    let score = f64::from_bits(bits);
    if !score.is_finite() {
        return Err(ServiceError::BadCursor);
    }
    let id = String::from_utf8(bytes[8..].to_vec()).map_err(|_| ServiceError::BadCursor)?;
    Ok((score, id))
}

pub struct Run {
    pub id: String,
    pub dir: PathBuf,
    /// Sorted by descending score, then id.
    records: Vec<AuditRecord>,
    index: HashMap<String, usize>,
    summary: AuditSummary,
    sources: RunSources,
    cache: Option<EmbeddingCache>,
    corpus: Vec<Embedding>,
    verdicts: Mutex<VerdictLog>,
    registry: RwLock<PromptRegistry>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> ServiceResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))
}

impl Run {
    /// Loads a run directory written by `offscan scan`. The run id is the
    /// directory name.
    pub fn open(dir: &Path) -> ServiceResult<Self> {
        let dir = dir.to_path_buf();
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .filter(|n| !n.is_empty())
            .ok_or_else(|| ServiceError::BadRequest(format!("{} is not a run directory", dir.display())))?;
        let mut records = load_audit(&dir.join(AUDIT_FILE))?;
        records.sort_by(audit_order);
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(offscan_core::Error::DuplicateId(r.id.clone()).into());
            }
        }
        let summary: AuditSummary = read_json(&dir.join(SUMMARY_FILE))?;
        let recomputed = AuditSummary::from_records(&records, summary.metadata.clone());
        if recomputed != summary {
            return Err(ServiceError::Storage(format!(
                "{} disagrees with {}",
                SUMMARY_FILE, AUDIT_FILE
            )));
        }
        let initial = PromptSet::load(&dir.join(PROMPTS_FILE))?;
        let sources = RunSources::load(&dir)?.resolve(&dir);
        let cache = match &sources.cache {
            Some(p) => Some(EmbeddingCache::read(p)?),
            None => None,
        };
        let corpus = match (&sources.corpus, &cache) {
            (Some(p), _) => EmbeddingCache::read(p)?.embeddings(),
            (None, Some(c)) => c.embeddings(),
            (None, None) => Vec::new(),
        };
        let verdicts = VerdictLog::open(&dir.join(VERDICT_FILE))?;
        let registry = PromptRegistry::open(&dir.join(REGISTRY_DIR), &initial)?;
        log::info!(
            "run {id}: {} records, {} flagged, {} verdicts",
            records.len(),
            summary.total_flagged,
            verdicts.active_all().count()
        );
        Ok(Self {
            id,
            dir,
            records,
            index,
            summary,
            sources,
            cache,
            corpus,
            verdicts: Mutex::new(verdicts),
            registry: RwLock::new(registry),
        })
    }

    pub fn summary(&self) -> &AuditSummary {
        &self.summary
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn record(&self, id: &str) -> ServiceResult<&AuditRecord> {
        self.index
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| ServiceError::UnknownRecord(id.to_string()))
    }

    pub fn has_embeddings(&self) -> bool {
        self.cache.is_some()
    }

    pub fn verdicts(&self) -> std::sync::MutexGuard<'_, VerdictLog> {
        self.verdicts.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn registry(&self) -> std::sync::RwLockReadGuard<'_, PromptRegistry> {
        self.registry.read().unwrap_or_else(|p| p.into_inner())
    }

    pub fn registry_mut(&self) -> std::sync::RwLockWriteGuard<'_, PromptRegistry> {
        self.registry.write().unwrap_or_else(|p| p.into_inner())
    }

    pub fn list_flagged(&self, q: &FlaggedQuery) -> ServiceResult<Page> {
        let limit = q.limit.unwrap_or(DEFAULT_PAGE);
        if limit == 0 || limit > MAX_PAGE {
            return Err(ServiceError::BadRequest(format!("limit must lie in 1..={MAX_PAGE}")));
        }
        let start = match &q.cursor {
            Some(c) => {
                let (score, id) = decode_cursor(c)?;
                let key = AuditRecord {
                    id,
                    class_dir: String::new(),
                    offensive_score: score,
                    predicted: String::new(),
                    flagged: false,
                };
                self.records
                    .partition_point(|r| audit_order(r, &key) != std::cmp::Ordering::Greater)
            }
            None => 0,
        };
        let verdicts = self.verdicts();
        let matches = |r: &AuditRecord| {
            (q.include_unflagged || r.flagged)
                && q.class_dir.as_ref().is_none_or(|c| &r.class_dir == c)
                && q.min_score.is_none_or(|m| r.offensive_score >= m)
                && q.max_score.is_none_or(|m| r.offensive_score <= m)
                && q.status.admits(verdicts.active(&r.id))
        };
        let total = self.records.iter().filter(|r| matches(r)).count();
        let mut items = Vec::with_capacity(limit);
        let mut more = false;
        for r in self.records[start..].iter().filter(|r| matches(r)) {
            if items.len() == limit {
                more = true;
                break;
            }
            items.push(ReviewItem {
                record: r.clone(),
                verdict: verdicts.active(&r.id).cloned(),
            });
        }
        let next_cursor = if more {
            items.last().map(|i: &ReviewItem| encode_cursor(&i.record))
        } else {
            None
        };
        Ok(Page {
            items,
            next_cursor,
            total,
        })
    }

    /// Maps a record id to its file, refusing anything that could leave the
    /// image root.
    pub fn image_path(&self, id: &str) -> ServiceResult<PathBuf> {
        let suspicious = id.is_empty()
            || id.contains('\\')
            || id.contains('\0')
            || id.split('/').any(|part| part.is_empty() || part == "." || part == "..")
            || Path::new(id)
                .components()
                .any(|c| !matches!(c, Component::Normal(_)));
        if suspicious {
            return Err(ServiceError::Forbidden);
        }
        self.record(id)?;
        let root = self
            .sources
            .image_root
            .as_ref()
            .ok_or_else(|| ServiceError::Unavailable("run has no image root".into()))?;
        let path = join_id(root, id);
        let canonical_root = root
            .canonicalize()
            .map_err(|e| ServiceError::NotFound(format!("image root: {e}")))?;
        let canonical = path
            .canonicalize()
            .map_err(|_| ServiceError::NotFound(format!("image {id:?} is missing")))?;
        if !canonical.starts_with(&canonical_root) {
            return Err(ServiceError::Forbidden);
        }
        Ok(canonical)
    }

    pub fn evidence(&self, id: &str, k: usize) -> ServiceResult<Evidence> {
        self.record(id)?;
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| ServiceError::Unavailable("run has no embedding cache".into()))?;
        let image = cache
            .embedding(id)
            .ok_or_else(|| ServiceError::NotFound(format!("no embedding for {id:?}")))?;
        let prompts = self.registry().active().clone();
        Ok(evidence(&image, &prompts, &self.corpus, k)?)
    }

    /// Verdict-labeled training examples, by id; `unsure` verdicts are
    /// skipped.
    pub fn verdict_examples(&self) -> ServiceResult<Vec<LabeledExample>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| ServiceError::Unavailable("run has no embedding cache".into()))?;
        let verdicts = self.verdicts();
        let mut out = Vec::new();
        for v in verdicts.active_all() {
            let Some(label) = v.decision.label() else {
                continue;
            };
            let embedding = cache
                .embedding(&v.id)
                .ok_or_else(|| ServiceError::NotFound(format!("no embedding for {:?}", v.id)))?;
            out.push(LabeledExample::new(embedding, label));
        }
        Ok(out)
    }
}

/// Heavy blur for safe review: box-filter down to 1/16 of each side, then
/// back up to the original size. Always re-encoded as PNG.
pub fn blur_image(bytes: &[u8]) -> ServiceResult<Vec<u8>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| ServiceError::Unavailable(format!("cannot decode image: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let small = image::imageops::resize(&img, (w / 16).max(1), (h / 16).max(1), FilterType::Triangle);
    let blurred = image::imageops::resize(&small, w, h, FilterType::Triangle);
    let mut out = Cursor::new(Vec::new());
    blurred
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ServiceError::Storage(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}
