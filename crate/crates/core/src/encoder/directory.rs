use std::collections::HashMap;
use std::path::{Path, PathBuf};

use globset::{Glob, GlobSet, GlobSetBuilder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::cache::{CacheRecord, EmbeddingCache, ManifestEntry, SourceManifest};
use super::{decode_rgb, encode_image, relative_id, EncoderBackend};
use crate::error::{Error, Result};

pub const DEFAULT_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "bmp", "gif", "webp"];

#[derive(Debug, Clone)]
pub struct DirectoryOptions {
    /// Glob patterns matched against root-relative ids. Empty means every
    /// file with a known image extension.
    pub include: Vec<String>,
    pub workers: usize,
}

impl Default for DirectoryOptions {
    fn default() -> Self {
        Self {
            include: Vec::new(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug)]
pub struct EmbedOutcome {
    pub cache: EmbeddingCache,
    pub failures: Vec<FileFailure>,
    pub encoded: usize,
    pub reused: usize,
}

fn build_globs(patterns: &[String]) -> Result<Option<GlobSet>> {
    if patterns.is_empty() {
        return Ok(None);
    }
    let mut builder = GlobSetBuilder::new();
    for p in patterns {
        builder.add(Glob::new(p).map_err(|e| Error::InvalidArgument(format!("glob {p:?}: {e}")))?);
    }
    builder
        .build()
        .map(Some)
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| DEFAULT_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Sorted `(id, path)` pairs for every matching file under `root`.
fn collect_files(root: &Path, globs: Option<&GlobSet>) -> Result<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let Some(id) = relative_id(root, entry.path()) else {
            continue;
        };
        let keep = match globs {
            Some(g) => g.is_match(&id),
            None => has_image_extension(entry.path()),
        };
        if keep {
            files.push((id, entry.into_path()));
        }
    }
    files.sort();
    Ok(files)
}

enum Job {
    Done(CacheRecord, ManifestEntry, bool),
    Failed(FileFailure),
}

/// Embeds every matching image under `root` exactly once.
///
/// Files whose content hash matches an entry in `previous` (same embedding
/// space) reuse the stored vector. Per-file failures are collected rather
/// than aborting the batch. The result does not depend on `workers` or on
/// directory traversal order.
pub fn embed_directory(
    backend: &dyn EncoderBackend,
    root: &Path,
    options: &DirectoryOptions,
    previous: Option<&EmbeddingCache>,
) -> Result<EmbedOutcome> {
    if options.workers == 0 {
        return Err(Error::InvalidArgument("worker count must be >= 1".into()));
    }
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let globs = build_globs(&options.include)?;
    let files = collect_files(root, globs.as_ref())?;
    if files.is_empty() {
        return Err(Error::NoImagesFound(root.to_path_buf()));
    }
    let space = backend.space();
    let previous = previous.filter(|p| p.space() == &space);
    let known: HashMap<&str, &str> = previous
        .map(|p| {
            p.manifest
                .entries
                .iter()
                .map(|e| (e.id.as_str(), e.sha256.as_str()))
                .collect()
        })
        .unwrap_or_default();

    let run = |(id, path): &(String, PathBuf)| -> Job {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) => {
                return Job::Failed(FileFailure {
                    id: id.clone(),
                    error: e.to_string(),
                })
            }
        };
        let sha = hex::encode(Sha256::digest(&bytes));
        let entry = ManifestEntry {
            id: id.clone(),
            sha256: sha,
            bytes: bytes.len() as u64,
        };
        if let Some(prev) = previous {
            if known.get(id.as_str()) == Some(&entry.sha256.as_str()) {
                if let Some(rec) = prev.get(id) {
                    return Job::Done(rec.clone(), entry, true);
                }
            }
        }
        let result = decode_rgb(&bytes)
            .map_err(|message| Error::DecodeFailure {
                path: id.clone(),
                message,
            })
            .and_then(|img| encode_image(backend, id.clone(), &img));
        match result {
            Ok(e) => Job::Done(
                CacheRecord {
                    id: e.id,
                    vector: e.vector.iter().map(|&x| x as f32).collect(),
                },
                entry,
                false,
            ),
            Err(e) => Job::Failed(FileFailure {
                id: id.clone(),
                error: e.to_string(),
            }),
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let jobs: Vec<Job> = pool.install(|| files.par_iter().map(run).collect());

    let mut records = Vec::new();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut reused = 0;
    for job in jobs {
        match job {
            Job::Done(rec, entry, hit) => {
                reused += usize::from(hit);
                records.push(rec);
                entries.push(entry);
            }
            Job::Failed(f) => failures.push(f),
        }
    }
    let encoded = records.len() - reused;
    let cache = EmbeddingCache::new(space, records)?.with_manifest(SourceManifest {
        root: Some(root.to_path_buf()),
        entries,
    });
    Ok(EmbedOutcome {
        cache,
        failures,
        encoded,
        reused,
    })
}
