//! Dataset audits: score every image of a corpus with a prompt set, stream
//! per-image records, and summarize flag counts per class directory.
//!
//! Records are written as JSON lines with scores at six decimals. The
//! summary carries no wall-clock time so that two scans of the same cache
//! produce byte-identical files; callers record timing elsewhere.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{nearest_neighbors, Embedding, Neighbor};
use crate::encoder::{embed_directory, DirectoryOptions, EmbeddingCache, EncoderBackend, FileFailure};
use crate::error::{Error, Result};
use crate::prompt::{classify, Classification, PromptSet, Provenance};

pub const DEFAULT_FLAG_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: String,
    /// First path component for images inside a class directory, else empty.
    pub class_dir: String,
    pub offensive_score: f64,
    pub predicted: String,
    pub flagged: bool,
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

impl AuditRecord {
    /// One JSONL line, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"id\":{},\"class_dir\":{},\"offensive_score\":{:.6},\"predicted\":{},\"flagged\":{}}}",
            json_string(&self.id),
            json_string(&self.class_dir),
            self.offensive_score,
            json_string(&self.predicted),
            self.flagged
        )
    }
}

/// `"n01440764/img.jpg"` → `"n01440764"`; `"img.jpg"` → `""`.
pub fn class_dir_of(id: &str) -> &str {
    match id.split_once('/') {
        Some((dir, _)) => dir,
        None => "",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class_dir: String,
    pub scanned: usize,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditMetadata {
    pub threshold: f64,
    pub backend_id: String,
    pub dimension: usize,
    pub classes: Vec<String>,
    pub provenance: Provenance,
}

impl AuditMetadata {
    pub fn new(prompts: &PromptSet, threshold: f64) -> Self {
        Self {
            threshold,
            backend_id: prompts.space().backend_id.clone(),
            dimension: prompts.space().dimension,
            classes: prompts.classes().iter().map(|c| c.name.clone()).collect(),
            provenance: prompts.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub total_scanned: usize,
    pub total_flagged: usize,
    /// Every scanned class directory, by flagged count descending then name.
    pub flagged_by_class: Vec<ClassCount>,
    pub metadata: AuditMetadata,
}

/// Order-independent running totals; merging two tallies equals tallying the
/// concatenated records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tally {
    classes: BTreeMap<String, (usize, usize)>,
}

impl Tally {
    pub fn add(&mut self, record: &AuditRecord) {
        let entry = self.classes.entry(record.class_dir.clone()).or_default();
        entry.0 += 1;
        if record.flagged {
            entry.1 += 1;
        }
    }

    pub fn merge(&mut self, other: Tally) {
        for (k, (s, f)) in other.classes {
            let entry = self.classes.entry(k).or_default();
            entry.0 += s;
            entry.1 += f;
        }
    }

    pub fn summary(&self, metadata: AuditMetadata) -> AuditSummary {
        let mut flagged_by_class: Vec<ClassCount> = self
            .classes
            .iter()
            .map(|(k, &(scanned, flagged))| ClassCount {
                class_dir: k.clone(),
                scanned,
                flagged,
            })
            .collect();
        flagged_by_class.sort_by(|a, b| b.flagged.cmp(&a.flagged).then_with(|| a.class_dir.cmp(&b.class_dir)));
        AuditSummary {
            total_scanned: flagged_by_class.iter().map(|c| c.scanned).sum(),
            total_flagged: flagged_by_class.iter().map(|c| c.flagged).sum(),
            flagged_by_class,
            metadata,
        }
    }
}

impl AuditSummary {
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a AuditRecord>,
        metadata: AuditMetadata,
    ) -> Self {
        let mut tally = Tally::default();
        for r in records {
            tally.add(r);
        }
        tally.summary(metadata)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanOptions {
    pub threshold: f64,
    pub batch_size: usize,
    /// Scoring threads; 0 uses rayon's global pool.
    pub workers: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_FLAG_THRESHOLD,
            batch_size: 1024,
            workers: 0,
        }
    }
}

impl ScanOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "flag threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn record_for(prompts: &PromptSet, e: &Embedding, threshold: f64) -> Result<AuditRecord> {
    let c = classify(prompts, e)?;
    Ok(AuditRecord {
        class_dir: class_dir_of(&e.id).to_string(),
        flagged: c.offensive_score > threshold,
        offensive_score: c.offensive_score,
        predicted: c.predicted_class,
        id: c.id,
    })
}

/// Scores `embeddings` batch by batch and hands each record to `sink` in
/// input order. Only one batch is held at a time.
pub fn scan<I, F>(embeddings: I, prompts: &PromptSet, options: &ScanOptions, mut sink: F) -> Result<AuditSummary>
where
    I: IntoIterator<Item = Embedding>,
    F: FnMut(&AuditRecord) -> Result<()>,
{
    options.validate()?;
    let pool = if options.workers > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(options.workers)
                .build()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?,
        )
    } else {
        None
    };
    let score = |batch: &[Embedding]| -> Result<Vec<AuditRecord>> {
        let run = || {
            batch
                .par_iter()
                .map(|e| record_for(prompts, e, options.threshold))
                .collect()
        };
        match &pool {
            Some(p) => p.install(run),
            None => run(),
        }
    };

    let mut tally = Tally::default();
    let mut batch = Vec::with_capacity(options.batch_size);
    let mut flush = |batch: &mut Vec<Embedding>, tally: &mut Tally| -> Result<()> {
        for r in score(batch)? {
            tally.add(&r);
            sink(&r)?;
        }
        batch.clear();
        Ok(())
    };
    for e in embeddings {
        batch.push(e);
        if batch.len() == options.batch_size {
            flush(&mut batch, &mut tally)?;
        }
    }
    flush(&mut batch, &mut tally)?;
    let summary = tally.summary(AuditMetadata::new(prompts, options.threshold));
    if summary.total_scanned == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(summary)
}

/// Scans every vector of a cache in id order.
pub fn scan_cache<F>(cache: &EmbeddingCache, prompts: &PromptSet, options: &ScanOptions, sink: F) -> Result<AuditSummary>
where
    F: FnMut(&AuditRecord) -> Result<()>,
{
    prompts.space().ensure_same(cache.space())?;
    let embeddings = cache
        .records()
        .iter()
        .map(|r| Embedding::from_f32(r.id.clone(), &r.vector));
    scan(embeddings, prompts, options, sink)
}

pub struct DirectoryScan {
    pub summary: AuditSummary,
    pub cache: EmbeddingCache,
    pub failures: Vec<FileFailure>,
}

/// Encodes a directory tree, then scans it. Files that fail to decode are
/// reported rather than aborting the scan.
pub fn scan_directory<F>(
    backend: &dyn EncoderBackend,
    root: &Path,
    directory: &DirectoryOptions,
    prompts: &PromptSet,
    options: &ScanOptions,
    sink: F,
) -> Result<DirectoryScan>
where
    F: FnMut(&AuditRecord) -> Result<()>,
{
    options.validate()?;
    prompts.space().ensure_same(&backend.space())?;
    let outcome = embed_directory(backend, root, directory, None)?;
    let summary = scan_cache(&outcome.cache, prompts, options, sink)?;
    Ok(DirectoryScan {
        summary,
        cache: outcome.cache,
        failures: outcome.failures,
    })
}

/// Writes records as JSON lines.
pub struct JsonlWriter<W: Write> {
    inner: W,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn write(&mut self, record: &AuditRecord) -> std::io::Result<()> {
        self.inner.write_all(record.to_json_line().as_bytes())?;
        self.inner.write_all(b"\n")
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Parses an audit JSONL stream. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_audit<R: BufRead>(reader: R) -> Result<Vec<AuditRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::ParseFailure {
            row: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AuditRecord = serde_json::from_str(&line).map_err(|e| Error::ParseFailure {
            row: i + 1,
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&record.offensive_score) {
            return Err(Error::ParseFailure {
                row: i + 1,
                message: format!("offensive_score {} outside [0, 1]", record.offensive_score),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_audit(path: &Path) -> Result<Vec<AuditRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_audit(std::io::BufReader::new(file))
}

/// Descending score, then ascending id.
pub fn audit_order(a: &AuditRecord, b: &AuditRecord) -> std::cmp::Ordering {
    b.offensive_score
        .total_cmp(&a.offensive_score)
        .then_with(|| a.id.cmp(&b.id))
}

fn top_k(mut records: Vec<&AuditRecord>, k: usize) -> Vec<AuditRecord> {
    if k == 0 {
        return Vec::new();
    }
    if records.len() > k {
        records.select_nth_unstable_by(k - 1, |a, b| audit_order(a, b));
        records.truncate(k);
    }
    records.sort_by(|a, b| audit_order(a, b));
    records.into_iter().cloned().collect()
}

/// The `k` highest-scoring records.
pub fn top_flagged(records: &[AuditRecord], k: usize) -> Vec<AuditRecord> {
    top_k(records.iter().collect(), k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarGroup {
    pub class_dir: String,
    pub records: Vec<AuditRecord>,
}

/// Up to `k` records per class directory. Groups are ordered by their best
/// record in the global order.
pub fn top_flagged_by_class(records: &[AuditRecord], k: usize) -> Vec<ExemplarGroup> {
    let mut groups: BTreeMap<&str, Vec<&AuditRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.class_dir.as_str()).or_default().push(r);
    }
    let mut out: Vec<ExemplarGroup> = groups
        .into_iter()
        .map(|(dir, rs)| ExemplarGroup {
            class_dir: dir.to_string(),
            records: top_k(rs, k),
        })
        .filter(|g| !g.records.is_empty())
        .collect();
    out.sort_by(|a, b| audit_order(&a.records[0], &b.records[0]));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorEvidence {
    pub class: String,
    pub anchor: usize,
    /// Cosine between the inspected image and this anchor.
    pub similarity: f64,
    /// Corpus images closest to the anchor.
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub classification: Classification,
    pub anchors: Vec<AnchorEvidence>,
    /// Corpus images closest to the inspected image itself.
    pub similar_images: Vec<Neighbor>,
}

/// Nearest corpus images for every anchor of every class, plus the image's
/// own neighbors, for a curator to judge why it was flagged.
pub fn evidence(
    image: &Embedding,
    prompts: &PromptSet,
    corpus: &[Embedding],
    k: usize,
) -> Result<Evidence> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let classification = classify(prompts, image)?;
    let mut anchors = Vec::new();
    for class in prompts.classes() {
        for (j, anchor) in class.anchors.iter().enumerate() {
            anchors.push(AnchorEvidence {
                class: class.name.clone(),
                anchor: j,
                similarity: crate::embedding::cosine(&image.vector, anchor)?,
                neighbors: nearest_neighbors(anchor, corpus, k)?,
            });
        }
    }
    Ok(Evidence {
        classification,
        anchors,
        similar_images: nearest_neighbors(&image.vector, corpus, k)?,
    })
}
