//! Moral-rating ingestion and the binary labeling protocol built on it.
//!
//! Mean ratings live in `[1, 5]`. Ratings strictly below the negative
//! threshold are offensive, strictly above the positive threshold are
//! non-offensive, and the band in between is excluded.

pub(crate) mod metrics;
mod split;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::encoder::EmbeddingCache;
use crate::error::{Error, Result};

pub use metrics::{aggregate_cv, compute_metrics, Confusion, CvSummary, MetricSet, Metrics};
pub use split::{
    make_folds, split_plan, stratified_subsample, train_test_split, FoldPlan, Partition, SplitPlan,
};

/// Binary offensiveness label. The derived order puts `NonOffensive` first,
/// matching the default class order of a prompt set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonOffensive,
    Offensive,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::NonOffensive, Label::Offensive];

    pub fn name(self) -> &'static str {
        match self {
            Label::NonOffensive => "non_offensive",
            Label::Offensive => "offensive",
        }
    }

    pub fn from_name(name: &str) -> Option<Label> {
        Label::ALL.into_iter().find(|l| l.name() == name)
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingClass {
    Offensive,
    NonOffensive,
    Excluded,
}

impl RatingClass {
    pub fn label(self) -> Option<Label> {
        match self {
            RatingClass::Offensive => Some(Label::Offensive),
            RatingClass::NonOffensive => Some(Label::NonOffensive),
            RatingClass::Excluded => None,
        }
    }
}

pub const RATING_MIN: f64 = 1.0;
pub const RATING_MAX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub negative: f64,
    pub positive: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self::STANDARD
    }
}

impl Thresholds {
    pub const STANDARD: Thresholds = Thresholds {
        negative: 2.5,
        positive: 3.5,
    };
    /// Targets strongly offensive content only.
    pub const STRONG: Thresholds = Thresholds {
        negative: 1.5,
        positive: 3.5,
    };

    pub fn new(negative: f64, positive: f64) -> Result<Self> {
        let t = Thresholds { negative, positive };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.negative.is_finite() && self.positive.is_finite()) || self.negative > self.positive
        {
            return Err(Error::InvalidThresholds {
                negative: self.negative,
                positive: self.positive,
            });
        }
        Ok(())
    }
}

/// Strict inequalities: a rating equal to either threshold is excluded.
pub fn discretize_rating(moral_mean: f64, thresholds: Thresholds) -> Result<RatingClass> {
    thresholds.validate()?;
    if !moral_mean.is_finite() || !(RATING_MIN..=RATING_MAX).contains(&moral_mean) {
        return Err(Error::RatingOutOfRange(moral_mean));
    }
    Ok(if moral_mean < thresholds.negative {
        RatingClass::Offensive
    } else if moral_mean > thresholds.positive {
        RatingClass::NonOffensive
    } else {
        RatingClass::Excluded
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedImage {
    pub id: String,
    /// Key of the image in an embedding cache; the id unless a path column
    /// is configured.
    pub path: String,
    pub moral_mean: f64,
}

/// Which CSV columns hold what. Column names differ between releases, so
/// none are guessed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub id: String,
    pub rating: String,
    #[serde(default)]
    pub path: Option<String>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

pub fn read_ratings<R: std::io::Read>(reader: R, columns: &ColumnMap) -> Result<Vec<RatedImage>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::ParseFailure {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let id_col = column(&headers, &columns.id)?;
    let rating_col = column(&headers, &columns.rating)?;
    let path_col = columns.path.as_deref().map(|p| column(&headers, p)).transpose()?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, record) in csv.records().enumerate() {
        // header is line 1
        let fallback_row = i + 2;
        let record = record.map_err(|e| Error::ParseFailure {
            row: e.position().map_or(fallback_row, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(fallback_row, |p| p.line() as usize);
        let field = |col: usize, what: &str| {
            record
                .get(col)
                .map(str::trim)
                .ok_or_else(|| Error::ParseFailure {
                    row,
                    message: format!("missing {what} field"),
                })
        };
        let id = field(id_col, "id")?.to_string();
        if id.is_empty() {
            return Err(Error::ParseFailure {
                row,
                message: "empty id".into(),
            });
        }
        let raw = field(rating_col, "rating")?;
        let moral_mean: f64 = raw.parse().map_err(|_| Error::ParseFailure {
            row,
            message: format!("rating {raw:?} is not a number"),
        })?;
        if !moral_mean.is_finite() || !(RATING_MIN..=RATING_MAX).contains(&moral_mean) {
            return Err(Error::ParseFailure {
                row,
                message: format!("rating {moral_mean} outside [1, 5]"),
            });
        }
        let path = match path_col {
            Some(c) => field(c, "path")?.to_string(),
            None => id.clone(),
        };
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        out.push(RatedImage {
            id,
            path,
            moral_mean,
        });
    }
    Ok(out)
}

pub fn load_ratings(path: &Path, columns: &ColumnMap) -> Result<Vec<RatedImage>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ratings(std::io::BufReader::new(file), columns)
}

/// Anything carrying an id and a binary label.
pub trait Labeled {
    fn id(&self) -> &str;
    fn label(&self) -> Label;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub embedding: Embedding,
    pub label: Label,
}

impl LabeledExample {
    pub fn new(embedding: Embedding, label: Label) -> Self {
        Self { embedding, label }
    }
}

impl Labeled for LabeledExample {
    fn id(&self) -> &str {
        &self.embedding.id
    }

    fn label(&self) -> Label {
        self.label
    }
}

impl Labeled for (String, Label) {
    fn id(&self) -> &str {
        &self.0
    }

    fn label(&self) -> Label {
        self.1
    }
}

/// Discretizes every rating and attaches its cached embedding. Neutral-band
/// images are dropped; rated images absent from the cache are an error.
pub fn label_examples(
    rated: &[RatedImage],
    cache: &EmbeddingCache,
    thresholds: Thresholds,
) -> Result<Vec<LabeledExample>> {
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for r in rated {
        let Some(label) = discretize_rating(r.moral_mean, thresholds)?.label() else {
            continue;
        };
        match cache.embedding(&r.path) {
            Some(e) => out.push(LabeledExample::new(e, label)),
            None => missing.push(r.path.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingEmbeddings(missing));
    }
    Ok(out)
}

pub fn class_counts<T: Labeled>(items: &[T]) -> (usize, usize) {
    let off = items.iter().filter(|x| x.label() == Label::Offensive).count();
    (items.len() - off, off)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingSpace;

    #[test]
    fn boundary_table() {
        let t = Thresholds::default();
        let cases = [
            (2.4, RatingClass::Offensive),
            (2.5, RatingClass::Excluded),
            (3.0, RatingClass::Excluded),
            (3.5, RatingClass::Excluded),
            (3.6, RatingClass::NonOffensive),
        ];
        for (r, want) in cases {
            assert_eq!(discretize_rating(r, t).unwrap(), want, "rating {r}");
        }
    }

    #[test]
    fn strong_preset_moves_negative_threshold() {
        assert_eq!(
            discretize_rating(2.0, Thresholds::STRONG).unwrap(),
            RatingClass::Excluded
        );
        assert_eq!(
            discretize_rating(1.4, Thresholds::STRONG).unwrap(),
            RatingClass::Offensive
        );
    }

    #[test]
    fn discretize_errors() {
        assert!(matches!(
            discretize_rating(3.0, Thresholds { negative: 4.0, positive: 3.0 }),
            Err(Error::InvalidThresholds { .. })
        ));
        assert!(matches!(
            discretize_rating(0.5, Thresholds::default()),
            Err(Error::RatingOutOfRange(_))
        ));
        assert!(matches!(
            discretize_rating(f64::NAN, Thresholds::default()),
            Err(Error::RatingOutOfRange(_))
        ));
    }

    #[test]
    fn discretize_is_monotone() {
        let t = Thresholds::default();
        let rank = |c: RatingClass| match c {
            RatingClass::Offensive => 0,
            RatingClass::Excluded => 1,
            RatingClass::NonOffensive => 2,
        };
        let mut prev = 0;
        for i in 0..=400 {
            let r = 1.0 + i as f64 * 0.01;
            let now = rank(discretize_rating(r, t).unwrap());
            assert!(now >= prev);
            prev = now;
        }
    }

    fn cols() -> ColumnMap {
        ColumnMap {
            id: "img".into(),
            rating: "moral_mean".into(),
            path: None,
        }
    }

    #[test]
    fn csv_parsing() {
        let text = "img,valence,moral_mean\nA,3,2.1\n\"B, quoted\",1,4.2\nC,2,3.0\n";
        let rated = read_ratings(text.as_bytes(), &cols()).unwrap();
        assert_eq!(rated.len(), 3);
        assert_eq!(rated[1].id, "B, quoted");
        assert_eq!(rated[1].path, "B, quoted");
        assert_eq!(rated[0].moral_mean, 2.1);
    }

    #[test]
    fn csv_errors() {
        let bad = "img,moral_mean\nA,2.0\nB,abc\n";
        match read_ratings(bad.as_bytes(), &cols()) {
            Err(Error::ParseFailure { row, message }) => {
                assert_eq!(row, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let dup = "img,moral_mean\nA,2.0\nA,3.0\n";
        assert!(matches!(
            read_ratings(dup.as_bytes(), &cols()),
            Err(Error::DuplicateId(id)) if id == "A"
        ));
        let missing = "name,moral_mean\nA,2.0\n";
        assert!(matches!(
            read_ratings(missing.as_bytes(), &cols()),
            Err(Error::MissingColumn(c)) if c == "img"
        ));
        let range = "img,moral_mean\nA,7\n";
        assert!(matches!(
            read_ratings(range.as_bytes(), &cols()),
            Err(Error::ParseFailure { row: 2, .. })
        ));
    }

    #[test]
    fn path_column_maps_to_cache_keys() {
        let text = "img,file,moral_mean\nA,a.jpg,1.2\nB,b.jpg,4.8\nC,c.jpg,3.0\n";
        let map = ColumnMap {
            path: Some("file".into()),
            ..cols()
        };
        let rated = read_ratings(text.as_bytes(), &map).unwrap();
        let space = EmbeddingSpace::new(2, "m");
        let cache = EmbeddingCache::from_embeddings(
            space.clone(),
            &[
                Embedding::new("a.jpg", vec![1.0, 0.0]),
                Embedding::new("b.jpg", vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        let ex = label_examples(&rated, &cache, Thresholds::default()).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].label, Label::Offensive);
        assert_eq!(ex[1].label, Label::NonOffensive);

        let partial = EmbeddingCache::from_embeddings(space, &[Embedding::new("a.jpg", vec![1.0, 0.0])])
            .unwrap();
        match label_examples(&rated, &partial, Thresholds::default()) {
            Err(Error::MissingEmbeddings(ids)) => assert_eq!(ids, ["b.jpg"]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
