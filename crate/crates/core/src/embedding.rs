//! Vector math over the joint image-text embedding space.
//!
//! Storage elsewhere in the crate is 32-bit; everything here runs in `f64`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ZERO_NORM: f64 = 1e-12;

/// The (dimension, encoder) pair every compared vector must share.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddingSpace {
    pub dimension: usize,
    pub backend_id: String,
}

impl EmbeddingSpace {
    pub fn new(dimension: usize, backend_id: impl Into<String>) -> Self {
        Self {
            dimension,
            backend_id: backend_id.into(),
        }
    }

    pub fn ensure_same(&self, other: &EmbeddingSpace) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::SpaceMismatch {
                left: self.to_string(),
                right: other.to_string(),
            })
        }
    }

    pub fn check(&self, vector: &[f64]) -> Result<()> {
        check_dim(self.dimension, vector.len())
    }
}

impl std::fmt::Display for EmbeddingSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{}]", self.backend_id, self.dimension)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            vector,
        }
    }

    pub fn from_f32(id: impl Into<String>, vector: &[f32]) -> Self {
        Self::new(id, vector.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn dimension(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.vector)
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn checked_norm(v: &[f64]) -> Result<f64> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(Error::ZeroNorm);
    }
    Ok(n)
}

/// Scales `v` to unit Euclidean norm.
pub fn normalize_vector(v: &[f64]) -> Result<Vec<f64>> {
    let n = checked_norm(v)?;
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn normalize(e: &Embedding) -> Result<Embedding> {
    Ok(Embedding {
        id: e.id.clone(),
        vector: normalize_vector(&e.vector)?,
    })
}

/// Cosine of the angle between two vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let na = checked_norm(a)?;
    let nb = checked_norm(b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine(&a.vector, &b.vector)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub coords: Vec<f64>,
}

/// Output of [`pca_project`]; with the default two components each point
/// carries `(u, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub points: Vec<ProjectedPoint>,
    /// Fraction of total variance captured by each component.
    pub explained_variance: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcaOptions {
    pub components: usize,
    /// Project unit-normalized copies of the inputs.
    pub normalize_inputs: bool,
}

impl Default for PcaOptions {
    fn default() -> Self {
        Self {
            components: 2,
            normalize_inputs: true,
        }
    }
}

/// Mean-centered principal-component projection.
///
/// Components are ordered by descending variance. Each axis is oriented so
/// that its largest-magnitude loading is positive.
pub fn pca_project(embeddings: &[Embedding], options: PcaOptions) -> Result<Projection> {
    let k = options.components;
    if k == 0 {
        return Err(Error::InvalidArgument("components must be >= 1".into()));
    }
    let n = embeddings.len();
    if n < k + 1 {
        return Err(Error::InsufficientData(format!(
            "{n} embeddings for {k} components"
        )));
    }
    let dim = embeddings[0].dimension();
    let rows: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            check_dim(dim, e.dimension())?;
            if options.normalize_inputs {
                normalize_vector(&e.vector)
            } else if e.vector.iter().any(|x| !x.is_finite()) {
                Err(Error::NonFinite)
            } else {
                Ok(e.vector.clone())
            }
        })
        .collect::<Result<_>>()?;
    if dim < k {
        return Err(Error::InsufficientData(format!(
            "dimension {dim} below {k} components"
        )));
    }

    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);

    let total: f64 = centered.iter().map(|x| x * x).sum();
    let scale = rows
        .iter()
        .flatten()
        .fold(0.0_f64, |acc, x| acc.max(x.abs()))
        .max(1.0);
    if total <= (f64::EPSILON * scale).powi(2) * (n * dim) as f64 {
        return Err(Error::InsufficientData("zero covariance".into()));
    }

    let svd = centered.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::InsufficientData("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });

    let mut axes = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut axis: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let pivot = axis
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        let s = svd.singular_values[idx];
        explained.push((s * s / total).clamp(0.0, 1.0));
        axes.push(axis);
    }
    // Rounding can push the sum a hair over 1.
    let sum: f64 = explained.iter().sum();
    if sum > 1.0 {
        explained.iter_mut().for_each(|x| *x /= sum);
    }

    let points = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| ProjectedPoint {
            id: e.id.clone(),
            coords: axes
                .iter()
                .map(|axis| centered.row(i).iter().zip(axis).map(|(a, b)| a * b).sum())
                .collect(),
        })
        .collect();

    Ok(Projection {
        points,
        explained_variance: explained,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

/// Orders by descending similarity, then ascending id.
pub fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.id.cmp(&b.id))
}

// Heap entry whose `Ord` puts the worst-ranked neighbor on top.
struct Worst(Neighbor);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst {}
impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

/// Exact top-`k` by cosine similarity. Ties break by ascending id.
pub fn nearest_neighbors(query: &[f64], corpus: &[Embedding], k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let q = normalize_vector(query)?;
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
    for e in corpus {
        let candidate = Neighbor {
            id: e.id.clone(),
            similarity: cosine(&q, &e.vector)?,
        };
        if heap.len() < k {
            heap.push(Worst(candidate));
        } else if let Some(top) = heap.peek() {
            if rank_order(&candidate, &top.0) == Ordering::Less {
                heap.pop();
                heap.push(Worst(candidate));
            }
        }
    }
    let mut out: Vec<Neighbor> = heap.into_iter().map(|w| w.0).collect();
    out.sort_by(rank_order);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: &str, v: &[f64]) -> Embedding {
        Embedding::new(id, v.to_vec())
    }

    #[test]
    fn normalize_three_four_five() {
        let n = normalize(&emb("a", &[3.0, 4.0])).unwrap();
        assert_eq!(n.id, "a");
        assert!((n.vector[0] - 0.6).abs() < 1e-12);
        assert!((n.vector[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let v = [0.0, 1.0, 0.0];
        let n = normalize(&emb("u", &v)).unwrap();
        for (a, b) in n.vector.iter().zip(v) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_degenerate() {
        assert!(matches!(normalize(&emb("z", &[0.0, 0.0])), Err(Error::ZeroNorm)));
        assert!(matches!(
            normalize(&emb("n", &[f64::NAN, 1.0])),
            Err(Error::NonFinite)
        ));
        assert!(matches!(
            normalize(&emb("i", &[f64::INFINITY, 1.0])),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn cosine_examples() {
        let a = emb("a", &[1.0, 2.0, 3.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let x = emb("x", &[1.0, 0.0]);
        let y = emb("y", &[0.0, 1.0]);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        let neg = emb("n", &[-1.0, -2.0, -3.0]);
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn cosine_is_clamped() {
        let v = [0.1, 0.2, 0.3, 0.7];
        let c = cosine(&v, &v).unwrap();
        assert!(c <= 1.0);
    }

    #[test]
    fn space_mismatch_is_an_error() {
        let a = EmbeddingSpace::new(4, "mock");
        let b = EmbeddingSpace::new(4, "other");
        assert!(a.ensure_same(&a.clone()).is_ok());
        assert!(matches!(a.ensure_same(&b), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn pca_identical_points_is_insufficient() {
        let pts: Vec<_> = (0..5).map(|i| emb(&i.to_string(), &[1.0, 2.0, 3.0])).collect();
        assert!(matches!(
            pca_project(&pts, PcaOptions::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn pca_needs_components_plus_one_points() {
        let pts = vec![emb("a", &[1.0, 0.0, 0.0]), emb("b", &[0.0, 1.0, 0.0])];
        assert!(matches!(
            pca_project(&pts, PcaOptions::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn pca_sign_convention() {
        let pts = vec![
            emb("a", &[-2.0, 0.1, 0.0]),
            emb("b", &[0.0, -0.1, 0.0]),
            emb("c", &[2.0, 0.0, 0.05]),
        ];
        let opts = PcaOptions {
            components: 1,
            normalize_inputs: false,
        };
        let p = pca_project(&pts, opts).unwrap();
        // First axis is dominated by +x, so "c" lands on the positive side.
        assert!(p.points[2].coords[0] > 0.0);
        assert!(p.points[0].coords[0] < 0.0);
    }

    #[test]
    fn knn_self_retrieval_and_saturation() {
        let corpus = vec![
            emb("b", &[1.0, 0.0]),
            emb("a", &[0.0, 1.0]),
            emb("c", &[1.0, 1.0]),
        ];
        let hits = nearest_neighbors(&[0.0, 1.0], &corpus, 1).unwrap();
        assert_eq!(hits[0].id, "a");
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);

        let all = nearest_neighbors(&[0.0, 1.0], &corpus, 10).unwrap();
        let ids: Vec<_> = all.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, ["a", "c", "b"]);
    }

    #[test]
    fn knn_ties_break_by_id() {
        let corpus = vec![emb("z", &[1.0, 0.0]), emb("m", &[2.0, 0.0]), emb("a", &[3.0, 0.0])];
        let hits = nearest_neighbors(&[1.0, 0.0], &corpus, 2).unwrap();
        let ids: Vec<_> = hits.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, ["a", "m"]);
    }

    #[test]
    fn knn_errors() {
        assert!(matches!(
            nearest_neighbors(&[1.0], &[], 1),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            nearest_neighbors(&[1.0], &[emb("a", &[1.0])], 0),
            Err(Error::InvalidArgument(_))
        ));
    }
}
