//! Deterministic stand-in for a frozen vision-language encoder.
//!
//! Every vector is a unit-normalized pseudorandom Gaussian draw seeded by a
//! SHA-256 content hash. With `semantic_weight > 0` image vectors are pulled
//! toward a fixed random projection of coarse color statistics, so images
//! that look alike land near each other. That is enough geometry for
//! planted-cluster fixtures without downloading a model.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::preprocess::ImagePreprocessSpec;
use super::EncoderBackend;
use crate::embedding::norm;
use crate::error::{Error, Result};

/// Side length of the pooling grid used for the color statistics.
const GRID: usize = 2;
const FEATURES: usize = 3 * GRID * GRID;
pub const DEFAULT_CONTEXT_LENGTH: usize = 77;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub dimension: usize,
    pub seed: u64,
    /// 0 gives pure content-hash vectors; 1 gives pure color-statistics vectors.
    pub semantic_weight: f64,
    pub context_length: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            dimension: 512,
            seed: 0,
            semantic_weight: 0.0,
            context_length: DEFAULT_CONTEXT_LENGTH,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockConfig,
    preprocess: ImagePreprocessSpec,
    backend_id: String,
    // dimension x FEATURES, row-major
    projection: Vec<f64>,
}

impl MockBackend {
    pub fn new(config: MockConfig, preprocess: ImagePreprocessSpec) -> Result<Self> {
        if config.dimension == 0 {
            return Err(Error::Config("mock dimension must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&config.semantic_weight) {
            return Err(Error::Config("semantic_weight must be in [0, 1]".into()));
        }
        preprocess.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d6f_636b_5f70_726a);
        let projection = (0..config.dimension * FEATURES)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let backend_id = format!(
            "mock:d{}:s{}:w{}",
            config.dimension, config.seed, config.semantic_weight
        );
        Ok(Self {
            config,
            preprocess,
            backend_id,
            projection,
        })
    }

    pub fn with_dimension(dimension: usize, seed: u64) -> Self {
        Self::new(
            MockConfig {
                dimension,
                seed,
                ..Default::default()
            },
            ImagePreprocessSpec::default(),
        )
        .expect("valid mock config")
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn hashed_unit(&self, domain: &[u8], parts: &[&[u8]]) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(domain);
        hasher.update(self.config.seed.to_le_bytes());
        for p in parts {
            hasher.update((p.len() as u64).to_le_bytes());
            hasher.update(p);
        }
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        loop {
            let v: Vec<f64> = (0..self.config.dimension)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = norm(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    fn color_features(&self, image: &RgbImage) -> Result<[f64; FEATURES]> {
        let tensor = self.preprocess.apply(image)?;
        let side = tensor.side;
        let cell = side.div_ceil(GRID);
        let mut sums = [0.0f64; FEATURES];
        let mut counts = [0usize; FEATURES];
        for c in 0..3 {
            for (i, &v) in tensor.channel(c).iter().enumerate() {
                let (y, x) = (i / side, i % side);
                let slot = c * GRID * GRID + (y / cell) * GRID + x / cell;
                sums[slot] += f64::from(v);
                counts[slot] += 1;
            }
        }
        for (s, n) in sums.iter_mut().zip(counts) {
            *s /= n.max(1) as f64;
        }
        Ok(sums)
    }

    fn tokenize(&self, prompt: &str) -> Result<Vec<String>> {
        let trimmed = prompt.trim();
        if trimmed.is_empty() {
            return Err(Error::TokenizeFailure("prompt is empty".into()));
        }
        let tokens: Vec<String> = trimmed
            .split_whitespace()
            .map(|t| t.to_lowercase())
            .collect();
        // start and end markers
        if tokens.len() + 2 > self.config.context_length {
            return Err(Error::TokenizeFailure(format!(
                "{} tokens exceed context length {}",
                tokens.len() + 2,
                self.config.context_length
            )));
        }
        Ok(tokens)
    }
}

impl EncoderBackend for MockBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn image_features(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::DecodeFailure {
                path: String::new(),
                message: "empty raster".into(),
            });
        }
        let noise = self.hashed_unit(
            b"image",
            &[&w.to_le_bytes(), &h.to_le_bytes(), image.as_raw()],
        );
        let weight = self.config.semantic_weight;
        let v = if weight > 0.0 {
            let f = self.color_features(image)?;
            let semantic: Vec<f64> = self
                .projection
                .chunks_exact(FEATURES)
                .map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum())
                .collect();
            let sn = norm(&semantic);
            let sw = if sn > 1e-12 { weight / sn } else { 0.0 };
            semantic
                .iter()
                .zip(&noise)
                .map(|(s, n)| s * sw + n * (1.0 - weight))
                .collect()
        } else {
            noise
        };
        Ok(v.into_iter().map(|x| x as f32).collect())
    }

    fn text_features(&self, prompt: &str) -> Result<Vec<f32>> {
        let tokens = self.tokenize(prompt)?;
        let joined = tokens.join(" ");
        let v = self.hashed_unit(b"text", &[joined.as_bytes()]);
        Ok(v.into_iter().map(|x| x as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn solid(rgb: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(32, 32, Rgb(rgb))
    }

    #[test]
    fn hash_seeded_image_vectors_are_stable() {
        let a = MockBackend::with_dimension(16, 3);
        let b = MockBackend::with_dimension(16, 3);
        let img = solid([1, 2, 3]);
        assert_eq!(a.image_features(&img).unwrap(), b.image_features(&img).unwrap());
        let other = MockBackend::with_dimension(16, 4);
        assert_ne!(
            a.image_features(&img).unwrap(),
            other.image_features(&img).unwrap()
        );
    }

    #[test]
    fn text_tokenization_rules() {
        let m = MockBackend::with_dimension(8, 0);
        assert!(matches!(m.text_features("   "), Err(Error::TokenizeFailure(_))));
        let long = vec!["word"; 80].join(" ");
        assert!(matches!(m.text_features(&long), Err(Error::TokenizeFailure(_))));
        // whitespace and case do not change the token sequence
        assert_eq!(
            m.text_features("This  image").unwrap(),
            m.text_features("this image ").unwrap()
        );
    }

    #[test]
    fn semantic_weight_groups_similar_colors() {
        let m = MockBackend::new(
            MockConfig {
                dimension: 32,
                seed: 1,
                semantic_weight: 0.9,
                ..Default::default()
            },
            ImagePreprocessSpec {
                target_side: 16,
                ..Default::default()
            },
        )
        .unwrap();
        let cos = |a: &[f32], b: &[f32]| {
            let a: Vec<f64> = a.iter().map(|&x| x.into()).collect();
            let b: Vec<f64> = b.iter().map(|&x| x.into()).collect();
            crate::embedding::cosine(&a, &b).unwrap()
        };
        let red1 = m.image_features(&solid([250, 10, 10])).unwrap();
        let red2 = m.image_features(&solid([230, 20, 15])).unwrap();
        let blue = m.image_features(&solid([10, 20, 240])).unwrap();
        assert!(cos(&red1, &red2) > cos(&red1, &blue));
    }

    #[test]
    fn rejects_bad_config() {
        let bad = MockConfig {
            semantic_weight: 1.5,
            ..Default::default()
        };
        assert!(MockBackend::new(bad, ImagePreprocessSpec::default()).is_err());
        let zero = MockConfig {
            dimension: 0,
            ..Default::default()
        };
        assert!(MockBackend::new(zero, ImagePreprocessSpec::default()).is_err());
    }
}
