//! Frozen encoders, their configuration, and the on-disk embedding cache.

mod cache;
mod directory;
mod mock;
#[cfg(feature = "onnx")]
mod onnx;
mod preprocess;

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize_vector, Embedding, EmbeddingSpace};
use crate::error::{Error, Result};

pub use cache::{CacheRecord, EmbeddingCache, ManifestEntry, SourceManifest, CACHE_MAGIC, CACHE_VERSION};
pub use directory::{embed_directory, DirectoryOptions, EmbedOutcome, FileFailure, DEFAULT_EXTENSIONS};
pub use mock::{MockBackend, MockConfig, DEFAULT_CONTEXT_LENGTH};
#[cfg(feature = "onnx")]
pub use onnx::{OnnxBackend, OnnxConfig};
pub use preprocess::{ImagePreprocessSpec, PixelTensor, ResizeFilter, CLIP_MEAN, CLIP_STD};

/// A frozen image/text encoder. Implementations never change their weights,
/// so the same input always produces the same output.
pub trait EncoderBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn dimension(&self) -> usize;

    fn supports_image(&self) -> bool {
        true
    }

    fn supports_text(&self) -> bool {
        true
    }

    /// Raw encoder output for one decoded image, not necessarily unit norm.
    fn image_features(&self, image: &RgbImage) -> Result<Vec<f32>>;

    /// Raw encoder output for one prompt, not necessarily unit norm.
    fn text_features(&self, prompt: &str) -> Result<Vec<f32>>;

    fn space(&self) -> EmbeddingSpace {
        EmbeddingSpace::new(self.dimension(), self.backend_id())
    }
}

fn finish(backend: &dyn EncoderBackend, id: String, raw: Vec<f32>) -> Result<Embedding> {
    if raw.len() != backend.dimension() {
        return Err(Error::DimensionMismatch {
            expected: backend.dimension(),
            found: raw.len(),
        });
    }
    let wide: Vec<f64> = raw.into_iter().map(f64::from).collect();
    let vector = normalize_vector(&wide).map_err(|e| {
        Error::BackendFailure(format!("{} produced an unusable vector: {e}", backend.backend_id()))
    })?;
    Ok(Embedding { id, vector })
}

pub fn encode_image(
    backend: &dyn EncoderBackend,
    id: impl Into<String>,
    image: &RgbImage,
) -> Result<Embedding> {
    if !backend.supports_image() {
        return Err(Error::BackendFailure(format!(
            "{} has no image encoder",
            backend.backend_id()
        )));
    }
    let id = id.into();
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::DecodeFailure {
            path: id,
            message: "empty raster".into(),
        });
    }
    let raw = backend.image_features(image)?;
    finish(backend, id, raw)
}

/// Encodes a prompt; the resulting embedding's id is the prompt itself.
pub fn encode_text(backend: &dyn EncoderBackend, prompt: &str) -> Result<Embedding> {
    if !backend.supports_text() {
        return Err(Error::BackendFailure(format!(
            "{} has no text encoder",
            backend.backend_id()
        )));
    }
    if prompt.trim().is_empty() {
        return Err(Error::TokenizeFailure("prompt is empty".into()));
    }
    let raw = backend.text_features(prompt)?;
    finish(backend, prompt.to_string(), raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock(MockConfig),
    #[cfg(feature = "onnx")]
    Onnx(OnnxConfig),
}

/// Encoder configuration as read from a TOML or JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: BackendConfig,
    #[serde(default)]
    pub preprocess: ImagePreprocessSpec,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::Mock(MockConfig::default()),
            preprocess: ImagePreprocessSpec::default(),
        }
    }
}

impl EncoderConfig {
    /// Reads `.json` files as JSON and everything else as TOML. Relative
    /// model paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: EncoderConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    #[allow(unused_variables)]
    fn resolve_paths(&mut self, base: &Path) {
        #[cfg(feature = "onnx")]
        if let BackendConfig::Onnx(onnx) = &mut self.backend {
            onnx.resolve_paths(base);
        }
    }

    pub fn build(&self) -> Result<Box<dyn EncoderBackend>> {
        match &self.backend {
            BackendConfig::Mock(m) => Ok(Box::new(MockBackend::new(
                m.clone(),
                self.preprocess.clone(),
            )?)),
            #[cfg(feature = "onnx")]
            BackendConfig::Onnx(o) => Ok(Box::new(OnnxBackend::load(o, self.preprocess.clone())?)),
        }
    }
}

/// Decodes an image file into an RGB raster.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb(&bytes).map_err(|message| Error::DecodeFailure {
        path: path.display().to_string(),
        message,
    })
}

pub(crate) fn decode_rgb(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    let rgb = img.to_rgb8();
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err("empty raster".into());
    }
    Ok(rgb)
}

/// Root-relative id with '/' separators.
pub fn relative_id(root: &Path, path: &Path) -> Option<String> {
    let rel = path.strip_prefix(root).ok()?;
    let parts: Vec<String> = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    if parts.is_empty() {
        None
    } else {
        Some(parts.join("/"))
    }
}

pub fn join_id(root: &Path, id: &str) -> PathBuf {
    id.split('/').fold(root.to_path_buf(), |p, part| p.join(part))
}
