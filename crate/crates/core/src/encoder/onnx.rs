//! Frozen encoders exported to ONNX, run on CPU through tract.
//!
//! The image model takes one `[1, 3, S, S]` float tensor (S from the
//! preprocessing spec) and returns `[1, D]`. The text model takes `[1, L]`
//! int64 token ids, plus an attention mask if it declares a second input,
//! and returns `[1, D]`. Prompts are tokenized with a HuggingFace
//! `tokenizer.json` and right-padded to the context length.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokenizers::Tokenizer;
use tract_onnx::prelude::*;

use super::mock::DEFAULT_CONTEXT_LENGTH;
use super::preprocess::ImagePreprocessSpec;
use super::EncoderBackend;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnnxConfig {
    pub image_model: PathBuf,
    #[serde(default)]
    pub text_model: Option<PathBuf>,
    #[serde(default)]
    pub tokenizer: Option<PathBuf>,
    #[serde(default = "default_context")]
    pub context_length: usize,
    #[serde(default)]
    pub pad_id: u32,
}

fn default_context() -> usize {
    DEFAULT_CONTEXT_LENGTH
}

impl OnnxConfig {
    pub(crate) fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.image_model);
        if let Some(p) = &mut self.text_model {
            fix(p);
        }
        if let Some(p) = &mut self.tokenizer {
            fix(p);
        }
    }
}

type Plan = TypedRunnableModel<TypedModel>;

struct TextEncoder {
    plan: Plan,
    tokenizer: Tokenizer,
    with_mask: bool,
}

pub struct OnnxBackend {
    backend_id: String,
    dimension: usize,
    preprocess: ImagePreprocessSpec,
    image: Plan,
    text: Option<TextEncoder>,
    context_length: usize,
    pad_id: u32,
}

fn backend_err(what: &Path, e: impl std::fmt::Display) -> Error {
    Error::BackendFailure(format!("{}: {e}", what.display()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn output_vector(outputs: TVec<TValue>, source: &Path) -> Result<Vec<f32>> {
    let first = outputs
        .into_iter()
        .next()
        .ok_or_else(|| backend_err(source, "model produced no outputs"))?;
    let view = first.to_array_view::<f32>().map_err(|e| backend_err(source, e))?;
    if view.ndim() != 2 || view.shape()[0] != 1 {
        return Err(backend_err(source, format!("expected output shape [1, D], got {:?}", view.shape())));
    }
    Ok(view.iter().copied().collect())
}

impl OnnxBackend {
    pub fn load(config: &OnnxConfig, preprocess: ImagePreprocessSpec) -> Result<Self> {
        preprocess.validate()?;
        if config.context_length == 0 {
            return Err(Error::Config("context_length must be > 0".into()));
        }
        let side = preprocess.target_side as usize;
        let image_bytes = read(&config.image_model)?;
        let image = tract_onnx::onnx()
            .model_for_read(&mut image_bytes.as_slice())
            .and_then(|m| m.with_input_fact(0, f32::fact([1, 3, side, side]).into()))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| backend_err(&config.image_model, e))?;

        let mut hasher = Sha256::new();
        hasher.update(&image_bytes);

        let text = match (&config.text_model, &config.tokenizer) {
            (Some(model), Some(tok)) => {
                let bytes = read(model)?;
                hasher.update(&bytes);
                hasher.update(read(tok)?);
                let mut inferred = tract_onnx::onnx()
                    .model_for_read(&mut bytes.as_slice())
                    .map_err(|e| backend_err(model, e))?;
                let with_mask = inferred.inputs.len() > 1;
                let fact = i64::fact([1, config.context_length]);
                inferred = inferred
                    .with_input_fact(0, fact.clone().into())
                    .map_err(|e| backend_err(model, e))?;
                if with_mask {
                    inferred = inferred
                        .with_input_fact(1, fact.into())
                        .map_err(|e| backend_err(model, e))?;
                }
                let plan = inferred
                    .into_optimized()
                    .and_then(|m| m.into_runnable())
                    .map_err(|e| backend_err(model, e))?;
                let tokenizer = Tokenizer::from_file(tok).map_err(|e| backend_err(tok, e))?;
                Some(TextEncoder {
                    plan,
                    tokenizer,
                    with_mask,
                })
            }
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "text_model and tokenizer must be given together".into(),
                ))
            }
        };

        let digest = hex::encode(hasher.finalize());
        let mut backend = Self {
            backend_id: format!("onnx:{}", &digest[..16]),
            dimension: 0,
            preprocess,
            image,
            text,
            context_length: config.context_length,
            pad_id: config.pad_id,
        };
        // The output width is only known after a forward pass.
        let probe = RgbImage::new(side as u32, side as u32);
        backend.dimension = backend.image_features(&probe)?.len();
        if backend.dimension == 0 {
            return Err(backend_err(&config.image_model, "model output is empty"));
        }
        if backend.text.is_some() {
            let d = backend.run_text(&[backend.pad_id])?.len();
            if d != backend.dimension {
                return Err(Error::DimensionMismatch {
                    expected: backend.dimension,
                    found: d,
                });
            }
        }
        log::info!("loaded {} (dimension {})", backend.backend_id, backend.dimension);
        Ok(backend)
    }

    /// Token ids for a prompt, unpadded.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<u32>> {
        let text = self
            .text
            .as_ref()
            .ok_or_else(|| Error::BackendFailure(format!("{} has no text encoder", self.backend_id)))?;
        let encoding = text
            .tokenizer
            .encode(prompt, true)
            .map_err(|e| Error::TokenizeFailure(e.to_string()))?;
        let ids = encoding.get_ids().to_vec();
        if ids.is_empty() {
            return Err(Error::TokenizeFailure("prompt produced no tokens".into()));
        }
        if ids.len() > self.context_length {
            return Err(Error::TokenizeFailure(format!(
                "{} tokens exceed the context length {}",
                ids.len(),
                self.context_length
            )));
        }
        Ok(ids)
    }

    fn run_text(&self, ids: &[u32]) -> Result<Vec<f32>> {
        let text = self.text.as_ref().expect("checked by caller");
        let l = self.context_length;
        let mut padded = vec![i64::from(self.pad_id); l];
        let mut mask = vec![0i64; l];
        for (i, &id) in ids.iter().enumerate() {
            padded[i] = i64::from(id);
            mask[i] = 1;
        }
        let shape_err = |e: tract_ndarray::ShapeError| Error::BackendFailure(e.to_string());
        let mut inputs: TVec<TValue> =
            tvec!(Tensor::from(tract_ndarray::Array2::from_shape_vec((1, l), padded).map_err(shape_err)?).into());
        if text.with_mask {
            inputs.push(Tensor::from(tract_ndarray::Array2::from_shape_vec((1, l), mask).map_err(shape_err)?).into());
        }
        let out = text
            .plan
            .run(inputs)
            .map_err(|e| Error::BackendFailure(format!("text encoder: {e}")))?;
        output_vector(out, Path::new("text model"))
    }
}

impl EncoderBackend for OnnxBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn supports_text(&self) -> bool {
        self.text.is_some()
    }

    fn image_features(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let pixels = self.preprocess.apply(image)?;
        let s = pixels.side;
        let array = tract_ndarray::Array4::from_shape_vec((1, 3, s, s), pixels.data)
            .map_err(|e| Error::BackendFailure(e.to_string()))?;
        let out = self
            .image
            .run(tvec!(Tensor::from(array).into()))
            .map_err(|e| Error::BackendFailure(format!("image encoder: {e}")))?;
        output_vector(out, Path::new("image model"))
    }

    fn text_features(&self, prompt: &str) -> Result<Vec<f32>> {
        let ids = self.tokenize(prompt)?;
        self.run_text(&ids)
    }
}
