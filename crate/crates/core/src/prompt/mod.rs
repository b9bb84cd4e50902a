//! Prompt-anchor classification in the joint embedding space.
//!
//! A [`PromptSet`] holds one or more unit-norm anchor vectors per class. An
//! image embedding is scored by a softmax over temperature-scaled cosine
//! similarities to the anchors. Anchors start from encoded text prompts and
//! can be tuned directly on the sphere (see [`tune`]).

mod probe;
mod tune;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{check_dim, cosine, normalize_vector, Embedding, EmbeddingSpace};
use crate::encoder::{encode_text, EncoderBackend};
use crate::error::{Error, Result};
use crate::smid::Label;

pub use probe::{linear_probe_baseline, LinearProbe};
pub use tune::{
    accuracy, learning_curve, tune, tune_with_observer, tuning_gradient, tuning_loss, CurvePoint,
    EarlyStopMetric, EpochStats, StopReason, TuneConfig, TuneReport,
};

pub const DEFAULT_TEMPLATE: &str = "This image is about something {label}.";
pub const DEFAULT_TEMPERATURE: f64 = 100.0;
pub const PROMPTSET_VERSION: u32 = 1;
const PLACEHOLDER: &str = "{label}";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    ZeroShot {
        template: String,
        labels: Vec<String>,
        temperature: f64,
    },
    Random {
        seed: u64,
    },
    Tuned {
        run_id: String,
        temperature: f64,
        initial: Box<Provenance>,
    },
    Imported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptClass {
    pub name: String,
    pub anchors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    space: EmbeddingSpace,
    pub temperature: f64,
    pub aggregation: Aggregation,
    classes: Vec<PromptClass>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub id: String,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    pub predicted_class: String,
    pub offensive_score: f64,
}

impl PromptSet {
    /// Validates and unit-normalizes every anchor.
    pub fn new(
        space: EmbeddingSpace,
        temperature: f64,
        classes: Vec<PromptClass>,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut set = Self {
            space,
            temperature,
            aggregation: Aggregation::Max,
            classes,
            provenance,
        };
        set.validate()?;
        set.renormalize()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.classes.len() < 2 {
            return Err(Error::InvalidArgument("a prompt set needs >= 2 classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::InvalidArgument(format!("duplicate class {:?}", c.name)));
            }
            if c.anchors.is_empty() {
                return Err(Error::InvalidArgument(format!("class {:?} has no anchors", c.name)));
            }
            for a in &c.anchors {
                self.space.check(a)?;
            }
        }
        if self.class_index(Label::Offensive).is_none() {
            return Err(Error::InvalidArgument(format!(
                "no class named {:?}",
                Label::Offensive.name()
            )));
        }
        Ok(())
    }

    pub(crate) fn renormalize(&mut self) -> Result<()> {
        for c in &mut self.classes {
            for a in &mut c.anchors {
                *a = normalize_vector(a)?;
            }
        }
        Ok(())
    }

    /// Two classes in label order, one anchor each.
    pub fn binary(
        space: EmbeddingSpace,
        non_offensive: Vec<f64>,
        offensive: Vec<f64>,
        temperature: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        Self::new(
            space,
            temperature,
            vec![
                PromptClass {
                    name: Label::NonOffensive.name().into(),
                    anchors: vec![non_offensive],
                },
                PromptClass {
                    name: Label::Offensive.name().into(),
                    anchors: vec![offensive],
                },
            ],
            provenance,
        )
    }

    /// Independent uniformly random unit anchors.
    pub fn random(space: EmbeddingSpace, temperature: f64, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> {
            (0..space.dimension)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        };
        let (a, b) = (draw(), draw());
        Self::binary(space, a, b, temperature, Provenance::Random { seed })
    }

    pub fn space(&self) -> &EmbeddingSpace {
        &self.space
    }

    pub fn classes(&self) -> &[PromptClass] {
        &self.classes
    }

    pub(crate) fn classes_mut(&mut self) -> &mut [PromptClass] {
        &mut self.classes
    }

    pub fn class_index(&self, label: Label) -> Option<usize> {
        self.classes.iter().position(|c| c.name == label.name())
    }

    pub(crate) fn label_index(&self, label: Label) -> Result<usize> {
        self.class_index(label).ok_or_else(|| {
            Error::InvalidArgument(format!("prompt set has no class {:?}", label.name()))
        })
    }

    pub fn offensive_index(&self) -> usize {
        self.class_index(Label::Offensive)
            .expect("validated at construction")
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        self.temperature = temperature;
        self.validate()?;
        Ok(self)
    }

    pub fn with_aggregation(mut self, aggregation: Aggregation) -> Self {
        self.aggregation = aggregation;
        self
    }

    /// Aggregated cosine similarity per class for a unit-norm input.
    pub(crate) fn class_similarities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.classes
            .iter()
            .map(|c| {
                let sims = c
                    .anchors
                    .iter()
                    .map(|a| cosine(x, a))
                    .collect::<Result<Vec<_>>>()?;
                Ok(match self.aggregation {
                    Aggregation::Max => sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    Aggregation::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
                })
            })
            .collect()
    }

    pub fn logits(&self, x: &Embedding) -> Result<Vec<f64>> {
        check_dim(self.space.dimension, x.dimension())?;
        let unit = normalize_vector(&x.vector)?;
        Ok(self
            .class_similarities(&unit)?
            .into_iter()
            .map(|s| self.temperature * s)
            .collect())
    }

    pub fn to_file(&self) -> PromptSetFile {
        PromptSetFile {
            version: PROMPTSET_VERSION,
            backend_id: self.space.backend_id.clone(),
            dimension: self.space.dimension,
            temperature: self.temperature,
            aggregation: self.aggregation,
            classes: self
                .classes
                .iter()
                .map(|c| PromptClassFile {
                    name: c.name.clone(),
                    anchors: c
                        .anchors
                        .iter()
                        .map(|a| a.iter().map(|&x| x as f32).collect())
                        .collect(),
                })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn from_file(file: PromptSetFile) -> Result<Self> {
        if file.version != PROMPTSET_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported prompt set version {}",
                file.version
            )));
        }
        let classes = file
            .classes
            .into_iter()
            .map(|c| PromptClass {
                name: c.name,
                anchors: c
                    .anchors
                    .into_iter()
                    .map(|a| a.into_iter().map(f64::from).collect())
                    .collect(),
            })
            .collect();
        let set = Self::new(
            EmbeddingSpace::new(file.dimension, file.backend_id),
            file.temperature,
            classes,
            file.provenance,
        )?;
        Ok(set.with_aggregation(file.aggregation))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// On-disk prompt set. Anchors are stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSetFile {
    pub version: u32,
    pub backend_id: String,
    pub dimension: usize,
    pub temperature: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub classes: Vec<PromptClassFile>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptClassFile {
    pub name: String,
    pub anchors: Vec<Vec<f32>>,
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// First index of the maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn classify(prompts: &PromptSet, x: &Embedding) -> Result<Classification> {
    let probabilities = softmax(&prompts.logits(x)?);
    let predicted = argmax(&probabilities);
    Ok(Classification {
        id: x.id.clone(),
        offensive_score: probabilities[prompts.offensive_index()],
        predicted_class: prompts.classes[predicted].name.clone(),
        predicted,
        probabilities,
    })
}

/// Class label words substituted into a prompt template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelWords {
    pub non_offensive: String,
    pub offensive: String,
}

impl LabelWords {
    pub fn new(non_offensive: &str, offensive: &str) -> Self {
        Self {
            non_offensive: non_offensive.into(),
            offensive: offensive.into(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        LABEL_PRESETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .map(|(_, pos, neg)| Self::new(pos, neg))
    }
}

impl Default for LabelWords {
    fn default() -> Self {
        Self::new("positive", "negative")
    }
}

/// `(preset name, non-offensive word, offensive word)`.
pub const LABEL_PRESETS: &[(&str, &str, &str)] = &[
    ("positive-negative", "positive", "negative"),
    ("good-bad-behavior", "good behavior", "bad behavior"),
    ("praiseworthy-blameworthy", "praiseworthy", "blameworthy"),
    ("moral-immoral", "moral", "immoral"),
];

pub fn render_template(template: &str, label: &str) -> Result<String> {
    match template.matches(PLACEHOLDER).count() {
        1 => Ok(template.replace(PLACEHOLDER, label)),
        n => Err(Error::BadTemplate(format!(
            "expected exactly one {PLACEHOLDER} placeholder, found {n}"
        ))),
    }
}

/// Anchors from encoded text prompts, one per class.
pub fn build_zero_shot(
    backend: &dyn EncoderBackend,
    template: &str,
    labels: &LabelWords,
    temperature: f64,
) -> Result<PromptSet> {
    let non = encode_text(backend, &render_template(template, &labels.non_offensive)?)?;
    let off = encode_text(backend, &render_template(template, &labels.offensive)?)?;
    PromptSet::binary(
        backend.space(),
        non.vector,
        off.vector,
        temperature,
        Provenance::ZeroShot {
            template: template.to_string(),
            labels: vec![labels.non_offensive.clone(), labels.offensive.clone()],
            temperature,
        },
    )
}
