//! Stratified k-fold evaluation of zero-shot prompts, tuned prompts, and the
//! linear probe on labeled embeddings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{classify, linear_probe_baseline, tune, PromptSet, TuneConfig, TuneReport};
use crate::smid::{
    aggregate_cv, class_counts, compute_metrics, make_folds, split_plan, CvSummary, Label,
    LabeledExample, Metrics,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    ZeroShot,
    Tune,
    Probe,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-shot" => Ok(Self::ZeroShot),
            "tune" => Ok(Self::Tune),
            "probe" => Ok(Self::Probe),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?}; expected zero-shot, tune or probe"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub folds: usize,
    pub seed: u64,
    /// Share of each training fold held out for early stopping when tuning.
    pub validation_fraction: f64,
    pub probe_regularization: f64,
    pub tune: TuneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Tune,
            folds: 10,
            seed: 0,
            validation_fraction: 0.1,
            probe_regularization: 1e-3,
            tune: TuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    pub best_epoch: usize,
    pub steps: usize,
    pub final_train_loss: f64,
    pub losses: Vec<f64>,
}

impl From<&TuneReport> for TuneSummary {
    fn from(r: &TuneReport) -> Self {
        Self {
            best_epoch: r.best_epoch,
            steps: r.steps,
            final_train_loss: r.losses.last().copied().unwrap_or(f64::NAN),
            losses: r.losses.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: Metrics,
    pub tune: Option<TuneSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub examples: usize,
    pub offensive: usize,
    pub non_offensive: usize,
    pub folds: Vec<FoldResult>,
    pub summary: CvSummary,
}

/// Metrics of a prompt set's argmax predictions on `test`.
pub fn evaluate_prompts(prompts: &PromptSet, test: &[LabeledExample]) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut predictions = Vec::with_capacity(test.len());
    let mut truth = Vec::with_capacity(test.len());
    for ex in test {
        let c = classify(prompts, &ex.embedding)?;
        let label = Label::from_name(&c.predicted_class).ok_or_else(|| {
            Error::InvalidArgument(format!("class {:?} is not a binary label", c.predicted_class))
        })?;
        predictions.push((ex.embedding.id.clone(), label));
        truth.push((ex.embedding.id.clone(), ex.label));
    }
    compute_metrics(&predictions, &truth, Label::Offensive)
}

/// Tunes `initial` on `train`, holding out a stratified validation share for
/// early stopping when every class is large enough to spare one.
pub fn tune_with_holdout(
    initial: &PromptSet,
    train: &[LabeledExample],
    validation_fraction: f64,
    config: &TuneConfig,
) -> Result<TuneReport> {
    if validation_fraction > 0.0 {
        if let Ok(plan) = split_plan(train, validation_fraction, config.seed) {
            let (inner, validation) = plan.apply(train)?;
            return tune(initial, &inner, &validation, config);
        }
    }
    tune(initial, train, &[], config)
}

/// Runs `config.folds`-fold stratified cross-validation. Folds are
/// independent and run in parallel; fold `i` tunes with seed `seed + i`.
pub fn cross_validate(
    initial: &PromptSet,
    examples: &[LabeledExample],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::InvalidArgument("validation fraction must lie in [0, 1)".into()));
    }
    let plan = make_folds(examples, config.folds, config.seed)?;
    let folds: Vec<FoldResult> = (0..config.folds)
        .into_par_iter()
        .map(|fold| {
            let (train, test) = plan.split(examples, fold)?;
            let (metrics, tune_summary) = match config.mode {
                EvalMode::ZeroShot => (evaluate_prompts(initial, &test)?, None),
                EvalMode::Probe => (
                    linear_probe_baseline(&train, &test, config.probe_regularization)?,
                    None,
                ),
                EvalMode::Tune => {
                    let cfg = TuneConfig {
                        seed: config.seed.wrapping_add(fold as u64),
                        ..config.tune.clone()
                    };
                    let report = tune_with_holdout(initial, &train, config.validation_fraction, &cfg)?;
                    (
                        evaluate_prompts(&report.prompts, &test)?,
                        Some(TuneSummary::from(&report)),
                    )
                }
            };
            Ok(FoldResult {
                fold,
                train_size: train.len(),
                test_size: test.len(),
                metrics,
                tune: tune_summary,
            })
        })
        .collect::<Result<_>>()?;
    let per_fold: Vec<Metrics> = folds.iter().map(|f| f.metrics).collect();
    let (non_offensive, offensive) = class_counts(examples);
    Ok(EvalReport {
        mode: config.mode,
        examples: examples.len(),
        offensive,
        non_offensive,
        summary: aggregate_cv(&per_fold)?,
        folds,
    })
}
