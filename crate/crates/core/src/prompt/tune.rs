//! Cross-entropy objective over prompt anchors and its projected gradient
//! descent on the unit sphere. Encoders stay frozen: only anchor vectors
//! move, and image embeddings are fixed inputs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{argmax, classify, softmax, Aggregation, PromptSet, Provenance};
use crate::embedding::{check_dim, dot, norm, normalize_vector};
use crate::error::{Error, Result};
use crate::smid::{metrics, stratified_subsample, LabeledExample};

/// Per-example quantities shared by the loss and its gradient.
struct Forward {
    /// class -> index of the anchor carrying the aggregated similarity
    winners: Vec<usize>,
    logits: Vec<f64>,
    target: usize,
}

fn forward(prompts: &PromptSet, ex: &LabeledExample, x: &[f64]) -> Result<Forward> {
    let target = prompts.label_index(ex.label)?;
    let mut winners = Vec::with_capacity(prompts.classes().len());
    let mut logits = Vec::with_capacity(prompts.classes().len());
    for class in prompts.classes() {
        let sims: Vec<f64> = class
            .anchors
            .iter()
            .map(|a| dot(x, a) / norm(a))
            .collect();
        let (w, s) = match prompts.aggregation {
            Aggregation::Max => {
                let w = argmax(&sims);
                (w, sims[w])
            }
            Aggregation::Mean => (0, sims.iter().sum::<f64>() / sims.len() as f64),
        };
        winners.push(w);
        logits.push(prompts.temperature * s.clamp(-1.0, 1.0));
    }
    Ok(Forward {
        winners,
        logits,
        target,
    })
}

/// `-log softmax(logits)[target]`, accurate even when the target
/// probability is within rounding of 1.
fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let shifted: Vec<f64> = logits.iter().map(|l| l - logits[target]).collect();
    let top = shifted.iter().copied().fold(0.0f64, f64::max);
    if top == 0.0 {
        let rest: f64 = shifted
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target)
            .map(|(_, d)| d.exp())
            .sum();
        rest.ln_1p()
    } else {
        top + shifted.iter().map(|d| (d - top).exp()).sum::<f64>().ln()
    }
}

fn unit_inputs(prompts: &PromptSet, batch: &[LabeledExample]) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch
        .iter()
        .map(|ex| {
            check_dim(prompts.space().dimension, ex.embedding.dimension())?;
            normalize_vector(&ex.embedding.vector)
        })
        .collect()
}

/// Mean cross-entropy of the prompt classifier over `batch`.
pub fn tuning_loss(prompts: &PromptSet, batch: &[LabeledExample]) -> Result<f64> {
    let xs = unit_inputs(prompts, batch)?;
    let mut total = 0.0;
    for (ex, x) in batch.iter().zip(&xs) {
        let f = forward(prompts, ex, x)?;
        total += cross_entropy(&f.logits, f.target);
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`tuning_loss`] with respect to every raw anchor vector,
/// shaped like the anchors (`class -> anchor -> dimension`).
///
/// For a unit input `x`, anchor `z` with `s = cos(x, z)`, and class
/// probability `p` against one-hot target `y`, one example contributes
/// `tau * (p - y) * (x - s * z / |z|) / |z|`. Under max aggregation only the
/// winning anchor of each class receives gradient; under mean aggregation
/// each anchor gets an equal share.
pub fn tuning_gradient(prompts: &PromptSet, batch: &[LabeledExample]) -> Result<Vec<Vec<Vec<f64>>>> {
    Ok(loss_and_gradient(prompts, batch)?.1)
}

fn loss_and_gradient(
    prompts: &PromptSet,
    batch: &[LabeledExample],
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let xs = unit_inputs(prompts, batch)?;
    let dim = prompts.space().dimension;
    let tau = prompts.temperature;
    let mut grad: Vec<Vec<Vec<f64>>> = prompts
        .classes()
        .iter()
        .map(|c| vec![vec![0.0; dim]; c.anchors.len()])
        .collect();
    let mut total = 0.0;
    for (ex, x) in batch.iter().zip(&xs) {
        let f = forward(prompts, ex, x)?;
        total += cross_entropy(&f.logits, f.target);
        let p = softmax(&f.logits);
        // p_target - 1 cancels catastrophically when p_target is near 1;
        // the sum of the other probabilities is the same quantity, exactly.
        let others: f64 = p.iter().enumerate().filter(|&(c, _)| c != f.target).map(|(_, q)| q).sum();
        for (c, class) in prompts.classes().iter().enumerate() {
            let residual = if c == f.target { -others } else { p[c] };
            let coeff = tau * residual;
            if coeff == 0.0 {
                continue;
            }
            let targets: Vec<(usize, f64)> = match prompts.aggregation {
                Aggregation::Max => vec![(f.winners[c], 1.0)],
                Aggregation::Mean => {
                    let share = 1.0 / class.anchors.len() as f64;
                    (0..class.anchors.len()).map(|j| (j, share)).collect()
                }
            };
            for (j, share) in targets {
                let z = &class.anchors[j];
                let zn = norm(z);
                let s = dot(x, z) / zn;
                let scale = coeff * share / zn;
                for ((g, xi), zi) in grad[c][j].iter_mut().zip(x).zip(z) {
                    *g += scale * (xi - s * zi / zn);
                }
            }
        }
    }
    let n = batch.len() as f64;
    for g in grad.iter_mut().flatten().flatten() {
        *g /= n;
    }
    Ok((total / n, grad))
}

/// Fraction of examples whose predicted class matches the label.
pub fn accuracy(prompts: &PromptSet, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for ex in examples {
        let c = classify(prompts, &ex.embedding)?;
        if c.predicted == prompts.label_index(ex.label)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    Accuracy,
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Hard cap on gradient steps across all epochs.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Overrides the prompt set's temperature when set.
    pub temperature: Option<f64>,
    pub patience: usize,
    pub early_stop: EarlyStopMetric,
    pub seed: u64,
    pub renormalize: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_epochs: 100,
            max_steps: None,
            batch_size: 32,
            temperature: None,
            patience: 10,
            early_stop: EarlyStopMetric::Accuracy,
            seed: 0,
            renormalize: true,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidArgument("temperature must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    MaxSteps,
    EarlyStopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub monitor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    /// Full training-set loss after each epoch.
    pub losses: Vec<f64>,
    /// Monitored metric after each epoch: validation accuracy or loss when a
    /// validation set is given, training loss otherwise.
    pub monitor: Vec<f64>,
    pub monitor_metric: EarlyStopMetric,
    /// Epoch whose snapshot was returned; 0 means the initial prompts.
    pub best_epoch: usize,
    pub best_monitor: f64,
    pub steps: usize,
    pub stop_reason: StopReason,
    pub prompts: PromptSet,
}

fn run_id(initial: &PromptSet, train: &[LabeledExample], config: &TuneConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(initial.to_json()?.as_bytes());
    h.update(serde_json::to_vec(config)?);
    for ex in train {
        h.update(ex.embedding.id.as_bytes());
        h.update([ex.label as u8]);
        for x in &ex.embedding.vector {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

struct Monitor {
    metric: EarlyStopMetric,
}

impl Monitor {
    /// The monitored value plus a loss used to break ties between equal
    /// accuracies, which are common on small validation sets.
    fn measure(&self, p: &PromptSet, train: &[LabeledExample], val: &[LabeledExample]) -> Result<(f64, f64)> {
        if val.is_empty() {
            let l = tuning_loss(p, train)?;
            return Ok((l, l));
        }
        match self.metric {
            EarlyStopMetric::Accuracy => Ok((accuracy(p, val)?, tuning_loss(p, val)?)),
            EarlyStopMetric::Loss => {
                let l = tuning_loss(p, val)?;
                Ok((l, l))
            }
        }
    }

    fn effective(&self, val: &[LabeledExample]) -> EarlyStopMetric {
        if val.is_empty() {
            EarlyStopMetric::Loss
        } else {
            self.metric
        }
    }
}

fn better(metric: EarlyStopMetric, candidate: (f64, f64), best: (f64, f64)) -> bool {
    match metric {
        EarlyStopMetric::Accuracy => candidate.0 > best.0 || (candidate.0 == best.0 && candidate.1 < best.1),
        EarlyStopMetric::Loss => candidate.0 < best.0,
    }
}

pub fn tune(
    prompts: &PromptSet,
    train: &[LabeledExample],
    validation: &[LabeledExample],
    config: &TuneConfig,
) -> Result<TuneReport> {
    tune_with_observer(prompts, train, validation, config, &mut |_| {})
}

/// Mini-batch projected gradient descent on the anchors.
///
/// Each epoch shuffles the training set under `config.seed`, steps every
/// anchor by `-learning_rate * gradient` and, when `renormalize` is on,
/// projects it back onto the unit sphere. The best snapshot by the monitored
/// metric (the initial prompts included) is returned. `observer` sees every
/// epoch as it finishes.
pub fn tune_with_observer(
    prompts: &PromptSet,
    train: &[LabeledExample],
    validation: &[LabeledExample],
    config: &TuneConfig,
    observer: &mut dyn FnMut(&EpochStats),
) -> Result<TuneReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let mut current = prompts.clone();
    if let Some(t) = config.temperature {
        current = current.with_temperature(t)?;
    }
    let id = run_id(&current, train, config)?;
    let monitor = Monitor {
        metric: config.early_stop,
    };
    let monitor_metric = monitor.effective(validation);

    let mut best = current.clone();
    let mut best_monitor = monitor.measure(&current, train, validation)?;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut losses = Vec::new();
    let mut monitored = Vec::new();
    let mut steps = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch: Vec<LabeledExample> = Vec::with_capacity(config.batch_size);

    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let (loss, grad) = loss_and_gradient(&current, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step: steps, loss });
            }
            for (class, g_class) in current.classes_mut().iter_mut().zip(&grad) {
                for (anchor, g) in class.anchors.iter_mut().zip(g_class) {
                    for (a, gi) in anchor.iter_mut().zip(g) {
                        *a -= config.learning_rate * gi;
                    }
                    // Without renormalization a huge step can push |z| past
                    // the f64 range, after which cosines silently read as 0.
                    if !norm(anchor).is_finite() {
                        return Err(Error::Divergence { step: steps, loss });
                    }
                    if config.renormalize {
                        *anchor = normalize_vector(anchor).map_err(|_| Error::Divergence {
                            step: steps,
                            loss: f64::NAN,
                        })?;
                    }
                }
            }
            steps += 1;
        }

        let train_loss = tuning_loss(&current, train)?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                step: steps,
                loss: train_loss,
            });
        }
        let measured = monitor.measure(&current, train, validation)?;
        let m = measured.0;
        losses.push(train_loss);
        monitored.push(m);
        observer(&EpochStats {
            epoch,
            steps,
            train_loss,
            monitor: m,
        });
        if better(monitor_metric, measured, best_monitor) {
            best = current.clone();
            best_monitor = measured;
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.max_steps.is_some_and(|ms| steps >= ms) {
            stop_reason = StopReason::MaxSteps;
            break 'epochs;
        }
        if since_best >= config.patience {
            stop_reason = StopReason::EarlyStopped;
            break 'epochs;
        }
    }

    best.renormalize()?;
    best.provenance = Provenance::Tuned {
        run_id: id,
        temperature: best.temperature,
        initial: Box::new(prompts.provenance.clone()),
    };
    Ok(TuneReport {
        losses,
        monitor: monitored,
        monitor_metric,
        best_epoch,
        best_monitor: best_monitor.0,
        steps,
        stop_reason,
        prompts: best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub train_size: usize,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Test accuracy as a function of the training fraction used for tuning.
///
/// Fraction 0 evaluates `prompts` as-is. Every other fraction draws
/// `repeats` stratified subsamples of `round(fraction * |train|)` examples
/// (at least one), tunes on each without a validation set, and evaluates on
/// `test`. Runs are independent and execute in parallel.
pub fn learning_curve(
    prompts: &PromptSet,
    train: &[LabeledExample],
    test: &[LabeledExample],
    fractions: &[f64],
    config: &TuneConfig,
    repeats: usize,
) -> Result<Vec<CurvePoint>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!("fraction {f} outside [0, 1]")));
    }
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let zero_shot = accuracy(prompts, test)?;
    let jobs: Vec<(usize, usize)> = fractions
        .iter()
        .enumerate()
        .filter(|(_, &f)| f > 0.0)
        .flat_map(|(i, _)| (0..repeats).map(move |r| (i, r)))
        .collect();
    let results: Vec<((usize, usize), f64)> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let n = ((fractions[i] * train.len() as f64).round() as usize).clamp(1, train.len());
            let seed = config.seed.wrapping_add(r as u64);
            let subset = stratified_subsample(train, n, seed)?;
            let cfg = TuneConfig {
                seed,
                ..config.clone()
            };
            let report = tune(prompts, &subset, &[], &cfg)?;
            Ok(((i, r), accuracy(&report.prompts, test)?))
        })
        .collect::<Result<_>>()?;

    Ok(fractions
        .iter()
        .enumerate()
        .map(|(i, &fraction)| {
            let (train_size, accuracies) = if fraction == 0.0 {
                (0, vec![zero_shot])
            } else {
                let n = ((fraction * train.len() as f64).round() as usize).clamp(1, train.len());
                let mut acc: Vec<(usize, f64)> = results
                    .iter()
                    .filter(|((fi, _), _)| *fi == i)
                    .map(|((_, r), a)| (*r, *a))
                    .collect();
                acc.sort_by_key(|(r, _)| *r);
                (n, acc.into_iter().map(|(_, a)| a).collect())
            };
            CurvePoint {
                fraction,
                train_size,
                mean_accuracy: metrics::mean(&accuracies),
                std_accuracy: metrics::sample_std(&accuracies),
                accuracies,
            }
        })
        .collect())
}
