//! Background re-tuning jobs with pollable progress.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use offscan_core::prompt::{tune_with_observer, EpochStats, PromptSet, StopReason, TuneConfig, TuneReport};
use offscan_core::smid::{class_counts, LabeledExample};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::run::Run;

pub const DEFAULT_MIN_VERDICTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetuneResult {
    /// Registry version holding the tuned prompts (not activated).
    pub version: u32,
    pub examples: usize,
    pub losses: Vec<f64>,
    pub best_epoch: usize,
    pub steps: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobStatus {
    pub id: String,
    pub run: String,
    pub state: JobState,
    pub epochs: Vec<EpochStats>,
    pub result: Option<RetuneResult>,
    pub error: Option<String>,
}

#[derive(Default)]
pub struct Jobs {
    next: AtomicU64,
    jobs: Mutex<BTreeMap<String, JobStatus>>,
}

impl Jobs {
    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, JobStatus>> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn create(&self, run: &str) -> String {
        let id = format!("job-{}", self.next.fetch_add(1, Ordering::Relaxed) + 1);
        self.lock().insert(
            id.clone(),
            JobStatus {
                id: id.clone(),
                run: run.to_string(),
                state: JobState::Running,
                epochs: Vec::new(),
                result: None,
                error: None,
            },
        );
        id
    }

    pub fn get(&self, id: &str) -> ServiceResult<JobStatus> {
        self.lock()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownJob(id.to_string()))
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(j) = self.lock().get_mut(id) {
            f(j);
        }
    }
}

/// Checks the verdict minimum and gathers the training set.
pub fn retune_inputs(run: &Run, min_verdicts: usize) -> ServiceResult<(PromptSet, Vec<LabeledExample>)> {
    let examples = run.verdict_examples()?;
    let (non_offensive, offensive) = class_counts(&examples);
    if examples.len() < min_verdicts.max(1) || non_offensive == 0 || offensive == 0 {
        return Err(ServiceError::InsufficientVerdicts {
            required: min_verdicts.max(1),
            available: examples.len(),
        });
    }
    Ok((run.registry().active().clone(), examples))
}

/// Tunes a copy of the active prompts on verdict labels alone, starting
/// from the active set, and stores the result as a new inactive version.
pub fn retune_from_verdicts(
    run: &Run,
    config: &TuneConfig,
    min_verdicts: usize,
    observer: &mut dyn FnMut(&EpochStats),
) -> ServiceResult<(u32, TuneReport)> {
    let (initial, examples) = retune_inputs(run, min_verdicts)?;
    let report = tune_with_observer(&initial, &examples, &[], config, observer)?;
    let version = run.registry_mut().add(report.prompts.clone())?;
    Ok((version, report))
}

/// Starts a re-tune on a blocking thread and returns its job id at once.
pub fn spawn_retune(
    jobs: Arc<Jobs>,
    run: Arc<Run>,
    config: TuneConfig,
    min_verdicts: usize,
) -> ServiceResult<String> {
    config.validate()?;
    // Fail fast on the common precondition instead of a failed job.
    let (_, examples) = retune_inputs(&run, min_verdicts)?;
    let n = examples.len();
    let id = jobs.create(&run.id);
    let job = id.clone();
    tokio::task::spawn_blocking(move || {
        let mut observe = |e: &EpochStats| jobs.update(&job, |j| j.epochs.push(*e));
        let outcome = retune_from_verdicts(&run, &config, min_verdicts, &mut observe);
        jobs.update(&job, |j| match outcome {
            Ok((version, report)) => {
                j.state = JobState::Succeeded;
                j.result = Some(RetuneResult {
                    version,
                    examples: n,
                    losses: report.losses,
                    best_epoch: report.best_epoch,
                    steps: report.steps,
                    stop_reason: report.stop_reason,
                });
            }
            Err(e) => {
                j.state = JobState::Failed;
                j.error = Some(e.to_string());
            }
        });
    });
    Ok(id)
}
