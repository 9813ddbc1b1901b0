//! The search loop: batched suggestion, evaluation, recording, and the
//! final full-budget re-scoring of the leading candidates.
//!
//! Batch boundaries are a pure function of the trial index (`index /
//! batch`), and every suggestion is a pure function of the root seed, the
//! trial index, and the batch's frozen study prefix. A search killed at any
//! point and reloaded from its log therefore continues exactly where it
//! stopped and lands on the same final answer as an uninterrupted run.
//!
//! Evaluations inside a batch may run on worker threads; results are
//! recorded in ascending trial index regardless of completion order, so
//! parallelism never changes the log.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::evaluator::{EvalError, EvalMode, EvalRequest, Objective, TrialOutcome};
use crate::space::WeightVector;

use super::study::{Study, StudyWriter, Trial, TrialState};
use super::tpe::suggest_frozen;
use super::OptimizerError;

/// Execution controls for [`run_search`] (everything statistical lives in
/// the study's sampler config and budgets).
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Worker threads per evaluation batch (1 = fully sequential).
    pub workers: usize,
    /// Root scratch directory; each trial gets a subdirectory.
    pub workdir: PathBuf,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            workdir: std::env::temp_dir(),
        }
    }
}

/// Aggregate per-trial wall-clock times for each phase, plus the true
/// end-to-end wall time. With parallel workers the per-phase sums can exceed
/// `total_ms` — they add up time spent concurrently.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PhaseTimings {
    /// Time spent proposing points.
    pub suggest_ms: u64,
    /// Time the objective spent building candidate checkpoints.
    pub merge_ms: u64,
    /// Time spent scoring under the proxy budget.
    pub proxy_eval_ms: u64,
    /// Time spent re-scoring the leaders under the dev budget.
    pub dev_eval_ms: u64,
    /// Wall-clock time for the whole call.
    pub total_ms: u64,
}

/// What a search run produced.
#[derive(Debug, Clone, Serialize)]
pub struct SearchReport {
    /// The returned winner: dev-best when any trial was dev-scored,
    /// otherwise proxy-best.
    pub best: Option<Trial>,
    /// Best trial by proxy score, for comparison against `best`.
    pub best_by_proxy: Option<Trial>,
    /// Trials evaluated by this call (a resumed run reports only its own).
    pub newly_run: usize,
    /// `(trial index, message)` for every failed evaluation this call.
    pub failures: Vec<(usize, String)>,
    pub timings: PhaseTimings,
}

fn ms_since(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// Run (or resume) a study to its trial budget, then re-score the top
/// candidates on the dev budget and pick the winner.
///
/// Every recorded trial is appended to `writer` immediately, so a killed
/// process leaves a loadable log behind. Individual evaluation failures
/// become `Failed` trials and the search continues; only a batch with no
/// surviving trial aborts the run.
pub fn run_search<E: Objective + ?Sized>(
    study: &mut Study,
    objective: &E,
    mut writer: Option<&mut StudyWriter>,
    options: &RunOptions,
) -> Result<SearchReport, OptimizerError> {
    let run_start = Instant::now();
    let budgets = *study.budgets();
    let mut timings = PhaseTimings::default();
    let mut failures: Vec<(usize, String)> = Vec::new();
    let mut newly_run = 0usize;

    while study.len() < budgets.trials {
        let next = study.len();
        let batch_id = next / budgets.batch;
        let frozen = batch_id * budgets.batch;
        let end = ((batch_id + 1) * budgets.batch).min(budgets.trials);

        let suggest_start = Instant::now();
        let points: Vec<WeightVector> = (next..end)
            .map(|index| suggest_frozen(study, frozen, index))
            .collect::<Result<_, _>>()?;
        timings.suggest_ms += ms_since(suggest_start);

        let requests: Vec<EvalRequest> = (next..end)
            .zip(&points)
            .map(|(index, point)| EvalRequest {
                point: point.clone(),
                mode: EvalMode::Proxy,
                sample_budget: budgets.proxy_samples,
                workdir: options.workdir.join(format!("trial_{index:05}")),
            })
            .collect();
        let outcomes = evaluate_all(objective, &requests, options.workers);

        for (offset, outcome) in outcomes.into_iter().enumerate() {
            let index = next + offset;
            let point = points[offset].clone();
            let trial = match outcome {
                Ok(outcome) => {
                    timings.merge_ms += outcome.merge_ms;
                    timings.proxy_eval_ms += outcome.result.wall_ms;
                    Trial {
                        index,
                        batch: batch_id,
                        point,
                        proxy_score: Some(outcome.result.score),
                        dev_score: None,
                        state: TrialState::Scored,
                        merge_ms: Some(outcome.merge_ms),
                        eval_ms: Some(outcome.result.wall_ms),
                    }
                }
                Err(err) => {
                    failures.push((index, err.to_string()));
                    Trial {
                        index,
                        batch: batch_id,
                        point,
                        proxy_score: None,
                        dev_score: None,
                        state: TrialState::Failed,
                        merge_ms: None,
                        eval_ms: None,
                    }
                }
            };
            study.record(trial)?;
            if let Some(w) = writer.as_deref_mut() {
                w.append(&study.trials()[index])?;
            }
            newly_run += 1;
        }

        let batch_all_failed = study.trials()[frozen..end]
            .iter()
            .all(|t| t.state == TrialState::Failed);
        if batch_all_failed {
            return Err(OptimizerError::BatchExhausted { batch: batch_id });
        }
    }

    // Re-score the proxy-best K on the full dev budget. Already-amended
    // trials (from a resumed run) are skipped; a dev failure keeps the
    // trial's proxy score and is reported, not fatal.
    let leaders: Vec<usize> = study
        .top_k_by_proxy(budgets.top_k)
        .into_iter()
        .map(|t| t.index)
        .collect();
    for index in leaders {
        if study.trials()[index].dev_score.is_some() {
            continue;
        }
        let request = EvalRequest {
            point: study.trials()[index].point.clone(),
            mode: EvalMode::Dev,
            sample_budget: budgets.dev_samples,
            workdir: options.workdir.join(format!("dev_{index:05}")),
        };
        let dev_start = Instant::now();
        match objective.evaluate(&request) {
            Ok(outcome) => {
                timings.merge_ms += outcome.merge_ms;
                timings.dev_eval_ms += outcome.result.wall_ms;
                let mut amended = study.trials()[index].clone();
                amended.dev_score = Some(outcome.result.score);
                amended.merge_ms =
                    Some(amended.merge_ms.unwrap_or(0) + outcome.merge_ms);
                amended.eval_ms =
                    Some(amended.eval_ms.unwrap_or(0) + outcome.result.wall_ms);
                study.record(amended)?;
                if let Some(w) = writer.as_deref_mut() {
                    w.append(&study.trials()[index])?;
                }
            }
            Err(err) => {
                timings.dev_eval_ms += ms_since(dev_start);
                failures.push((index, format!("dev re-score failed: {err}")));
            }
        }
    }

    timings.total_ms = ms_since(run_start);
    Ok(SearchReport {
        best: study.best_by_dev().or_else(|| study.best_by_proxy()).cloned(),
        best_by_proxy: study.best_by_proxy().cloned(),
        newly_run,
        failures,
        timings,
    })
}

/// Evaluate a batch, possibly on worker threads. The result vector is
/// aligned with `requests` whatever order workers finish in.
fn evaluate_all<E: Objective + ?Sized>(
    objective: &E,
    requests: &[EvalRequest],
    workers: usize,
) -> Vec<Result<TrialOutcome, EvalError>> {
    let n = requests.len();
    if workers <= 1 || n <= 1 {
        return requests.iter().map(|r| objective.evaluate(r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<TrialOutcome, EvalError>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let outcome = objective.evaluate(&requests[i]);
                *slots[i].lock().expect("slot lock never poisoned") = Some(outcome);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("slot lock never poisoned")
                .expect("every index below n is claimed by exactly one worker")
        })
        .collect()
}
