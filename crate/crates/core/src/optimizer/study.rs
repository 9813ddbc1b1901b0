//! Trial bookkeeping and the persistent study log.
//!
//! A study is an append-only sequence of trials over one search space. On
//! disk it is a JSONL file: one header line (space, sampler, budgets)
//! followed by one line per trial event, flushed as written. A later line
//! with an already-seen index supersedes the earlier one — that is how
//! deferred full-budget scores are attached without rewriting the file. A
//! torn final line (from a killed process) is ignored on load, so a study
//! can always be reopened and resumed after a crash.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kde::BandwidthRule;
use super::OptimizerError;
use crate::space::{SearchSpace, WeightVector};

/// Lifecycle state of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialState {
    /// Suggested but not yet evaluated.
    Pending,
    /// Evaluated successfully; `proxy_score` is present and finite.
    Scored,
    /// The evaluator failed; the trial never re-enters the search.
    Failed,
}

/// One evaluated (or attempted) point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    /// Dense, zero-based position in the study.
    pub index: usize,
    /// Suggestion batch this trial belongs to (`index / batch_size`).
    pub batch: usize,
    pub point: WeightVector,
    /// Score under the small proxy evaluation budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_score: Option<f64>,
    /// Score under the full development budget (top candidates only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_score: Option<f64>,
    pub state: TrialState,
    /// Wall-clock time spent building the candidate checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_ms: Option<u64>,
    /// Wall-clock time spent scoring it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_ms: Option<u64>,
}

impl Trial {
    /// Whether this trial contributes a usable proxy score.
    pub fn is_scored(&self) -> bool {
        self.state == TrialState::Scored && self.proxy_score.is_some()
    }
}

/// Sampler configuration for the Parzen-estimator search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    /// Fraction of scored trials treated as "good" (the top quantile).
    pub gamma: f64,
    /// Number of uniform-random startup trials before density modeling.
    pub startup: usize,
    /// Candidate points drawn from the good density per suggestion.
    pub candidates: usize,
    pub bandwidth: BandwidthRule,
    /// Root seed; every trial index derives its own generator from it.
    pub seed: u64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            startup: 20,
            candidates: 24,
            bandwidth: BandwidthRule::Scott,
            seed: 0,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.gamma.is_finite() && self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(OptimizerError::BadSampler(format!(
                "gamma {} outside (0, 1)",
                self.gamma
            )));
        }
        if self.startup == 0 {
            return Err(OptimizerError::BadSampler(
                "startup must be at least 1".to_string(),
            ));
        }
        if self.candidates == 0 {
            return Err(OptimizerError::BadSampler(
                "candidates must be at least 1".to_string(),
            ));
        }
        if let BandwidthRule::Fixed(h) = self.bandwidth {
            if !(h.is_finite() && h >= 0.0) {
                return Err(OptimizerError::BadSampler(format!(
                    "fixed bandwidth {h} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Search budgets persisted with the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    /// Total trials to run.
    pub trials: usize,
    /// Suggestion batch size: densities refresh every `batch` trials.
    pub batch: usize,
    /// How many proxy-best trials are re-scored on the full dev budget.
    pub top_k: usize,
    /// Evaluation sample budget during the search.
    pub proxy_samples: u32,
    /// Evaluation sample budget for the final re-scoring.
    pub dev_samples: u32,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            trials: 100,
            batch: 1,
            top_k: 3,
            proxy_samples: 100,
            dev_samples: 300,
        }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if self.trials == 0 || self.batch == 0 || self.top_k == 0 {
            return Err(OptimizerError::BadBudgets(format!(
                "trials ({}), batch ({}), and top_k ({}) must all be at least 1",
                self.trials, self.batch, self.top_k
            )));
        }
        if self.top_k > self.trials {
            return Err(OptimizerError::BadBudgets(format!(
                "top_k ({}) cannot exceed the trial budget ({})",
                self.top_k, self.trials
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    space: SearchSpace,
    sampler: TpeConfig,
    seed: u64,
    budgets: Budgets,
}

const FORMAT_VERSION: u32 = 1;

/// A search space plus the dense, ordered record of its trials.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    space: SearchSpace,
    sampler: TpeConfig,
    budgets: Budgets,
    trials: Vec<Trial>,
}

impl Study {
    pub fn new(
        space: SearchSpace,
        sampler: TpeConfig,
        budgets: Budgets,
    ) -> Result<Self, OptimizerError> {
        sampler.validate()?;
        budgets.validate()?;
        if budgets.trials < sampler.startup {
            return Err(OptimizerError::BadBudgets(format!(
                "trial budget {} is below the sampler's startup requirement {}",
                budgets.trials, sampler.startup
            )));
        }
        Ok(Self {
            space,
            sampler,
            budgets,
            trials: Vec::new(),
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn sampler(&self) -> &TpeConfig {
        &self.sampler
    }

    pub fn budgets(&self) -> &Budgets {
        &self.budgets
    }

    pub fn seed(&self) -> u64 {
        self.sampler.seed
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Append a trial (`index == len`) or supersede an existing one
    /// (`index < len`). Gaps are rejected, as are non-finite scores on
    /// scored trials and points outside the space.
    pub fn record(&mut self, trial: Trial) -> Result<(), OptimizerError> {
        let index = trial.index;
        if index > self.trials.len() {
            return Err(OptimizerError::IndexGap {
                expected: self.trials.len(),
                got: index,
            });
        }
        if trial.state == TrialState::Scored
            && !trial.proxy_score.is_some_and(f64::is_finite)
        {
            return Err(OptimizerError::NonFiniteScore { index });
        }
        if let Some(dev) = trial.dev_score {
            if !dev.is_finite() {
                return Err(OptimizerError::NonFiniteScore { index });
            }
        }
        if !self.space.contains(&trial.point) {
            return Err(OptimizerError::PointOutOfBounds { index });
        }
        if index == self.trials.len() {
            self.trials.push(trial);
        } else {
            self.trials[index] = trial;
        }
        Ok(())
    }

    /// Scored trials in index order.
    pub fn scored(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.is_scored())
    }

    /// Best trial by proxy score; ties break toward the lower index.
    pub fn best_by_proxy(&self) -> Option<&Trial> {
        self.scored().reduce(|best, t| {
            if t.proxy_score.unwrap_or(f64::NEG_INFINITY)
                > best.proxy_score.unwrap_or(f64::NEG_INFINITY)
            {
                t
            } else {
                best
            }
        })
    }

    /// Best trial by dev score among re-scored trials; ties break low.
    pub fn best_by_dev(&self) -> Option<&Trial> {
        self.trials
            .iter()
            .filter(|t| t.is_scored() && t.dev_score.is_some_and(f64::is_finite))
            .reduce(|best, t| {
                if t.dev_score.unwrap() > best.dev_score.unwrap() {
                    t
                } else {
                    best
                }
            })
    }

    /// The `k` proxy-best scored trials, best first; ties break toward the
    /// lower index.
    pub fn top_k_by_proxy(&self, k: usize) -> Vec<&Trial> {
        let mut scored: Vec<&Trial> = self.scored().collect();
        scored.sort_by(|a, b| {
            b.proxy_score
                .partial_cmp(&a.proxy_score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.index.cmp(&b.index))
        });
        scored.truncate(k);
        scored
    }

    /// Write the whole study (header plus all trials) to a fresh file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), OptimizerError> {
        let mut writer = StudyWriter::create(path, self)?;
        for trial in &self.trials {
            writer.append(trial)?;
        }
        Ok(())
    }

    /// Load a study from a JSONL log.
    ///
    /// An unparseable *final* line is discarded — that is what a log torn by
    /// a killed process looks like. Corruption anywhere else is an error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OptimizerError> {
        let path = path.as_ref();
        let contents = std::fs::read_to_string(path)?;
        let corrupt = |line_no: usize, what: String| OptimizerError::Corrupt {
            path: path.display().to_string(),
            line: line_no,
            what,
        };

        let mut lines = contents
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (header_no, header_line) = lines
            .next()
            .ok_or_else(|| corrupt(1, "empty study file".to_string()))?;
        let header: Header = serde_json::from_str(header_line)
            .map_err(|e| corrupt(header_no + 1, format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(corrupt(
                header_no + 1,
                format!("unsupported format version {}", header.version),
            ));
        }
        let mut study = Study::new(header.space, header.sampler, header.budgets)?;

        let trial_lines: Vec<(usize, &str)> = lines.collect();
        for (pos, (line_no, line)) in trial_lines.iter().enumerate() {
            match serde_json::from_str::<Trial>(line) {
                Ok(trial) => study
                    .record(trial)
                    .map_err(|e| corrupt(line_no + 1, e.to_string()))?,
                Err(e) => {
                    if pos + 1 == trial_lines.len() {
                        break; // torn tail from a killed writer
                    }
                    return Err(corrupt(line_no + 1, format!("bad trial line: {e}")));
                }
            }
        }
        Ok(study)
    }
}

/// Append-only writer for a study log; every line is flushed immediately.
pub struct StudyWriter {
    out: BufWriter<File>,
}

impl StudyWriter {
    /// Create a fresh log at `path`, truncating anything there, and write
    /// the header for `study`.
    pub fn create(path: impl AsRef<Path>, study: &Study) -> Result<Self, OptimizerError> {
        let file = File::create(path)?;
        let mut writer = Self {
            out: BufWriter::new(file),
        };
        let header = Header {
            version: FORMAT_VERSION,
            space: study.space.clone(),
            sampler: study.sampler.clone(),
            seed: study.seed(),
            budgets: study.budgets,
        };
        writer.write_line(&serde_json::to_string(&header).expect("header serializes"))?;
        Ok(writer)
    }

    /// Reopen an existing log for appending (after [`Study::load`]).
    pub fn append_to(path: impl AsRef<Path>) -> Result<Self, OptimizerError> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    /// Append one trial event and flush.
    pub fn append(&mut self, trial: &Trial) -> Result<(), OptimizerError> {
        self.write_line(&serde_json::to_string(trial).expect("trial serializes"))
    }

    fn write_line(&mut self, line: &str) -> Result<(), OptimizerError> {
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
