//! Black-box scoring of candidate checkpoints.
//!
//! The search treats evaluation as an opaque function from a merged
//! checkpoint to a scalar score (higher is better). Two families are
//! provided:
//!
//! * [`evaluate_external`] runs a user-supplied shell command against a
//!   merged checkpoint file and parses the score from its final stdout line —
//!   either a bare decimal or a JSON object
//!   `{"score": s, "sub_scores": {...}}`.
//! * [`SyntheticObjective`] scores points analytically, for tests, search
//!   rehearsal, and optimizer benchmarking, without any subprocess.
//!
//! The [`Objective`] trait is what the search loop drives; it reports the
//! evaluation result together with how long the merge step took, so runs can
//! account merge time and evaluation time separately.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::WeightVector;
use crate::tensor::TensorMap;
use crate::vectors::{compose, ComposeOptions, DistributionVector};

/// Which evaluation budget a request runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// The small in-search budget.
    Proxy,
    /// The full budget used to re-score the leading candidates.
    Dev,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Proxy => "proxy",
            EvalMode::Dev => "dev",
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One evaluation request from the search loop.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub point: WeightVector,
    pub mode: EvalMode,
    /// Sample budget the evaluator should spend (passed through verbatim).
    pub sample_budget: u32,
    /// Scratch directory reserved for this trial's artifacts.
    pub workdir: PathBuf,
}

/// A successful evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub score: f64,
    /// Optional per-task breakdown; its mean must equal `score`.
    pub sub_scores: Option<BTreeMap<String, f64>>,
    /// Wall-clock evaluation time.
    pub wall_ms: u64,
}

/// Errors raised by evaluation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("failed to run evaluator: {0}")]
    SpawnFailure(#[from] std::io::Error),
    #[error("evaluator exceeded its {seconds}s timeout and was killed")]
    Timeout { seconds: u64 },
    #[error("evaluator exited with status {code}: {stderr_tail}")]
    CommandExit { code: i32, stderr_tail: String },
    #[error("cannot parse evaluator output: {0}")]
    UnparseableOutput(String),
    #[error("evaluator returned a non-finite score ({0})")]
    NonFiniteScore(f64),
    #[error("invalid evaluation request: {0}")]
    InvalidRequest(String),
    #[error("trial workspace failure: {0}")]
    Workspace(String),
}

/// Largest allowed disagreement between `score` and the mean of
/// `sub_scores`.
pub const SUB_SCORE_TOLERANCE: f64 = 1e-9;

/// Run an external evaluator command against a merged checkpoint.
///
/// `command_template` may contain `{model}`, `{mode}`, and `{budget}`
/// placeholders; the command also receives `OPTIMERGE_MODE` and
/// `OPTIMERGE_BUDGET` in its environment. The score is parsed from the last
/// non-empty stdout line. The subprocess is killed once `timeout` elapses,
/// so a wedged evaluator can never hang the search.
pub fn evaluate_external(
    request: &EvalRequest,
    merged_model: &Path,
    command_template: &str,
    timeout: Duration,
) -> Result<EvalResult, EvalError> {
    let command = command_template
        .replace("{model}", &merged_model.display().to_string())
        .replace("{mode}", request.mode.as_str())
        .replace("{budget}", &request.sample_budget.to_string());

    let start = Instant::now();
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .env("OPTIMERGE_MODE", request.mode.as_str())
        .env("OPTIMERGE_BUDGET", request.sample_budget.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;

    // Drain both pipes on their own threads so a chatty evaluator cannot
    // deadlock against a full pipe while we wait for it.
    let stdout_rx = drain_on_thread(child.stdout.take().expect("stdout is piped"));
    let stderr_rx = drain_on_thread(child.stderr.take().expect("stderr is piped"));

    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(EvalError::Timeout {
                seconds: timeout.as_secs(),
            });
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let wall_ms = start.elapsed().as_millis() as u64;

    let collect = |rx: mpsc::Receiver<Vec<u8>>| -> String {
        // The process has exited; its pipe writers are gone in any sane
        // case. The grace period guards against an evaluator that leaked
        // the pipe to a background child.
        rx.recv_timeout(Duration::from_secs(10))
            .map(|bytes| String::from_utf8_lossy(&bytes).into_owned())
            .unwrap_or_default()
    };
    let stdout = collect(stdout_rx);
    let stderr = collect(stderr_rx);

    if !status.success() {
        let tail_start = stderr
            .char_indices()
            .rev()
            .nth(511)
            .map_or(0, |(byte, _)| byte);
        return Err(EvalError::CommandExit {
            code: status.code().unwrap_or(-1),
            stderr_tail: stderr[tail_start..].trim().to_string(),
        });
    }

    let (score, sub_scores) = parse_score_output(&stdout)?;
    Ok(EvalResult {
        score,
        sub_scores,
        wall_ms,
    })
}

fn drain_on_thread(mut pipe: impl std::io::Read + Send + 'static) -> mpsc::Receiver<Vec<u8>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut buffer = Vec::new();
        let _ = std::io::Read::read_to_end(&mut pipe, &mut buffer);
        let _ = tx.send(buffer);
    });
    rx
}

/// Parse the last non-empty line of evaluator stdout: a bare decimal score
/// or a JSON object with `score` and optional `sub_scores`.
fn parse_score_output(
    stdout: &str,
) -> Result<(f64, Option<BTreeMap<String, f64>>), EvalError> {
    let line = stdout
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| EvalError::UnparseableOutput("evaluator produced no output".into()))?;

    let (score, sub_scores) = if let Ok(serde_json::Value::Object(obj)) =
        serde_json::from_str::<serde_json::Value>(line)
    {
        let score = obj
            .get("score")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| {
                EvalError::UnparseableOutput(format!(
                    "JSON output is missing a numeric \"score\" field: {line}"
                ))
            })?;
        let sub_scores = match obj.get("sub_scores") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::Object(subs)) if subs.is_empty() => None,
            Some(serde_json::Value::Object(subs)) => {
                let mut parsed = BTreeMap::new();
                for (name, value) in subs {
                    let v = value.as_f64().ok_or_else(|| {
                        EvalError::UnparseableOutput(format!(
                            "sub_scores entry {name:?} is not numeric"
                        ))
                    })?;
                    parsed.insert(name.clone(), v);
                }
                Some(parsed)
            }
            Some(other) => {
                return Err(EvalError::UnparseableOutput(format!(
                    "sub_scores must be an object, got {other}"
                )))
            }
        };
        (score, sub_scores)
    } else if let Ok(score) = line.parse::<f64>() {
        (score, None)
    } else {
        return Err(EvalError::UnparseableOutput(line.to_string()));
    };

    if !score.is_finite() {
        return Err(EvalError::NonFiniteScore(score));
    }
    if let Some(subs) = &sub_scores {
        let mean: f64 = subs.values().sum::<f64>() / subs.len() as f64;
        if !mean.is_finite() || (mean - score).abs() > SUB_SCORE_TOLERANCE {
            return Err(EvalError::UnparseableOutput(format!(
                "sub_scores mean {mean} disagrees with score {score}"
            )));
        }
    }
    Ok((score, sub_scores))
}

// --- synthetic objectives --------------------------------------------------

/// Hidden-checkpoint recovery target: composes the candidate point over real
/// vectors and scores by (negated) distance to a planted checkpoint.
#[derive(Debug, Clone)]
pub struct HiddenTargetObjective {
    pub base: TensorMap,
    pub it_vec: Option<DistributionVector>,
    pub cpt_vecs: Vec<DistributionVector>,
    pub target: TensorMap,
}

/// Analytic objectives for tests and optimizer rehearsal.
#[derive(Debug, Clone)]
pub enum SyntheticObjective {
    /// A needle-sharp ridge on the first coordinate at 0.6 (width 0.05)
    /// times broad Gaussian falloff (width 0.3) on every other coordinate.
    /// Random search rarely lands on the ridge; a model-based sampler should.
    SharpRidge,
    /// `-(x - center)^2` summed over coordinates.
    Quadratic { center: Vec<f64> },
    /// Negative L2 distance between the composed checkpoint and a target.
    HiddenTarget(Box<HiddenTargetObjective>),
}

/// Score a point analytically. Pure: equal points yield equal scores.
pub fn evaluate_synthetic(
    objective: &SyntheticObjective,
    point: &WeightVector,
) -> Result<EvalResult, EvalError> {
    let start = Instant::now();
    let score = match objective {
        SyntheticObjective::SharpRidge => {
            if point.is_empty() {
                return Err(EvalError::InvalidRequest(
                    "sharp ridge needs at least one coordinate".into(),
                ));
            }
            let ridge = ((point.values[0] - 0.6) / 0.05).powi(2);
            let falloff: f64 = point.values[1..]
                .iter()
                .map(|x| (x / 0.3).powi(2))
                .sum();
            (-(ridge + falloff)).exp()
        }
        SyntheticObjective::Quadratic { center } => {
            if center.len() != point.len() {
                return Err(EvalError::InvalidRequest(format!(
                    "quadratic center has {} coordinates, point has {}",
                    center.len(),
                    point.len()
                )));
            }
            -point
                .values
                .iter()
                .zip(center)
                .map(|(x, c)| (x - c).powi(2))
                .sum::<f64>()
        }
        SyntheticObjective::HiddenTarget(hidden) => {
            let merged = compose(
                &hidden.base,
                hidden.it_vec.as_ref(),
                &hidden.cpt_vecs.iter().collect::<Vec<_>>(),
                point,
                &ComposeOptions::default(),
            )
            .map_err(|e| EvalError::InvalidRequest(e.to_string()))?;
            -l2_distance(&merged, &hidden.target)?
        }
    };
    Ok(EvalResult {
        score,
        sub_scores: None,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

fn l2_distance(a: &TensorMap, b: &TensorMap) -> Result<f64, EvalError> {
    if a.names().ne(b.names()) {
        return Err(EvalError::InvalidRequest(
            "checkpoints carry different tensor names".into(),
        ));
    }
    let mut total = 0.0f64;
    for (name, ta) in a.iter() {
        let tb = b.get(name).expect("names match");
        if ta.shape() != tb.shape() {
            return Err(EvalError::InvalidRequest(format!(
                "tensor {name:?} shapes differ"
            )));
        }
        for (x, y) in ta.to_f32().iter().zip(tb.to_f32()) {
            let d = *x as f64 - y as f64;
            total += d * d;
        }
    }
    Ok(total.sqrt())
}

// --- the search-facing trait ------------------------------------------------

/// Evaluation outcome plus the merge cost that produced the artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub result: EvalResult,
    /// Wall-clock time spent composing the candidate checkpoint (zero for
    /// purely analytic objectives).
    pub merge_ms: u64,
}

/// What the search loop drives. Implementations are shared across worker
/// threads, hence `Sync`.
pub trait Objective: Sync {
    fn evaluate(&self, request: &EvalRequest) -> Result<TrialOutcome, EvalError>;
}

impl Objective for SyntheticObjective {
    fn evaluate(&self, request: &EvalRequest) -> Result<TrialOutcome, EvalError> {
        match self {
            SyntheticObjective::HiddenTarget(_) => {
                // Split out the compose cost so timing reports stay honest.
                let merge_start = Instant::now();
                let result = evaluate_synthetic(self, &request.point)?;
                let total = merge_start.elapsed().as_millis() as u64;
                Ok(TrialOutcome {
                    merge_ms: total.saturating_sub(result.wall_ms.min(total)),
                    result,
                })
            }
            _ => Ok(TrialOutcome {
                result: evaluate_synthetic(self, &request.point)?,
                merge_ms: 0,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;
    use crate::vectors::{extract, ExclusionRule};

    fn request(point: Vec<f64>, mode: EvalMode) -> EvalRequest {
        EvalRequest {
            point: point.into(),
            mode,
            sample_budget: 100,
            workdir: std::env::temp_dir(),
        }
    }

    fn run_external(script: &str, mode: EvalMode) -> Result<EvalResult, EvalError> {
        evaluate_external(
            &request(vec![0.5], mode),
            Path::new("/tmp/model.st"),
            script,
            Duration::from_secs(20),
        )
    }

    #[test]
    fn parses_bare_decimal_from_last_nonempty_line() {
        let result = run_external("echo 'log line'; echo 0.5; echo ''", EvalMode::Proxy).unwrap();
        assert_eq!(result.score, 0.5);
        assert_eq!(result.sub_scores, None);
    }

    #[test]
    fn parses_json_with_consistent_sub_scores() {
        let result = run_external(
            r#"echo '{"score":0.5,"sub_scores":{"a":0.25,"b":0.75}}'"#,
            EvalMode::Dev,
        )
        .unwrap();
        assert_eq!(result.score, 0.5);
        let subs = result.sub_scores.unwrap();
        assert_eq!(subs["a"], 0.25);
        assert_eq!(subs["b"], 0.75);
    }

    #[test]
    fn rejects_sub_scores_that_disagree_with_the_mean() {
        let err = run_external(
            r#"echo '{"score":0.9,"sub_scores":{"a":0.25,"b":0.75}}'"#,
            EvalMode::Proxy,
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::UnparseableOutput(_)), "{err}");
    }

    #[test]
    fn substitutes_placeholders_and_env() {
        let result = run_external(
            "test \"$OPTIMERGE_MODE\" = proxy || exit 9; echo {budget}",
            EvalMode::Proxy,
        )
        .unwrap();
        assert_eq!(result.score, 100.0);
        let result = run_external("echo $OPTIMERGE_BUDGET", EvalMode::Dev).unwrap();
        assert_eq!(result.score, 100.0);
    }

    #[test]
    fn model_placeholder_expands_to_the_checkpoint_path() {
        let result = evaluate_external(
            &request(vec![0.5], EvalMode::Proxy),
            Path::new("/tmp/xyz.st"),
            "test {model} = /tmp/xyz.st && echo 1.0",
            Duration::from_secs(20),
        )
        .unwrap();
        assert_eq!(result.score, 1.0);
    }

    #[test]
    fn nonzero_exit_is_reported_with_stderr() {
        let err = run_external("echo oops >&2; exit 7", EvalMode::Proxy).unwrap_err();
        match err {
            EvalError::CommandExit { code, stderr_tail } => {
                assert_eq!(code, 7);
                assert_eq!(stderr_tail, "oops");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn unparseable_output_is_an_error() {
        let err = run_external("echo not-a-score", EvalMode::Proxy).unwrap_err();
        assert!(matches!(err, EvalError::UnparseableOutput(_)), "{err}");
        let err = run_external("true", EvalMode::Proxy).unwrap_err();
        assert!(matches!(err, EvalError::UnparseableOutput(_)), "{err}");
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        for script in ["echo nan", "echo inf", r#"echo '{"score":1e999}'"#] {
            let err = run_external(script, EvalMode::Proxy).unwrap_err();
            assert!(
                matches!(
                    err,
                    EvalError::NonFiniteScore(_) | EvalError::UnparseableOutput(_)
                ),
                "{script}: {err}"
            );
        }
        // Specifically, a plain NaN must hit the finiteness check.
        assert!(matches!(
            run_external("echo nan", EvalMode::Proxy).unwrap_err(),
            EvalError::NonFiniteScore(_)
        ));
    }

    #[test]
    fn timeout_kills_the_evaluator_promptly() {
        let start = Instant::now();
        let err = evaluate_external(
            &request(vec![0.5], EvalMode::Proxy),
            Path::new("/tmp/model.st"),
            "sleep 30; echo 1.0",
            Duration::from_millis(300),
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::Timeout { .. }), "{err}");
        assert!(
            start.elapsed() < Duration::from_secs(5),
            "timeout took {:?}",
            start.elapsed()
        );
    }

    #[test]
    fn sharp_ridge_matches_its_formula() {
        let at_peak = evaluate_synthetic(&SyntheticObjective::SharpRidge, &vec![0.6].into())
            .unwrap()
            .score;
        assert_eq!(at_peak, 1.0);
        // At the edge of the first coordinate's range the ridge term alone
        // drives the value down to exp(-36).
        let off_ridge =
            evaluate_synthetic(&SyntheticObjective::SharpRidge, &vec![0.3].into())
                .unwrap()
                .score;
        assert!((off_ridge / (-36.0f64).exp() - 1.0).abs() < 1e-12);
        // Other coordinates multiply in their falloff.
        let with_cpt = evaluate_synthetic(
            &SyntheticObjective::SharpRidge,
            &vec![0.6, 0.3, 0.0].into(),
        )
        .unwrap()
        .score;
        assert!((with_cpt - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn quadratic_peaks_at_its_center() {
        let objective = SyntheticObjective::Quadratic {
            center: vec![0.25, 0.75],
        };
        assert_eq!(
            evaluate_synthetic(&objective, &vec![0.25, 0.75].into())
                .unwrap()
                .score,
            0.0
        );
        let off = evaluate_synthetic(&objective, &vec![0.35, 0.75].into())
            .unwrap()
            .score;
        assert!((off - (-0.01)).abs() < 1e-12);
        assert!(matches!(
            evaluate_synthetic(&objective, &vec![0.1].into()).unwrap_err(),
            EvalError::InvalidRequest(_)
        ));
    }

    #[test]
    fn hidden_target_scores_zero_at_the_planted_point() {
        let mut base = TensorMap::new();
        base.insert("w", TensorData::from_f32(vec![4], &[0.0; 4]).unwrap())
            .unwrap();
        let mut tuned = TensorMap::new();
        tuned
            .insert("w", TensorData::from_f32(vec![4], &[1.0, -1.0, 0.5, 2.0]).unwrap())
            .unwrap();
        let vec = extract(&tuned, &base, &ExclusionRule::none(), "b", "s").unwrap();
        let target = compose(
            &base,
            None,
            &[&vec],
            &vec![0.4].into(),
            &ComposeOptions::default(),
        )
        .unwrap();
        let objective = SyntheticObjective::HiddenTarget(Box::new(HiddenTargetObjective {
            base,
            it_vec: None,
            cpt_vecs: vec![vec],
            target,
        }));
        let at_target = evaluate_synthetic(&objective, &vec![0.4].into())
            .unwrap()
            .score;
        assert_eq!(at_target, 0.0);
        let away = evaluate_synthetic(&objective, &vec![0.9].into()).unwrap().score;
        assert!(away < -0.5);
    }

    #[test]
    fn synthetic_evaluation_is_pure() {
        let point: WeightVector = vec![0.61, 0.2, 0.1].into();
        let a = evaluate_synthetic(&SyntheticObjective::SharpRidge, &point).unwrap();
        let b = evaluate_synthetic(&SyntheticObjective::SharpRidge, &point).unwrap();
        assert_eq!(a.score, b.score);
    }
}
