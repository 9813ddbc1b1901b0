//! Exhaustive grid baseline over the search space.
//!
//! The grid enumerates every combination of `per_dim` evenly spaced values
//! per dimension in row-major order (first dimension outermost) and scores
//! them sequentially. It exists as a budget-hungry reference point for the
//! model-based sampler, so it deliberately has no parallelism or cleverness
//! — just a cap to stop accidental combinatorial explosions.

use std::time::Instant;

use crate::evaluator::{EvalMode, EvalRequest, Objective};
use crate::space::{SearchSpace, WeightVector};

use super::study::{Trial, TrialState};
use super::OptimizerError;

/// Controls for [`grid_search`].
#[derive(Debug, Clone)]
pub struct GridOptions {
    /// Refuse to enumerate more than this many points (`None` = unlimited).
    pub cap: Option<usize>,
    /// Sample budget passed to every evaluation.
    pub proxy_samples: u32,
    /// Scratch directory handed to the objective.
    pub workdir: std::path::PathBuf,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            cap: Some(DEFAULT_GRID_CAP),
            proxy_samples: 100,
            workdir: std::env::temp_dir(),
        }
    }
}

/// Default ceiling on enumerated grid points.
pub const DEFAULT_GRID_CAP: usize = 10_000;

/// What a grid run produced.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GridReport {
    /// One trial per grid point, in enumeration order.
    pub trials: Vec<Trial>,
    /// Index into `trials` of the best scored point, if any scored.
    pub best: Option<usize>,
    /// `(trial index, error message)` for every failed evaluation.
    pub failures: Vec<(usize, String)>,
    /// Total wall-clock evaluation time.
    pub eval_ms: u64,
    /// Total wall-clock merge time reported by the objective.
    pub merge_ms: u64,
}

impl GridReport {
    pub fn best_trial(&self) -> Option<&Trial> {
        self.best.map(|i| &self.trials[i])
    }
}

/// Enumerate the full grid: `per_dim` evenly spaced values in every
/// dimension (endpoints included), combined in row-major order with the
/// first dimension varying slowest.
pub fn grid_points(
    space: &SearchSpace,
    per_dim: usize,
    cap: Option<usize>,
) -> Result<Vec<WeightVector>, OptimizerError> {
    if per_dim < 2 {
        return Err(OptimizerError::BadSampler(format!(
            "a grid needs at least 2 points per dimension, got {per_dim}"
        )));
    }
    let total = (per_dim as u128)
        .checked_pow(space.len() as u32)
        .ok_or(OptimizerError::BudgetOverflow {
            points: u128::MAX,
            cap: cap.map_or(u128::MAX, |c| c as u128),
        })?;
    let hard_cap = cap.map_or(usize::MAX, |c| c) as u128;
    if total > hard_cap {
        return Err(OptimizerError::BudgetOverflow {
            points: total,
            cap: hard_cap,
        });
    }

    let levels: Vec<Vec<f64>> = space
        .dims()
        .iter()
        .map(|dim| {
            (0..per_dim)
                .map(|i| {
                    if i == 0 {
                        dim.low
                    } else if i == per_dim - 1 {
                        dim.high
                    } else {
                        let frac = i as f64 / (per_dim - 1) as f64;
                        (dim.low + dim.width() * frac).clamp(dim.low, dim.high)
                    }
                })
                .collect()
        })
        .collect();

    let mut points = Vec::with_capacity(total as usize);
    let mut odometer = vec![0usize; space.len()];
    loop {
        points.push(WeightVector::from(
            odometer
                .iter()
                .zip(&levels)
                .map(|(&i, level)| level[i])
                .collect::<Vec<_>>(),
        ));
        // Advance the last dimension first (row-major order).
        let mut pos = space.len();
        loop {
            if pos == 0 {
                return Ok(points);
            }
            pos -= 1;
            odometer[pos] += 1;
            if odometer[pos] < per_dim {
                break;
            }
            odometer[pos] = 0;
        }
    }
}

/// Score every grid point sequentially. Individual evaluation failures are
/// recorded as failed trials and the sweep continues.
pub fn grid_search<E: Objective + ?Sized>(
    space: &SearchSpace,
    objective: &E,
    per_dim: usize,
    options: &GridOptions,
) -> Result<GridReport, OptimizerError> {
    let points = grid_points(space, per_dim, options.cap)?;
    let mut trials: Vec<Trial> = Vec::with_capacity(points.len());
    let mut best: Option<usize> = None;
    let mut failures = Vec::new();
    let mut eval_ms = 0u64;
    let mut merge_ms = 0u64;

    for (index, point) in points.into_iter().enumerate() {
        let request = EvalRequest {
            point: point.clone(),
            mode: EvalMode::Proxy,
            sample_budget: options.proxy_samples,
            workdir: options.workdir.join(format!("grid_{index:05}")),
        };
        let started = Instant::now();
        let trial = match objective.evaluate(&request) {
            Ok(outcome) => {
                eval_ms += outcome.result.wall_ms;
                merge_ms += outcome.merge_ms;
                Trial {
                    index,
                    batch: index,
                    point,
                    proxy_score: Some(outcome.result.score),
                    dev_score: None,
                    state: TrialState::Scored,
                    merge_ms: Some(outcome.merge_ms),
                    eval_ms: Some(outcome.result.wall_ms),
                }
            }
            Err(err) => {
                eval_ms += started.elapsed().as_millis() as u64;
                failures.push((index, err.to_string()));
                Trial {
                    index,
                    batch: index,
                    point,
                    proxy_score: None,
                    dev_score: None,
                    state: TrialState::Failed,
                    merge_ms: None,
                    eval_ms: None,
                }
            }
        };
        if let Some(score) = trial.proxy_score {
            let improves = best.is_none_or(|b| {
                trials[b]
                    .proxy_score
                    .expect("best always points at a scored trial")
                    < score
            });
            if improves {
                best = Some(index);
            }
        }
        trials.push(trial);
    }

    Ok(GridReport {
        trials,
        best,
        failures,
        eval_ms,
        merge_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{EvalError, EvalResult, SyntheticObjective, TrialOutcome};
    use crate::space::Dim;

    fn space_2d() -> SearchSpace {
        SearchSpace::new(vec![Dim::new("it", 0.0, 1.0), Dim::new("a", 0.0, 1.0)]).unwrap()
    }

    #[test]
    fn enumerates_row_major_with_exact_endpoints() {
        let space = SearchSpace::new(vec![
            Dim::new("it", 0.3, 1.0),
            Dim::new("a", -1.0, 1.0),
        ])
        .unwrap();
        let points = grid_points(&space, 3, None).unwrap();
        assert_eq!(points.len(), 9);
        // First dimension varies slowest.
        let expected: Vec<Vec<f64>> = vec![
            vec![0.3, -1.0],
            vec![0.3, 0.0],
            vec![0.3, 1.0],
            vec![0.65, -1.0],
            vec![0.65, 0.0],
            vec![0.65, 1.0],
            vec![1.0, -1.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
        ];
        for (point, want) in points.iter().zip(&expected) {
            for (got, want) in point.values.iter().zip(want) {
                assert!((got - want).abs() < 1e-12, "{point:?} vs {want:?}");
            }
        }
        // Endpoints are bit-exact, not merely close.
        assert_eq!(points[0].values[0], 0.3);
        assert_eq!(points[8].values[0], 1.0);
        assert_eq!(points[8].values[1], 1.0);
    }

    #[test]
    fn two_point_grid_hits_exactly_the_endpoints() {
        let space = SearchSpace::new(vec![Dim::new("a", 0.0, 1.0)]).unwrap();
        let points = grid_points(&space, 2, None).unwrap();
        assert_eq!(
            points.iter().map(|p| p.values.clone()).collect::<Vec<_>>(),
            vec![vec![0.0], vec![1.0]]
        );
    }

    #[test]
    fn every_point_is_in_bounds() {
        let space = SearchSpace::new(vec![
            Dim::new("it", 0.1, 0.2),
            Dim::new("a", 0.3, 0.7),
            Dim::new("b", -1.0, 1.0),
        ])
        .unwrap();
        for per_dim in [2, 3, 5, 11] {
            let points = grid_points(&space, per_dim, None).unwrap();
            assert_eq!(points.len(), per_dim.pow(3));
            for point in points {
                assert!(space.contains(&point), "{point:?} escaped the space");
            }
        }
    }

    #[test]
    fn four_dims_at_three_levels_is_exactly_81_points() {
        let space = SearchSpace::new(vec![
            Dim::new("it", 0.3, 1.0),
            Dim::new("a", 0.0, 1.0),
            Dim::new("b", 0.0, 1.0),
            Dim::new("c", 0.0, 1.0),
        ])
        .unwrap();
        assert_eq!(grid_points(&space, 3, None).unwrap().len(), 81);
    }

    #[test]
    fn rejects_degenerate_and_oversized_grids() {
        let space = space_2d();
        assert!(matches!(
            grid_points(&space, 1, None),
            Err(OptimizerError::BadSampler(_))
        ));
        match grid_points(&space, 101, Some(10_000)) {
            Err(OptimizerError::BudgetOverflow { points, cap }) => {
                assert_eq!(points, 101 * 101);
                assert_eq!(cap, 10_000);
            }
            other => panic!("expected overflow, got {other:?}"),
        }
        // Exactly at the cap is allowed.
        assert_eq!(
            grid_points(&space, 100, Some(10_000)).unwrap().len(),
            10_000
        );
    }

    #[test]
    fn finds_the_quadratic_peak_on_the_grid() {
        let space = space_2d();
        let objective = SyntheticObjective::Quadratic {
            center: vec![0.5, 0.75],
        };
        let report = grid_search(&space, &objective, 5, &GridOptions::default()).unwrap();
        assert_eq!(report.trials.len(), 25);
        assert!(report.failures.is_empty());
        let best = report.best_trial().unwrap();
        // Grid levels are {0, 0.25, 0.5, 0.75, 1}; the center is on-grid.
        assert_eq!(best.point.values, vec![0.5, 0.75]);
        assert_eq!(best.proxy_score, Some(0.0));
    }

    #[test]
    fn concave_objective_peaks_at_the_center_level() {
        let space = SearchSpace::new(vec![Dim::new("a", 0.0, 1.0)]).unwrap();
        let objective = SyntheticObjective::Quadratic { center: vec![0.5] };
        let report = grid_search(&space, &objective, 11, &GridOptions::default()).unwrap();
        assert_eq!(report.best_trial().unwrap().point.values, vec![0.5]);
    }

    #[test]
    fn evaluation_failures_do_not_abort_the_sweep() {
        struct FailsNearZero;
        impl Objective for FailsNearZero {
            fn evaluate(&self, request: &EvalRequest) -> Result<TrialOutcome, EvalError> {
                if request.point.values[1] < 0.4 {
                    return Err(EvalError::InvalidRequest("synthetic failure".into()));
                }
                Ok(TrialOutcome {
                    result: EvalResult {
                        score: request.point.values[1],
                        sub_scores: None,
                        wall_ms: 0,
                    },
                    merge_ms: 0,
                })
            }
        }
        let report =
            grid_search(&space_2d(), &FailsNearZero, 3, &GridOptions::default()).unwrap();
        let failed = report
            .trials
            .iter()
            .filter(|t| t.state == TrialState::Failed)
            .count();
        assert_eq!(failed, 3, "one failure per first-dim level at second-dim 0");
        assert_eq!(report.failures.len(), 3);
        assert!(report.failures[0].1.contains("synthetic failure"));
        let best = report.best_trial().unwrap();
        assert_eq!(best.proxy_score, Some(1.0));
    }
}
