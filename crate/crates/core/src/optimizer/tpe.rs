//! Parzen-estimator suggestion: split trials at the top quantile, fit a
//! good/bad density pair per dimension, draw candidates from the good
//! densities, and propose the candidate with the highest density ratio.
//!
//! Suggestions are a pure function of `(seed, trial index, frozen study
//! prefix)`: trial `i` always derives its generator from the root seed and
//! `i` alone, and the densities are fit on an explicit prefix of the trial
//! list. Replaying the same prefix therefore reproduces the same suggestion,
//! which is what makes a killed search resumable without drift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::kde::{BandwidthRule, TruncatedGaussianKde};
use super::study::Study;
use super::OptimizerError;
use crate::mixing::{mix64, GOLDEN};
use crate::scalar::Scalar;
use crate::space::{SearchSpace, WeightVector};

/// Per-dimension good/bad density estimates over one scored trial set.
#[derive(Debug, Clone)]
pub struct DensityModelPair<F: Scalar> {
    /// One density per dimension, fit on the top-quantile trials.
    pub good: Vec<TruncatedGaussianKde<F>>,
    /// One density per dimension, fit on the remaining trials.
    pub bad: Vec<TruncatedGaussianKde<F>>,
    /// Proxy score of the worst trial still counted as good.
    pub split_score: f64,
    /// How many trials landed in the good set.
    pub good_count: usize,
    /// How many trials landed in the bad set.
    pub bad_count: usize,
}

/// Number of trials in the good split: `ceil(gamma * n)`, clamped to
/// `[1, n]`, with an epsilon guard so representation noise in the product
/// cannot bump the exact ceiling.
fn good_count(gamma: f64, n: usize) -> usize {
    let raw = gamma * n as f64;
    ((raw - 1e-12).ceil() as usize).clamp(1, n)
}

/// How many of the newest observations keep full kernel weight when a fit
/// set outgrows this count; everything older decays linearly down to `1/n`.
/// Early verdicts come from a sparsely explored space, so their influence on
/// the densities fades as fresher evidence arrives — without the ramp, a
/// region written off during startup stays suppressed for the whole run.
const RECENCY_FLAT_COUNT: usize = 25;

/// Relative kernel weights for `n` observations ordered oldest-first: a
/// linear ramp from `1/n` up to 1 over the oldest `n - 25`, then flat 1 for
/// the newest 25. All ones when `n <= 25`.
fn recency_weights(n: usize) -> Vec<f64> {
    let mut weights = vec![1.0; n];
    let ramp_len = n.saturating_sub(RECENCY_FLAT_COUNT);
    let start = 1.0 / n as f64;
    for (i, w) in weights[..ramp_len].iter_mut().enumerate() {
        let t = if ramp_len == 1 {
            0.0
        } else {
            i as f64 / (ramp_len - 1) as f64
        };
        *w = start + (1.0 - start) * t;
    }
    weights
}

impl<F: Scalar> DensityModelPair<F> {
    /// Split `(point, score)` observations at the top-`gamma` quantile and
    /// fit the two density products. Observations must be in trial order:
    /// score ties break toward the earlier entry.
    pub fn fit(
        space: &SearchSpace,
        observations: &[(&WeightVector, f64)],
        gamma: f64,
        bandwidth: BandwidthRule,
    ) -> Result<Self, OptimizerError> {
        if observations.is_empty() {
            return Err(OptimizerError::InsufficientData(
                "density fit needs at least one scored trial".to_string(),
            ));
        }
        let n = observations.len();
        let n_good = good_count(gamma, n);

        // Stable sort on descending score keeps earlier trials first among
        // ties, so the good set is deterministic.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            observations[b]
                .1
                .partial_cmp(&observations[a].1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let split_score = observations[order[n_good - 1]].1;

        // Refit each half in trial order so the recency ramp lines up with
        // observation age.
        let mut good_set = order[..n_good].to_vec();
        let mut bad_set = order[n_good..].to_vec();
        good_set.sort_unstable();
        bad_set.sort_unstable();
        let good_weights = recency_weights(good_set.len());
        let mut bad_weights = recency_weights(bad_set.len());
        bad_weights.iter_mut().for_each(|w| *w *= 5.0);

        let dims = space.dims();
        let mut good = Vec::with_capacity(dims.len());
        let mut bad = Vec::with_capacity(dims.len());
        for (d, dim) in dims.iter().enumerate() {
            let coord = |&i: &usize| F::from_f64_lossy(observations[i].0.values[d]);
            let low = F::from_f64_lossy(dim.low);
            let high = F::from_f64_lossy(dim.high);
            good.push(TruncatedGaussianKde::fit_weighted(
                good_set.iter().map(coord).collect(),
                &good_weights,
                low,
                high,
                bandwidth,
            ));
            bad.push(TruncatedGaussianKde::fit_weighted(
                bad_set.iter().map(coord).collect(),
                &bad_weights,
                low,
                high,
                bandwidth,
            ));
        }
        Ok(Self {
            good,
            bad,
            split_score,
            good_count: n_good,
            bad_count: n - n_good,
        })
    }

    /// `ln l(x) - ln g(x)`: the log density ratio of good over bad.
    pub fn log_ratio(&self, point: &WeightVector) -> F {
        let mut total = F::zero();
        for (d, (l, g)) in self.good.iter().zip(&self.bad).enumerate() {
            let x = F::from_f64_lossy(point.values[d]);
            total += l.ln_pdf(x) - g.ln_pdf(x);
        }
        total
    }

    /// Draw one candidate from the good density (independently per
    /// dimension).
    pub fn sample_good<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightVector {
        self.good
            .iter()
            .map(|kde| kde.sample(rng).to_f64_lossy())
            .collect::<Vec<f64>>()
            .into()
    }

    /// Index of the candidate with the highest density ratio; ties break
    /// toward the earlier candidate.
    pub fn best_candidate(&self, candidates: &[WeightVector]) -> Option<usize> {
        let mut best: Option<(usize, F)> = None;
        for (i, c) in candidates.iter().enumerate() {
            let score = self.log_ratio(c);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        best.map(|(i, _)| i)
    }

}

/// Generator for one trial index under one root seed.
fn trial_rng(seed: u64, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix64(seed ^ (index + 1).wrapping_mul(GOLDEN)))
}

/// Uniform point over the space.
fn uniform_point<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> WeightVector {
    space
        .dims()
        .iter()
        .map(|d| d.low + d.width() * rng.random::<f64>())
        .collect::<Vec<f64>>()
        .into()
}

/// Deterministic suggestion for trial `index`, with densities frozen at the
/// first `frozen` trials of the study.
pub(crate) fn suggest_frozen(
    study: &Study,
    frozen: usize,
    index: usize,
) -> Result<WeightVector, OptimizerError> {
    let space = study.space();
    let sampler = study.sampler();
    let mut rng = trial_rng(sampler.seed, index as u64);

    let observations: Vec<(&WeightVector, f64)> = study.trials()[..frozen.min(study.len())]
        .iter()
        .filter(|t| t.is_scored())
        .map(|t| (&t.point, t.proxy_score.expect("scored trials carry scores")))
        .collect();

    if observations.len() < sampler.startup {
        return Ok(uniform_point(space, &mut rng));
    }

    let pair: DensityModelPair<f64> =
        DensityModelPair::fit(space, &observations, sampler.gamma, sampler.bandwidth)?;
    let candidates: Vec<WeightVector> = (0..sampler.candidates)
        .map(|_| pair.sample_good(&mut rng))
        .collect();
    let best = pair
        .best_candidate(&candidates)
        .expect("candidate count is validated >= 1");
    Ok(candidates[best].clone())
}

/// Suggest the next point: random during startup, density-ratio argmax after.
pub fn suggest(study: &Study) -> Result<WeightVector, OptimizerError> {
    suggest_frozen(study, study.len(), study.len())
}

/// Suggest `batch` points for the next `batch` trial indices, all from the
/// densities as they stand now. Equivalent to [`suggest`] when `batch == 1`.
pub fn suggest_batch(study: &Study, batch: usize) -> Result<Vec<WeightVector>, OptimizerError> {
    let frozen = study.len();
    (0..batch)
        .map(|k| suggest_frozen(study, frozen, study.len() + k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::study::{Budgets, TpeConfig, Trial, TrialState};
    use crate::space::Dim;

    fn unit_space(dims: usize) -> SearchSpace {
        SearchSpace::new(
            (0..dims)
                .map(|i| {
                    Dim::new(
                        if i == 0 { "it".to_string() } else { format!("d{i}") },
                        0.0,
                        1.0,
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn study_with(config: TpeConfig, trials: usize) -> Study {
        Study::new(
            unit_space(2),
            config,
            Budgets {
                trials: trials.max(1),
                ..Budgets::default()
            },
        )
        .unwrap()
    }

    fn record_scored(study: &mut Study, points: &[(f64, f64, f64)]) {
        for &(a, b, score) in points {
            let index = study.len();
            study
                .record(Trial {
                    index,
                    batch: index,
                    point: vec![a, b].into(),
                    proxy_score: Some(score),
                    dev_score: None,
                    state: TrialState::Scored,
                    merge_ms: None,
                    eval_ms: None,
                })
                .unwrap();
        }
    }

    #[test]
    fn good_count_uses_guarded_ceiling() {
        assert_eq!(good_count(0.1, 20), 2); // 0.1*20 floats just above 2.0
        assert_eq!(good_count(0.1, 25), 3); // genuine ceil(2.5)
        assert_eq!(good_count(0.1, 1), 1);
        assert_eq!(good_count(0.9, 1), 1);
        assert_eq!(good_count(0.5, 4), 2);
    }

    #[test]
    fn split_partitions_scored_trials_at_the_quantile() {
        let space = unit_space(1);
        let points: Vec<WeightVector> =
            (0..10).map(|i| vec![i as f64 / 10.0].into()).collect();
        let observations: Vec<(&WeightVector, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (p, i as f64)) // scores 0..9, best is index 9
            .collect();
        let pair: DensityModelPair<f64> =
            DensityModelPair::fit(&space, &observations, 0.2, BandwidthRule::Scott).unwrap();
        assert_eq!(pair.good_count, 2);
        assert_eq!(pair.bad_count, 8);
        assert_eq!(pair.split_score, 8.0);
        // Centers are kept in trial order within the split.
        assert_eq!(pair.good[0].centers(), &[0.8, 0.9]);
    }

    #[test]
    fn split_breaks_score_ties_toward_earlier_trials() {
        let space = unit_space(1);
        let points: Vec<WeightVector> = (0..4).map(|i| vec![i as f64 / 4.0].into()).collect();
        let observations: Vec<(&WeightVector, f64)> =
            points.iter().map(|p| (p, 1.0)).collect(); // all tied
        let pair: DensityModelPair<f64> =
            DensityModelPair::fit(&space, &observations, 0.25, BandwidthRule::Scott).unwrap();
        assert_eq!(pair.good_count, 1);
        assert_eq!(pair.good[0].centers(), &[0.0]); // earliest trial wins the tie
    }

    #[test]
    fn candidate_selection_follows_the_density_ratio() {
        // One good observation at 0.5, one bad at 0.1, fixed bandwidth 0.1:
        // among candidates {0.1, 0.3, 0.5} the ratio peaks at 0.5.
        let space = unit_space(1);
        let good_point: WeightVector = vec![0.5].into();
        let bad_point: WeightVector = vec![0.1].into();
        let observations: Vec<(&WeightVector, f64)> =
            vec![(&good_point, 1.0), (&bad_point, 0.0)];
        let pair: DensityModelPair<f64> =
            DensityModelPair::fit(&space, &observations, 0.5, BandwidthRule::Fixed(0.1))
                .unwrap();
        assert_eq!(pair.good[0].centers(), &[0.5]);
        assert_eq!(pair.bad[0].centers(), &[0.1]);
        let candidates: Vec<WeightVector> =
            vec![vec![0.1].into(), vec![0.3].into(), vec![0.5].into()];
        assert_eq!(pair.best_candidate(&candidates), Some(2));
        // And the ratio is strictly ordered along the candidates.
        assert!(pair.log_ratio(&candidates[2]) > pair.log_ratio(&candidates[1]));
        assert!(pair.log_ratio(&candidates[1]) > pair.log_ratio(&candidates[0]));
    }

    #[test]
    fn startup_suggestions_are_uniform_in_bounds_and_deterministic() {
        let study = study_with(
            TpeConfig {
                startup: 4,
                ..TpeConfig::default()
            },
            8,
        );
        let a = suggest(&study).unwrap();
        let b = suggest(&study).unwrap();
        assert_eq!(a, b);
        assert!(study.space().contains(&a));
    }

    #[test]
    fn distinct_indices_get_distinct_startup_points() {
        let study = study_with(
            TpeConfig {
                startup: 8,
                ..TpeConfig::default()
            },
            8,
        );
        let batch = suggest_batch(&study, 8).unwrap();
        for (i, p) in batch.iter().enumerate() {
            assert!(study.space().contains(p));
            for q in &batch[..i] {
                assert_ne!(p, q, "startup points must differ");
            }
        }
    }

    #[test]
    fn batch_of_one_matches_single_suggestion() {
        let mut study = study_with(
            TpeConfig {
                startup: 2,
                ..TpeConfig::default()
            },
            8,
        );
        record_scored(
            &mut study,
            &[(0.2, 0.3, 1.0), (0.8, 0.9, 2.0), (0.4, 0.1, 0.5)],
        );
        assert_eq!(suggest_batch(&study, 1).unwrap(), vec![suggest(&study).unwrap()]);
    }

    #[test]
    fn post_startup_suggestions_follow_the_good_region() {
        // Cluster good scores near (0.8, 0.2); the sampler should propose
        // points near that mode once past startup.
        let mut study = study_with(
            TpeConfig {
                startup: 10,
                gamma: 0.25,
                candidates: 24,
                ..TpeConfig::default()
            },
            64,
        );
        let mut obs = Vec::new();
        for i in 0..20 {
            let x = (i as f64) / 19.0;
            let score = -((x - 0.8) * (x - 0.8)); // peak at x = 0.8
            obs.push((x, 1.0 - x, score));
        }
        record_scored(&mut study, &obs);
        let point = suggest(&study).unwrap();
        assert!(study.space().contains(&point));
        assert!(
            (point.values[0] - 0.8).abs() < 0.35,
            "suggestion {point:?} strayed from the good mode"
        );
    }

    #[test]
    fn suggestions_depend_only_on_prefix_and_index() {
        let mut a = study_with(
            TpeConfig {
                startup: 2,
                ..TpeConfig::default()
            },
            16,
        );
        record_scored(&mut a, &[(0.2, 0.3, 1.0), (0.8, 0.9, 2.0), (0.1, 0.1, 1.5)]);
        // Same prefix in a second study: frozen suggestion for index 5 must
        // agree even though the studies could diverge later.
        let mut b = a.clone();
        record_scored(&mut b, &[(0.5, 0.5, 9.9)]);
        let from_a = suggest_frozen(&a, 3, 5).unwrap();
        let from_b = suggest_frozen(&b, 3, 5).unwrap();
        assert_eq!(from_a, from_b);
    }
}
