//! Merge baselines over distribution vectors.
//!
//! * **Task arithmetic** — the plain weighted sum done by
//!   [`crate::vectors::compose`].
//! * **DARE** — drop each delta element independently with probability `p`
//!   and rescale survivors by `1/(1-p)`, an unbiased sparsifier.
//! * **TIES** — per element: trim each vector to its top-`ceil(k*d)` entries
//!   by magnitude, elect a sign by weighted majority, then average the
//!   sign-consistent survivors.
//!
//! DARE randomness is a counter-based function of `(seed, tensor name,
//! element index)`: element decisions are reproducible in any evaluation
//! order and independent of tensor iteration order. Multi-vector recipes give
//! each weight slot its own derived stream so vectors are dropped
//! independently.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::space::WeightVector;
use crate::tensor::{self, DType, TensorData, TensorMap};
use crate::vectors::{compose, ComposeOptions, DistributionVector, VectorError};

/// Errors raised by sparsification and merging.
#[derive(Debug, Error)]
pub enum MergeError {
    #[error("no vectors supplied")]
    EmptyVectorList,
    #[error("{got} weights supplied for {expected} vectors")]
    WeightCountMismatch { expected: usize, got: usize },
    #[error("drop rate {0} outside [0, 1)")]
    BadDropRate(f64),
    #[error("density {0} outside (0, 1]")]
    BadDensity(f64),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Store(#[from] tensor::TensorStoreError),
}

/// Sparsifier selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsifierMethod {
    /// Leave deltas dense.
    None,
    /// DARE: random drop with rescale.
    DareRandomDrop,
}

/// Configuration for per-vector delta sparsification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsifierConfig {
    pub method: SparsifierMethod,
    /// Per-element drop probability, in `[0, 1)`.
    pub drop_rate: f64,
    pub seed: u64,
}

impl SparsifierConfig {
    /// A DARE configuration.
    pub fn dare(drop_rate: f64, seed: u64) -> Self {
        Self {
            method: SparsifierMethod::DareRandomDrop,
            drop_rate,
            seed,
        }
    }

    /// Check the drop rate keeps the rescale factor finite.
    pub fn validate(&self) -> Result<(), MergeError> {
        if !self.drop_rate.is_finite() || !(0.0..1.0).contains(&self.drop_rate) {
            return Err(MergeError::BadDropRate(self.drop_rate));
        }
        Ok(())
    }

    /// Whether applying this config changes any value.
    pub fn is_active(&self) -> bool {
        self.method == SparsifierMethod::DareRandomDrop && self.drop_rate > 0.0
    }
}

// --- counter-based randomness -------------------------------------------

use crate::mixing::{fnv1a64, mix64, GOLDEN};

/// Stream key for one tensor under one seed.
pub(crate) fn tensor_key(seed: u64, name: &str) -> u64 {
    mix64(seed ^ fnv1a64(name.as_bytes()))
}

/// Derive the seed for a weight slot. Slot 0 keeps the configured seed, so a
/// standalone sparsification of one vector matches slot 0 of a recipe.
pub(crate) fn derive_stream_seed(seed: u64, slot: u64) -> u64 {
    if slot == 0 {
        seed
    } else {
        mix64(seed ^ slot.wrapping_mul(GOLDEN))
    }
}

/// Uniform draw in `[0, 1)` for one element of one tensor stream.
#[inline]
fn element_uniform(key: u64, index: u64) -> f64 {
    let z = mix64(key.wrapping_add(index.wrapping_mul(GOLDEN)));
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Apply DARE dropout in place: zero with probability `drop_rate`, rescale
/// survivors by `1/(1-drop_rate)`. `drop_rate == 0` leaves values untouched.
pub(crate) fn dare_apply<F: Scalar>(values: &mut [F], key: u64, drop_rate: f64) {
    debug_assert!((0.0..1.0).contains(&drop_rate));
    if drop_rate == 0.0 {
        return;
    }
    let rescale = F::from_f64_lossy(1.0 / (1.0 - drop_rate));
    for (i, v) in values.iter_mut().enumerate() {
        if element_uniform(key, i as u64) < drop_rate {
            *v = F::zero();
        } else {
            *v *= rescale;
        }
    }
}

/// Sparsify a distribution vector with DARE.
///
/// Deterministic in `(config.seed, tensor name, element index)`; the
/// expected value of every element equals the dense input.
pub fn dare_sparsify(
    vector: &DistributionVector,
    config: &SparsifierConfig,
) -> Result<DistributionVector, MergeError> {
    config.validate()?;
    let mut out = vector.clone();
    if !config.is_active() {
        return Ok(out);
    }
    let mut delta = TensorMap::new();
    for (name, tensor) in vector.delta.iter() {
        let mut values = tensor.to_f32();
        dare_apply(&mut values, tensor_key(config.seed, name), config.drop_rate);
        delta.insert(
            name,
            TensorData::new(
                DType::F32,
                tensor.shape().to_vec(),
                tensor::encode_f32(&values, DType::F32),
            )?,
        )?;
    }
    out.delta = delta;
    Ok(out)
}

// --- TIES ----------------------------------------------------------------

/// Configuration for TIES merging.
#[derive(Debug, Clone, PartialEq)]
pub struct TiesConfig {
    /// Fraction of entries kept per tensor (`k` in `(0, 1]`); each vector is
    /// trimmed to its top-`ceil(k*d)` entries by magnitude.
    pub density: f64,
    /// One weight per vector, aligned with the vector list.
    pub weights: Vec<f64>,
}

/// Number of entries kept when trimming `d` elements at density `k`.
///
/// Uses a small epsilon guard so binary representation noise in `k*d` cannot
/// bump the exact ceiling (e.g. `0.2 * 5` must keep 1 entry, not 2).
fn trim_keep_count(density: f64, d: usize) -> usize {
    if d == 0 {
        return 0;
    }
    let raw = density * d as f64;
    ((raw - 1e-12).ceil() as usize).clamp(1, d)
}

/// Zero out everything but the top-`keep` entries by magnitude. Magnitude
/// ties at the threshold break toward the lower flat index.
fn trim_top_k(values: &[f32], keep: usize) -> Vec<f32> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0f32; values.len()];
    for &i in order.iter().take(keep) {
        out[i] = values[i];
    }
    out
}

/// TIES merge: trim, elect signs, disjoint-average, add to base.
///
/// Per element, the elected sign is the sign of the trim-weighted sum (a tie
/// elects positive); the merged value is the weighted mean of the trimmed
/// values that are nonzero and match the elected sign, normalized by the
/// weights of those participating vectors only. Accumulation runs in `f64`
/// and rounds once to `f32`.
pub fn ties_merge(
    base: &TensorMap,
    vectors: &[&DistributionVector],
    config: &TiesConfig,
) -> Result<TensorMap, MergeError> {
    if vectors.is_empty() {
        return Err(MergeError::EmptyVectorList);
    }
    if config.weights.len() != vectors.len() {
        return Err(MergeError::WeightCountMismatch {
            expected: vectors.len(),
            got: config.weights.len(),
        });
    }
    if !config.density.is_finite() || !(config.density > 0.0 && config.density <= 1.0) {
        return Err(MergeError::BadDensity(config.density));
    }
    let first = vectors[0];
    for vec in &vectors[1..] {
        if vec.base_id != first.base_id {
            return Err(VectorError::BaseMismatch {
                source_id: vec.source_id.clone(),
                expected: first.base_id.clone(),
                found: vec.base_id.clone(),
            }
            .into());
        }
    }
    for vec in vectors {
        for (name, delta) in vec.delta.iter() {
            let base_tensor = base.get(name).ok_or_else(|| VectorError::MissingTensor {
                name: name.to_string(),
                side: "base checkpoint".to_string(),
            })?;
            if base_tensor.shape() != delta.shape() {
                return Err(VectorError::ShapeMismatch {
                    names: vec![name.to_string()],
                }
                .into());
            }
        }
    }

    let mut out = TensorMap::new();
    out.set_metadata(base.metadata().cloned());
    for (name, base_tensor) in base.iter() {
        let participants: Vec<(f64, &DistributionVector)> = vectors
            .iter()
            .zip(&config.weights)
            .filter(|(vec, _)| vec.delta.contains(name))
            .map(|(vec, &w)| (w, *vec))
            .collect();
        if participants.is_empty() {
            out.insert(name, base_tensor.clone())?;
            continue;
        }

        let d = base_tensor.element_count();
        let keep = trim_keep_count(config.density, d);
        let trimmed: Vec<(f64, Vec<f32>)> = participants
            .iter()
            .map(|(w, vec)| {
                let values = vec.delta.get(name).expect("participant has tensor").to_f32();
                (*w, trim_top_k(&values, keep))
            })
            .collect();

        let base_values = base_tensor.to_f32();
        let mut merged = Vec::with_capacity(d);
        for i in 0..d {
            let elected_sum: f64 = trimmed.iter().map(|(w, t)| w * t[i] as f64).sum();
            let elect_positive = elected_sum >= 0.0;
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for (w, t) in &trimmed {
                let v = t[i];
                if v != 0.0 && (v > 0.0) == elect_positive {
                    num += w * v as f64;
                    den += w;
                }
            }
            let delta = if den > 0.0 { num / den } else { 0.0 };
            merged.push((base_values[i] as f64 + delta) as f32);
        }
        out.insert(
            name,
            TensorData::new(
                base_tensor.dtype(),
                base_tensor.shape().to_vec(),
                tensor::encode_f32(&merged, base_tensor.dtype()),
            )?,
        )?;
    }
    Ok(out)
}

// --- recipes ---------------------------------------------------------------

/// Named merge baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    /// Weighted delta sum.
    TaskArithmetic,
    /// Trim / elect-sign / disjoint-average.
    Ties,
    /// DARE-sparsified weighted delta sum.
    DareLinear,
    /// DARE each vector, then TIES-merge.
    DareTies,
}

/// Shared knobs for [`merge_recipe`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeParams {
    /// DARE drop probability (DARE variants only).
    pub drop_rate: f64,
    /// TIES kept-entry fraction (TIES variants only).
    pub density: f64,
    /// Seed for the DARE streams.
    pub seed: u64,
    /// Keep the instruction-tuned vector dense under DARE.
    pub dare_exempt_it: bool,
    /// Storage dtype of the merged output; `None` keeps base dtypes.
    pub output_dtype: Option<DType>,
}

impl Default for RecipeParams {
    fn default() -> Self {
        Self {
            drop_rate: 0.1,
            density: 0.2,
            seed: 0,
            dare_exempt_it: false,
            output_dtype: None,
        }
    }
}

/// Uniform baseline weights: `count` vectors, each weighted `1/(count+1)`,
/// i.e. the unweighted average of the base and all ingredient checkpoints.
pub fn uniform_weights(count: usize) -> WeightVector {
    WeightVector::new(vec![1.0 / (count as f64 + 1.0); count])
}

/// Run one of the named merge baselines.
///
/// `weights` aligns with `[it_vec] ++ cpt_vecs` (instruction-tuned slot
/// first when present). Degenerate parameters collapse as expected:
/// `DareLinear` with `drop_rate == 0` equals `TaskArithmetic`, and `DareTies`
/// with `drop_rate == 0` equals `Ties`.
pub fn merge_recipe(
    method: MergeMethod,
    base: &TensorMap,
    it_vec: Option<&DistributionVector>,
    cpt_vecs: &[&DistributionVector],
    weights: &WeightVector,
    params: &RecipeParams,
) -> Result<TensorMap, MergeError> {
    if it_vec.is_none() && cpt_vecs.is_empty() {
        return Err(MergeError::EmptyVectorList);
    }
    match method {
        MergeMethod::TaskArithmetic => Ok(compose(
            base,
            it_vec,
            cpt_vecs,
            weights,
            &ComposeOptions {
                sparsifier: None,
                dare_exempt_it: params.dare_exempt_it,
                output_dtype: params.output_dtype,
            },
        )?),
        MergeMethod::DareLinear => {
            let sparsifier = SparsifierConfig::dare(params.drop_rate, params.seed);
            sparsifier.validate()?;
            Ok(compose(
                base,
                it_vec,
                cpt_vecs,
                weights,
                &ComposeOptions {
                    sparsifier: Some(sparsifier),
                    dare_exempt_it: params.dare_exempt_it,
                    output_dtype: params.output_dtype,
                },
            )?)
        }
        MergeMethod::Ties => {
            let all: Vec<&DistributionVector> =
                it_vec.into_iter().chain(cpt_vecs.iter().copied()).collect();
            let merged = ties_merge(
                base,
                &all,
                &TiesConfig {
                    density: params.density,
                    weights: weights.values.clone(),
                },
            )?;
            cast_map(merged, params.output_dtype)
        }
        MergeMethod::DareTies => {
            let config = SparsifierConfig::dare(params.drop_rate, params.seed);
            config.validate()?;
            let all: Vec<&DistributionVector> =
                it_vec.into_iter().chain(cpt_vecs.iter().copied()).collect();
            let sparsified: Vec<DistributionVector> = all
                .iter()
                .enumerate()
                .map(|(slot, vec)| {
                    let exempt = params.dare_exempt_it && slot == 0 && it_vec.is_some();
                    if exempt {
                        Ok((*vec).clone())
                    } else {
                        let slot_config = SparsifierConfig {
                            seed: derive_stream_seed(config.seed, slot as u64),
                            ..config
                        };
                        dare_sparsify(vec, &slot_config)
                    }
                })
                .collect::<Result<_, MergeError>>()?;
            let refs: Vec<&DistributionVector> = sparsified.iter().collect();
            let merged = ties_merge(
                base,
                &refs,
                &TiesConfig {
                    density: params.density,
                    weights: weights.values.clone(),
                },
            )?;
            cast_map(merged, params.output_dtype)
        }
    }
}

fn cast_map(map: TensorMap, dtype: Option<DType>) -> Result<TensorMap, MergeError> {
    let Some(target) = dtype else {
        return Ok(map);
    };
    let mut out = TensorMap::new();
    out.set_metadata(map.metadata().cloned());
    for (name, tensor) in map.iter() {
        let converted = if tensor.dtype() == target {
            tensor.clone()
        } else {
            TensorData::new(
                target,
                tensor.shape().to_vec(),
                tensor::cast_tensor(tensor.data(), tensor.dtype(), target)?,
            )?
        };
        out.insert(name, converted)?;
    }
    Ok(out)
}
