//! Distribution vectors: parameter deltas against a shared base checkpoint.
//!
//! A distribution vector is the per-tensor difference `fine_tuned - base`,
//! extracted at `f32` working precision with architecture-coupling tensors
//! (token embeddings, output head, rotary buffers) excluded. Checkpoints are
//! rebuilt by adding a weighted sum of such vectors back onto the base:
//!
//! ```text
//! merged = base + w_it * delta_it + sum_i w_i * delta_i
//! ```
//!
//! Excluded tensors pass through from the base untouched, so a composition
//! with all-zero weights reproduces the base byte-for-byte.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use crate::merge::{dare_apply, derive_stream_seed, tensor_key, SparsifierConfig};
use crate::space::{SearchSpace, SpaceError, WeightVector, IT_DIM};
use crate::tensor::{
    self, DType, Metadata, TensorData, TensorMap, TensorStoreError,
};

/// Tensor-name substring patterns excluded from extraction by default.
pub const DEFAULT_EXCLUSIONS: [&str; 3] = ["embed_tokens", "lm_head", "rotary"];

/// Errors raised by extraction, composition, and ratio conversion.
#[derive(Debug, Error)]
pub enum VectorError {
    #[error("tensors with mismatched shapes: {names:?}")]
    ShapeMismatch { names: Vec<String> },
    #[error("tensor {name:?} missing from {side}")]
    MissingTensor { name: String, side: String },
    #[error("vector {source_id:?} was extracted against base {found:?}, expected {expected:?}")]
    BaseMismatch {
        source_id: String,
        expected: String,
        found: String,
    },
    #[error("{got} weights supplied for {expected} vectors")]
    WeightCountMismatch { expected: usize, got: usize },
    #[error("no strictly positive continually-pretrained weight; ratios are undefined")]
    AllNonPositive,
    #[error("invalid sparsifier: {0}")]
    BadSparsifier(String),
    #[error("invalid vector artifact: {0}")]
    InvalidArtifact(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Store(#[from] TensorStoreError),
}

/// Which tensors to leave out of a delta, by substring match on the name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusionRule {
    patterns: Vec<String>,
}

impl ExclusionRule {
    pub fn new(patterns: Vec<String>) -> Self {
        Self { patterns }
    }

    /// Exclude nothing.
    pub fn none() -> Self {
        Self { patterns: vec![] }
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    /// Whether `name` matches any pattern.
    pub fn excludes(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| name.contains(p.as_str()))
    }
}

impl Default for ExclusionRule {
    /// The standard rule: skip token embeddings, the output head, and rotary
    /// position buffers.
    fn default() -> Self {
        Self::new(DEFAULT_EXCLUSIONS.iter().map(|s| s.to_string()).collect())
    }
}

/// A parameter delta between one fine-tuned checkpoint and its base.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionVector {
    /// Per-tensor deltas at `f32` working precision (non-excluded tensors
    /// only). Shapes match the base checkpoint.
    pub delta: TensorMap,
    /// Identity of the base checkpoint the delta was taken against.
    pub base_id: String,
    /// Identity of the fine-tuned checkpoint the delta came from.
    pub source_id: String,
    /// Names of the tensors the exclusion rule removed.
    pub excluded: BTreeSet<String>,
    /// The patterns that produced `excluded`.
    pub exclusion_patterns: Vec<String>,
}

impl DistributionVector {
    /// Serialize to a container: delta tensors plus provenance metadata.
    pub fn to_container(&self) -> TensorMap {
        let mut map = self.delta.clone();
        let mut md = Metadata::new();
        md.insert("base_id".to_string(), self.base_id.clone());
        md.insert("source_id".to_string(), self.source_id.clone());
        md.insert(
            "excluded".to_string(),
            serde_json::to_string(&self.excluded).expect("string set serializes"),
        );
        md.insert(
            "exclusion_patterns".to_string(),
            serde_json::to_string(&self.exclusion_patterns).expect("string list serializes"),
        );
        map.set_metadata(Some(md));
        map
    }

    /// Rebuild from a container produced by [`Self::to_container`].
    ///
    /// Deltas stored at reduced precision are widened to `f32`.
    pub fn from_container(container: &TensorMap) -> Result<Self, VectorError> {
        let md = container.metadata().ok_or_else(|| {
            VectorError::InvalidArtifact("missing metadata block".to_string())
        })?;
        let field = |key: &str| {
            md.get(key).cloned().ok_or_else(|| {
                VectorError::InvalidArtifact(format!("missing metadata key {key:?}"))
            })
        };
        let base_id = field("base_id")?;
        let source_id = field("source_id")?;
        let excluded: BTreeSet<String> = serde_json::from_str(&field("excluded")?)
            .map_err(|e| VectorError::InvalidArtifact(format!("bad excluded list: {e}")))?;
        let exclusion_patterns: Vec<String> =
            serde_json::from_str(&field("exclusion_patterns")?).map_err(|e| {
                VectorError::InvalidArtifact(format!("bad exclusion_patterns list: {e}"))
            })?;

        let mut delta = TensorMap::new();
        for (name, tensor) in container.iter() {
            let widened = if tensor.dtype() == DType::F32 {
                tensor.clone()
            } else {
                TensorData::new(
                    DType::F32,
                    tensor.shape().to_vec(),
                    tensor::cast_tensor(tensor.data(), tensor.dtype(), DType::F32)?,
                )?
            };
            delta.insert(name, widened)?;
        }
        Ok(Self {
            delta,
            base_id,
            source_id,
            excluded,
            exclusion_patterns,
        })
    }

    /// Write to a container file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VectorError> {
        tensor::write_container(path, &self.to_container())?;
        Ok(())
    }

    /// Load from a container file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, VectorError> {
        Self::from_container(&tensor::read_container(path)?)
    }
}

/// Subtract `base` from `fine_tuned` tensor-by-tensor.
///
/// Both checkpoints must carry identical tensor names and shapes. Tensors
/// matching `rule` are recorded in `excluded` instead of differenced.
pub fn extract(
    fine_tuned: &TensorMap,
    base: &TensorMap,
    rule: &ExclusionRule,
    base_id: impl Into<String>,
    source_id: impl Into<String>,
) -> Result<DistributionVector, VectorError> {
    if let Some(name) = base.names().find(|n| !fine_tuned.contains(n)) {
        return Err(VectorError::MissingTensor {
            name: name.to_string(),
            side: "fine-tuned checkpoint".to_string(),
        });
    }
    if let Some(name) = fine_tuned.names().find(|n| !base.contains(n)) {
        return Err(VectorError::MissingTensor {
            name: name.to_string(),
            side: "base checkpoint".to_string(),
        });
    }
    let mismatched: Vec<String> = base
        .iter()
        .filter(|(name, t)| fine_tuned.get(name).expect("names checked").shape() != t.shape())
        .map(|(name, _)| name.to_string())
        .collect();
    if !mismatched.is_empty() {
        return Err(VectorError::ShapeMismatch { names: mismatched });
    }

    let mut delta = TensorMap::new();
    let mut excluded = BTreeSet::new();
    for (name, base_tensor) in base.iter() {
        if rule.excludes(name) {
            excluded.insert(name.to_string());
            continue;
        }
        let tuned = fine_tuned.get(name).expect("names checked");
        let mut values = tuned.to_f32();
        for (v, b) in values.iter_mut().zip(base_tensor.to_f32()) {
            *v -= b;
        }
        delta.insert(
            name,
            TensorData::new(
                DType::F32,
                base_tensor.shape().to_vec(),
                tensor::encode_f32(&values, DType::F32),
            )?,
        )?;
    }
    Ok(DistributionVector {
        delta,
        base_id: base_id.into(),
        source_id: source_id.into(),
        excluded,
        exclusion_patterns: rule.patterns().to_vec(),
    })
}

/// Knobs for [`compose`].
#[derive(Debug, Clone, Default)]
pub struct ComposeOptions {
    /// Optional per-vector sparsifier applied to delta values before the
    /// weighted sum. Each weighted vector gets an independent random stream,
    /// derived from the configured seed and the vector's weight slot
    /// (instruction-tuned vector first).
    pub sparsifier: Option<SparsifierConfig>,
    /// Leave the instruction-tuned vector dense even when a sparsifier is
    /// configured.
    pub dare_exempt_it: bool,
    /// Storage dtype for tensors of the merged output; `None` keeps each
    /// tensor's base dtype.
    pub output_dtype: Option<DType>,
}

/// Rebuild a checkpoint: `base + w_it * it_vec + sum_i w_i * cpt_vecs[i]`.
///
/// `weights` aligns with `[it_vec] ++ cpt_vecs`; all vectors must share
/// `base_id`. Tensors absent from every delta (the excluded set) are copied
/// from the base verbatim. Weighted sums run at `f32` working precision;
/// zero-weight contributions are skipped exactly.
pub fn compose(
    base: &TensorMap,
    it_vec: Option<&DistributionVector>,
    cpt_vecs: &[&DistributionVector],
    weights: &WeightVector,
    options: &ComposeOptions,
) -> Result<TensorMap, VectorError> {
    if let Some(cfg) = &options.sparsifier {
        if !cfg.drop_rate.is_finite() || !(0.0..1.0).contains(&cfg.drop_rate) {
            return Err(VectorError::BadSparsifier(format!(
                "drop rate {} outside [0, 1)",
                cfg.drop_rate
            )));
        }
    }
    // Weight slot 0 is the IT vector when present.
    let vectors: Vec<&DistributionVector> =
        it_vec.into_iter().chain(cpt_vecs.iter().copied()).collect();
    if weights.len() != vectors.len() {
        return Err(VectorError::WeightCountMismatch {
            expected: vectors.len(),
            got: weights.len(),
        });
    }
    if let Some(first) = vectors.first() {
        for vec in &vectors[1..] {
            if vec.base_id != first.base_id {
                return Err(VectorError::BaseMismatch {
                    source_id: vec.source_id.clone(),
                    expected: first.base_id.clone(),
                    found: vec.base_id.clone(),
                });
            }
        }
    }
    for vec in &vectors {
        for (name, delta) in vec.delta.iter() {
            let base_tensor = base.get(name).ok_or_else(|| VectorError::MissingTensor {
                name: name.to_string(),
                side: "base checkpoint".to_string(),
            })?;
            if base_tensor.shape() != delta.shape() {
                return Err(VectorError::ShapeMismatch {
                    names: vec![name.to_string()],
                });
            }
        }
    }

    let it_slots = it_vec.is_some() as usize;
    let mut out = TensorMap::new();
    out.set_metadata(base.metadata().cloned());
    for (name, base_tensor) in base.iter() {
        let out_dtype = options.output_dtype.unwrap_or(base_tensor.dtype());
        let contributions: Vec<(usize, f64, &DistributionVector)> = vectors
            .iter()
            .enumerate()
            .filter(|(slot, vec)| weights.values[*slot] != 0.0 && vec.delta.contains(name))
            .map(|(slot, vec)| (slot, weights.values[slot], *vec))
            .collect();

        let tensor = if contributions.is_empty() {
            // Untouched (excluded or all-zero-weight) tensors pass through;
            // identical dtype means identical bytes.
            if out_dtype == base_tensor.dtype() {
                base_tensor.clone()
            } else {
                TensorData::new(
                    out_dtype,
                    base_tensor.shape().to_vec(),
                    tensor::cast_tensor(base_tensor.data(), base_tensor.dtype(), out_dtype)?,
                )?
            }
        } else {
            let mut acc = base_tensor.to_f32();
            for (slot, weight, vec) in contributions {
                let delta = vec.delta.get(name).expect("filtered on presence");
                let mut values = delta.to_f32();
                if let Some(cfg) = &options.sparsifier {
                    let exempt = options.dare_exempt_it && slot == 0 && it_slots == 1;
                    if cfg.is_active() && !exempt {
                        let stream_seed = derive_stream_seed(cfg.seed, slot as u64);
                        dare_apply(
                            &mut values,
                            tensor_key(stream_seed, name),
                            cfg.drop_rate,
                        );
                    }
                }
                let w = weight as f32;
                for (a, v) in acc.iter_mut().zip(values) {
                    *a += w * v;
                }
            }
            TensorData::new(
                out_dtype,
                base_tensor.shape().to_vec(),
                tensor::encode_f32(&acc, out_dtype),
            )?
        };
        out.insert(name, tensor)?;
    }
    Ok(out)
}

/// Convert merge weights into continual-pretraining data mixture ratios.
///
/// The instruction-tuned dimension is dropped, negative weights clamp to
/// zero, and the remainder is normalized to sum to one.
pub fn weights_to_ratios(
    space: &SearchSpace,
    weights: &WeightVector,
) -> Result<BTreeMap<String, f64>, VectorError> {
    space.check_arity(weights)?;
    let clamped: Vec<(&str, f64)> = space
        .dims()
        .iter()
        .zip(&weights.values)
        .filter(|(dim, _)| dim.name != IT_DIM)
        .map(|(dim, &w)| (dim.name.as_str(), w.max(0.0)))
        .collect();
    let total: f64 = clamped.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(VectorError::AllNonPositive);
    }
    Ok(clamped
        .into_iter()
        .map(|(name, w)| (name.to_string(), w / total))
        .collect())
}
