//! Descriptive geometry of distribution vectors: cosine similarity (global,
//! pairwise, layer-wise), norms, truncated-SVD sparsification, and a
//! two-component PCA embedding that later checkpoints can be projected into.
//!
//! Everything here is pure and read-only. All dot products and norms
//! accumulate in `f64` — the vectors themselves are `f32` storage, and sums
//! over millions of terms would otherwise shed precision.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::tensor::{DType, Metadata, TensorData, TensorMap, TensorStoreError};
use crate::vectors::DistributionVector;

/// Errors raised by the analysis operators.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("vectors carry different tensor names ({name:?} is not shared)")]
    NameMismatch { name: String },
    #[error("tensor {name:?} has different shapes across vectors")]
    ShapeMismatch { name: String },
    #[error("vector {label:?} has zero norm; cosine is undefined")]
    ZeroNorm { label: String },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error(
        "rank {rank} exceeds the smaller dimension ({limit}) of tensor {name:?} with shape {shape:?}"
    )]
    RankTooLarge {
        name: String,
        rank: usize,
        limit: usize,
        shape: Vec<usize>,
    },
    #[error("need at least {needed} vectors, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error("vectors show no spread; a projection basis is undefined")]
    DegenerateSpread,
    #[error("invalid projection artifact: {0}")]
    InvalidArtifact(String),
    #[error(transparent)]
    Store(#[from] TensorStoreError),
}

/// Error unless both vectors hold exactly the same tensor names and shapes.
fn check_aligned(
    a: &DistributionVector,
    b: &DistributionVector,
) -> Result<(), AnalysisError> {
    for (name, ta) in a.delta.iter() {
        match b.delta.get(name) {
            None => {
                return Err(AnalysisError::NameMismatch {
                    name: name.to_string(),
                })
            }
            Some(tb) if tb.shape() != ta.shape() => {
                return Err(AnalysisError::ShapeMismatch {
                    name: name.to_string(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(name) = b.delta.names().find(|n| !a.delta.contains(n)) {
        return Err(AnalysisError::NameMismatch {
            name: name.to_string(),
        });
    }
    Ok(())
}

/// Dot product and squared norms over one pair of equally shaped tensors.
fn tensor_dot(a: &TensorData, b: &TensorData) -> (f64, f64, f64) {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.to_f32().into_iter().zip(b.to_f32()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na, nb)
}

/// Cosine similarity over the concatenation of all shared tensors.
pub fn cosine(
    a: &DistributionVector,
    b: &DistributionVector,
) -> Result<f64, AnalysisError> {
    check_aligned(a, b)?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (name, ta) in a.delta.iter() {
        let (d, x, y) = tensor_dot(ta, b.delta.get(name).expect("aligned"));
        dot += d;
        na += x;
        nb += y;
    }
    for (value, vector) in [(na, a), (nb, b)] {
        if value == 0.0 {
            return Err(AnalysisError::ZeroNorm {
                label: vector.source_id.clone(),
            });
        }
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Per-tensor cosine similarity. Tensors with zero norm on either side map
/// to `None` — undefined, not zero.
pub fn layerwise_cosine(
    a: &DistributionVector,
    b: &DistributionVector,
) -> Result<BTreeMap<String, Option<f64>>, AnalysisError> {
    check_aligned(a, b)?;
    let mut out = BTreeMap::new();
    for (name, ta) in a.delta.iter() {
        let (dot, na, nb) = tensor_dot(ta, b.delta.get(name).expect("aligned"));
        let value = if na == 0.0 || nb == 0.0 {
            None
        } else {
            Some(dot / (na.sqrt() * nb.sqrt()))
        };
        out.insert(name.to_string(), value);
    }
    Ok(out)
}

/// A labeled symmetric matrix of pairwise cosines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    /// Source identity of each vector, in input order.
    pub labels: Vec<String>,
    /// `values[i][j]` is the cosine between vectors `i` and `j`;
    /// `values[j][i]` is the identical float.
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// Render as CSV with a labels header row and a leading label column.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.labels.iter().fold(String::new(), |mut acc, l| {
            acc.push(',');
            acc.push_str(&csv_field(l));
            acc
        }));
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.values) {
            out.push_str(&csv_field(label));
            for value in row {
                out.push(',');
                out.push_str(&value.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Quote a CSV field when it contains a delimiter, quote, or newline.
pub(crate) fn csv_field(raw: &str) -> String {
    if raw.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

/// Full pairwise cosine matrix over `vecs`, labeled by source identity.
pub fn pairwise_matrix(
    vecs: &[&DistributionVector],
) -> Result<SimilarityMatrix, AnalysisError> {
    if vecs.is_empty() {
        return Err(AnalysisError::TooFewVectors { needed: 1, got: 0 });
    }
    let n = vecs.len();
    let mut values = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = cosine(vecs[i], vecs[j])?;
            values[i][j] = c;
            values[j][i] = c; // mirrored bit-for-bit: symmetry is exact
        }
    }
    Ok(SimilarityMatrix {
        labels: vecs.iter().map(|v| v.source_id.clone()).collect(),
        values,
    })
}

/// L2 norm of each vector, labeled by source identity, in input order.
pub fn norms(vecs: &[&DistributionVector]) -> Vec<(String, f64)> {
    vecs.iter()
        .map(|v| {
            let total: f64 = v
                .delta
                .iter()
                .map(|(_, t)| tensor_dot(t, t).1)
                .sum();
            (v.source_id.clone(), total.sqrt())
        })
        .collect()
}

/// Replace every 2-D tensor of the vector by its best rank-`rank`
/// approximation (top singular triplets); tensors of any other
/// dimensionality pass through untouched.
pub fn svd_sparsify(
    v: &DistributionVector,
    rank: usize,
) -> Result<DistributionVector, AnalysisError> {
    if rank == 0 {
        return Err(AnalysisError::ZeroRank);
    }
    let mut delta = TensorMap::new();
    for (name, tensor) in v.delta.iter() {
        let out = match tensor.shape() {
            [rows, cols] => {
                let limit = *rows.min(cols);
                if rank > limit {
                    return Err(AnalysisError::RankTooLarge {
                        name: name.to_string(),
                        rank,
                        limit,
                        shape: tensor.shape().to_vec(),
                    });
                }
                let values: Vec<f64> =
                    tensor.to_f32().into_iter().map(f64::from).collect();
                let matrix = DMatrix::from_row_slice(*rows, *cols, &values);
                let svd = matrix.svd(true, true);
                let u = svd.u.expect("u requested");
                let vt = svd.v_t.expect("v_t requested");
                let diag =
                    DMatrix::from_diagonal(&svd.singular_values.rows(0, rank).into_owned());
                let approx = u.columns(0, rank) * diag * vt.rows(0, rank);
                let mut flat = Vec::with_capacity(rows * cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        flat.push(approx[(r, c)] as f32);
                    }
                }
                TensorData::from_f32(tensor.shape().to_vec(), &flat)
                    .expect("shape matches rebuilt data")
            }
            _ => tensor.clone(),
        };
        delta.insert(name, out).expect("source names are unique");
    }
    Ok(DistributionVector {
        delta,
        base_id: v.base_id.clone(),
        source_id: v.source_id.clone(),
        excluded: v.excluded.clone(),
        exclusion_patterns: v.exclusion_patterns.clone(),
    })
}

/// A fitted two-component PCA basis over flattened distribution vectors.
///
/// Later vectors against the same base (trajectory checkpoints, merged
/// models) can be projected into the fitted plane with [`Projection::project`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Source identities of the fit set, in fit order.
    pub labels: Vec<String>,
    /// Tensor names and shapes, in flattening order.
    layout: Vec<(String, Vec<usize>)>,
    /// Centering vector over the flattened space.
    mean: Vec<f64>,
    /// Two orthonormal principal directions.
    components: [Vec<f64>; 2],
    /// Fraction of total variance along each component, non-increasing.
    pub explained_variance: [f64; 2],
}

/// Relative eigenvalue threshold below which a component is treated as
/// spreadless and replaced by a deterministic orthogonal completion.
const COLLAPSE_RATIO: f64 = 1e-12;

/// Flatten a vector's tensors (ascending name order) into one `f64` vector,
/// verifying it matches `layout`.
fn flatten(
    v: &DistributionVector,
    layout: &[(String, Vec<usize>)],
) -> Result<Vec<f64>, AnalysisError> {
    if let Some(name) = v
        .delta
        .names()
        .find(|n| !layout.iter().any(|(l, _)| l == n))
    {
        return Err(AnalysisError::NameMismatch {
            name: name.to_string(),
        });
    }
    let mut flat = Vec::new();
    for (name, shape) in layout {
        let tensor = v
            .delta
            .get(name)
            .ok_or_else(|| AnalysisError::NameMismatch { name: name.clone() })?;
        if tensor.shape() != shape.as_slice() {
            return Err(AnalysisError::ShapeMismatch { name: name.clone() });
        }
        flat.extend(tensor.to_f32().into_iter().map(f64::from));
    }
    Ok(flat)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    for x in v {
        *x /= norm;
    }
}

/// Flip a component so its largest-magnitude coordinate is positive (ties
/// break toward the lowest index), making eigenvector signs reproducible.
fn canonical_sign(v: &mut [f64]) {
    let mut lead = 0.0f64;
    for &x in v.iter() {
        if x.abs() > lead.abs() {
            lead = x;
        }
    }
    if lead < 0.0 {
        for x in v {
            *x = -*x;
        }
    }
}

/// Fit a two-component PCA over the vectors via the Gram-matrix method: the
/// eigenproblem is `N x N` for `N` vectors, never `d x d` in the (huge)
/// ambient dimension.
pub fn fit_pca(vecs: &[&DistributionVector]) -> Result<Projection, AnalysisError> {
    if vecs.len() < 2 {
        return Err(AnalysisError::TooFewVectors {
            needed: 2,
            got: vecs.len(),
        });
    }
    let layout: Vec<(String, Vec<usize>)> = vecs[0]
        .delta
        .iter()
        .map(|(name, t)| (name.to_string(), t.shape().to_vec()))
        .collect();
    let flats: Vec<Vec<f64>> = vecs
        .iter()
        .map(|v| flatten(v, &layout))
        .collect::<Result<_, _>>()?;

    let n = flats.len();
    let d = flats[0].len();
    let mut mean = vec![0.0f64; d];
    for flat in &flats {
        for (m, x) in mean.iter_mut().zip(flat) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = flats
        .iter()
        .map(|flat| flat.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let gram = DMatrix::from_fn(n, n, |i, j| dot(&centered[i], &centered[j]));
    let eigen = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let eigenvalue = |k: usize| eigen.eigenvalues[order[k]].max(0.0);
    let total_variance: f64 = (0..n).map(eigenvalue).sum();
    let input_scale: f64 = flats.iter().map(|f| dot(f, f)).sum();
    if total_variance <= input_scale * COLLAPSE_RATIO + f64::MIN_POSITIVE {
        return Err(AnalysisError::DegenerateSpread);
    }

    // Principal direction k is the centered data combined by eigenvector k.
    let direction = |k: usize| -> Vec<f64> {
        let weights = eigen.eigenvectors.column(order[k]);
        let mut u = vec![0.0f64; d];
        for (i, c) in centered.iter().enumerate() {
            let w = weights[i];
            for (target, x) in u.iter_mut().zip(c) {
                *target += w * x;
            }
        }
        normalize(&mut u);
        canonical_sign(&mut u);
        u
    };

    let first = direction(0);
    let second = if eigenvalue(1) > eigenvalue(0) * COLLAPSE_RATIO {
        // Re-orthogonalize against the first direction: the eigensolver is
        // close, the explicit step pins the orthonormality invariant.
        let mut u = direction(1);
        let overlap = dot(&u, &first);
        for (x, f) in u.iter_mut().zip(&first) {
            *x -= overlap * f;
        }
        normalize(&mut u);
        canonical_sign(&mut u);
        u
    } else {
        // No second direction in the data: complete the basis
        // deterministically from the flattest coordinate of the first.
        let pivot = first
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.abs()
                    .partial_cmp(&b.abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|(i, _)| i)
            .expect("dimension is nonzero");
        let mut u = vec![0.0f64; d];
        u[pivot] = 1.0;
        let overlap = first[pivot];
        for (x, f) in u.iter_mut().zip(&first) {
            *x -= overlap * f;
        }
        normalize(&mut u);
        canonical_sign(&mut u);
        u
    };

    Ok(Projection {
        labels: vecs.iter().map(|v| v.source_id.clone()).collect(),
        layout,
        mean,
        components: [first, second],
        explained_variance: [
            eigenvalue(0) / total_variance,
            eigenvalue(1) / total_variance,
        ],
    })
}

impl Projection {
    /// Coordinates of a vector in the fitted plane.
    pub fn project(&self, v: &DistributionVector) -> Result<(f64, f64), AnalysisError> {
        let flat = flatten(v, &self.layout)?;
        let centered: Vec<f64> = flat.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((
            dot(&centered, &self.components[0]),
            dot(&centered, &self.components[1]),
        ))
    }

    pub fn components(&self) -> (&[f64], &[f64]) {
        (&self.components[0], &self.components[1])
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Serialize as a container: the basis tensors (stored at `f32` working
    /// precision) plus JSON metadata for labels, variance, and layout.
    pub fn to_container(&self) -> TensorMap {
        let d = self.mean.len();
        let as_f32 = |values: &[f64]| {
            let narrowed: Vec<f32> = values.iter().map(|&x| x as f32).collect();
            TensorData::from_f32(vec![d], &narrowed).expect("length matches shape")
        };
        let mut map = TensorMap::new();
        map.insert("mean", as_f32(&self.mean)).expect("fresh map");
        map.insert("component_0", as_f32(&self.components[0]))
            .expect("fresh map");
        map.insert("component_1", as_f32(&self.components[1]))
            .expect("fresh map");
        let mut md = Metadata::new();
        md.insert(
            "labels".to_string(),
            serde_json::to_string(&self.labels).expect("strings serialize"),
        );
        md.insert(
            "explained_variance".to_string(),
            serde_json::to_string(&self.explained_variance).expect("floats serialize"),
        );
        md.insert(
            "layout".to_string(),
            serde_json::to_string(&self.layout).expect("layout serializes"),
        );
        map.set_metadata(Some(md));
        map
    }

    /// Rebuild from a container produced by [`Self::to_container`].
    pub fn from_container(container: &TensorMap) -> Result<Self, AnalysisError> {
        let md = container.metadata().ok_or_else(|| {
            AnalysisError::InvalidArtifact("missing metadata block".to_string())
        })?;
        let field = |key: &str| {
            md.get(key).ok_or_else(|| {
                AnalysisError::InvalidArtifact(format!("missing metadata key {key:?}"))
            })
        };
        let labels: Vec<String> = serde_json::from_str(field("labels")?)
            .map_err(|e| AnalysisError::InvalidArtifact(format!("bad labels: {e}")))?;
        let explained_variance: [f64; 2] = serde_json::from_str(field("explained_variance")?)
            .map_err(|e| {
                AnalysisError::InvalidArtifact(format!("bad explained_variance: {e}"))
            })?;
        let layout: Vec<(String, Vec<usize>)> = serde_json::from_str(field("layout")?)
            .map_err(|e| AnalysisError::InvalidArtifact(format!("bad layout: {e}")))?;

        let vector = |name: &str| -> Result<Vec<f64>, AnalysisError> {
            let tensor = container.get(name).ok_or_else(|| {
                AnalysisError::InvalidArtifact(format!("missing tensor {name:?}"))
            })?;
            if tensor.dtype() != DType::F32 || tensor.shape().len() != 1 {
                return Err(AnalysisError::InvalidArtifact(format!(
                    "tensor {name:?} must be a 1-D F32 vector"
                )));
            }
            Ok(tensor.to_f32().into_iter().map(f64::from).collect())
        };
        let mean = vector("mean")?;
        let components = [vector("component_0")?, vector("component_1")?];
        let span: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        for v in [&mean, &components[0], &components[1]] {
            if v.len() != span {
                return Err(AnalysisError::InvalidArtifact(format!(
                    "basis length {} does not match the layout's {span} elements",
                    v.len()
                )));
            }
        }
        Ok(Self {
            labels,
            layout,
            mean,
            components,
            explained_variance,
        })
    }

    /// Write to a container file.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), AnalysisError> {
        crate::tensor::write_container(path, &self.to_container())?;
        Ok(())
    }

    /// Load from a container file.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, AnalysisError> {
        Self::from_container(&crate::tensor::read_container(path)?)
    }
}

/// Frobenius norm of the difference between two equally shaped tensor maps.
pub fn frobenius_distance(a: &TensorMap, b: &TensorMap) -> f64 {
    let mut total = 0.0f64;
    for (name, ta) in a.iter() {
        if let Some(tb) = b.get(name) {
            for (x, y) in ta.to_f32().into_iter().zip(tb.to_f32()) {
                let diff = x as f64 - y as f64;
                total += diff * diff;
            }
        }
    }
    total.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn dv(label: &str, entries: &[(&str, Vec<usize>, Vec<f32>)]) -> DistributionVector {
        let mut delta = TensorMap::new();
        for (name, shape, values) in entries {
            delta
                .insert(*name, TensorData::from_f32(shape.clone(), values).unwrap())
                .unwrap();
        }
        DistributionVector {
            delta,
            base_id: "base".to_string(),
            source_id: label.to_string(),
            excluded: BTreeSet::new(),
            exclusion_patterns: vec![],
        }
    }

    fn dv1(label: &str, values: Vec<f32>) -> DistributionVector {
        let len = values.len();
        dv(label, &[("w", vec![len], values)])
    }

    #[test]
    fn cosine_of_a_vector_with_itself_is_one() {
        let v = dv1("v", vec![0.3, -1.2, 4.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn disjoint_support_vectors_are_exactly_orthogonal() {
        let a = dv1("a", vec![1.0, 0.0]);
        let b = dv1("b", vec![0.0, 1.0]);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_the_closed_form() {
        let a = dv1("a", vec![1.0, 0.0]);
        let b = dv1("b", vec![1.0, 1.0]);
        let expected = 1.0 / 2.0f64.sqrt();
        assert!((cosine(&a, &b).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn cosine_is_symmetric_and_scale_invariant() {
        let a = dv1("a", vec![0.5, -0.25, 1.5]);
        let b = dv1("b", vec![-1.0, 2.0, 0.75]);
        let ab = cosine(&a, &b).unwrap();
        assert_eq!(ab, cosine(&b, &a).unwrap());

        let a2 = dv1("a2", vec![1.0, -0.5, 3.0]); // 2a
        let b3 = dv1("b3", vec![-3.0, 6.0, 2.25]); // 3b
        assert!((cosine(&a2, &b3).unwrap() - ab).abs() <= 1e-12);

        let neg = dv1("neg", vec![1.0, -2.0, -0.75]); // -b
        assert!((cosine(&a, &neg).unwrap() + ab).abs() <= 1e-12);
        assert!(ab.abs() <= 1.0);
    }

    #[test]
    fn cosine_spans_multiple_tensors() {
        // Concatenated, a = [1,0,|,0] and b = [1,1,|,1] in tensor-name order.
        let a = dv("a", &[("p", vec![2], vec![1.0, 0.0]), ("q", vec![1], vec![0.0])]);
        let b = dv("b", &[("p", vec![2], vec![1.0, 1.0]), ("q", vec![1], vec![1.0])]);
        let expected = 1.0 / 3.0f64.sqrt();
        assert!((cosine(&a, &b).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn cosine_rejects_mismatched_vectors() {
        let a = dv1("a", vec![1.0]);
        let b = dv("b", &[("other", vec![1], vec![1.0])]);
        assert!(matches!(
            cosine(&a, &b).unwrap_err(),
            AnalysisError::NameMismatch { .. }
        ));

        let c = dv("c", &[("w", vec![2], vec![1.0, 0.0])]);
        assert!(matches!(
            cosine(&a, &c).unwrap_err(),
            AnalysisError::ShapeMismatch { .. }
        ));

        let zero = dv1("zero", vec![0.0]);
        match cosine(&a, &zero).unwrap_err() {
            AnalysisError::ZeroNorm { label } => assert_eq!(label, "zero"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn layerwise_cosine_reports_per_tensor_values() {
        let a = dv(
            "a",
            &[("t1", vec![2], vec![1.0, 2.0]), ("t2", vec![2], vec![1.0, 0.0])],
        );
        let same = layerwise_cosine(&a, &a).unwrap();
        assert!(same.values().all(|v| (v.unwrap() - 1.0).abs() <= 1e-9));

        let neg = dv(
            "neg",
            &[("t1", vec![2], vec![-1.0, -2.0]), ("t2", vec![2], vec![-1.0, 0.0])],
        );
        let flipped = layerwise_cosine(&a, &neg).unwrap();
        assert!(flipped.values().all(|v| (v.unwrap() + 1.0).abs() <= 1e-9));

        // Shared direction on t1, orthogonal on t2.
        let mixed = dv(
            "m",
            &[("t1", vec![2], vec![2.0, 4.0]), ("t2", vec![2], vec![0.0, 3.0])],
        );
        let partial = layerwise_cosine(&a, &mixed).unwrap();
        assert!((partial["t1"].unwrap() - 1.0).abs() <= 1e-9);
        assert_eq!(partial["t2"], Some(0.0));
    }

    #[test]
    fn layerwise_cosine_marks_zero_norm_tensors_undefined() {
        let a = dv(
            "a",
            &[("t1", vec![1], vec![1.0]), ("t2", vec![1], vec![0.0])],
        );
        let b = dv(
            "b",
            &[("t1", vec![1], vec![2.0]), ("t2", vec![1], vec![5.0])],
        );
        let map = layerwise_cosine(&a, &b).unwrap();
        assert!((map["t1"].unwrap() - 1.0).abs() <= 1e-9);
        assert_eq!(map["t2"], None);
    }

    #[test]
    fn single_vector_matrix_is_trivial() {
        let v = dv1("only", vec![1.0, 2.0]);
        let matrix = pairwise_matrix(&[&v]).unwrap();
        assert_eq!(matrix.labels, vec!["only"]);
        assert_eq!(matrix.values.len(), 1);
        assert!((matrix.values[0][0] - 1.0).abs() <= 1e-6);
        assert!(matches!(
            pairwise_matrix(&[]).unwrap_err(),
            AnalysisError::TooFewVectors { needed: 1, got: 0 }
        ));
    }

    #[test]
    fn orthogonal_triple_yields_zero_off_diagonals() {
        let a = dv1("a", vec![1.0, 0.0, 0.0]);
        let b = dv1("b", vec![0.0, 1.0, 0.0]);
        let c = dv1("c", vec![0.0, 0.0, 1.0]);
        let matrix = pairwise_matrix(&[&a, &b, &c]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert!((matrix.values[i][j] - 1.0).abs() <= 1e-6);
                } else {
                    assert!(matrix.values[i][j].abs() <= 1e-6);
                    // Exact symmetry, not just approximate.
                    assert_eq!(matrix.values[i][j], matrix.values[j][i]);
                }
            }
        }
    }

    #[test]
    fn similarity_matrix_renders_csv_with_label_header() {
        let a = dv1("a", vec![1.0, 0.0]);
        let b = dv1("b,2", vec![0.0, 1.0]);
        let csv = pairwise_matrix(&[&a, &b]).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], ",a,\"b,2\"");
        assert!(lines[1].starts_with("a,"));
        assert!(lines[2].starts_with("\"b,2\","));
    }

    #[test]
    fn norms_match_hand_values_and_scale_linearly() {
        let v = dv1("v", vec![3.0, 4.0]);
        let doubled = dv1("2v", vec![6.0, 8.0]);
        let out = norms(&[&v, &doubled]);
        assert_eq!(out[0].0, "v");
        assert!((out[0].1 - 5.0).abs() <= 1e-9);
        assert!((out[1].1 / out[0].1 - 2.0).abs() <= 1e-9);
        // Zero vectors have a norm (zero); only cosine rejects them.
        let zero = dv1("zero", vec![0.0]);
        assert_eq!(norms(&[&zero])[0].1, 0.0);
    }

    // --- SVD sparsification ---------------------------------------------

    #[test]
    fn truncation_of_a_diagonal_matrix_keeps_the_top_singular_value() {
        let v = dv("v", &[("m", vec![2, 2], vec![3.0, 0.0, 0.0, 1.0])]);
        let out = svd_sparsify(&v, 1).unwrap();
        let values = out.delta.get("m").unwrap().to_f32();
        let expected = [3.0f32, 0.0, 0.0, 0.0];
        for (got, want) in values.iter().zip(expected) {
            assert!((got - want).abs() <= 1e-6, "{values:?}");
        }
    }

    #[test]
    fn rank_one_matrices_are_recovered_exactly() {
        // uv^T for u = (1, 2), v = (3, -1).
        let v = dv("v", &[("m", vec![2, 2], vec![3.0, -1.0, 6.0, -2.0])]);
        let out = svd_sparsify(&v, 1).unwrap();
        for (got, want) in out
            .delta
            .get("m")
            .unwrap()
            .to_f32()
            .iter()
            .zip([3.0f32, -1.0, 6.0, -2.0])
        {
            assert!((got - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn full_rank_truncation_reconstructs_the_input() {
        let values: Vec<f32> = (0..12).map(|i| ((i * 7 % 13) as f32) - 6.0).collect();
        let v = dv("v", &[("m", vec![3, 4], values.clone())]);
        let out = svd_sparsify(&v, 3).unwrap();
        let back = out.delta.get("m").unwrap().to_f32();
        let err: f64 = back
            .iter()
            .zip(&values)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = values.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-5 * scale, "relative error {}", err / scale);
    }

    #[test]
    fn truncation_error_is_monotone_in_rank_and_norm_never_grows() {
        let values: Vec<f32> = (0..30)
            .map(|i| ((i * 17 % 23) as f32 / 7.0) - 1.5)
            .collect();
        let v = dv("v", &[("m", vec![5, 6], values)]);
        let reference = &v.delta;
        let full_norm = frobenius_distance(
            reference,
            &dv("z", &[("m", vec![5, 6], vec![0.0; 30])]).delta,
        );
        let mut previous_error = f64::INFINITY;
        for rank in 1..=5 {
            let truncated = svd_sparsify(&v, rank).unwrap();
            let error = frobenius_distance(reference, &truncated.delta);
            assert!(error <= previous_error + 1e-9, "rank {rank} got worse");
            previous_error = error;
            let norm = frobenius_distance(
                &truncated.delta,
                &dv("z", &[("m", vec![5, 6], vec![0.0; 30])]).delta,
            );
            assert!(norm <= full_norm + 1e-6 * full_norm);
        }
    }

    #[test]
    fn non_matrix_tensors_pass_through_untouched() {
        let v = dv(
            "v",
            &[
                ("bias", vec![4], vec![1.0, -1.0, 2.0, 0.5]),
                ("m", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            ],
        );
        let out = svd_sparsify(&v, 2).unwrap();
        assert_eq!(out.delta.get("bias").unwrap().data(), v.delta.get("bias").unwrap().data());
        assert_eq!(out.source_id, v.source_id);
        assert_eq!(out.base_id, v.base_id);
    }

    #[test]
    fn oversized_rank_is_rejected_per_tensor() {
        let v = dv("v", &[("m", vec![2, 3], vec![0.0; 6])]);
        match svd_sparsify(&v, 3).unwrap_err() {
            AnalysisError::RankTooLarge {
                name,
                rank,
                limit,
                shape,
            } => {
                assert_eq!(name, "m");
                assert_eq!(rank, 3);
                assert_eq!(limit, 2);
                assert_eq!(shape, vec![2, 3]);
            }
            other => panic!("unexpected error {other}"),
        }
        assert!(matches!(
            svd_sparsify(&v, 0).unwrap_err(),
            AnalysisError::ZeroRank
        ));
    }

    // --- PCA ---------------------------------------------------------------

    #[test]
    fn collinear_vectors_put_all_variance_on_the_first_component() {
        let vecs: Vec<DistributionVector> = (0..3)
            .map(|i| dv1(&format!("v{i}"), vec![i as f32, 0.0, 0.0]))
            .collect();
        let refs: Vec<&DistributionVector> = vecs.iter().collect();
        let proj = fit_pca(&refs).unwrap();
        assert_eq!(proj.labels, vec!["v0", "v1", "v2"]);
        assert!((proj.explained_variance[0] - 1.0).abs() <= 1e-9);
        assert!(proj.explained_variance[1].abs() <= 1e-9);
        // First component is the data axis (canonical positive sign).
        let (c0, c1) = proj.components();
        assert!((c0[0] - 1.0).abs() <= 1e-9, "{c0:?}");
        // Second is a deterministic orthogonal completion.
        assert!(dot(c0, c1).abs() <= 1e-8);
        assert!((dot(c1, c1) - 1.0).abs() <= 1e-8);
        // Projected coordinates are the centered positions on the axis.
        let coords: Vec<(f64, f64)> =
            refs.iter().map(|v| proj.project(v).unwrap()).collect();
        for ((x, y), want) in coords.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((x - want).abs() <= 1e-6, "{coords:?}");
            assert!(y.abs() <= 1e-6);
        }
    }

    fn spread_vectors() -> Vec<DistributionVector> {
        // Deterministic, non-degenerate cloud in 6 dimensions.
        (0..5)
            .map(|i| {
                let values: Vec<f32> = (0..6)
                    .map(|j| (((i * 31 + j * 17 + 7) % 19) as f32 / 19.0) - 0.5)
                    .collect();
                dv1(&format!("v{i}"), values)
            })
            .collect()
    }

    #[test]
    fn components_are_orthonormal_and_variance_ordered() {
        let vecs = spread_vectors();
        let refs: Vec<&DistributionVector> = vecs.iter().collect();
        let proj = fit_pca(&refs).unwrap();
        let (c0, c1) = proj.components();
        assert!((dot(c0, c0) - 1.0).abs() <= 1e-8);
        assert!((dot(c1, c1) - 1.0).abs() <= 1e-8);
        assert!(dot(c0, c1).abs() <= 1e-8);
        let [ev0, ev1] = proj.explained_variance;
        assert!(ev0 >= ev1 && ev1 >= 0.0 && ev0 <= 1.0);

        // Sample variance of the projected fit set is ordered the same way.
        let coords: Vec<(f64, f64)> =
            refs.iter().map(|v| proj.project(v).unwrap()).collect();
        let var = |extract: fn(&(f64, f64)) -> f64| {
            let mean: f64 =
                coords.iter().map(extract).sum::<f64>() / coords.len() as f64;
            coords
                .iter()
                .map(|c| (extract(c) - mean).powi(2))
                .sum::<f64>()
        };
        assert!(var(|c| c.0) >= var(|c| c.1));
    }

    #[test]
    fn reflection_through_the_mean_is_antipodal() {
        let vecs = spread_vectors();
        let refs: Vec<&DistributionVector> = vecs.iter().collect();
        let proj = fit_pca(&refs).unwrap();

        let flat = flatten(&vecs[2], &proj.layout).unwrap();
        let mirrored_values: Vec<f32> = flat
            .iter()
            .zip(proj.mean())
            .map(|(x, m)| (2.0 * m - x) as f32)
            .collect();
        let mirrored = dv1("mirror", mirrored_values);

        let (x, y) = proj.project(&vecs[2]).unwrap();
        let (mx, my) = proj.project(&mirrored).unwrap();
        assert!((mx + x).abs() <= 1e-6, "{mx} vs {x}");
        assert!((my + y).abs() <= 1e-6, "{my} vs {y}");
    }

    #[test]
    fn identical_vectors_cannot_be_projected() {
        let v = dv1("a", vec![1.0, 2.0, 3.0]);
        let mut w = v.clone();
        w.source_id = "b".to_string();
        assert!(matches!(
            fit_pca(&[&v, &w]).unwrap_err(),
            AnalysisError::DegenerateSpread
        ));
        assert!(matches!(
            fit_pca(&[&v]).unwrap_err(),
            AnalysisError::TooFewVectors { needed: 2, got: 1 }
        ));
    }

    #[test]
    fn projecting_a_mismatched_vector_is_an_error() {
        let vecs = spread_vectors();
        let refs: Vec<&DistributionVector> = vecs.iter().collect();
        let proj = fit_pca(&refs).unwrap();
        let odd = dv("odd", &[("other", vec![6], vec![0.0; 6])]);
        assert!(matches!(
            proj.project(&odd).unwrap_err(),
            AnalysisError::NameMismatch { .. }
        ));
        let short = dv1("short", vec![0.0; 3]);
        assert!(matches!(
            proj.project(&short).unwrap_err(),
            AnalysisError::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn projection_round_trips_through_a_container_file() {
        let vecs = spread_vectors();
        let refs: Vec<&DistributionVector> = vecs.iter().collect();
        let proj = fit_pca(&refs).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("projection.st");
        proj.save(&path).unwrap();
        let loaded = Projection::load(&path).unwrap();

        assert_eq!(loaded.labels, proj.labels);
        assert_eq!(loaded.explained_variance, proj.explained_variance);
        // The basis is stored at f32, so projected coordinates agree to
        // f32-level precision, not bit-exactly.
        for v in &refs {
            let (x, y) = proj.project(v).unwrap();
            let (lx, ly) = loaded.project(v).unwrap();
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - lx).abs() <= 1e-5 * scale);
            assert!((y - ly).abs() <= 1e-5 * scale);
        }
    }
}
