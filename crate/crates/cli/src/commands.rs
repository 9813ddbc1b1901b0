//! The non-search commands: extract, merge, the analyze family, and report.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use optimerge_core::analysis::{
    cosine, fit_pca, layerwise_cosine, norms, pairwise_matrix, svd_sparsify, Projection,
};
use optimerge_core::optimizer::Study;
use optimerge_core::space::WeightVector;
use optimerge_core::tensor::{read_container_bytes, write_container};
use optimerge_core::vectors::{extract, DistributionVector, ExclusionRule};

use crate::config::{ConfigError, RunConfig};
use crate::digest::bytes_digest;
use crate::manifest::Manifest;

/// Quote a CSV field when it contains a delimiter, quote, or newline.
pub(crate) fn csv_field(raw: &str) -> String {
    if raw.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

/// Write `text` to `out`, or to standard output when no path is given.
fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// `extract`: subtract the base from a fine-tuned checkpoint and store the
/// delta as a distribution-vector container.
pub fn cmd_extract(
    base: &Path,
    tuned: &Path,
    out: &Path,
    excludes: &[String],
    no_exclusions: bool,
    label: Option<&str>,
) -> anyhow::Result<()> {
    let base_bytes = fs::read(base).with_context(|| format!("reading {}", base.display()))?;
    let tuned_bytes = fs::read(tuned).with_context(|| format!("reading {}", tuned.display()))?;
    let base_map = read_container_bytes(&base_bytes)
        .with_context(|| format!("parsing {}", base.display()))?;
    let tuned_map = read_container_bytes(&tuned_bytes)
        .with_context(|| format!("parsing {}", tuned.display()))?;

    let rule = if no_exclusions {
        ExclusionRule::none()
    } else if excludes.is_empty() {
        ExclusionRule::default()
    } else {
        ExclusionRule::new(excludes.to_vec())
    };

    let base_id = bytes_digest(&base_bytes);
    let source_id = label
        .map(str::to_string)
        .unwrap_or_else(|| bytes_digest(&tuned_bytes));
    let vector = extract(&tuned_map, &base_map, &rule, base_id, source_id)?;

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    vector.save(out)?;
    println!(
        "extracted {} tensors ({} excluded) -> {}",
        vector.delta.len(),
        vector.excluded.len(),
        out.display()
    );
    Ok(())
}

/// `merge`: compose a checkpoint at the explicit weights in the config.
pub fn cmd_merge(config_path: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let config = RunConfig::load(config_path)?;
    let section = config
        .model
        .as_ref()
        .ok_or_else(|| ConfigError("merge requires a [model] section".into()))?;
    let weights = config
        .merge
        .weights
        .clone()
        .ok_or_else(|| ConfigError("merge requires merge.weights in the config".into()))?;

    let model = crate::pipeline::load_model(section)?;
    let params = crate::pipeline::recipe_params(&config)?;
    let point = WeightVector::new(weights.clone());
    let merged = model.merge_at(&point, config.merge.method, &params)?;

    let out_path: PathBuf = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output_dir.join("merged.st"));
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_container(&out_path, &merged)?;

    let mut manifest = Manifest::new("merge", params.seed);
    manifest.add_input(config_path)?;
    for (path, digest) in &model.input_digests {
        manifest.add_input_digest(path, digest.clone());
    }
    manifest.add_output(&out_path)?;
    manifest.set("method", config.merge.method);
    manifest.set("weights", &weights);
    manifest.set("drop_rate", config.merge.drop_rate);
    manifest.set("density", config.merge.density);
    manifest.set("dare_exempt_it", config.merge.dare_exempt_it);
    let manifest_path = PathBuf::from(format!("{}.manifest.json", out_path.display()));
    manifest.write(&manifest_path)?;

    println!("merged -> {}", out_path.display());
    Ok(())
}

fn load_vectors(paths: &[PathBuf]) -> anyhow::Result<Vec<DistributionVector>> {
    paths
        .iter()
        .map(|p| {
            DistributionVector::load(p).with_context(|| format!("reading {}", p.display()))
        })
        .collect()
}

/// `analyze cosine`: pairwise cosine-similarity matrix over ≥ 2 vectors.
pub fn cmd_analyze_cosine(
    paths: &[PathBuf],
    json: bool,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let vectors = load_vectors(paths)?;
    let refs: Vec<&DistributionVector> = vectors.iter().collect();
    let matrix = pairwise_matrix(&refs)?;
    if paths.len() == 2 {
        // The scalar is what a two-vector comparison is after; surface it.
        eprintln!("cosine = {}", cosine(refs[0], refs[1])?);
    }
    let text = if json {
        let mut t = serde_json::to_string_pretty(&matrix)?;
        t.push('\n');
        t
    } else {
        matrix.to_csv()
    };
    emit(&text, out)
}

/// `analyze layerwise`: per-tensor cosine between exactly two vectors.
pub fn cmd_analyze_layerwise(
    left: &Path,
    right: &Path,
    json: bool,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let a = DistributionVector::load(left)?;
    let b = DistributionVector::load(right)?;
    let map = layerwise_cosine(&a, &b)?;
    let text = if json {
        let mut t = serde_json::to_string_pretty(&map)?;
        t.push('\n');
        t
    } else {
        let mut t = String::from("tensor,cosine\n");
        for (name, value) in &map {
            t.push_str(&csv_field(name));
            t.push(',');
            if let Some(v) = value {
                t.push_str(&v.to_string());
            }
            t.push('\n');
        }
        t
    };
    emit(&text, out)
}

/// `analyze norms`: L2 norm of each vector.
pub fn cmd_analyze_norms(
    paths: &[PathBuf],
    json: bool,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let vectors = load_vectors(paths)?;
    let refs: Vec<&DistributionVector> = vectors.iter().collect();
    let rows = norms(&refs);
    let text = if json {
        #[derive(Serialize)]
        struct Row<'a> {
            label: &'a str,
            l2_norm: f64,
        }
        let rows: Vec<Row> = rows
            .iter()
            .map(|(label, n)| Row {
                label,
                l2_norm: *n,
            })
            .collect();
        let mut t = serde_json::to_string_pretty(&rows)?;
        t.push('\n');
        t
    } else {
        let mut t = String::from("label,l2_norm\n");
        for (label, n) in &rows {
            t.push_str(&csv_field(label));
            t.push(',');
            t.push_str(&n.to_string());
            t.push('\n');
        }
        t
    };
    emit(&text, out)
}

/// Coordinates of a set of vectors in a fitted plane, as CSV or JSON.
fn coordinates_text(
    projection: &Projection,
    vectors: &[DistributionVector],
    json: bool,
) -> anyhow::Result<String> {
    let coords: Vec<(String, f64, f64)> = vectors
        .iter()
        .map(|v| {
            projection
                .project(v)
                .map(|(x, y)| (v.source_id.clone(), x, y))
        })
        .collect::<Result<_, _>>()?;
    if json {
        #[derive(Serialize)]
        struct Row {
            label: String,
            x: f64,
            y: f64,
        }
        #[derive(Serialize)]
        struct Out {
            explained_variance: [f64; 2],
            coordinates: Vec<Row>,
        }
        let out = Out {
            explained_variance: projection.explained_variance,
            coordinates: coords
                .into_iter()
                .map(|(label, x, y)| Row { label, x, y })
                .collect(),
        };
        let mut t = serde_json::to_string_pretty(&out)?;
        t.push('\n');
        Ok(t)
    } else {
        let mut t = String::from("label,x,y\n");
        for (label, x, y) in &coords {
            t.push_str(&format!("{},{x},{y}\n", csv_field(label)));
        }
        Ok(t)
    }
}

/// `analyze pca`: fit a two-component basis over ≥ 2 vectors (each 2-D
/// tensor first truncated to `rank` singular triplets unless `raw`), save it
/// as a container, and emit the fit set's coordinates.
pub fn cmd_analyze_pca(
    paths: &[PathBuf],
    rank: usize,
    raw: bool,
    basis_out: &Path,
    json: bool,
    coords_out: Option<&Path>,
) -> anyhow::Result<()> {
    let loaded = load_vectors(paths)?;
    let vectors: Vec<DistributionVector> = if raw {
        loaded
    } else {
        loaded
            .iter()
            .map(|v| svd_sparsify(v, rank))
            .collect::<Result<_, _>>()?
    };
    let refs: Vec<&DistributionVector> = vectors.iter().collect();
    let projection = fit_pca(&refs)?;

    if let Some(parent) = basis_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    projection.save(basis_out)?;
    eprintln!(
        "explained variance: {:?} -> {}",
        projection.explained_variance,
        basis_out.display()
    );
    let text = coordinates_text(&projection, &vectors, json)?;
    emit(&text, coords_out)
}

/// `analyze project`: project vectors into a previously fitted basis.
pub fn cmd_analyze_project(
    basis: &Path,
    paths: &[PathBuf],
    rank: usize,
    raw: bool,
    json: bool,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let projection = Projection::load(basis)?;
    let loaded = load_vectors(paths)?;
    let vectors: Vec<DistributionVector> = if raw {
        loaded
    } else {
        loaded
            .iter()
            .map(|v| svd_sparsify(v, rank))
            .collect::<Result<_, _>>()?
    };
    let text = coordinates_text(&projection, &vectors, json)?;
    emit(&text, out)
}

/// Summary statistics of a finished (or interrupted) study.
#[derive(Debug, Serialize)]
struct ReportSummary {
    trials: usize,
    scored: usize,
    failed: usize,
    best: Option<BestLine>,
    wall_ms: WallClock,
}

#[derive(Debug, Serialize)]
struct BestLine {
    index: usize,
    values: Vec<f64>,
    proxy_score: Option<f64>,
    dev_score: Option<f64>,
}

/// Measured time split between checkpoint construction and evaluation.
#[derive(Debug, Serialize)]
struct WallClock {
    merge: u64,
    evaluate: u64,
    total: u64,
    merge_fraction: f64,
    evaluate_fraction: f64,
}

/// `report`: trial-table CSV plus a summary with the measured merge/evaluate
/// wall-clock split.
pub fn cmd_report(
    study_path: &Path,
    csv_out: Option<&Path>,
    summary_out: Option<&Path>,
) -> anyhow::Result<()> {
    let study = Study::load(study_path)?;

    let mut csv = String::from("trial,batch");
    for name in study.space().names() {
        csv.push(',');
        csv.push_str(&csv_field(name));
    }
    csv.push_str(",proxy,dev,best_so_far\n");
    let mut best_so_far: Option<f64> = None;
    for trial in study.trials() {
        csv.push_str(&format!("{},{}", trial.index, trial.batch));
        for v in &trial.point.values {
            csv.push(',');
            csv.push_str(&v.to_string());
        }
        csv.push(',');
        if let Some(p) = trial.proxy_score {
            csv.push_str(&p.to_string());
            best_so_far = Some(best_so_far.map_or(p, |b: f64| b.max(p)));
        }
        csv.push(',');
        if let Some(d) = trial.dev_score {
            csv.push_str(&d.to_string());
        }
        csv.push(',');
        if let Some(b) = best_so_far {
            csv.push_str(&b.to_string());
        }
        csv.push('\n');
    }
    emit(&csv, csv_out)?;

    let merge: u64 = study.trials().iter().filter_map(|t| t.merge_ms).sum();
    let evaluate: u64 = study.trials().iter().filter_map(|t| t.eval_ms).sum();
    let total = merge + evaluate;
    let fraction = |part: u64| {
        if total == 0 {
            0.0
        } else {
            part as f64 / total as f64
        }
    };
    let best = study
        .best_by_dev()
        .or_else(|| study.best_by_proxy())
        .map(|t| BestLine {
            index: t.index,
            values: t.point.values.clone(),
            proxy_score: t.proxy_score,
            dev_score: t.dev_score,
        });
    let summary = ReportSummary {
        trials: study.len(),
        scored: study.scored().count(),
        failed: study
            .trials()
            .iter()
            .filter(|t| t.state == optimerge_core::optimizer::TrialState::Failed)
            .count(),
        best,
        wall_ms: WallClock {
            merge,
            evaluate,
            total,
            merge_fraction: fraction(merge),
            evaluate_fraction: fraction(evaluate),
        },
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    match summary_out {
        Some(path) => fs::write(path, &text)
            .with_context(|| format!("writing {}", path.display()))?,
        // The table already owns stdout when no CSV path was given; keep the
        // two machine formats on separate streams.
        None => {
            if csv_out.is_some() {
                print!("{text}");
            } else {
                eprint!("{text}");
            }
        }
    }
    Ok(())
}
