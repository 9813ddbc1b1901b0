//! Search orchestration: objective construction (external command or
//! synthetic), the optimize and grid commands, and their artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use serde::Serialize;

use optimerge_core::evaluator::{
    evaluate_external, EvalError, EvalRequest, HiddenTargetObjective, Objective,
    SyntheticObjective, TrialOutcome,
};
use optimerge_core::merge::{merge_recipe, MergeMethod, RecipeParams};
use optimerge_core::optimizer::{
    grid_search, run_search, GridOptions, GridReport, RunOptions, Study, StudyWriter, Trial,
    DEFAULT_GRID_CAP,
};
use optimerge_core::space::{Dim, SearchSpace, WeightVector, IT_DIM};
use optimerge_core::tensor::{read_container, write_container, TensorMap};
use optimerge_core::vectors::{weights_to_ratios, DistributionVector};

use crate::config::{DEFAULT_EVAL_TIMEOUT_SECONDS, EvaluatorKind, ModelSection, RunConfig};
use crate::digest::file_digest;
use crate::manifest::Manifest;

/// The checkpoint inputs of a run, loaded once.
pub struct LoadedModel {
    pub base: TensorMap,
    pub it: Option<DistributionVector>,
    pub vectors: Vec<DistributionVector>,
    /// `(path, digest)` of every input file, for manifests.
    pub input_digests: Vec<(PathBuf, String)>,
}

pub fn load_model(section: &ModelSection) -> anyhow::Result<LoadedModel> {
    let base = read_container(&section.base)
        .with_context(|| format!("reading base {}", section.base.display()))?;
    let it = section
        .it
        .as_ref()
        .map(|p| {
            DistributionVector::load(p).with_context(|| format!("reading vector {}", p.display()))
        })
        .transpose()?;
    let vectors: Vec<DistributionVector> = section
        .vectors
        .iter()
        .map(|p| {
            DistributionVector::load(p).with_context(|| format!("reading vector {}", p.display()))
        })
        .collect::<anyhow::Result<_>>()?;

    let mut input_digests = vec![(section.base.clone(), file_digest(&section.base)?)];
    for path in section.it.iter().chain(&section.vectors) {
        input_digests.push((path.clone(), file_digest(path)?));
    }
    Ok(LoadedModel {
        base,
        it,
        vectors,
        input_digests,
    })
}

impl LoadedModel {
    fn cpt_refs(&self) -> Vec<&DistributionVector> {
        self.vectors.iter().collect()
    }

    /// Merge at a point with the configured recipe.
    pub fn merge_at(
        &self,
        point: &WeightVector,
        method: MergeMethod,
        params: &RecipeParams,
    ) -> Result<TensorMap, optimerge_core::merge::MergeError> {
        merge_recipe(
            method,
            &self.base,
            self.it.as_ref(),
            &self.cpt_refs(),
            point,
            params,
        )
    }
}

/// Objective that merges a candidate checkpoint per trial and scores it with
/// an external command. Each trial works inside its own scratch directory,
/// deleted after scoring unless `keep_trials`.
pub struct MergeEvaluator {
    pub model: LoadedModel,
    pub method: MergeMethod,
    pub params: RecipeParams,
    pub command: String,
    pub timeout: Duration,
    pub keep_trials: bool,
}

impl Objective for MergeEvaluator {
    fn evaluate(&self, request: &EvalRequest) -> Result<TrialOutcome, EvalError> {
        fs::create_dir_all(&request.workdir)
            .map_err(|e| EvalError::Workspace(format!("{}: {e}", request.workdir.display())))?;
        let merge_start = Instant::now();
        let merged = self
            .model
            .merge_at(&request.point, self.method, &self.params)
            .map_err(|e| EvalError::InvalidRequest(format!("merge failed: {e}")))?;
        let model_path = request.workdir.join("merged.st");
        let write_result = write_container(&model_path, &merged)
            .map_err(|e| EvalError::Workspace(format!("{}: {e}", model_path.display())));
        let merge_ms = merge_start.elapsed().as_millis() as u64;

        let outcome = write_result
            .and_then(|()| evaluate_external(request, &model_path, &self.command, self.timeout));
        if !self.keep_trials {
            let _ = fs::remove_dir_all(&request.workdir);
        }
        Ok(TrialOutcome {
            result: outcome?,
            merge_ms,
        })
    }
}

/// The DARE/TIES knobs the config describes.
pub fn recipe_params(config: &RunConfig) -> anyhow::Result<RecipeParams> {
    Ok(RecipeParams {
        drop_rate: config.merge.drop_rate,
        density: config.merge.density,
        seed: config.merge.seed.unwrap_or(config.seed),
        dare_exempt_it: config.merge.dare_exempt_it,
        output_dtype: config.merge.output_dtype().map_err(anyhow::Error::from)?,
    })
}

/// Build the configured objective. The loaded model is returned separately
/// so the caller can merge the winning checkpoint afterwards.
pub fn build_objective(
    config: &RunConfig,
) -> anyhow::Result<(Box<dyn Objective>, Option<LoadedModel>)> {
    let recipe_params = recipe_params(config)?;
    match config.evaluator.kind {
        EvaluatorKind::Command => {
            let section = config.model.as_ref().expect("validated");
            let model = load_model(section)?;
            let evaluator = MergeEvaluator {
                model: load_model(section)?,
                method: config.merge.method,
                params: recipe_params,
                command: config.evaluator.command.clone().expect("validated"),
                timeout: Duration::from_secs(
                    config
                        .evaluator
                        .timeout_seconds
                        .unwrap_or(DEFAULT_EVAL_TIMEOUT_SECONDS),
                ),
                keep_trials: config.evaluator.keep_trials.unwrap_or(false),
            };
            Ok((Box::new(evaluator), Some(model)))
        }
        EvaluatorKind::SharpRidge => Ok((Box::new(SyntheticObjective::SharpRidge), None)),
        EvaluatorKind::Quadratic => Ok((
            Box::new(SyntheticObjective::Quadratic {
                center: config.evaluator.centers.clone().expect("validated"),
            }),
            None,
        )),
        EvaluatorKind::HiddenTarget => {
            let section = config.model.as_ref().expect("validated");
            let model = load_model(section)?;
            let target_path = config.evaluator.target.as_ref().expect("validated");
            let target = read_container(target_path)
                .with_context(|| format!("reading target {}", target_path.display()))?;
            let objective = SyntheticObjective::HiddenTarget(Box::new(HiddenTargetObjective {
                base: model.base.clone(),
                it_vec: model.it.clone(),
                cpt_vecs: model.vectors.clone(),
                target,
            }));
            Ok((Box::new(objective), Some(model)))
        }
    }
}

/// Scratch root for per-trial checkpoints: `OPTIMERGE_CACHE_DIR` when set,
/// otherwise `<output_dir>/trials`.
fn trial_workdir(output_dir: &Path) -> PathBuf {
    std::env::var_os("OPTIMERGE_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| output_dir.join("trials"))
}

/// The best-point summary written by optimize and grid runs.
#[derive(Debug, Serialize)]
struct BestSummary<'a> {
    index: usize,
    point: std::collections::BTreeMap<&'a str, f64>,
    values: &'a [f64],
    proxy_score: Option<f64>,
    dev_score: Option<f64>,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Write `best.json` and `ratios.json` for a winning trial.
fn write_best_artifacts(
    output_dir: &Path,
    space: &SearchSpace,
    best: &Trial,
) -> anyhow::Result<(PathBuf, PathBuf)> {
    let summary = BestSummary {
        index: best.index,
        point: space
            .names()
            .zip(best.point.values.iter().copied())
            .collect(),
        values: &best.point.values,
        proxy_score: best.proxy_score,
        dev_score: best.dev_score,
    };
    let best_path = output_dir.join("best.json");
    write_json(&best_path, &summary)?;

    let ratios = weights_to_ratios(space, &best.point)?;
    let ratios_path = output_dir.join("ratios.json");
    write_json(&ratios_path, &ratios)?;
    Ok((best_path, ratios_path))
}

/// Merge the winning checkpoint when the run has actual model inputs.
fn write_best_checkpoint(
    output_dir: &Path,
    config: &RunConfig,
    model: &LoadedModel,
    best: &Trial,
) -> anyhow::Result<PathBuf> {
    let params = recipe_params(config)?;
    let merged = model.merge_at(&best.point, config.merge.method, &params)?;
    let path = output_dir.join("merged_best.st");
    write_container(&path, &merged)?;
    Ok(path)
}

/// `optimize`: run (or resume) the sequential model-based search described
/// by the config, then write the study log, report, best point, ratios, and
/// — when the run merges real checkpoints — the winning checkpoint.
pub fn cmd_optimize(
    config_path: &Path,
    resume: bool,
    parallel: usize,
    range: Option<(f64, f64)>,
    keep_trials: bool,
) -> anyhow::Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some((low, high)) = range {
        let dims: Vec<Dim> = config
            .space
            .dims()
            .iter()
            .map(|d| {
                if d.name == IT_DIM {
                    d.clone()
                } else {
                    Dim::new(d.name.clone(), low, high)
                }
            })
            .collect();
        config.space = SearchSpace::new(dims)
            .map_err(|e| crate::config::ConfigError(format!("--range: {e}")))?;
    }
    if keep_trials {
        config.evaluator.keep_trials = Some(true);
    }
    fs::create_dir_all(&config.output_dir)?;
    let study_path = config.output_dir.join("study.jsonl");

    let (mut study, mut writer) = if resume && study_path.exists() {
        let study = Study::load(&study_path)?;
        // Rewrite the log canonically before appending: a kill can leave a
        // torn final line, and appending after one would corrupt the file.
        study.save(&study_path)?;
        let writer = StudyWriter::append_to(&study_path)?;
        eprintln!(
            "resuming {} at trial {}",
            study_path.display(),
            study.len()
        );
        (study, writer)
    } else {
        let study = Study::new(
            config.space.clone(),
            config.sampler.build(config.seed),
            config.budgets.build(),
        )?;
        let writer = StudyWriter::create(&study_path, &study)?;
        (study, writer)
    };

    let (objective, model) = build_objective(&config)?;
    let options = RunOptions {
        workers: parallel.max(1),
        workdir: trial_workdir(&config.output_dir),
    };
    let report = run_search(&mut study, objective.as_ref(), Some(&mut writer), &options)?;

    write_json(&config.output_dir.join("report.json"), &report)?;
    let best = report
        .best
        .clone()
        .ok_or_else(|| anyhow!("search finished without a scored trial"))?;
    let (best_path, ratios_path) = write_best_artifacts(&config.output_dir, study.space(), &best)?;

    let mut outputs = vec![
        study_path.clone(),
        config.output_dir.join("report.json"),
        best_path,
        ratios_path,
    ];
    if let Some(model) = &model {
        outputs.push(write_best_checkpoint(&config.output_dir, &config, model, &best)?);
    }

    let mut manifest = Manifest::new("optimize", config.seed);
    manifest.add_input(config_path)?;
    if let Some(model) = &model {
        for (path, digest) in &model.input_digests {
            manifest.add_input_digest(path, digest.clone());
        }
    }
    if let Some(target) = &config.evaluator.target {
        manifest.add_input(target)?;
    }
    for path in &outputs {
        manifest.add_output(path)?;
    }
    manifest.write(&config.output_dir.join("manifest.json"))?;

    println!(
        "best trial {} point {:?} proxy {} dev {}",
        best.index,
        best.point.values,
        best.proxy_score.map_or("-".into(), |s| format!("{s:.6}")),
        best.dev_score.map_or("-".into(), |s| format!("{s:.6}")),
    );
    println!("study: {}", study_path.display());
    Ok(())
}

/// `grid`: exhaustive sweep at `points` per dimension. Refuses budgets over
/// the built-in cap unless forced.
pub fn cmd_grid(
    config_path: &Path,
    points: usize,
    force: bool,
    keep_trials: bool,
) -> anyhow::Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if keep_trials {
        config.evaluator.keep_trials = Some(true);
    }
    fs::create_dir_all(&config.output_dir)?;

    let (objective, model) = build_objective(&config)?;
    let options = GridOptions {
        cap: if force { None } else { Some(DEFAULT_GRID_CAP) },
        proxy_samples: config.budgets.build().proxy_samples,
        workdir: trial_workdir(&config.output_dir),
    };
    let report = grid_search(&config.space, objective.as_ref(), points, &options)?;

    let report_path = config.output_dir.join("grid_report.json");
    write_json(&report_path, &report)?;
    let csv_path = config.output_dir.join("grid.csv");
    fs::write(&csv_path, grid_csv(&config.space, &report))?;

    let mut outputs = vec![report_path, csv_path];
    if let Some(best) = report.best_trial() {
        let (best_path, ratios_path) =
            write_best_artifacts(&config.output_dir, &config.space, best)?;
        outputs.push(best_path);
        outputs.push(ratios_path);
        if let Some(model) = &model {
            outputs.push(write_best_checkpoint(&config.output_dir, &config, model, best)?);
        }
        println!(
            "best grid point {:?} proxy {}",
            best.point.values,
            best.proxy_score.map_or("-".into(), |s| format!("{s:.6}")),
        );
    } else {
        println!("no grid point scored successfully");
    }

    let mut manifest = Manifest::new("grid", config.seed);
    manifest.add_input(config_path)?;
    if let Some(model) = &model {
        for (path, digest) in &model.input_digests {
            manifest.add_input_digest(path, digest.clone());
        }
    }
    for path in &outputs {
        manifest.add_output(path)?;
    }
    manifest.write(&config.output_dir.join("manifest.json"))?;
    Ok(())
}

/// One row per grid point: trial, weights, proxy score, state.
fn grid_csv(space: &SearchSpace, report: &GridReport) -> String {
    let mut out = String::from("trial");
    for name in space.names() {
        out.push(',');
        out.push_str(&crate::commands::csv_field(name));
    }
    out.push_str(",proxy,state\n");
    for trial in &report.trials {
        out.push_str(&trial.index.to_string());
        for v in &trial.point.values {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push(',');
        if let Some(s) = trial.proxy_score {
            out.push_str(&s.to_string());
        }
        out.push(',');
        out.push_str(&format!("{:?}", trial.state).to_lowercase());
        out.push('\n');
    }
    out
}
