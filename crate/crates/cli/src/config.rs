//! The declarative run configuration: one TOML file (or its JSON equivalent,
//! chosen by file extension) describes an entire pipeline invocation —
//! inputs, merge recipe, search space, sampler, budgets, and evaluator.
//!
//! Parsing is strict: unknown keys, out-of-bound weights, and missing files
//! all fail before any compute. Relative paths are resolved against the
//! config file's directory so a run directory is self-contained.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use optimerge_core::merge::MergeMethod;
use optimerge_core::optimizer::{BandwidthRule, Budgets, TpeConfig};
use optimerge_core::space::SearchSpace;
use optimerge_core::tensor::DType;

/// A configuration problem. Distinct from runtime failures so the process
/// can exit with the validation status code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(message: impl Into<String>) -> ConfigError {
    ConfigError(message.into())
}

/// Checkpoint inputs: the shared base plus extracted distribution vectors.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Base checkpoint container.
    pub base: PathBuf,
    /// Instruction-tuned distribution vector (optional).
    #[serde(default)]
    pub it: Option<PathBuf>,
    /// Continually pre-trained distribution vectors, in search-space order.
    #[serde(default)]
    pub vectors: Vec<PathBuf>,
}

/// Merge recipe and its parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSection {
    pub method: MergeMethod,
    /// DARE per-element drop probability.
    pub drop_rate: f64,
    /// TIES kept-entry fraction.
    pub density: f64,
    /// Seed for the DARE streams; defaults to the top-level seed.
    pub seed: Option<u64>,
    /// Keep the instruction-tuned vector dense under DARE.
    pub dare_exempt_it: bool,
    /// Explicit weights for the `merge` command, aligned with the space.
    pub weights: Option<Vec<f64>>,
    /// Storage dtype of merged outputs (`F32`/`F16`/`BF16`); keeps base
    /// dtypes when absent.
    pub output_dtype: Option<String>,
}

impl Default for MergeSection {
    fn default() -> Self {
        Self {
            method: MergeMethod::TaskArithmetic,
            drop_rate: 0.1,
            density: 0.2,
            seed: None,
            dare_exempt_it: false,
            weights: None,
            output_dtype: None,
        }
    }
}

impl MergeSection {
    pub fn output_dtype(&self) -> Result<Option<DType>, ConfigError> {
        self.output_dtype
            .as_deref()
            .map(|s| DType::parse(s).map_err(|e| bad(format!("merge.output_dtype: {e}"))))
            .transpose()
    }
}

/// Sampler overrides; anything unset falls back to the built-in defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub gamma: Option<f64>,
    pub startup: Option<usize>,
    pub candidates: Option<usize>,
    pub bandwidth: Option<BandwidthRule>,
}

impl SamplerSection {
    pub fn build(&self, seed: u64) -> TpeConfig {
        let defaults = TpeConfig::default();
        TpeConfig {
            gamma: self.gamma.unwrap_or(defaults.gamma),
            startup: self.startup.unwrap_or(defaults.startup),
            candidates: self.candidates.unwrap_or(defaults.candidates),
            bandwidth: self.bandwidth.clone().unwrap_or(defaults.bandwidth),
            seed,
        }
    }
}

/// Budget overrides; anything unset falls back to the built-in defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetsSection {
    pub trials: Option<usize>,
    pub batch: Option<usize>,
    pub top_k: Option<usize>,
    pub proxy_samples: Option<u32>,
    pub dev_samples: Option<u32>,
}

impl BudgetsSection {
    pub fn build(&self) -> Budgets {
        let defaults = Budgets::default();
        Budgets {
            trials: self.trials.unwrap_or(defaults.trials),
            batch: self.batch.unwrap_or(defaults.batch),
            top_k: self.top_k.unwrap_or(defaults.top_k),
            proxy_samples: self.proxy_samples.unwrap_or(defaults.proxy_samples),
            dev_samples: self.dev_samples.unwrap_or(defaults.dev_samples),
        }
    }
}

/// Which scorer drives the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    /// External subprocess fed the merged checkpoint path.
    Command,
    /// Analytic needle-on-a-ridge objective.
    SharpRidge,
    /// Analytic concave bowl around configured centers.
    Quadratic,
    /// Negative distance to a planted target checkpoint.
    HiddenTarget,
}

/// Evaluator selection plus kind-specific settings. Fields that do not
/// belong to the chosen kind are rejected at validation.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorSection {
    pub kind: EvaluatorKind,
    /// Shell command template with `{model}`, `{mode}`, `{budget}`
    /// placeholders (`command` kind only).
    #[serde(default)]
    pub command: Option<String>,
    /// Seconds before a hung evaluator is killed; default one hour.
    #[serde(default)]
    pub timeout_seconds: Option<u64>,
    /// Keep each trial's merged checkpoint instead of deleting it after
    /// scoring (`command` kind only).
    #[serde(default)]
    pub keep_trials: Option<bool>,
    /// Bowl centers, one per dimension (`quadratic` kind only).
    #[serde(default)]
    pub centers: Option<Vec<f64>>,
    /// Target checkpoint container (`hidden_target` kind only).
    #[serde(default)]
    pub target: Option<PathBuf>,
}

pub const DEFAULT_EVAL_TIMEOUT_SECONDS: u64 = 3600;

/// One full pipeline invocation.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory receiving every artifact of the run.
    pub output_dir: PathBuf,
    /// Root seed for the sampler and (by default) the DARE streams.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub merge: MergeSection,
    /// Search dimensions, in weight order (`it` first when present).
    pub space: SearchSpace,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub budgets: BudgetsSection,
    pub evaluator: EvaluatorSection,
}

impl RunConfig {
    /// Parse and validate a config file; `path`'s extension picks the
    /// format (`.json` is JSON, anything else TOML).
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let mut config: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| bad(format!("invalid JSON config: {e}")))?
        } else {
            toml::from_str(&text).map_err(|e| bad(format!("invalid TOML config: {e}")))?
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            config.rebase(dir);
        }
        config.validate()?;
        Ok(config)
    }

    /// Resolve every relative path against the config file's directory.
    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(model) = &mut self.model {
            fix(&mut model.base);
            if let Some(it) = &mut model.it {
                fix(it);
            }
            for v in &mut model.vectors {
                fix(v);
            }
        }
        if let Some(target) = &mut self.evaluator.target {
            fix(target);
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if let Some(model) = &self.model {
            let mut required: Vec<&Path> = vec![&model.base];
            required.extend(model.it.as_deref());
            required.extend(model.vectors.iter().map(PathBuf::as_path));
            for p in required {
                if !p.is_file() {
                    return Err(bad(format!("input file not found: {}", p.display())));
                }
            }
            let expected = model.vectors.len() + usize::from(model.it.is_some());
            if self.space.len() != expected {
                return Err(bad(format!(
                    "space has {} dimensions but the model supplies {expected} \
                     vectors ({} CPT{})",
                    self.space.len(),
                    model.vectors.len(),
                    if model.it.is_some() { " plus it" } else { "" },
                )));
            }
            if model.it.is_some() != self.space.has_it_dim() {
                return Err(bad(if model.it.is_some() {
                    "model.it is set, so the first space dimension must be named \"it\""
                } else {
                    "the space has an \"it\" dimension but model.it is not set"
                }));
            }
        }

        let merge = &self.merge;
        if !merge.drop_rate.is_finite() || !(0.0..1.0).contains(&merge.drop_rate) {
            return Err(bad(format!(
                "merge.drop_rate {} outside [0, 1)",
                merge.drop_rate
            )));
        }
        if !merge.density.is_finite() || !(merge.density > 0.0 && merge.density <= 1.0) {
            return Err(bad(format!(
                "merge.density {} outside (0, 1]",
                merge.density
            )));
        }
        merge.output_dtype()?;
        if let Some(weights) = &merge.weights {
            if weights.len() != self.space.len() {
                return Err(bad(format!(
                    "merge.weights has {} entries for a {}-dimensional space",
                    weights.len(),
                    self.space.len()
                )));
            }
            for (w, dim) in weights.iter().zip(self.space.dims()) {
                if !w.is_finite() || !dim.contains(*w) {
                    return Err(bad(format!(
                        "merge weight {w} for {:?} outside [{}, {}]",
                        dim.name, dim.low, dim.high
                    )));
                }
            }
        }

        let sampler = self.sampler.build(self.seed);
        sampler
            .validate()
            .map_err(|e| bad(format!("sampler: {e}")))?;
        let budgets = self.budgets.build();
        budgets
            .validate()
            .map_err(|e| bad(format!("budgets: {e}")))?;

        self.validate_evaluator()
    }

    fn validate_evaluator(&self) -> Result<(), ConfigError> {
        let e = &self.evaluator;
        let only_for = |present: bool, field: &str, kind: &str| {
            if present {
                Err(bad(format!(
                    "evaluator.{field} is only valid for kind = \"{kind}\""
                )))
            } else {
                Ok(())
            }
        };
        match e.kind {
            EvaluatorKind::Command => {
                only_for(e.centers.is_some(), "centers", "quadratic")?;
                only_for(e.target.is_some(), "target", "hidden_target")?;
                if e.command.as_deref().map_or(true, str::is_empty) {
                    return Err(bad("evaluator.command is required for kind = \"command\""));
                }
                if self.model.is_none() {
                    return Err(bad("a [model] section is required for kind = \"command\""));
                }
            }
            EvaluatorKind::SharpRidge => {
                only_for(e.command.is_some(), "command", "command")?;
                only_for(e.timeout_seconds.is_some(), "timeout_seconds", "command")?;
                only_for(e.keep_trials.is_some(), "keep_trials", "command")?;
                only_for(e.centers.is_some(), "centers", "quadratic")?;
                only_for(e.target.is_some(), "target", "hidden_target")?;
            }
            EvaluatorKind::Quadratic => {
                only_for(e.command.is_some(), "command", "command")?;
                only_for(e.timeout_seconds.is_some(), "timeout_seconds", "command")?;
                only_for(e.keep_trials.is_some(), "keep_trials", "command")?;
                only_for(e.target.is_some(), "target", "hidden_target")?;
                let centers = e
                    .centers
                    .as_ref()
                    .ok_or_else(|| bad("evaluator.centers is required for kind = \"quadratic\""))?;
                if centers.len() != self.space.len() {
                    return Err(bad(format!(
                        "evaluator.centers has {} entries for a {}-dimensional space",
                        centers.len(),
                        self.space.len()
                    )));
                }
                if centers.iter().any(|c| !c.is_finite()) {
                    return Err(bad("evaluator.centers must be finite"));
                }
            }
            EvaluatorKind::HiddenTarget => {
                only_for(e.command.is_some(), "command", "command")?;
                only_for(e.timeout_seconds.is_some(), "timeout_seconds", "command")?;
                only_for(e.keep_trials.is_some(), "keep_trials", "command")?;
                only_for(e.centers.is_some(), "centers", "quadratic")?;
                let target = e.target.as_ref().ok_or_else(|| {
                    bad("evaluator.target is required for kind = \"hidden_target\"")
                })?;
                if !target.is_file() {
                    return Err(bad(format!(
                        "evaluator.target not found: {}",
                        target.display()
                    )));
                }
                if self.model.is_none() {
                    return Err(bad(
                        "a [model] section is required for kind = \"hidden_target\"",
                    ));
                }
            }
        }
        Ok(())
    }
}
