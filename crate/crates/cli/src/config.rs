//! Experiment configuration file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use timeembed::benchgen::SynthConfig;
use timeembed::dataset::Schema;
use timeembed::encoding::EncoderConfig;
use timeembed::models::{count_params, solve_hidden_for_budget, AttentionSpec, Family, ModelSpec, Task, TeMode};
use timeembed::training::{default_fractions, CvConfig, FeatureConfig, Hyper};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, overridable with `--out`.
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub gen: Option<GenSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub cv: CvSection,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub models: Vec<ModelEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub n_train: usize,
    pub n_test: usize,
    pub synth: SynthConfig,
}

/// A dataset directory as written by `gen`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSection {
    pub k: usize,
    pub runs: usize,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { k: 5, runs: 10 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub fractions: Vec<f64>,
    pub seeds: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            fractions: default_fractions(),
            seeds: 10,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub family: Family,
    #[serde(default)]
    pub te_mode: TeMode,
    /// Fixed hidden size; exclusive with `budget`.
    pub hidden: Option<usize>,
    /// Parameter budget used to pick the hidden size.
    pub budget: Option<usize>,
    pub head_widths: Option<Vec<usize>>,
    #[serde(default = "default_te_dim")]
    pub te_dim: usize,
    /// Defaults to the feature window.
    pub te_max_time: Option<f64>,
    pub attention: Option<AttentionSpec>,
}

fn default_te_dim() -> usize {
    32
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn cv_config(&self) -> CvConfig {
        CvConfig {
            k: self.cv.k,
            runs: self.cv.runs,
            base_seed: self.seed,
            hyper: self.hyper,
            features: self.features,
        }
    }

    /// Problems that make the config unusable, all at once.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.cv_config().validate() {
            out.push(e.to_string());
        }
        if !(self.features.window_hours > 0.0 && self.features.bin_hours > 0.0) {
            out.push("feature window and bin width must be positive".into());
        }
        if let Some(g) = &self.gen {
            if let Err(e) = g.synth.validate() {
                out.push(format!("gen: {e}"));
            }
            if g.n_train == 0 || g.n_test == 0 {
                out.push("gen: n_train and n_test must be positive".into());
            }
        }
        if self.sweep.seeds == 0 {
            out.push("sweep: seeds must be positive".into());
        }
        if let Some(f) = self.sweep.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            out.push(format!("sweep: fraction {f} is outside (0, 1]"));
        }
        for (i, m) in self.models.iter().enumerate() {
            match (m.hidden, m.budget) {
                (Some(_), Some(_)) => out.push(format!("models[{i}]: set hidden or budget, not both")),
                (None, None) if m.family.is_recurrent() => {
                    out.push(format!("models[{i}]: recurrent models need hidden or budget"))
                }
                _ => {}
            }
        }
        out
    }

    /// Concrete model specs for a dataset schema.
    pub fn model_specs(&self, schema: &Schema) -> Result<Vec<ModelSpec>> {
        self.models
            .iter()
            .enumerate()
            .map(|(i, m)| m.resolve(self.task, &self.features, schema).with_context(|| format!("models[{i}]")))
            .collect()
    }
}

impl ModelEntry {
    pub fn resolve(&self, task: Task, features: &FeatureConfig, schema: &Schema) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(self.family, task, self.hidden.unwrap_or(1));
        if let Some(w) = &self.head_widths {
            spec.head_widths = w.clone();
        }
        if let Some(a) = self.attention {
            spec.attention = Some(a);
        }
        let max_time = self.te_max_time.unwrap_or(features.window_hours);
        let te = |dim: usize| EncoderConfig::temporal(dim, max_time);
        let steps = features.steps();
        match self.te_mode {
            TeMode::CatTe => spec = spec.with_te(TeMode::CatTe, Some(te(self.te_dim)?)),
            TeMode::Mask => spec = spec.with_te(TeMode::Mask, None),
            TeMode::AddTe | TeMode::None => spec.te_mode = self.te_mode,
        }
        if let Some(budget) = self.budget {
            let width = spec.step_width(schema.value_width(), schema.len());
            spec.hidden = solve_hidden_for_budget(&spec, spec.input_dim(steps, width), budget)?;
            if self.te_mode == TeMode::AddTe && spec.hidden % 2 == 1 {
                // Additive embeddings need an even width.
                spec.hidden -= 1;
            }
        }
        if self.te_mode == TeMode::AddTe {
            spec.te_cfg = Some(te(spec.hidden)?);
        }
        if let Err(e) = spec.validate() {
            bail!("{e}");
        }
        let width = spec.step_width(schema.value_width(), schema.len());
        log::info!(
            "{}: hidden {}, {} parameters",
            spec.alias(),
            spec.hidden,
            count_params(&spec, spec.input_dim(steps, width))
        );
        Ok(spec)
    }
}
