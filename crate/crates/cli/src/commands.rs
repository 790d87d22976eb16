use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use timeembed::benchgen::{gen_dataset, Manifest};
use timeembed::dataset::{load_episodes, write_labels, write_observations, Episode, Schema};
use timeembed::encoding::{te_into, EncoderConfig};
use timeembed::models::{ModelSpec, ParamSet};
use timeembed::training::{run_cv, sweep_dropout, Pipeline, SelectedModel, TestSet};

use crate::config::ExperimentConfig;

const SCHEMA: &str = "schema.toml";
const MANIFEST: &str = "manifest.toml";
const TRAIN_OBS: &str = "train_observations.csv";
const TRAIN_LABELS: &str = "train_labels.csv";
const TEST_OBS: &str = "test_observations.csv";
const TEST_LABELS: &str = "test_labels.csv";
const REPORT: &str = "report.jsonl";
const SUMMARY: &str = "summary.csv";
const SWEEP: &str = "sweep.csv";
const MODELS: &str = "models";

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!("{} already exists and is not empty; pass --force to overwrite", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> timeembed::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let gen = cfg.gen.as_ref().ok_or_else(|| anyhow!("config has no [gen] section"))?;
    let mut synth = gen.synth.clone();
    if let Some(s) = seed {
        synth.seed = s;
    }
    let data = gen_dataset(&synth, gen.n_train + gen.n_test)?;
    prepare_out_dir(out, force)?;
    let (train, test) = data.episodes.split_at(gen.n_train);
    write_atomic(&out.join(SCHEMA), data.schema.to_toml().as_bytes())?;
    write_atomic(&out.join(MANIFEST), data.manifest.to_toml().as_bytes())?;
    write_atomic(&out.join(TRAIN_OBS), &csv_bytes(|b| write_observations(b, train))?)?;
    write_atomic(&out.join(TRAIN_LABELS), &csv_bytes(|b| write_labels(b, train))?)?;
    write_atomic(&out.join(TEST_OBS), &csv_bytes(|b| write_observations(b, test))?)?;
    write_atomic(&out.join(TEST_LABELS), &csv_bytes(|b| write_labels(b, test))?)?;
    let m = &data.manifest;
    println!("episodes,{},train,{},test,{}", m.n_episodes, train.len(), test.len());
    match synth.task {
        timeembed::benchgen::SynthTask::TimingClassification => println!(
            "positives,{},negatives,{},positive_rate,{:.4}",
            m.positives,
            m.n_episodes - m.positives,
            m.positives as f64 / m.n_episodes as f64
        ),
        timeembed::benchgen::SynthTask::ElapsedRegression => println!("label_mean_hours,{:.4}", m.label_mean),
    }
    Ok(())
}

pub struct Dataset {
    pub schema: Arc<Schema>,
    pub pool: Vec<Episode>,
    pub test: Vec<Episode>,
}

/// Loads the configured dataset directory, or generates the `[gen]` data in
/// memory when no directory is configured.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match (&cfg.data, &cfg.gen) {
        (Some(d), _) => load_dir(&d.dir),
        (None, Some(g)) => {
            let data = gen_dataset(&g.synth, g.n_train + g.n_test)?;
            let mut pool = data.episodes;
            let test = pool.split_off(g.n_train);
            Ok(Dataset {
                schema: data.schema,
                pool,
                test,
            })
        }
        (None, None) => bail!("config needs a [data] directory or a [gen] section"),
    }
}

fn load_dir(dir: &Path) -> Result<Dataset> {
    let missing: Vec<String> = [SCHEMA, TRAIN_OBS, TRAIN_LABELS, TEST_OBS, TEST_LABELS]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| !p.is_file())
        .map(|p| format!("missing file {}", p.display()))
        .collect();
    if !missing.is_empty() {
        bail!("{}", missing.join("\n"));
    }
    let text = fs::read_to_string(dir.join(SCHEMA))?;
    let schema = Arc::new(Schema::from_toml(&text).with_context(|| format!("{}", dir.join(SCHEMA).display()))?);
    let pool = load_episodes(&dir.join(TRAIN_OBS), &dir.join(TRAIN_LABELS), Arc::clone(&schema))?;
    let test = load_episodes(&dir.join(TEST_OBS), &dir.join(TEST_LABELS), Arc::clone(&schema))?;
    if let Ok(text) = fs::read_to_string(dir.join(MANIFEST)) {
        let m = Manifest::from_toml(&text)?;
        if m.n_episodes != pool.len() + test.len() {
            bail!(
                "manifest lists {} episodes but the label files hold {}",
                m.n_episodes,
                pool.len() + test.len()
            );
        }
    }
    Ok(Dataset { schema, pool, test })
}

/// Directory-safe form of a model alias.
pub fn slug(alias: &str) -> String {
    alias
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectedRecord {
    fold: usize,
    run: usize,
    pipeline: Pipeline,
}

fn preflight(cfg: &ExperimentConfig) -> Result<()> {
    let mut problems = cfg.problems();
    if cfg.models.is_empty() {
        problems.push("config lists no [[models]]".into());
    }
    if let Some(d) = &cfg.data {
        for f in [SCHEMA, TRAIN_OBS, TRAIN_LABELS, TEST_OBS, TEST_LABELS] {
            let p = d.dir.join(f);
            if !p.is_file() {
                problems.push(format!("missing file {}", p.display()));
            }
        }
    } else if cfg.gen.is_none() {
        problems.push("config needs a [data] directory or a [gen] section".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        bail!("invalid experiment:\n  {}", problems.join("\n  "))
    }
}

fn specs_for(cfg: &ExperimentConfig, schema: &Schema) -> Result<Vec<ModelSpec>> {
    let specs = cfg.model_specs(schema)?;
    let mut seen = std::collections::HashSet::new();
    for s in &specs {
        if !seen.insert(s.alias()) {
            bail!("two models share the name {}", s.alias());
        }
    }
    Ok(specs)
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    preflight(&cfg)?;
    let data = load_dataset(&cfg)?;
    let specs = specs_for(&cfg, &data.schema)?;
    prepare_out_dir(out, force)?;
    let test = TestSet::new(data.test);
    let cv = cfg.cv_config();
    let mut jsonl = String::new();
    let mut summary = String::from("model,metric,mean,std,stderr,n,failed\n");
    for spec in &specs {
        log::info!("training {} ({} folds x {} runs)", spec.alias(), cv.k, cv.runs);
        let outcome = run_cv(spec, &data.pool, &test, &cv)?;
        let report = &outcome.report;
        jsonl.push_str(&report.to_jsonl());
        summary.push_str(report.summary_csv().split_once('\n').map_or("", |(_, rest)| rest));
        let dir = out.join(MODELS).join(slug(&report.model));
        fs::create_dir_all(&dir)?;
        for m in &outcome.selected {
            let record = SelectedRecord {
                fold: m.fold,
                run: m.run,
                pipeline: m.pipeline.clone(),
            };
            write_atomic(&dir.join(format!("fold{}.json", m.fold)), serde_json::to_string_pretty(&record)?.as_bytes())?;
            write_atomic(&dir.join(format!("fold{}.params", m.fold)), &m.params.to_bytes())?;
        }
        for s in &report.summary {
            println!("{},{},{},{}", report.model, s.metric, s.mean, s.std);
        }
        if report.failed > 0 {
            println!("# {}: {} failed runs excluded", report.model, report.failed);
        }
    }
    write_atomic(&out.join(REPORT), jsonl.as_bytes())?;
    write_atomic(&out.join(SUMMARY), summary.as_bytes())?;
    Ok(())
}

fn load_selected(dir: &Path) -> Result<Vec<SelectedModel>> {
    let mut folds: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .with_context(|| format!("no trained models in {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?.to_string();
            let f = name.strip_prefix("fold")?.strip_suffix(".json")?.parse().ok()?;
            Some((f, p))
        })
        .collect();
    folds.sort();
    if folds.is_empty() {
        bail!("no trained models in {}", dir.display());
    }
    folds
        .into_iter()
        .map(|(f, p)| {
            let record: SelectedRecord = serde_json::from_str(&fs::read_to_string(&p)?)
                .with_context(|| format!("reading {}", p.display()))?;
            let params_path = dir.join(format!("fold{f}.params"));
            let bytes = fs::read(&params_path).with_context(|| format!("reading {}", params_path.display()))?;
            let params = ParamSet::from_bytes(&bytes).with_context(|| format!("{}", params_path.display()))?;
            Ok(SelectedModel {
                fold: record.fold,
                run: record.run,
                params,
                pipeline: record.pipeline,
            })
        })
        .collect()
}

pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: Option<u64>,
    fractions: Option<Vec<f64>>,
    force: bool,
) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(f) = fractions {
        cfg.sweep.fractions = f;
    }
    preflight(&cfg)?;
    let target = out.join(SWEEP);
    if target.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", target.display());
    }
    let data = load_dataset(&cfg)?;
    let specs = specs_for(&cfg, &data.schema)?;
    let test = TestSet::new(data.test);
    let mut csv = String::from("model,fraction,metric,value,std\n");
    for spec in &specs {
        let models = load_selected(&out.join(MODELS).join(slug(&spec.alias())))?;
        if let Some(m) = models.iter().find(|m| m.pipeline.spec != *spec) {
            bail!("stored model for fold {} does not match {} in the config", m.fold, spec.alias());
        }
        let rows = sweep_dropout(spec, &models, &test, &cfg.sweep.fractions, cfg.sweep.seeds, cfg.seed)?;
        for r in rows {
            csv.push_str(&format!("{},{},{},{},{}\n", spec.alias(), r.fraction, r.metric, r.value, r.std));
        }
    }
    write_atomic(&target, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

/// Appends `dim` embedding columns to a one-column CSV of timestamps.
pub fn cmd_encode(input: &Path, out: &Path, cfg: &EncoderConfig, force: bool) -> Result<()> {
    if out.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", out.display());
    }
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let mut lines = text.lines();
    let header = lines.next().map(str::trim).filter(|h| !h.is_empty()).unwrap_or("time_hours");
    if header.contains(',') {
        bail!("{}:1: expected a single timestamp column, got {header:?}", input.display());
    }
    let mut csv = String::from(header);
    for i in 0..cfg.dim() {
        csv.push_str(&format!(",te_{i}"));
    }
    csv.push('\n');
    let mut row = vec![0.0; cfg.dim()];
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let field = line.trim();
        if field.is_empty() {
            continue;
        }
        let t: f64 = field
            .parse()
            .map_err(|_| anyhow!("{}:{line_no}: timestamp {field:?} is not a number", input.display()))?;
        te_into(t, cfg, &mut row).with_context(|| format!("{}:{line_no}", input.display()))?;
        csv.push_str(field);
        for v in &row {
            csv.push(',');
            csv.push_str(&v.to_string());
        }
        csv.push('\n');
    }
    write_atomic(out, csv.as_bytes())
}
