//! End-to-end runs driven by a [`RunConfig`]: data, model, training and the
//! files a run directory holds.
//!
//! A run directory contains `config.txt`, `run.json`, `metrics.jsonl`,
//! `checkpoint.gimc` and, after probing, `probe.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::data::{generate, read_dataset, Dataset};
use crate::error::{GimError, Result};
use crate::model::{Geometry, GimModel};
use crate::probe::{probe_per_module, probe_source, FeatureSource, ProbeResult};
use crate::store::{ActivationCacheStore, Checkpoint};
use crate::training::{train, write_metrics, ScheduleMode, TrainOutcome};

pub const CONFIG_FILE: &str = "config.txt";
pub const META_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.gimc";
pub const PROBE_FILE: &str = "probe.json";

/// Training items and, when available, held-out items for probes.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

/// Synthesizes or reads the run's data. The last `data.test_items` items are
/// held out.
pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let all = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let mut spec = spec.clone();
            spec.n_items += cfg.test_items;
            generate(&spec)?
        }
        DataSource::File(path) => read_dataset(path)?,
    };
    if cfg.test_items == 0 {
        return Ok(RunData { train: all, test: None });
    }
    let n = all.len().checked_sub(cfg.test_items).filter(|&n| n > 0).ok_or_else(|| {
        GimError::invalid("load_data", format!("{} items cannot hold out {}", all.len(), cfg.test_items))
    })?;
    let (train, test) = all.split(n)?;
    Ok(RunData { train, test: Some(test) })
}

pub fn build_model(cfg: &RunConfig, item_shape: &[usize]) -> Result<GimModel> {
    let channels = match cfg.objective.geometry {
        Geometry::Sequence if item_shape.len() == 2 => item_shape[1],
        Geometry::Grid { .. } if item_shape.len() == 3 => item_shape[0],
        _ => {
            return Err(GimError::invalid(
                "build_model",
                format!("items of shape {item_shape:?} do not match data.kind {}", cfg.data_kind),
            ))
        }
    };
    GimModel::new(&cfg.model_config(channels), &cfg.objective, item_shape, cfg.seed)
}

/// Summary of a finished training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_digest: String,
    pub seed: u64,
    pub schedule: ScheduleMode,
    pub modules: usize,
    pub context: bool,
    pub train_items: usize,
    pub steps: usize,
    pub peak_bytes: usize,
    pub peak_activation_bytes: usize,
    pub unit_activation_bytes: Vec<usize>,
    pub isolation_checks: usize,
}

/// Probe results of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub config_digest: String,
    pub seed: u64,
    pub schedule: ScheduleMode,
    pub results: Vec<ProbeResult>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Trains per `cfg` and writes the run directory.
pub fn train_run(cfg: &RunConfig) -> Result<(GimModel, RunMeta, TrainOutcome)> {
    let data = load_data(cfg)?;
    let mut model = build_model(cfg, data.train.item_shape())?;
    fs::create_dir_all(&cfg.output_dir)?;
    if let Some(dir) = &cfg.schedule.cache_dir {
        fs::create_dir_all(dir)?;
    }
    let out = train(&mut model, &data.train, &cfg.train_settings())?;
    let meta = RunMeta {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        schedule: cfg.schedule.mode,
        modules: model.module_count(),
        context: model.context.is_some(),
        train_items: data.train.len(),
        steps: out.records.len(),
        peak_bytes: out.meter.peak,
        peak_activation_bytes: out.meter.peak_activations,
        unit_activation_bytes: out.unit_activation_peak.clone(),
        isolation_checks: out.isolation_checks,
    };
    let dir = &cfg.output_dir;
    fs::write(dir.join(CONFIG_FILE), &cfg.effective)?;
    write_json(&dir.join(META_FILE), &meta)?;
    write_metrics(&dir.join(METRICS_FILE), &out.records)?;
    Checkpoint::from_params(&meta.config_digest, model.all_params(), None).write(&dir.join(CHECKPOINT_FILE))?;
    Ok((model, meta, out))
}

/// Config and trained model of a run directory.
pub fn load_run(dir: &Path) -> Result<(RunConfig, RunMeta, GimModel, RunData)> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let meta: RunMeta = read_json(&dir.join(META_FILE))?;
    let ck = Checkpoint::read(&dir.join(CHECKPOINT_FILE))?;
    if ck.config_digest != cfg.digest() || meta.config_digest != cfg.digest() {
        return Err(GimError::invalid("load_run", format!("{}: checkpoint and config digests differ", dir.display())));
    }
    let data = load_data(&cfg)?;
    let mut model = build_model(&cfg, data.train.item_shape())?;
    ck.load_into(model.all_params_mut())?;
    Ok((cfg, meta, model, data))
}

/// Probes a trained run: every module, or only `module` (the context unit is
/// index M). Writes `probe.json`.
pub fn probe_run(dir: &Path, module: Option<usize>) -> Result<ProbeReport> {
    let (cfg, meta, model, data) = load_run(dir)?;
    let test = data
        .test
        .as_ref()
        .ok_or_else(|| GimError::invalid("probe", "no held-out items; set data.test_items"))?;
    let results = match module {
        None => probe_per_module(&model, &data.train, test, &cfg.probe)?,
        Some(m) => {
            let source = if m < model.module_count() {
                FeatureSource::Encoder(m)
            } else if m == model.module_count() && model.context.is_some() {
                FeatureSource::Context
            } else {
                return Err(GimError::invalid("probe", format!("no module {m}")));
            };
            let classes = data.train.n_classes.max(test.n_classes);
            vec![probe_source(&model, &data.train, test, source, classes, &cfg.probe)?]
        }
    };
    let report = ProbeReport {
        config_digest: meta.config_digest,
        seed: meta.seed,
        schedule: meta.schedule,
        results,
    };
    write_json(&dir.join(PROBE_FILE), &report)?;
    Ok(report)
}

/// Writes the outputs of encoder `module` over the training items to `out`.
pub fn cache_run(dir: &Path, module: usize, out: &Path) -> Result<ActivationCacheStore> {
    let (_, _, model, data) = load_run(dir)?;
    let frozen: BTreeMap<usize, String> = (0..model.unit_count()).map(|u| (u, model.unit_digest(u))).collect();
    let store = crate::training::cache_activations(&model, module + 1, &frozen, &data.train, 64)?;
    store.write(out)?;
    Ok(store)
}

/// Run directories under `root`: `root` itself if it holds `run.json`,
/// otherwise its immediate subdirectories that do.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(META_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(GimError::invalid("report", format!("no runs under {}", root.display())));
    }
    Ok(runs)
}
