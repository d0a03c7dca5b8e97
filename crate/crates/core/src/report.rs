//! Summaries over one or more run directories sharing a config digest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GimError, Result};
use crate::probe::FeatureSource;
use crate::run::{read_json, ProbeReport, RunMeta, META_FILE, METRICS_FILE, PROBE_FILE};
use crate::training::{read_metrics, ScheduleMode, StepRecord};

/// One unit under one schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    /// Mean loss over the unit's last epoch.
    pub final_loss: f64,
    /// Mean bound per delay over the unit's last epoch.
    pub mi_bound_per_k: BTreeMap<usize, f64>,
    pub probe_accuracy: Option<f64>,
}

/// One row per encoder module, plus the context unit when present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleRow {
    pub module: usize,
    pub context: bool,
    pub by_schedule: BTreeMap<ScheduleMode, UnitSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_digest: String,
    pub seed: u64,
    pub modules: Vec<ModuleRow>,
    pub peak_bytes: BTreeMap<ScheduleMode, usize>,
    pub peak_activation_bytes: BTreeMap<ScheduleMode, usize>,
}

fn last_epoch(records: &[StepRecord], unit: usize) -> Option<UnitSummary> {
    let mine: Vec<&StepRecord> = records.iter().filter(|r| r.module == unit).collect();
    let last = mine.last()?.epoch;
    let tail: Vec<&&StepRecord> = mine.iter().filter(|r| r.epoch == last).collect();
    let n = tail.len() as f64;
    let mut bounds: BTreeMap<usize, f64> = BTreeMap::new();
    for r in &tail {
        for (&k, &b) in &r.mi_bound_per_k {
            *bounds.entry(k).or_default() += b / n;
        }
    }
    Some(UnitSummary {
        final_loss: tail.iter().map(|r| r.loss_total).sum::<f64>() / n,
        mi_bound_per_k: bounds,
        probe_accuracy: None,
    })
}

/// Aggregates runs; every run must carry the same config digest and seed,
/// and each schedule may appear once.
pub fn build_report(run_dirs: &[impl AsRef<Path>]) -> Result<Report> {
    let mut report: Option<Report> = None;
    for dir in run_dirs {
        let dir = dir.as_ref();
        let meta: RunMeta = read_json(&dir.join(META_FILE))?;
        let records = read_metrics(&dir.join(METRICS_FILE))?;
        let probes: Option<ProbeReport> = match dir.join(PROBE_FILE) {
            p if p.is_file() => Some(read_json(&p)?),
            _ => None,
        };
        let r = report.get_or_insert_with(|| Report {
            config_digest: meta.config_digest.clone(),
            seed: meta.seed,
            modules: (0..meta.modules + usize::from(meta.context))
                .map(|m| ModuleRow {
                    module: m,
                    context: m == meta.modules,
                    by_schedule: BTreeMap::new(),
                })
                .collect(),
            peak_bytes: BTreeMap::new(),
            peak_activation_bytes: BTreeMap::new(),
        });
        if meta.config_digest != r.config_digest || meta.seed != r.seed {
            return Err(GimError::invalid(
                "report",
                format!(
                    "{}: config digest {} (seed {}) differs from {} (seed {})",
                    dir.display(),
                    meta.config_digest,
                    meta.seed,
                    r.config_digest,
                    r.seed
                ),
            ));
        }
        if let Some(p) = &probes {
            if p.config_digest != meta.config_digest {
                return Err(GimError::invalid("report", format!("{}: probe results belong to another config", dir.display())));
            }
        }
        if r.peak_bytes.insert(meta.schedule, meta.peak_bytes).is_some() {
            return Err(GimError::invalid("report", format!("{}: a second {} run", dir.display(), meta.schedule)));
        }
        r.peak_activation_bytes.insert(meta.schedule, meta.peak_activation_bytes);
        for row in &mut r.modules {
            let Some(mut s) = last_epoch(&records, row.module) else {
                continue;
            };
            s.probe_accuracy = probes.as_ref().and_then(|p| {
                p.results
                    .iter()
                    .find(|res| match res.source {
                        FeatureSource::Encoder(m) => !row.context && m == row.module,
                        FeatureSource::Context => row.context,
                    })
                    .map(|res| res.accuracy)
            });
            row.by_schedule.insert(meta.schedule, s);
        }
    }
    report.ok_or_else(|| GimError::invalid("report", "no runs given"))
}

/// Plain-text table of a report.
pub fn render_table(r: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "config {}  seed {}", r.config_digest, r.seed);
    let _ = writeln!(out, "{:<8} {:<13} {:>11} {:>14} {:>9}", "module", "schedule", "final_loss", "mean_mi_bound", "probe");
    for row in &r.modules {
        let name = if row.context { "context".to_string() } else { row.module.to_string() };
        for (mode, s) in &row.by_schedule {
            let mi = s.mi_bound_per_k.values().sum::<f64>() / s.mi_bound_per_k.len().max(1) as f64;
            let probe = s.probe_accuracy.map_or("-".to_string(), |a| format!("{:.2}%", 100.0 * a));
            let _ = writeln!(out, "{name:<8} {:<13} {:>11.4} {mi:>14.4} {probe:>9}", mode.to_string(), s.final_loss);
        }
    }
    for (mode, bytes) in &r.peak_bytes {
        let _ = writeln!(out, "peak bytes {:<13} {bytes}", mode.to_string());
    }
    out
}
