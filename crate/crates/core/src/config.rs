//! Flat `key = value` run configuration with dotted sections.
//!
//! Lines are `key = value`; `#` starts a comment. `preset` picks a set of
//! defaults (`audio` or `vision`), and every other key overrides one of them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::context::ContextMode;
use crate::data::{SyntheticKind, SyntheticSpec};
use crate::encoder::{InputKind, LayerKind, LayerSpec, StackConfig};
use crate::error::{GimError, Result};
use crate::model::{Geometry, ModelConfig, Objective};
use crate::params::hex;
use crate::probe::ProbeSettings;
use crate::training::{AdamConfig, ScheduleMode, TrainSettings, TrainingSchedule};

/// Every accepted key with its help text.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "audio | vision; selects the defaults below"),
    ("seed", "master seed for every random stream"),
    ("output.dir", "directory for checkpoints, metrics and reports"),
    ("data.path", "GIMD file to train on; empty means synthesize from data.*"),
    ("data.kind", "seq_global | seq_local | grid_class; also fixes the item layout of data.path"),
    ("data.n_items", "synthetic training items"),
    ("data.test_items", "extra synthetic items held out for probes"),
    ("data.length", "sequence length T"),
    ("data.embed_dim", "per-step feature dimension"),
    ("data.height", "image height"),
    ("data.width", "image width"),
    ("data.channels", "image channels"),
    ("data.n_classes", "latent classes"),
    ("data.sigma", "observation noise"),
    ("data.coherence", "steps per latent segment in seq_local"),
    ("data.n_basis", "cosine bases per class in grid_class"),
    ("model.modules", "number of gradient-isolated modules M"),
    ("model.width", "channels of every conv"),
    ("model.convs_per_module", "convs per module, ReLU between them"),
    ("model.kernel", "conv kernel"),
    ("model.stride", "conv stride"),
    ("model.pad", "conv padding"),
    ("model.layers", "explicit layers `kind in out kernel stride pad` joined by `,`, modules split by `|`; overrides the uniform keys"),
    ("patch.px", "patch side in pixels"),
    ("patch.overlap_px", "overlap between neighbouring patches"),
    ("patch.k_max", "number of rows predicted below each patch"),
    ("patch.skip", "rows skipped before the first prediction"),
    ("contrastive.delays", "delays as `a..b` (inclusive) or `a,b,c`"),
    ("contrastive.n_negatives", "negatives per positive"),
    ("contrastive.loss_window", "steps of the random loss window; 0 uses the full sequence"),
    ("context.mode", "full | blocked | absent"),
    ("context.dim", "GRU state size"),
    ("schedule.mode", "simultaneous | iterative | cached"),
    ("schedule.epochs", "total epochs; iterative and cached split them evenly across units"),
    ("schedule.unit_epochs", "per-unit epoch budgets `a,b,c`; empty means even split"),
    ("schedule.batch_size", "items per optimizer step"),
    ("schedule.isolation_check_every", "steps between isolation checks in simultaneous mode; 0 disables"),
    ("schedule.cache_dir", "where cached mode writes GIMA stores; empty keeps them in memory"),
    ("optim.lr", "Adam learning rate"),
    ("optim.beta1", "Adam beta1"),
    ("optim.beta2", "Adam beta2"),
    ("optim.eps", "Adam epsilon"),
    ("probe.lr", "probe learning rate"),
    ("probe.epochs", "probe epochs"),
    ("probe.batch_size", "probe minibatch"),
    ("probe.val_fraction", "share of probe training data used for epoch selection"),
];

/// Keys that may differ between runs a report aggregates.
const UNDIGESTED: &[&str] = &["output.dir", "schedule.mode", "schedule.cache_dir"];

fn preset_defaults(preset: &str) -> Option<BTreeMap<&'static str, &'static str>> {
    let mut d: BTreeMap<&str, &str> = [
        ("seed", "0"),
        ("output.dir", "runs/default"),
        ("data.path", ""),
        ("data.kind", "seq_global"),
        ("data.n_items", "1024"),
        ("data.test_items", "256"),
        ("data.length", "64"),
        ("data.embed_dim", "8"),
        ("data.height", "64"),
        ("data.width", "64"),
        ("data.channels", "1"),
        ("data.n_classes", "8"),
        ("data.sigma", "0.5"),
        ("data.coherence", "8"),
        ("data.n_basis", "4"),
        ("model.modules", "3"),
        ("model.width", "32"),
        ("model.convs_per_module", "2"),
        ("model.kernel", "3"),
        ("model.stride", "1"),
        ("model.pad", "1"),
        ("model.layers", ""),
        ("patch.px", "16"),
        ("patch.overlap_px", "8"),
        ("patch.k_max", "4"),
        ("patch.skip", "1"),
        ("contrastive.delays", "1..12"),
        ("contrastive.n_negatives", "10"),
        ("contrastive.loss_window", "0"),
        ("context.mode", "absent"),
        ("context.dim", "32"),
        ("schedule.mode", "simultaneous"),
        ("schedule.epochs", "6"),
        ("schedule.unit_epochs", ""),
        ("schedule.batch_size", "32"),
        ("schedule.isolation_check_every", "100"),
        ("schedule.cache_dir", ""),
        ("optim.lr", "2e-4"),
        ("optim.beta1", "0.9"),
        ("optim.beta2", "0.999"),
        ("optim.eps", "1e-8"),
        ("probe.lr", "1e-3"),
        ("probe.epochs", "50"),
        ("probe.batch_size", "32"),
        ("probe.val_fraction", "0.2"),
    ]
    .into_iter()
    .collect();
    match preset {
        "audio" => {}
        "vision" => {
            d.insert("data.kind", "grid_class");
            d.insert("data.n_items", "256");
            d.insert("data.test_items", "64");
            d.insert("contrastive.delays", "2..5");
            d.insert("contrastive.n_negatives", "16");
            d.insert("optim.lr", "1.5e-4");
        }
        _ => return None,
    }
    d.insert("preset", if preset == "audio" { "audio" } else { "vision" });
    Some(d)
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File(PathBuf),
}

/// A fully validated run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub data_kind: SyntheticKind,
    pub test_items: usize,
    pub layers: Option<Vec<Vec<LayerSpec>>>,
    pub uniform: UniformStack,
    pub objective: Objective,
    pub context_mode: ContextMode,
    pub context_dim: usize,
    pub schedule: TrainingSchedule,
    pub adam: AdamConfig,
    pub probe: ProbeSettings,
    /// Effective `key = value` lines, sorted by key, without output location
    /// or schedule mode.
    pub canonical: String,
    /// Every effective `key = value` line; parses back to this config.
    pub effective: String,
}

/// Parameters of an equal-width conv stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UniformStack {
    pub modules: usize,
    pub width: usize,
    pub convs_per_module: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

struct Entries {
    values: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn raw(&self, key: &str) -> (&str, usize) {
        let (v, line) = &self.values[key];
        (v.as_str(), *line)
    }

    fn err(&self, key: &str, msg: impl Into<String>) -> GimError {
        GimError::Config {
            key: key.to_string(),
            line: self.raw(key).1,
            msg: msg.into(),
        }
    }

    fn parse<T: FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let (v, _) = self.raw(key);
        v.parse().map_err(|_| self.err(key, format!("expected {what}, got {v:?}")))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "a non-negative integer")
    }

    fn positive(&self, key: &str) -> Result<usize> {
        let v = self.usize(key)?;
        if v == 0 {
            return Err(self.err(key, "must be >= 1"));
        }
        Ok(v)
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse(key, "a number")?;
        if !v.is_finite() {
            return Err(self.err(key, "must be finite"));
        }
        Ok(v)
    }

    fn enumerated<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let (v, _) = self.raw(key);
        v.parse().map_err(|e: T::Err| self.err(key, e.to_string()))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let (v, _) = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| self.err(key, format!("expected integers, got {s:?}"))))
            .collect()
    }
}

fn parse_delays(e: &Entries, key: &str) -> Result<Vec<usize>> {
    let (v, _) = e.raw(key);
    let delays = if let Some((a, b)) = v.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| e.err(key, format!("bad range start {a:?}")))?;
        let b: usize = b.trim().parse().map_err(|_| e.err(key, format!("bad range end {b:?}")))?;
        (a..=b).collect()
    } else {
        e.list(key)?
    };
    if delays.is_empty() || delays.contains(&0) {
        return Err(e.err(key, "delays must be a non-empty set of positive integers"));
    }
    Ok(delays)
}

fn parse_layers(e: &Entries, key: &str) -> Result<Option<Vec<Vec<LayerSpec>>>> {
    let (v, _) = e.raw(key);
    if v.trim().is_empty() {
        return Ok(None);
    }
    let mut modules = Vec::new();
    for module in v.split('|') {
        let mut layers = Vec::new();
        for rec in module.split(',') {
            let f: Vec<&str> = rec.split_whitespace().collect();
            let kind = f
                .first()
                .and_then(|k| LayerKind::parse(k))
                .ok_or_else(|| e.err(key, format!("bad layer kind in {rec:?}")))?;
            let nums: Vec<usize> = f[1..]
                .iter()
                .map(|s| s.parse().map_err(|_| e.err(key, format!("bad number {s:?} in {rec:?}"))))
                .collect::<Result<_>>()?;
            let layer = match (kind, nums.as_slice()) {
                (LayerKind::Conv1d, &[i, o, k, s, p]) => LayerSpec::conv1d(i, o, k, s, p),
                (LayerKind::Conv2d, &[i, o, k, s, p]) => LayerSpec::conv2d(i, o, k, s, p),
                (LayerKind::Relu, &[c]) => LayerSpec::relu(c),
                (LayerKind::MeanPool, &[c]) => LayerSpec::mean_pool(c),
                _ => return Err(e.err(key, format!("wrong field count in {rec:?}"))),
            };
            layers.push(layer);
        }
        modules.push(layers);
    }
    Ok(Some(modules))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Parses `text`, then applies `overrides` (reported as line 0).
    pub fn parse_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut given: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| GimError::Config {
                key: content.to_string(),
                line: line_no,
                msg: "expected `key = value`".into(),
            })?;
            let k = k.trim();
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(GimError::Config {
                    key: k.to_string(),
                    line: line_no,
                    msg: "unknown key".into(),
                });
            }
            if let Some((_, first)) = given.get(k) {
                return Err(GimError::Config {
                    key: k.to_string(),
                    line: line_no,
                    msg: format!("already set on line {first}"),
                });
            }
            given.insert(k.to_string(), (v.trim().to_string(), line_no));
        }
        for (k, v) in overrides {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(GimError::Config {
                    key: k.clone(),
                    line: 0,
                    msg: "unknown key".into(),
                });
            }
            given.insert(k.clone(), (v.clone(), 0));
        }
        let (preset, preset_line) = given.get("preset").cloned().unwrap_or(("audio".into(), 0));
        let defaults = preset_defaults(&preset).ok_or_else(|| GimError::Config {
            key: "preset".into(),
            line: preset_line,
            msg: format!("expected audio | vision, got {preset:?}"),
        })?;
        let mut values: BTreeMap<String, (String, usize)> =
            defaults.into_iter().map(|(k, v)| (k.to_string(), (v.to_string(), 0))).collect();
        values.extend(given);
        Self::from_entries(Entries { values })
    }

    fn from_entries(e: Entries) -> Result<Self> {
        let seed: u64 = e.parse("seed", "a non-negative integer")?;
        let data_kind: SyntheticKind = e.enumerated("data.kind")?;
        let spec = SyntheticSpec {
            kind: data_kind,
            n_items: e.positive("data.n_items")?,
            length: e.positive("data.length")?,
            height: e.positive("data.height")?,
            width: e.positive("data.width")?,
            channels: e.positive("data.channels")?,
            n_classes: e.usize("data.n_classes")?,
            embed_dim: e.positive("data.embed_dim")?,
            sigma: e.f64("data.sigma")?,
            coherence: e.positive("data.coherence")?,
            n_basis: e.positive("data.n_basis")?,
            seed,
        };
        if spec.n_classes < 2 {
            return Err(e.err("data.n_classes", "must be >= 2"));
        }
        if spec.sigma < 0.0 {
            return Err(e.err("data.sigma", "must be >= 0"));
        }
        let data = match e.raw("data.path").0 {
            "" => DataSource::Synthetic(spec),
            p => DataSource::File(PathBuf::from(p)),
        };
        let geometry = match data_kind {
            SyntheticKind::GridClass => Geometry::Grid {
                patch_px: e.positive("patch.px")?,
                overlap_px: e.usize("patch.overlap_px")?,
                k_max: e.positive("patch.k_max")?,
                skip: e.usize("patch.skip")?,
            },
            _ => Geometry::Sequence,
        };
        if let Geometry::Grid { patch_px, overlap_px, .. } = geometry {
            if overlap_px >= patch_px {
                return Err(e.err("patch.overlap_px", "must be smaller than patch.px"));
            }
        }
        let n_negatives = {
            let (v, _) = e.raw("contrastive.n_negatives");
            let n: i64 = v
                .parse()
                .map_err(|_| e.err("contrastive.n_negatives", format!("expected an integer, got {v:?}")))?;
            if n < 1 {
                return Err(e.err("contrastive.n_negatives", format!("must be >= 1, got {n}")));
            }
            n as usize
        };
        let objective = Objective {
            geometry,
            delays: parse_delays(&e, "contrastive.delays")?,
            n_negatives,
            loss_window: match e.usize("contrastive.loss_window")? {
                0 => None,
                w => Some(w),
            },
        };
        objective
            .validate()
            .map_err(|err| e.err("contrastive.delays", err.to_string()))?;
        if let (Some(w), SyntheticKind::SeqGlobal | SyntheticKind::SeqLocal) = (objective.loss_window, data_kind) {
            if w <= objective.max_delay() {
                return Err(e.err("contrastive.loss_window", format!("window {w} leaves no pairs at delay {}", objective.max_delay())));
            }
        }
        let context_mode: ContextMode = e.enumerated("context.mode")?;
        if context_mode != ContextMode::Absent && data_kind == SyntheticKind::GridClass {
            return Err(e.err("context.mode", "a context unit needs sequence data"));
        }
        let uniform = UniformStack {
            modules: e.positive("model.modules")?,
            width: e.positive("model.width")?,
            convs_per_module: e.positive("model.convs_per_module")?,
            kernel: e.positive("model.kernel")?,
            stride: e.positive("model.stride")?,
            pad: e.usize("model.pad")?,
        };
        let layers = parse_layers(&e, "model.layers")?;
        let n_units = layers.as_ref().map_or(uniform.modules, Vec::len) + usize::from(context_mode != ContextMode::Absent);
        let mode: ScheduleMode = e.enumerated("schedule.mode")?;
        let epochs = e.positive("schedule.epochs")?;
        let batch_size = e.positive("schedule.batch_size")?;
        let mut schedule = TrainingSchedule::even(mode, epochs, n_units, batch_size);
        let unit_epochs = e.list("schedule.unit_epochs")?;
        if !unit_epochs.is_empty() {
            if unit_epochs.len() != n_units {
                return Err(e.err("schedule.unit_epochs", format!("{} budgets for {n_units} units", unit_epochs.len())));
            }
            if unit_epochs.contains(&0) {
                return Err(e.err("schedule.unit_epochs", "every budget must be >= 1"));
            }
            schedule.unit_epochs = unit_epochs;
        }
        schedule.isolation_check_every = e.parse("schedule.isolation_check_every", "a non-negative integer")?;
        schedule.cache_dir = match e.raw("schedule.cache_dir").0 {
            "" => None,
            p => Some(PathBuf::from(p)),
        };
        let adam = AdamConfig {
            lr: e.f64("optim.lr")?,
            beta1: e.f64("optim.beta1")?,
            beta2: e.f64("optim.beta2")?,
            eps: e.f64("optim.eps")?,
        };
        for (key, v) in [("optim.lr", adam.lr), ("optim.eps", adam.eps)] {
            if v <= 0.0 {
                return Err(e.err(key, "must be > 0"));
            }
        }
        for (key, v) in [("optim.beta1", adam.beta1), ("optim.beta2", adam.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(e.err(key, "must lie in [0, 1)"));
            }
        }
        let probe = ProbeSettings {
            lr: e.f64("probe.lr")?,
            epochs: e.positive("probe.epochs")?,
            batch_size: e.positive("probe.batch_size")?,
            val_fraction: e.f64("probe.val_fraction")?,
            seed,
        };
        if !(0.0..1.0).contains(&probe.val_fraction) {
            return Err(e.err("probe.val_fraction", "must lie in [0, 1)"));
        }
        let mut canonical = String::new();
        let mut effective = String::new();
        for (k, (v, _)) in &e.values {
            let _ = writeln!(effective, "{k} = {v}");
            if !UNDIGESTED.contains(&k.as_str()) {
                let _ = writeln!(canonical, "{k} = {v}");
            }
        }
        Ok(Self {
            seed,
            output_dir: PathBuf::from(e.raw("output.dir").0),
            data,
            data_kind,
            test_items: e.usize("data.test_items")?,
            layers,
            uniform,
            objective,
            context_mode,
            context_dim: e.positive("context.dim")?,
            schedule,
            adam,
            probe,
            canonical,
            effective,
        })
    }

    /// SHA-256 of the canonical text, as hex.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.canonical.as_bytes()))
    }

    pub fn input_kind(&self) -> InputKind {
        match self.objective.geometry {
            Geometry::Sequence => InputKind::Sequence,
            Geometry::Grid { .. } => InputKind::PatchGrid,
        }
    }

    /// Model configuration for items with `input_channels` channels.
    pub fn model_config(&self, input_channels: usize) -> ModelConfig {
        let stack = match &self.layers {
            Some(modules) => StackConfig {
                input_kind: self.input_kind(),
                input_channels,
                modules: modules.clone(),
            },
            None => {
                let u = self.uniform;
                StackConfig::uniform(self.input_kind(), input_channels, u.width, u.modules, u.convs_per_module, u.kernel, u.stride, u.pad)
            }
        };
        ModelConfig {
            stack,
            context_mode: self.context_mode,
            context_dim: self.context_dim,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            schedule: self.schedule.clone(),
            adam: self.adam,
            seed: self.seed,
        }
    }
}

/// `--help` text listing every key and its audio default.
pub fn key_help() -> String {
    let audio = preset_defaults("audio").expect("audio preset exists");
    let mut out = String::from("config keys (audio defaults; preset = vision changes data.kind, data.n_items, data.test_items, contrastive.*, optim.lr):\n");
    for (k, help) in KEYS {
        let _ = writeln!(out, "  {k:<34} {:<14} {help}", audio.get(k).copied().unwrap_or("audio"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_err(r: Result<RunConfig>) -> (String, usize) {
        match r {
            Err(GimError::Config { key, line, .. }) => (key, line),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn presets() {
        let v = RunConfig::parse("preset = vision\n").unwrap();
        assert_eq!(v.objective.delays, vec![2, 3, 4, 5]);
        assert_eq!(v.objective.n_negatives, 16);
        assert_eq!(v.adam.lr, 1.5e-4);
        assert!(matches!(v.objective.geometry, Geometry::Grid { k_max: 4, skip: 1, .. }));
        let a = RunConfig::parse("").unwrap();
        assert_eq!(a.objective.delays, (1..=12).collect::<Vec<_>>());
        assert_eq!(a.objective.n_negatives, 10);
        assert_eq!(a.adam.lr, 2e-4);
        assert_eq!(a.probe.lr, 1e-3);
        assert_eq!(a.probe.epochs, 50);
    }

    #[test]
    fn errors_name_key_and_line() {
        let text = "seed = 3\n\n# comment\ncontrastive.n_negatives = -1\n";
        assert_eq!(config_err(RunConfig::parse(text)), ("contrastive.n_negatives".into(), 4));
        assert_eq!(config_err(RunConfig::parse("seed = 1\nmodel.depth = 3")), ("model.depth".into(), 2));
        assert_eq!(config_err(RunConfig::parse("optim.lr = fast")), ("optim.lr".into(), 1));
        assert_eq!(config_err(RunConfig::parse("seed = 1\nseed = 2")), ("seed".into(), 2));
        assert_eq!(config_err(RunConfig::parse("context.mode = sometimes")), ("context.mode".into(), 1));
        assert_eq!(config_err(RunConfig::parse("preset = vision\ncontrastive.delays = 2..6")).0, "contrastive.delays");
    }

    #[test]
    fn layers_and_lists() {
        let c = RunConfig::parse(
            "model.layers = conv1d 8 16 3 1 1, relu 16, conv1d 16 16 3 1 1 | conv1d 16 16 3 1 1\ncontrastive.delays = 1,3\n",
        )
        .unwrap();
        let layers = c.layers.as_ref().unwrap();
        assert_eq!(layers.len(), 2);
        assert_eq!(layers[0][1], LayerSpec::relu(16));
        assert_eq!(c.objective.delays, vec![1, 3]);
        assert_eq!(c.model_config(8).stack.module_count(), 2);
        assert_eq!(config_err(RunConfig::parse("model.layers = conv1d 8 16 3")).0, "model.layers");
    }

    #[test]
    fn digest_tracks_effective_values() {
        let a = RunConfig::parse("seed = 1\n").unwrap();
        let b = RunConfig::parse("# same\nseed=1").unwrap();
        let c = RunConfig::parse("seed = 2\n").unwrap();
        let d = RunConfig::parse("seed = 1\noutput.dir = elsewhere\nschedule.mode = cached\n").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest(), d.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
        let o = RunConfig::parse_with("seed = 1\n", &[("seed".into(), "2".into())]).unwrap();
        assert_eq!(o.digest(), c.digest());
        assert_eq!(RunConfig::parse(&d.effective).unwrap(), d);
    }
}
