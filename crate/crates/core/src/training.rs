//! Adam, the three training schedules, activation caching and peak-byte
//! accounting.
//!
//! Every schedule shares one step: build a fresh tape, run the unit's forward
//! pass, evaluate its InfoNCE loss, backpropagate, update the unit with its own
//! Adam state. Data order is keyed on `(epoch, Shuffle)` and negatives on
//! `(unit, epoch, Negatives)`, with epochs counted per unit, so a unit sees the
//! same batches and negatives whichever schedule drives it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Param, ParamId};
use crate::contrastive::{sum_scalars, LossReport, LossTerms};
use crate::data::Dataset;
use crate::encoder::stack_forward;
use crate::error::{GimError, Result};
use crate::model::{GimModel, Geometry};
use crate::rng::{Purpose, SeededRng, NO_MODULE};
use crate::store::ActivationCacheStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of `params` from `grads`.
///
/// Every gradient is checked before any parameter moves, so a non-finite
/// gradient leaves the parameters and state untouched.
pub fn adam_step<'a>(params: impl IntoIterator<Item = &'a mut Param>, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let params: Vec<&mut Param> = params.into_iter().collect();
    let c = state.config;
    if !(c.lr > 0.0 && c.lr.is_finite()) {
        return Err(GimError::invalid("adam_step", format!("lr must be positive, got {}", c.lr)));
    }
    let mut gs = Vec::with_capacity(params.len());
    for p in &params {
        let g = grads
            .param(p.id)
            .ok_or_else(|| GimError::invalid("adam_step", format!("no gradient for {} (id {})", p.name, p.id.0)))?;
        if g.shape() != p.value.shape() {
            return Err(GimError::shape("adam_step", g.shape(), p.value.shape()));
        }
        if !g.all_finite() {
            return Err(GimError::NonFinite(format!("gradient of {} (id {})", p.name, p.id.0)));
        }
        gs.push(g);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (p, g) in params.into_iter().zip(gs) {
        let (m, v) = state
            .moments
            .entry(p.id)
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            *w -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Simultaneous,
    Iterative,
    Cached,
}

impl FromStr for ScheduleMode {
    type Err = GimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simultaneous" => Ok(Self::Simultaneous),
            "iterative" => Ok(Self::Iterative),
            "cached" => Ok(Self::Cached),
            other => Err(GimError::invalid(
                "schedule",
                format!("unknown mode {other:?}, expected simultaneous|iterative|cached"),
            )),
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Simultaneous => "simultaneous",
            Self::Iterative => "iterative",
            Self::Cached => "cached",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub mode: ScheduleMode,
    /// Epochs of the simultaneous schedule.
    pub epochs: usize,
    /// Epochs per unit for the iterative and cached schedules.
    pub unit_epochs: Vec<usize>,
    pub batch_size: usize,
    /// Verify gradient isolation every this many steps (0 disables).
    pub isolation_check_every: u64,
    /// Where cached schedules write their GIMA stores.
    pub cache_dir: Option<PathBuf>,
}

impl TrainingSchedule {
    /// `epochs` total, split evenly over `units` for the one-at-a-time modes.
    pub fn even(mode: ScheduleMode, epochs: usize, units: usize, batch_size: usize) -> Self {
        let per = (epochs / units.max(1)).max(1);
        Self {
            mode,
            epochs,
            unit_epochs: vec![per; units],
            batch_size,
            isolation_check_every: 100,
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub schedule: TrainingSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
}

/// One metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub module: usize,
    pub loss_total: f64,
    pub loss_per_k: BTreeMap<usize, f64>,
    pub mi_bound_per_k: BTreeMap<usize, f64>,
    pub lr: f64,
    pub peak_bytes: usize,
}

impl StepRecord {
    fn new(step: u64, epoch: usize, module: usize, report: LossReport, lr: f64, peak_bytes: usize) -> Self {
        Self {
            step,
            epoch,
            module,
            loss_total: report.total,
            loss_per_k: report.per_delay,
            mi_bound_per_k: report.mi_bound,
            lr,
            peak_bytes,
        }
    }
}

pub fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Running and peak byte counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryMeter {
    pub running: usize,
    pub peak: usize,
    pub peak_activations: usize,
}

impl MemoryMeter {
    pub fn observe(&mut self, bytes: usize, activations: usize) {
        self.running = bytes;
        self.peak = self.peak.max(bytes);
        self.peak_activations = self.peak_activations.max(activations);
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub meter: MemoryMeter,
    /// Peak activation bytes of each unit's own steps.
    pub unit_activation_peak: Vec<usize>,
    /// Parameter digest of every unit at the moment it was frozen.
    pub frozen: BTreeMap<usize, String>,
    pub isolation_checks: usize,
}

impl TrainOutcome {
    pub fn records_for(&self, module: usize) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(move |r| r.module == module)
    }
}

/// Shuffled drop-last batches for one epoch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || n < batch {
        return Err(GimError::invalid(
            "train",
            format!("batch size {batch} needs between 1 and {n} items"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::derive(seed, NO_MODULE, epoch as u64, Purpose::Shuffle).shuffle(&mut order);
    Ok(order.chunks_exact(batch).map(|c| c.to_vec()).collect())
}

fn streams(seed: u64, unit: usize, epoch: usize) -> (SeededRng, SeededRng) {
    (
        SeededRng::derive(seed, unit as u64, epoch as u64, Purpose::Negatives),
        SeededRng::derive(seed, unit as u64, epoch as u64, Purpose::Window),
    )
}

pub fn train(model: &mut GimModel, ds: &Dataset, settings: &TrainSettings) -> Result<TrainOutcome> {
    match settings.schedule.mode {
        ScheduleMode::Simultaneous => train_simultaneous(model, ds, settings),
        ScheduleMode::Iterative => train_iterative(model, ds, settings),
        ScheduleMode::Cached => train_cached(model, ds, settings),
    }
}

/// Checks that each unit's loss reaches no other unit's parameters.
fn check_isolation(g: &Graph, model: &GimModel, losses: &[LossTerms]) -> Result<()> {
    for (u, loss) in losses.iter().enumerate() {
        let grads = g.backward(loss.total)?;
        for v in (0..model.unit_count()).filter(|&v| v != u) {
            for p in model.unit_params(v) {
                let leaked = grads.param(p.id).is_some_and(|t| !t.is_all_zero());
                if leaked {
                    return Err(GimError::Schedule(format!(
                        "loss of unit {u} reached {} of unit {v}",
                        p.name
                    )));
                }
            }
        }
    }
    Ok(())
}

/// All units every step, from one shared forward pass.
pub fn train_simultaneous(model: &mut GimModel, ds: &Dataset, settings: &TrainSettings) -> Result<TrainOutcome> {
    let sched = &settings.schedule;
    if sched.epochs == 0 {
        return Err(GimError::Schedule("simultaneous training needs at least one epoch".into()));
    }
    let units = model.unit_count();
    let mut states = vec![AdamState::new(settings.adam); units];
    let mut out = TrainOutcome {
        unit_activation_peak: vec![0; units],
        ..Default::default()
    };
    let mut step = 0u64;
    for epoch in 0..sched.epochs {
        let mut rngs: Vec<_> = (0..units).map(|u| streams(settings.seed, u, epoch)).collect();
        for idx in epoch_batches(ds.len(), sched.batch_size, settings.seed, epoch)? {
            let x = model.prepare_batch(&ds.gather(&idx)?)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let fwd = stack_forward(&model.encoders, &mut g, xv)?;
            let mut losses = Vec::with_capacity(units);
            for (u, (neg, win)) in rngs.iter_mut().enumerate() {
                let z = if model.is_context_unit(u) {
                    fwd.top()
                } else {
                    fwd.per_module[u]
                };
                losses.push(model.unit_loss(&mut g, u, z, idx.len(), neg, win)?);
            }
            let total = sum_scalars(&mut g, losses.iter().map(|l| l.total))?;
            let grads = g.backward(total)?;
            let bytes = g.bytes();
            let peak = bytes.total() + grads.peak_bytes;
            out.meter.observe(peak, bytes.activations);
            for a in out.unit_activation_peak.iter_mut() {
                *a = (*a).max(bytes.activations);
            }
            if sched.isolation_check_every > 0 && step % sched.isolation_check_every == 0 {
                check_isolation(&g, model, &losses)?;
                out.isolation_checks += 1;
            }
            for (u, loss) in losses.iter().enumerate() {
                out.records
                    .push(StepRecord::new(step, epoch, u, loss.report(&g), settings.adam.lr, peak));
                adam_step(model.unit_params_mut(u), &grads, &mut states[u])?;
            }
            step += 1;
        }
    }
    Ok(out)
}

/// Number of encoder modules feeding `unit`.
fn unit_depth(model: &GimModel, unit: usize) -> usize {
    if model.is_context_unit(unit) {
        model.module_count()
    } else {
        unit
    }
}

fn verify_frozen(model: &GimModel, frozen: &BTreeMap<usize, String>) -> Result<()> {
    for (&u, digest) in frozen {
        if &model.unit_digest(u) != digest {
            return Err(GimError::Schedule(format!("parameters of frozen unit {u} changed")));
        }
    }
    Ok(())
}

/// Outputs of encoders `0..upto` for every item of `ds`, computed from
/// frozen modules only.
pub fn cache_activations(
    model: &GimModel,
    upto: usize,
    frozen: &BTreeMap<usize, String>,
    ds: &Dataset,
    chunk: usize,
) -> Result<ActivationCacheStore> {
    if upto == 0 || upto > model.module_count() {
        return Err(GimError::invalid("cache_activations", format!("chain length {upto} out of range")));
    }
    for m in 0..upto {
        if frozen.get(&m) != Some(&model.unit_digest(m)) {
            return Err(GimError::Schedule(format!("module {m} in the cached chain is not frozen")));
        }
    }
    let n = ds.len();
    let mut data = Vec::new();
    let mut sample_shape = Vec::new();
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
        let z = model.eval_encoders(&model.prepare_batch(&ds.gather(&idx)?)?, upto)?;
        let per_item = z.shape()[0] / idx.len();
        sample_shape = if matches!(model.objective.geometry, Geometry::Sequence) {
            z.shape()[1..].to_vec()
        } else {
            let mut s = vec![per_item];
            s.extend_from_slice(&z.shape()[1..]);
            s
        };
        data.extend_from_slice(z.data());
    }
    let mut shape = vec![n];
    shape.extend(sample_shape);
    Ok(ActivationCacheStore {
        module: upto - 1,
        values: Tensor::new(shape, data)?,
    })
}

/// Turns gathered store entries back into a batch the next unit consumes.
fn store_batch(model: &GimModel, store: &ActivationCacheStore, idx: &[usize]) -> Result<Tensor> {
    let t = store.gather(idx)?;
    match model.objective.geometry {
        Geometry::Sequence => Ok(t),
        Geometry::Grid { .. } => {
            let s = t.shape();
            let mut shape = vec![s[0] * s[1]];
            shape.extend_from_slice(&s[2..]);
            t.reshape(&shape)
        }
    }
}

enum Source {
    Live,
    Cached,
}

/// One unit at a time, each reading frozen-module outputs computed live.
pub fn train_iterative(model: &mut GimModel, ds: &Dataset, settings: &TrainSettings) -> Result<TrainOutcome> {
    train_in_order(model, ds, settings, Source::Live)
}

/// One unit at a time, each reading a GIMA store of the frozen modules below
/// it instead of running them.
pub fn train_cached(model: &mut GimModel, ds: &Dataset, settings: &TrainSettings) -> Result<TrainOutcome> {
    train_in_order(model, ds, settings, Source::Cached)
}

fn train_in_order(model: &mut GimModel, ds: &Dataset, settings: &TrainSettings, source: Source) -> Result<TrainOutcome> {
    let sched = &settings.schedule;
    let units = model.unit_count();
    if sched.unit_epochs.len() != units {
        return Err(GimError::Schedule(format!(
            "{} epoch budgets given for {units} units",
            sched.unit_epochs.len()
        )));
    }
    if let Some(u) = sched.unit_epochs.iter().position(|&e| e == 0) {
        return Err(GimError::Schedule(format!("unit {u} has an epoch budget of zero")));
    }
    let mut out = TrainOutcome {
        unit_activation_peak: vec![0; units],
        ..Default::default()
    };
    for u in 0..units {
        verify_frozen(model, &out.frozen)?;
        let depth = unit_depth(model, u);
        let store = match source {
            Source::Cached if depth > 0 => {
                let store = cache_activations(model, depth, &out.frozen, ds, sched.batch_size)?;
                let store = match &sched.cache_dir {
                    Some(dir) => {
                        let path = dir.join(format!("module{}.gima", depth - 1));
                        store.write(&path)?;
                        ActivationCacheStore::read(&path)?
                    }
                    None => store,
                };
                if store.len() != ds.len() {
                    return Err(GimError::Schedule(format!(
                        "store holds {} samples, dataset has {}",
                        store.len(),
                        ds.len()
                    )));
                }
                Some(store)
            }
            _ => None,
        };
        // frozen weights stay resident when their forward pass runs live
        let resident: usize = match source {
            Source::Live => (0..depth).flat_map(|m| model.unit_params(m)).map(|p| p.value.size_bytes()).sum(),
            Source::Cached => 0,
        };
        let mut state = AdamState::new(settings.adam);
        let mut step = 0u64;
        for epoch in 0..sched.unit_epochs[u] {
            let (mut neg, mut win) = streams(settings.seed, u, epoch);
            for idx in epoch_batches(ds.len(), sched.batch_size, settings.seed, epoch)? {
                let input = match &store {
                    Some(store) => store_batch(model, store, &idx)?,
                    None => model.eval_encoders(&model.prepare_batch(&ds.gather(&idx)?)?, depth)?,
                };
                let mut g = Graph::new();
                let zin = g.input(input);
                let z = if model.is_context_unit(u) {
                    zin
                } else {
                    model.encoders[u].apply(&mut g, zin)?
                };
                let loss = model.unit_loss(&mut g, u, z, idx.len(), &mut neg, &mut win)?;
                let grads = g.backward(loss.total)?;
                let bytes = g.bytes();
                let peak = bytes.total() + grads.peak_bytes + resident;
                out.meter.observe(peak, bytes.activations);
                out.unit_activation_peak[u] = out.unit_activation_peak[u].max(bytes.activations);
                out.records
                    .push(StepRecord::new(step, epoch, u, loss.report(&g), settings.adam.lr, peak));
                adam_step(model.unit_params_mut(u), &grads, &mut state)?;
                step += 1;
            }
        }
        out.frozen.insert(u, model.unit_digest(u));
    }
    verify_frozen(model, &out.frozen)?;
    Ok(out)
}

/// Loss reports of `unit` on `n_batches` consecutive batches of `ds`, without
/// updating anything. Negatives and windows come from `Check` streams.
pub fn eval_unit_loss(
    model: &GimModel,
    ds: &Dataset,
    unit: usize,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<Vec<LossReport>> {
    if unit >= model.unit_count() {
        return Err(GimError::invalid("eval_unit_loss", format!("no unit {unit}")));
    }
    if batch_size == 0 || batch_size * n_batches > ds.len() {
        return Err(GimError::invalid(
            "eval_unit_loss",
            format!("{n_batches} batches of {batch_size} need more than {} items", ds.len()),
        ));
    }
    let depth = unit_depth(model, unit);
    let mut neg = SeededRng::derive(seed, unit as u64, 0, Purpose::Check);
    let mut win = SeededRng::derive(seed, unit as u64, 1, Purpose::Check);
    let mut out = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let idx: Vec<usize> = (b * batch_size..(b + 1) * batch_size).collect();
        let below = model.eval_encoders(&model.prepare_batch(&ds.gather(&idx)?)?, depth)?;
        let z = if model.is_context_unit(unit) {
            below
        } else {
            model.encoders[unit].eval(&below)?
        };
        let mut g = Graph::new();
        let zv = g.input(z);
        let loss = model.unit_loss(&mut g, unit, zv, batch_size, &mut neg, &mut win)?;
        out.push(loss.report(&g));
    }
    Ok(out)
}

/// Analytic peak bytes of one schedule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub mode: ScheduleMode,
    pub peak_bytes: usize,
    pub peak_activation_bytes: usize,
    pub unit_activation_bytes: Vec<usize>,
}

/// Runs one step per unit of `mode` on random items of `item_shape` and
/// reports the tape's byte counts.
pub fn measure_peak_bytes(mode: ScheduleMode, model: &GimModel, item_shape: &[usize], batch_size: usize) -> Result<MemoryReport> {
    let mut shape = vec![batch_size];
    shape.extend_from_slice(item_shape);
    let n: usize = shape.iter().product();
    let mut rng = SeededRng::derive(0, NO_MODULE, 0, Purpose::Check);
    let ds = Dataset {
        inputs: Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())?,
        labels: None,
        n_classes: 0,
    };
    let units = model.unit_count();
    let settings = TrainSettings {
        schedule: TrainingSchedule {
            mode,
            epochs: 1,
            unit_epochs: vec![1; units],
            batch_size,
            isolation_check_every: 0,
            cache_dir: None,
        },
        adam: AdamConfig::default(),
        seed: 0,
    };
    let mut scratch = model.clone();
    let out = train(&mut scratch, &ds, &settings)?;
    Ok(MemoryReport {
        mode,
        peak_bytes: out.meter.peak,
        peak_activation_bytes: out.meter.peak_activations,
        unit_activation_bytes: out.unit_activation_peak,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextMode;
    use crate::encoder::{InputKind, StackConfig};
    use crate::model::{ModelConfig, Objective};

    fn scalar_param(v: f64) -> Param {
        Param {
            id: ParamId(0),
            name: "p".into(),
            value: Tensor::vector(vec![v]),
        }
    }

    fn grads_for(p: &Param, g: f64) -> Gradients {
        let mut graph = Graph::new();
        let v = graph.param(p);
        let s = graph.scale(v, g);
        let l = graph.sum(s);
        graph.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_param(1.5);
        let grads = grads_for(&p, 0.0);
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam_step([&mut p], &grads, &mut st).unwrap();
        }
        assert_eq!(p.value.data(), &[1.5]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut p = scalar_param(0.0);
            let grads = grads_for(&p, g);
            let mut st = AdamState::new(AdamConfig {
                lr: 1e-3,
                ..Default::default()
            });
            adam_step([&mut p], &grads, &mut st).unwrap();
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p.value.data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut p = scalar_param(0.0);
        let grads = grads_for(&p, f64::NAN);
        let mut st = AdamState::new(AdamConfig::default());
        let err = adam_step([&mut p], &grads, &mut st).unwrap_err();
        assert!(err.to_string().contains("p (id 0)"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn batches_drop_last() {
        let b = epoch_batches(10, 3, 0, 0).unwrap();
        assert_eq!(b.len(), 3);
        let mut seen: Vec<usize> = b.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(epoch_batches(2, 3, 0, 0).is_err());
        assert_eq!(epoch_batches(10, 3, 4, 2).unwrap(), epoch_batches(10, 3, 4, 2).unwrap());
    }

    fn tiny(context: ContextMode) -> (GimModel, Dataset) {
        let config = ModelConfig {
            stack: StackConfig::uniform(InputKind::Sequence, 2, 3, 2, 1, 3, 1, 1),
            context_mode: context,
            context_dim: 2,
        };
        let objective = Objective {
            geometry: Geometry::Sequence,
            delays: vec![1, 2],
            n_negatives: 3,
            loss_window: Some(5),
        };
        let model = GimModel::new(&config, &objective, &[8, 2], 1).unwrap();
        let mut rng = SeededRng::new(9);
        let ds = Dataset {
            inputs: Tensor::new(vec![8, 8, 2], (0..128).map(|_| rng.normal()).collect()).unwrap(),
            labels: None,
            n_classes: 0,
        };
        (model, ds)
    }

    fn settings(mode: ScheduleMode, units: usize) -> TrainSettings {
        TrainSettings {
            schedule: TrainingSchedule {
                mode,
                epochs: 2,
                unit_epochs: vec![2; units],
                batch_size: 4,
                isolation_check_every: 1,
                cache_dir: None,
            },
            adam: AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            seed: 3,
        }
    }

    #[test]
    fn schedules_agree_on_first_unit_and_cache_matches_live() {
        let (model, ds) = tiny(ContextMode::Full);
        let run = |mode| {
            let mut m = model.clone();
            let out = train(&mut m, &ds, &settings(mode, 3)).unwrap();
            (m, out)
        };
        let (_, sim) = run(ScheduleMode::Simultaneous);
        let (m_it, it) = run(ScheduleMode::Iterative);
        let (m_ca, ca) = run(ScheduleMode::Cached);
        assert!(sim.isolation_checks > 0);
        let l = |o: &TrainOutcome, u| o.records_for(u).map(|r| r.loss_total.to_bits()).collect::<Vec<_>>();
        assert_eq!(l(&sim, 0), l(&it, 0));
        for u in 0..3 {
            assert_eq!(l(&it, u), l(&ca, u));
            assert_eq!(m_it.unit_digest(u), m_ca.unit_digest(u));
        }
        assert!(ca.meter.peak < sim.meter.peak);
    }

    #[test]
    fn zero_budget_is_an_error() {
        let (mut model, ds) = tiny(ContextMode::Absent);
        let mut s = settings(ScheduleMode::Iterative, 2);
        s.schedule.unit_epochs[1] = 0;
        assert!(matches!(train(&mut model, &ds, &s), Err(GimError::Schedule(_))));
    }

    #[test]
    fn unfrozen_chain_cannot_be_cached() {
        let (model, ds) = tiny(ContextMode::Absent);
        assert!(cache_activations(&model, 1, &BTreeMap::new(), &ds, 4).is_err());
        let mut frozen = BTreeMap::new();
        frozen.insert(0, model.unit_digest(0));
        let store = cache_activations(&model, 1, &frozen, &ds, 3).unwrap();
        assert_eq!(store.values.shape(), &[8, 3, 8]);
        let live = model.eval_encoders(&model.prepare_batch(&ds.gather(&[5, 2]).unwrap()).unwrap(), 1).unwrap();
        assert!(store.gather(&[5, 2]).unwrap().bitwise_eq(&live));
    }

    #[test]
    fn training_is_reproducible_and_moves_only_trained_units() {
        let (model, ds) = tiny(ContextMode::Blocked);
        let mut a = model.clone();
        let mut b = model.clone();
        let s = settings(ScheduleMode::Simultaneous, 3);
        let ra = train(&mut a, &ds, &s).unwrap();
        let rb = train(&mut b, &ds, &s).unwrap();
        assert_eq!(ra.records, rb.records);
        for u in 0..3 {
            assert_eq!(a.unit_digest(u), b.unit_digest(u));
            assert_ne!(a.unit_digest(u), model.unit_digest(u));
        }
    }

    #[test]
    fn metrics_round_trip() {
        let (mut model, ds) = tiny(ContextMode::Absent);
        let out = train(&mut model, &ds, &settings(ScheduleMode::Simultaneous, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_metrics(&path, &out.records).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), out.records);
        let first = std::fs::read_to_string(&path).unwrap();
        let line = first.lines().next().unwrap();
        for key in ["step", "epoch", "module", "loss_total", "loss_per_k", "mi_bound_per_k", "lr", "peak_bytes"] {
            assert!(line.contains(&format!("\"{key}\"")), "{line}");
        }
    }
}
