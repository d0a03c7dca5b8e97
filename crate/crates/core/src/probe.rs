//! Linear probes on frozen representations.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Param, ParamIds};
use crate::context::context_eval;
use crate::data::{Dataset, Labels};
use crate::error::{GimError, Result};
use crate::model::{GimModel, Geometry};
use crate::params::HasParams;
use crate::rng::{Purpose, SeededRng, NO_MODULE};
use crate::tensor::Tensor;
use crate::training::{adam_step, AdamConfig, AdamState};

/// Mean over every axis but the last.
pub fn pool_features(z: &Tensor) -> Result<Tensor> {
    let d = *z.shape().last().expect("tensors have rank >= 1");
    let rows = z.numel() / d;
    let mut out = vec![0.0; d];
    for r in z.data().chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(vec![d], out.into_iter().map(|v| v / rows as f64).collect()))
}

/// What a probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// Output of encoder module `m`.
    Encoder(usize),
    Context,
}

/// How activations become probe samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One sample per item, averaged over time or over patches and pixels.
    Mean,
    /// One sample per time-step.
    PerStep,
}

/// Probe samples `x: [n, d]` with their labels.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub pooling: Pooling,
}

/// Features of `source` for every item of `ds`. Per-item labels give mean
/// pooled samples; per-step labels give one sample per time-step.
pub fn extract_features(model: &GimModel, ds: &Dataset, source: FeatureSource, chunk: usize) -> Result<FeatureSet> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| GimError::invalid("probe", "dataset has no labels"))?;
    let pooling = match labels {
        Labels::PerItem(_) => Pooling::Mean,
        Labels::PerStep { .. } => Pooling::PerStep,
    };
    if pooling == Pooling::PerStep && !matches!(model.objective.geometry, Geometry::Sequence) {
        return Err(GimError::invalid("probe", "per-step labels need sequence data"));
    }
    let depth = match source {
        FeatureSource::Encoder(m) if m < model.module_count() => m + 1,
        FeatureSource::Encoder(m) => return Err(GimError::invalid("probe", format!("no encoder module {m}"))),
        FeatureSource::Context if model.context.is_some() => model.module_count(),
        FeatureSource::Context => return Err(GimError::invalid("probe", "model has no context unit")),
    };
    let n = ds.len();
    let chunk = chunk.max(1);
    let mut x = Vec::new();
    let mut d = 0;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let z = model.eval_encoders(&model.prepare_batch(&ds.gather(&idx)?)?, depth)?;
        // channel-last per item: [B, steps, d]
        let feats = match source {
            FeatureSource::Context => {
                let gru = &model.context.as_ref().expect("checked above").gru;
                context_eval(gru, &z)?
            }
            FeatureSource::Encoder(_) => match model.objective.geometry {
                Geometry::Sequence => z.permute(&[0, 2, 1])?,
                Geometry::Grid { .. } => {
                    let s = z.shape().to_vec();
                    let per_image = s[0] / idx.len();
                    let spatial: usize = s[2..].iter().product();
                    z.reshape(&[idx.len(), per_image, s[1], spatial])?
                        .permute(&[0, 1, 3, 2])?
                        .reshape(&[idx.len(), per_image * spatial, s[1]])?
                }
            },
        };
        d = feats.shape()[2];
        for b in 0..idx.len() {
            let item = feats.index0(b)?;
            match pooling {
                Pooling::Mean => x.extend_from_slice(pool_features(&item)?.data()),
                Pooling::PerStep => x.extend_from_slice(item.data()),
            }
        }
    }
    let y = labels.raw().to_vec();
    let rows = x.len() / d;
    if rows != y.len() {
        return Err(GimError::invalid("probe", format!("{rows} feature rows for {} labels", y.len())));
    }
    Ok(FeatureSet {
        x: Tensor::new(vec![rows, d], x)?,
        y,
        pooling,
    })
}

/// Softmax regression on standardised features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    /// `[classes, d]`
    pub w: Tensor,
    /// `[classes]`
    pub b: Tensor,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let d = self.w.shape()[1];
        x.data()
            .chunks_exact(d)
            .map(|row| {
                let mut best = (f64::NEG_INFINITY, 0);
                for c in 0..self.classes() {
                    let wc = &self.w.data()[c * d..(c + 1) * d];
                    let s: f64 = self.b.data()[c]
                        + row
                            .iter()
                            .zip(wc)
                            .zip(self.mean.iter().zip(&self.scale))
                            .map(|((v, w), (m, sc))| (v - m) / sc * w)
                            .sum::<f64>();
                    if s > best.0 {
                        best = (s, c);
                    }
                }
                best.1
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub source: FeatureSource,
    pub accuracy: f64,
    /// `None` for classes absent from the evaluation set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub correct: usize,
    pub samples: usize,
}

fn standardise(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = x.shape()[1];
    let n = x.shape()[0] as f64;
    let mut mean = vec![0.0; d];
    for r in x.data().chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in x.data().chunks_exact(d) {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(1e-8)).collect())
}

fn check_labels(y: &[usize], classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(GimError::invalid("train_probe", format!("need at least 2 classes, got {classes}")));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(GimError::invalid("train_probe", format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Adam-trained softmax regression for `epochs` passes over shuffled
/// minibatches. With `val`, the weights of the epoch with the best validation
/// accuracy are returned.
pub fn train_probe(
    x: &Tensor,
    y: &[usize],
    classes: usize,
    settings: &ProbeSettings,
    val: Option<(&Tensor, &[usize])>,
) -> Result<LinearProbe> {
    check_labels(y, classes)?;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n != y.len() || n == 0 {
        return Err(GimError::invalid("train_probe", format!("{n} samples for {} labels", y.len())));
    }
    if y.iter().all(|&l| l == y[0]) {
        log::warn!("probe training data holds a single class ({})", y[0]);
    }
    let (mean, scale) = standardise(x);
    let xs: Vec<f64> = x
        .data()
        .chunks_exact(d)
        .flat_map(|r| r.iter().zip(mean.iter().zip(&scale)).map(|(v, (m, s))| (v - m) / s))
        .collect();
    let mut ids = ParamIds::new();
    let mut w = Param {
        id: ids.alloc(),
        name: "probe.w".into(),
        value: Tensor::zeros(&[classes, d]),
    };
    let mut b = Param {
        id: ids.alloc(),
        name: "probe.b".into(),
        value: Tensor::zeros(&[classes]),
    };
    let mut state = AdamState::new(AdamConfig {
        lr: settings.lr,
        ..Default::default()
    });
    let snapshot = |w: &Param, b: &Param| LinearProbe {
        w: w.value.clone(),
        b: b.value.clone(),
        mean: mean.clone(),
        scale: scale.clone(),
    };
    let mut best: Option<(f64, LinearProbe)> = None;
    let bs = settings.batch_size.clamp(1, n);
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::derive(settings.seed, NO_MODULE, epoch as u64, Purpose::Probe).shuffle(&mut order);
        for idx in order.chunks(bs) {
            let mut rows = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                rows.extend_from_slice(&xs[i * d..(i + 1) * d]);
            }
            let target: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let xv = g.input(Tensor::from_parts(vec![idx.len(), d], rows));
            let wv = g.param(&w);
            let bv = g.param(&b);
            let wt = g.transpose(wv)?;
            let logits = g.matmul(xv, wt)?;
            let logits = g.add_bias(logits, bv, 1)?;
            let logp = g.log_softmax(logits, 1)?;
            let loss = g.gather_cross_entropy(logp, &target)?;
            let grads = g.backward(loss)?;
            adam_step([&mut w, &mut b], &grads, &mut state)?;
        }
        if let Some((vx, vy)) = val {
            let acc = accuracy(&snapshot(&w, &b), vx, vy, classes)?.accuracy;
            if best.as_ref().is_none_or(|(a, _)| acc > *a) {
                best = Some((acc, snapshot(&w, &b)));
            }
        }
    }
    Ok(match best {
        Some((_, p)) => p,
        None => snapshot(&w, &b),
    })
}

/// Accuracy as exactly `correct / total`, with per-class breakdown.
pub fn accuracy(probe: &LinearProbe, x: &Tensor, y: &[usize], classes: usize) -> Result<ProbeResult> {
    if x.shape()[0] != y.len() || y.is_empty() {
        return Err(GimError::invalid("probe", format!("{} samples for {} labels", x.shape()[0], y.len())));
    }
    let pred = probe.predict(x);
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(y) {
        total[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let correct: usize = hit.iter().sum();
    Ok(ProbeResult {
        source: FeatureSource::Encoder(0),
        accuracy: correct as f64 / y.len() as f64,
        per_class_accuracy: hit
            .iter()
            .zip(&total)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        correct,
        samples: y.len(),
    })
}

/// Splits `train` 80/20 (by default) for epoch selection, trains, and scores
/// on `test`.
pub fn fit_and_score(train: &FeatureSet, test: &FeatureSet, classes: usize, settings: &ProbeSettings) -> Result<ProbeResult> {
    let n = train.y.len();
    let n_val = ((n as f64) * settings.val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::derive(settings.seed, NO_MODULE, 0, Purpose::Split).shuffle(&mut order);
    let (val_idx, fit_idx) = order.split_at(n_val);
    let take = |idx: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        Ok((
            crate::data::gather_items(&train.x, idx)?,
            idx.iter().map(|&i| train.y[i]).collect(),
        ))
    };
    let (fx, fy) = take(fit_idx)?;
    let probe = if n_val > 0 {
        let (vx, vy) = take(val_idx)?;
        train_probe(&fx, &fy, classes, settings, Some((&vx, &vy)))?
    } else {
        train_probe(&fx, &fy, classes, settings, None)?
    };
    accuracy(&probe, &test.x, &test.y, classes)
}

/// One probe per encoder module, in depth order, then one on the context.
pub fn probe_per_module(model: &GimModel, train: &Dataset, test: &Dataset, settings: &ProbeSettings) -> Result<Vec<ProbeResult>> {
    let before: Vec<String> = (0..model.unit_count()).map(|u| model.unit_digest(u)).collect();
    let mut sources: Vec<FeatureSource> = (0..model.module_count()).map(FeatureSource::Encoder).collect();
    if model.context.is_some() {
        sources.push(FeatureSource::Context);
    }
    let classes = train.n_classes.max(test.n_classes);
    let mut out = Vec::with_capacity(sources.len());
    for source in sources {
        out.push(probe_source(model, train, test, source, classes, settings)?);
    }
    let after: Vec<String> = (0..model.unit_count()).map(|u| model.unit_digest(u)).collect();
    if before != after {
        return Err(GimError::Schedule("probe training changed encoder parameters".into()));
    }
    Ok(out)
}

pub fn probe_source(
    model: &GimModel,
    train: &Dataset,
    test: &Dataset,
    source: FeatureSource,
    classes: usize,
    settings: &ProbeSettings,
) -> Result<ProbeResult> {
    let ftrain = extract_features(model, train, source, 64)?;
    let ftest = extract_features(model, test, source, 64)?;
    let mut r = fit_and_score(&ftrain, &ftest, classes, settings)?;
    r.source = source;
    Ok(r)
}

/// Digest of every encoder parameter, for side-effect checks.
pub fn encoder_digest(model: &GimModel) -> String {
    crate::params::digest_params(model.encoders.iter().flat_map(|e| e.params()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let sign = if c == 0 { -1.0 } else { 1.0 };
            x.push(sign * (1.0 + rng.uniform()));
            x.push(rng.normal());
            y.push(c);
        }
        (Tensor::new(vec![n, 2], x).unwrap(), y)
    }

    #[test]
    fn pooling_cases() {
        let single = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pool_features(&single).unwrap().data(), &[1.0, 2.0, 3.0]);
        let grid = Tensor::full(&[7, 7, 4], 0.25);
        assert_eq!(pool_features(&grid).unwrap().data(), &[0.25; 4]);
        let z = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let a = pool_features(&z.map(|v| 3.0 * v)).unwrap();
        let b = pool_features(&z).unwrap().map(|v| 3.0 * v);
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn separable_toy_is_learned() {
        let (x, y) = separable(200, 1);
        let s = ProbeSettings {
            epochs: 200,
            ..Default::default()
        };
        let probe = train_probe(&x, &y, 2, &s, None).unwrap();
        let r = accuracy(&probe, &x, &y, 2).unwrap();
        assert!(r.accuracy >= 0.99, "{}", r.accuracy);
        assert_eq!(r.correct as f64 / r.samples as f64, r.accuracy);
    }

    #[test]
    fn bad_labels_error() {
        let (x, _) = separable(4, 1);
        assert!(train_probe(&x, &[0, 1, 2, 0], 2, &ProbeSettings::default(), None).is_err());
        let p = train_probe(&x, &[1, 1, 1, 1], 2, &ProbeSettings::default(), None).unwrap();
        assert_eq!(p.predict(&x), vec![1; 4]);
    }

    #[test]
    fn probe_training_is_deterministic() {
        let (x, y) = separable(64, 2);
        let s = ProbeSettings {
            epochs: 3,
            ..Default::default()
        };
        let a = train_probe(&x, &y, 2, &s, None).unwrap();
        let b = train_probe(&x, &y, 2, &s, None).unwrap();
        assert!(a.w.bitwise_eq(&b.w) && a.b.bitwise_eq(&b.b));
    }
}
