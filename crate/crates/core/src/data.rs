//! Synthetic slow-feature datasets with a known discrete latent, and the GIMD
//! file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GimError, Result};
use crate::rng::{Purpose, SeededRng, NO_MODULE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    SeqGlobal,
    SeqLocal,
    GridClass,
}

impl std::str::FromStr for SyntheticKind {
    type Err = GimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq_global" => Ok(Self::SeqGlobal),
            "seq_local" => Ok(Self::SeqLocal),
            "grid_class" => Ok(Self::GridClass),
            other => Err(GimError::invalid(
                "synthetic_kind",
                format!("unknown kind {other:?}, expected seq_global|seq_local|grid_class"),
            )),
        }
    }
}

impl std::fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SeqGlobal => "seq_global",
            Self::SeqLocal => "seq_local",
            Self::GridClass => "grid_class",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_items: usize,
    /// Sequence length `T`.
    pub length: usize,
    /// Image height and width for grids.
    pub height: usize,
    pub width: usize,
    /// Image channels for grids.
    pub channels: usize,
    pub n_classes: usize,
    /// Per-step feature dimension for sequences.
    pub embed_dim: usize,
    pub sigma: f64,
    /// Steps per latent segment in `seq_local`.
    pub coherence: usize,
    /// Low-frequency basis functions per class in `grid_class`.
    pub n_basis: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::SeqGlobal,
            n_items: 1024,
            length: 64,
            height: 64,
            width: 64,
            channels: 1,
            n_classes: 8,
            embed_dim: 8,
            sigma: 0.5,
            coherence: 8,
            n_basis: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GimError::invalid("synthetic_spec", msg));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if self.n_items == 0 {
            return bad("n_items must be >= 1".into());
        }
        match self.kind {
            SyntheticKind::SeqGlobal | SyntheticKind::SeqLocal => {
                if self.length == 0 || self.embed_dim == 0 {
                    return bad("length and embed_dim must be >= 1".into());
                }
                if self.kind == SyntheticKind::SeqLocal && self.coherence == 0 {
                    return bad("coherence must be >= 1".into());
                }
            }
            SyntheticKind::GridClass => {
                if self.height == 0 || self.width == 0 || self.channels == 0 || self.n_basis == 0 {
                    return bad("height, width, channels and n_basis must be >= 1".into());
                }
            }
        }
        Ok(())
    }
}

/// Class labels, either one per item or one per time-step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    PerItem(Vec<usize>),
    /// `labels[i * steps + t]`
    PerStep { steps: usize, labels: Vec<usize> },
}

impl Labels {
    pub fn n_items(&self) -> usize {
        match self {
            Labels::PerItem(l) => l.len(),
            Labels::PerStep { steps, labels } => labels.len() / steps,
        }
    }

    pub fn raw(&self) -> &[usize] {
        match self {
            Labels::PerItem(l) => l,
            Labels::PerStep { labels, .. } => labels,
        }
    }

    pub fn max_label(&self) -> Option<usize> {
        self.raw().iter().copied().max()
    }
}

/// Inputs `[n, ...]` plus optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Option<Labels>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one item.
    pub fn item_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Items at `index`, stacked along a new leading axis.
    pub fn gather(&self, index: &[usize]) -> Result<Tensor> {
        gather_items(&self.inputs, index)
    }

    /// Subset of the items at `index`, labels included.
    pub fn subset(&self, index: &[usize]) -> Result<Dataset> {
        let labels = match &self.labels {
            None => None,
            Some(Labels::PerItem(l)) => Some(Labels::PerItem(index.iter().map(|&i| l[i]).collect())),
            Some(Labels::PerStep { steps, labels }) => Some(Labels::PerStep {
                steps: *steps,
                labels: index
                    .iter()
                    .flat_map(|&i| labels[i * steps..(i + 1) * steps].iter().copied())
                    .collect(),
            }),
        };
        Ok(Dataset {
            inputs: self.gather(index)?,
            labels,
            n_classes: self.n_classes,
        })
    }

    /// The first `n` items and the rest.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(GimError::invalid("split", format!("cannot split {} items at {n}", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    pub fn bitwise_eq(&self, other: &Dataset) -> bool {
        self.inputs.bitwise_eq(&other.inputs) && self.labels == other.labels && self.n_classes == other.n_classes
    }
}

pub(crate) fn gather_items(t: &Tensor, index: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(index.len() * per);
    for &i in index {
        if i >= n {
            return Err(GimError::invalid("gather", format!("item {i} out of range for {n} items")));
        }
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = index.len();
    Tensor::new(shape, data)
}

fn class_means(n_classes: usize, dim: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect()
}

fn gen_segments(spec: &SyntheticSpec, segment: usize) -> (Tensor, Vec<usize>) {
    let mut rng = SeededRng::derive(spec.seed, NO_MODULE, 0, Purpose::Data);
    let (t_len, d) = (spec.length, spec.embed_dim);
    let means = class_means(spec.n_classes, d, &mut rng);
    let mut data = Vec::with_capacity(spec.n_items * t_len * d);
    let mut labels = Vec::with_capacity(spec.n_items * t_len);
    for _ in 0..spec.n_items {
        let mut class = 0;
        for t in 0..t_len {
            if t % segment == 0 {
                class = rng.below(spec.n_classes);
            }
            labels.push(class);
            for &mu in &means[class] {
                data.push(mu + spec.sigma * rng.normal());
            }
        }
    }
    (Tensor::from_parts(vec![spec.n_items, t_len, d], data), labels)
}

/// Sequences `[n, T, d]` whose every step is a class mean plus noise.
pub fn gen_seq_global(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind != SyntheticKind::SeqGlobal {
        return Err(GimError::invalid("gen_seq_global", format!("spec kind is {}", spec.kind)));
    }
    let (inputs, steps) = gen_segments(spec, spec.length);
    let labels = steps.iter().step_by(spec.length).copied().collect();
    Ok(Dataset {
        inputs,
        labels: Some(Labels::PerItem(labels)),
        n_classes: spec.n_classes,
    })
}

/// Sequences whose latent class is redrawn every `coherence` steps, with
/// per-step labels.
pub fn gen_seq_local(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind != SyntheticKind::SeqLocal {
        return Err(GimError::invalid("gen_seq_local", format!("spec kind is {}", spec.kind)));
    }
    if spec.coherence >= spec.length {
        log::warn!(
            "coherence {} >= length {}: every sequence holds a single latent",
            spec.coherence,
            spec.length
        );
    }
    let (inputs, labels) = gen_segments(spec, spec.coherence.min(spec.length));
    Ok(Dataset {
        inputs,
        labels: Some(Labels::PerStep {
            steps: spec.length,
            labels,
        }),
        n_classes: spec.n_classes,
    })
}

/// Images `[n, C, H, W]`: a class-specific mix of low-frequency cosines plus
/// pixel noise, so neighbouring patches share the class.
pub fn gen_grid_class(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind != SyntheticKind::GridClass {
        return Err(GimError::invalid("gen_grid_class", format!("spec kind is {}", spec.kind)));
    }
    let mut rng = SeededRng::derive(spec.seed, NO_MODULE, 0, Purpose::Data);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    // (fy, fx, phase) per basis function; frequencies stay below two cycles
    let mut bases = Vec::with_capacity(spec.n_classes * spec.n_basis);
    for _ in 0..spec.n_classes * spec.n_basis {
        let fy = rng.uniform_range(0.0, 2.0);
        let fx = rng.uniform_range(0.0, 2.0);
        let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
        let amp: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        bases.push((fy, fx, phase, amp));
    }
    let mut data = Vec::with_capacity(spec.n_items * c * h * w);
    let mut labels = Vec::with_capacity(spec.n_items);
    for _ in 0..spec.n_items {
        let class = rng.below(spec.n_classes);
        labels.push(class);
        let own = &bases[class * spec.n_basis..(class + 1) * spec.n_basis];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
                    let s: f64 = own
                        .iter()
                        .map(|(fy, fx, ph, amp)| amp[ch] * (std::f64::consts::TAU * (fy * u + fx * v) + ph).cos())
                        .sum();
                    data.push(s + spec.sigma * rng.normal());
                }
            }
        }
    }
    Ok(Dataset {
        inputs: Tensor::from_parts(vec![spec.n_items, c, h, w], data),
        labels: Some(Labels::PerItem(labels)),
        n_classes: spec.n_classes,
    })
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    match spec.kind {
        SyntheticKind::SeqGlobal => gen_seq_global(spec),
        SyntheticKind::SeqLocal => gen_seq_local(spec),
        SyntheticKind::GridClass => gen_grid_class(spec),
    }
}

/// Mutual information in nats between two latent symbols drawn with
/// probability `p_same` from one segment and otherwise independently, each
/// uniform over `n` classes.
fn mixed_latent_mi(n: usize, p_same: f64) -> f64 {
    let nf = n as f64;
    let mut mi = 0.0;
    for a in 0..n {
        for b in 0..n {
            let joint = if a == b {
                p_same / nf + (1.0 - p_same) / (nf * nf)
            } else {
                (1.0 - p_same) / (nf * nf)
            };
            if joint > 0.0 {
                mi += joint * (joint * nf * nf).ln();
            }
        }
    }
    mi
}

/// `I(latent_t; latent_{t+k})` for each delay, by enumerating the latent
/// joint with `t` uniform over the valid anchors.
pub fn true_mi_oracle(spec: &SyntheticSpec, delays: &[usize]) -> Result<Vec<f64>> {
    spec.validate()?;
    let segment = match spec.kind {
        SyntheticKind::SeqGlobal => spec.length,
        SyntheticKind::SeqLocal => spec.coherence.min(spec.length),
        SyntheticKind::GridClass => usize::MAX,
    };
    delays
        .iter()
        .map(|&k| {
            if spec.kind == SyntheticKind::GridClass {
                return Ok(mixed_latent_mi(spec.n_classes, 1.0));
            }
            if k == 0 || k >= spec.length {
                return Err(GimError::invalid(
                    "true_mi_oracle",
                    format!("delay {k} outside [1, {})", spec.length),
                ));
            }
            let anchors = spec.length - k;
            let same = (0..anchors).filter(|t| t / segment == (t + k) / segment).count();
            Ok(mixed_latent_mi(spec.n_classes, same as f64 / anchors as f64))
        })
        .collect()
}

pub const GIMD_MAGIC: [u8; 4] = *b"GIMD";
pub const GIMD_VERSION: u32 = 1;
pub const DTYPE_F64: u32 = 1;
const LABELS_NONE: u32 = 0;
const LABELS_PER_ITEM: u32 = 1;
const LABELS_PER_STEP: u32 = 2;

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&GIMD_MAGIC)?;
    w.write_all(&GIMD_VERSION.to_le_bytes())?;
    w.write_all(&(ds.inputs.rank() as u32).to_le_bytes())?;
    for &d in ds.inputs.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&DTYPE_F64.to_le_bytes())?;
    let flag = match &ds.labels {
        None => LABELS_NONE,
        Some(Labels::PerItem(_)) => LABELS_PER_ITEM,
        Some(Labels::PerStep { .. }) => LABELS_PER_STEP,
    };
    w.write_all(&flag.to_le_bytes())?;
    for v in ds.inputs.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(labels) = &ds.labels {
        w.write_all(&(ds.n_classes as u32).to_le_bytes())?;
        let steps = match labels {
            Labels::PerItem(_) => 1,
            Labels::PerStep { steps, .. } => *steps,
        };
        w.write_all(&(steps as u64).to_le_bytes())?;
        for &l in labels.raw() {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) struct ByteReader<'a> {
    pub path: &'a Path,
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(path: &'a Path, buf: &'a [u8]) -> Self {
        Self { path, buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(GimError::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = match self.take(4) {
            Ok(b) => b.try_into().expect("4 bytes"),
            Err(_) => {
                let mut f = [0u8; 4];
                f[..self.buf.len().min(4)].copy_from_slice(&self.buf[..self.buf.len().min(4)]);
                f
            }
        };
        if found != expected {
            return Err(GimError::BadMagic {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Reads `dims` then checks the file holds `numel * 8` more bytes.
    pub fn shape(&mut self, rank: usize) -> Result<(Vec<usize>, usize)> {
        let mut dims = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = self.u64()?;
            numel = numel.checked_mul(d).ok_or_else(|| self.overflow())?;
            dims.push(usize::try_from(d).map_err(|_| self.overflow())?);
        }
        numel.checked_mul(8).ok_or_else(|| self.overflow())?;
        let numel = usize::try_from(numel).map_err(|_| self.overflow())?;
        Ok((dims, numel))
    }

    pub fn require(&self, bytes: u64) -> Result<()> {
        let have = (self.buf.len() - self.pos) as u64;
        if have < bytes {
            return Err(GimError::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos as u64 + bytes,
                actual: self.buf.len() as u64,
            });
        }
        Ok(())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.require(n as u64 * 8)?;
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn format(&self, msg: impl Into<String>) -> GimError {
        GimError::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn overflow(&self) -> GimError {
        GimError::DimOverflow {
            path: self.path.to_path_buf(),
        }
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let buf = read_all(path)?;
    let mut r = ByteReader::new(path, &buf);
    r.magic(GIMD_MAGIC)?;
    let version = r.u32()?;
    if version != GIMD_VERSION {
        return Err(r.format(format!("unsupported version {version}")));
    }
    let rank = r.u32()? as usize;
    if rank == 0 {
        return Err(r.format("rank must be >= 1"));
    }
    let (dims, numel) = r.shape(rank)?;
    if dims.contains(&0) {
        return Err(r.format(format!("zero extent in {dims:?}")));
    }
    let dtype = r.u32()?;
    if dtype != DTYPE_F64 {
        return Err(r.format(format!("unsupported dtype code {dtype}")));
    }
    let flag = r.u32()?;
    let data = r.f64s(numel)?;
    let inputs = Tensor::new(dims.clone(), data)?;
    let (labels, n_classes) = match flag {
        LABELS_NONE => (None, 0),
        LABELS_PER_ITEM | LABELS_PER_STEP => {
            let n_classes = r.u32()? as usize;
            let steps = r.u64()? as usize;
            let count = dims[0].checked_mul(steps).ok_or_else(|| r.overflow())?;
            r.require(count as u64 * 4)?;
            let raw: Vec<usize> = r
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
                .collect();
            if let Some(&bad) = raw.iter().find(|&&l| l >= n_classes) {
                return Err(r.format(format!("label {bad} outside [0, {n_classes})")));
            }
            let labels = if flag == LABELS_PER_ITEM {
                if steps != 1 {
                    return Err(r.format("per-item labels must have one step"));
                }
                Labels::PerItem(raw)
            } else {
                Labels::PerStep { steps, labels: raw }
            };
            (Some(labels), n_classes)
        }
        other => return Err(r.format(format!("unknown label flag {other}"))),
    };
    r.finish()?;
    Ok(Dataset {
        inputs,
        labels,
        n_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_spec(kind: SyntheticKind) -> SyntheticSpec {
        SyntheticSpec {
            kind,
            n_items: 6,
            length: 16,
            n_classes: 3,
            embed_dim: 4,
            coherence: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_steps_are_identical() {
        let spec = SyntheticSpec {
            sigma: 0.0,
            ..seq_spec(SyntheticKind::SeqGlobal)
        };
        let ds = gen_seq_global(&spec).unwrap();
        for i in 0..6 {
            let item = ds.inputs.index0(i).unwrap();
            let first = &item.data()[..4];
            assert!(item.data().chunks(4).all(|r| r == first));
        }
    }

    #[test]
    fn full_coherence_matches_global() {
        let g = gen_seq_global(&seq_spec(SyntheticKind::SeqGlobal)).unwrap();
        let spec = SyntheticSpec {
            coherence: 16,
            ..seq_spec(SyntheticKind::SeqLocal)
        };
        let l = gen_seq_local(&spec).unwrap();
        assert!(g.inputs.bitwise_eq(&l.inputs));
        let Some(Labels::PerStep { labels, .. }) = &l.labels else { panic!() };
        let Some(Labels::PerItem(items)) = &g.labels else { panic!() };
        for (i, &c) in items.iter().enumerate() {
            assert!(labels[i * 16..(i + 1) * 16].iter().all(|&l| l == c));
        }
    }

    #[test]
    fn local_labels_change_only_at_boundaries() {
        let ds = gen_seq_local(&seq_spec(SyntheticKind::SeqLocal)).unwrap();
        let Some(Labels::PerStep { steps, labels }) = &ds.labels else { panic!() };
        for i in 0..6 {
            for t in 1..*steps {
                if t % 4 != 0 {
                    assert_eq!(labels[i * steps + t], labels[i * steps + t - 1]);
                }
            }
        }
    }

    #[test]
    fn generators_are_deterministic() {
        for kind in [SyntheticKind::SeqGlobal, SyntheticKind::SeqLocal] {
            let a = generate(&seq_spec(kind)).unwrap();
            let b = generate(&seq_spec(kind)).unwrap();
            assert!(a.bitwise_eq(&b));
        }
        let spec = SyntheticSpec {
            kind: SyntheticKind::GridClass,
            n_items: 2,
            height: 16,
            width: 16,
            ..Default::default()
        };
        assert!(generate(&spec).unwrap().bitwise_eq(&generate(&spec).unwrap()));
    }

    #[test]
    fn rejects_single_class() {
        let spec = SyntheticSpec {
            n_classes: 1,
            ..seq_spec(SyntheticKind::SeqGlobal)
        };
        assert!(gen_seq_global(&spec).is_err());
    }

    #[test]
    fn oracle_values() {
        let mut spec = seq_spec(SyntheticKind::SeqGlobal);
        spec.n_classes = 2;
        let mi = true_mi_oracle(&spec, &[1, 5]).unwrap();
        assert!((mi[0] - 2f64.ln()).abs() < 1e-12);
        spec.n_classes = 8;
        assert!((true_mi_oracle(&spec, &[3]).unwrap()[0] - 2.079_441_541_679_836).abs() < 1e-12);

        let local = seq_spec(SyntheticKind::SeqLocal);
        let mi = true_mi_oracle(&local, &[1, 4, 8]).unwrap();
        assert!(mi[0] > 0.0 && mi[0] < 3f64.ln());
        assert!(mi[1].abs() < 1e-15);
        assert!(mi[2].abs() < 1e-15);
    }

    #[test]
    fn gimd_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gimd");
        for kind in [SyntheticKind::SeqGlobal, SyntheticKind::SeqLocal] {
            let ds = generate(&seq_spec(kind)).unwrap();
            write_dataset(&ds, &path).unwrap();
            assert!(read_dataset(&path).unwrap().bitwise_eq(&ds));
        }
        let ds = Dataset {
            inputs: Tensor::vector(vec![1.0, f64::MIN_POSITIVE, -0.0]),
            labels: None,
            n_classes: 0,
        };
        write_dataset(&ds, &path).unwrap();
        assert!(read_dataset(&path).unwrap().bitwise_eq(&ds));

        let bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(GimError::BadMagic { .. })));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_dataset(&path) {
            Err(GimError::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 3);
            }
            other => panic!("{other:?}"),
        }

        let mut huge = bytes[..12].to_vec();
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&path, &huge).unwrap();
        assert!(matches!(read_dataset(&path), Err(GimError::DimOverflow { .. })));
    }
}
