//! Log-bilinear scoring heads and the module-local InfoNCE objective.
//!
//! Scores stay in the log domain throughout: the bilinear form
//! `z_targetᵀ W_k z_anchor` is fed straight into a max-shifted log-softmax
//! over the bag, and the loss is the negative log-probability of the
//! positive. Per-delay losses are averaged over anchors, then summed over
//! delays.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Param, ParamIds, Var};
use crate::error::{GimError, Result};
use crate::params::{glorot_uniform, HasParams};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// One `W_k` per prediction delay, shaped `[d_target, d_anchor]`.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub module: usize,
    pub d_target: usize,
    pub d_anchor: usize,
    pub weights: BTreeMap<usize, Param>,
}

impl PredictionHead {
    pub fn new(module: usize, d_target: usize, d_anchor: usize, delays: &[usize], seed: u64, ids: &mut ParamIds) -> Result<Self> {
        if delays.is_empty() {
            return Err(GimError::invalid("prediction_head", "no delays given"));
        }
        // heads draw from a stream distinct from every encoder module's
        let mut rng = SeededRng::derive(seed, module as u64, 1, crate::rng::Purpose::Init);
        let mut weights = BTreeMap::new();
        for &k in delays {
            let p = Param {
                id: ids.alloc(),
                name: format!("head{module}.W{k}"),
                value: glorot_uniform(&[d_target, d_anchor], d_anchor, d_target, &mut rng),
            };
            if weights.insert(k, p).is_some() {
                return Err(GimError::invalid("prediction_head", format!("delay {k} listed twice")));
            }
        }
        Ok(Self {
            module,
            d_target,
            d_anchor,
            weights,
        })
    }

    pub fn delays(&self) -> Vec<usize> {
        self.weights.keys().copied().collect()
    }

    pub fn weight(&self, k: usize) -> Result<&Param> {
        self.weights
            .get(&k)
            .ok_or_else(|| GimError::invalid("infonce_loss", format!("head {} has no delay {k}", self.module)))
    }
}

impl HasParams for PredictionHead {
    fn params(&self) -> Vec<&Param> {
        self.weights.values().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.weights.values_mut().collect()
    }
}

/// `z_targetᵀ W anchor`, the log of the score.
pub fn score_log_bilinear(z_target: &Tensor, anchor: &Tensor, w: &Tensor) -> Result<f64> {
    let (dt, da) = (z_target.numel(), anchor.numel());
    if w.shape() != [dt, da] {
        return Err(GimError::shape("score_log_bilinear", w.shape(), &[dt, da]));
    }
    let wd = w.data();
    let a = anchor.data();
    Ok(z_target
        .data()
        .iter()
        .enumerate()
        .map(|(i, &zi)| zi * crate::autodiff::dot(&wd[i * da..(i + 1) * da], a))
        .sum())
}

/// `count` rows drawn uniformly with replacement from `pool: [P, d]`.
pub fn sample_negatives(pool: &Tensor, count: usize, rng: &mut SeededRng) -> Result<Tensor> {
    let s = pool.shape();
    if s.len() != 2 {
        return Err(GimError::invalid("sample_negatives", format!("pool must be [P, d], got {s:?}")));
    }
    let (p, d) = (s[0], s[1]);
    if count == 0 {
        return Err(GimError::invalid("sample_negatives", "count must be >= 1"));
    }
    let mut out = Vec::with_capacity(count * d);
    for _ in 0..count {
        let r = rng.below(p);
        out.extend_from_slice(&pool.data()[r * d..(r + 1) * d]);
    }
    Ok(Tensor::from_parts(vec![count, d], out))
}

/// Pool indices of `count` negatives, with replacement.
pub fn sample_negative_indices(pool_size: usize, count: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if pool_size == 0 {
        return Err(GimError::invalid("sample_negatives", "empty pool"));
    }
    Ok((0..count).map(|_| rng.below(pool_size)).collect())
}

/// One anchor with its bag of candidates.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub anchor: Tensor,
    pub positive: Tensor,
    /// `[N - 1, d]`
    pub negatives: Tensor,
    pub delay: usize,
    pub positive_index: usize,
}

impl ContrastiveBatch {
    pub fn bag_size(&self) -> usize {
        self.negatives.shape()[0] + 1
    }

    /// `[N, d]` with the positive at `positive_index`.
    pub fn bag(&self) -> Result<Tensor> {
        let n = self.bag_size();
        if self.positive_index >= n {
            return Err(GimError::invalid(
                "contrastive_batch",
                format!("positive index {} outside bag of {n}", self.positive_index),
            ));
        }
        let d = self.positive.numel();
        if self.negatives.shape()[1] != d {
            return Err(GimError::shape("contrastive_batch", self.negatives.shape(), self.positive.shape()));
        }
        let mut rows = Vec::with_capacity(n * d);
        let mut negs = self.negatives.data().chunks(d);
        for i in 0..n {
            if i == self.positive_index {
                rows.extend_from_slice(self.positive.data());
            } else {
                rows.extend_from_slice(negs.next().expect("n - 1 negatives"));
            }
        }
        Ok(Tensor::from_parts(vec![n, d], rows))
    }
}

/// Losses of one evaluation, in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub per_delay: BTreeMap<usize, f64>,
    pub total: f64,
    pub mi_bound: BTreeMap<usize, f64>,
    pub bag_size: usize,
}

impl LossReport {
    pub fn from_per_delay(per_delay: BTreeMap<usize, f64>, bag_size: usize) -> Self {
        let total = per_delay.values().sum();
        let ln_n = (bag_size as f64).ln();
        let mi_bound = per_delay.iter().map(|(&k, &l)| (k, ln_n - l)).collect();
        Self {
            per_delay,
            total,
            mi_bound,
            bag_size,
        }
    }
}

/// `ln N - loss_k` per delay.
pub fn mi_lower_bound(report: &LossReport) -> BTreeMap<usize, f64> {
    let ln_n = (report.bag_size as f64).ln();
    report.per_delay.iter().map(|(&k, &l)| (k, ln_n - l)).collect()
}

/// Mean negative log-softmax probability of the positive in each bag.
///
/// `pred: [A, d]` are the anchors already multiplied through `W_k`,
/// `bag: [A, N, d]` the candidates, `positive[a]` the positive's position.
pub fn bag_nll(g: &mut Graph, pred: Var, bag: Var, positive: &[usize]) -> Result<Var> {
    let scores = g.bag_scores(pred, bag)?;
    let logp = g.log_softmax(scores, 1)?;
    g.gather_cross_entropy(logp, positive)
}

/// `anchors: [A, d_anchor]` times `W_kᵀ`, giving `[A, d_target]`.
pub fn project_anchors(g: &mut Graph, anchors: Var, w: &Param) -> Result<Var> {
    let wv = g.param(w);
    let wt = g.transpose(wv)?;
    g.matmul(anchors, wt)
}

/// Graph scalars of one module-local loss evaluation.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub per_delay: BTreeMap<usize, Var>,
    pub bag_size: usize,
}

impl LossTerms {
    pub fn report(&self, g: &Graph) -> LossReport {
        let per = self
            .per_delay
            .iter()
            .map(|(&k, &v)| (k, g.value(v).item()))
            .collect();
        LossReport::from_per_delay(per, self.bag_size)
    }
}

/// The InfoNCE loss over explicit batches, recorded on `g`.
pub fn infonce_on_graph(g: &mut Graph, batches: &[ContrastiveBatch], head: &PredictionHead) -> Result<LossTerms> {
    if batches.is_empty() {
        return Err(GimError::invalid("infonce_loss", "empty batch list"));
    }
    let bag_size = batches[0].bag_size();
    let mut by_delay: BTreeMap<usize, Vec<&ContrastiveBatch>> = BTreeMap::new();
    for b in batches {
        head.weight(b.delay)?;
        if b.bag_size() != bag_size {
            return Err(GimError::invalid("infonce_loss", "all bags must have the same size"));
        }
        by_delay.entry(b.delay).or_default().push(b);
    }
    let mut per_delay = BTreeMap::new();
    for (k, group) in by_delay {
        let anchors = Tensor::stack(&group.iter().map(|b| b.anchor.clone()).collect::<Vec<_>>())?;
        let bags = Tensor::stack(&group.iter().map(|b| b.bag()).collect::<Result<Vec<_>>>()?)?;
        let positive: Vec<usize> = group.iter().map(|b| b.positive_index).collect();
        let a = g.input(anchors);
        let bag = g.input(bags);
        let pred = project_anchors(g, a, head.weight(k)?)?;
        per_delay.insert(k, bag_nll(g, pred, bag, &positive)?);
    }
    let total = sum_scalars(g, per_delay.values().copied())?;
    Ok(LossTerms {
        total,
        per_delay,
        bag_size,
    })
}

/// Evaluates the loss over explicit batches.
pub fn infonce_loss(batches: &[ContrastiveBatch], head: &PredictionHead) -> Result<LossReport> {
    let mut g = Graph::new();
    let terms = infonce_on_graph(&mut g, batches, head)?;
    Ok(terms.report(&g))
}

pub(crate) fn sum_scalars(g: &mut Graph, vars: impl IntoIterator<Item = Var>) -> Result<Var> {
    let mut it = vars.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| GimError::invalid("infonce_loss", "no delays to sum"))?;
    for v in it {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Anchor/target row indices for one delay.
#[derive(Clone, Debug, Default)]
pub struct DelayRows {
    pub anchors: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Module-local InfoNCE over rows of encodings held on the graph.
///
/// `anchor_rows: [P, d_anchor]` and `target_rows: [P, d_target]` index the
/// same `P` positions. Negatives for every anchor are drawn with replacement
/// from all `P` target rows (the positive may be among them); the positive
/// sits at bag position 0.
pub fn infonce_rows(
    g: &mut Graph,
    head: &PredictionHead,
    anchor_rows: Var,
    target_rows: Var,
    delays: &BTreeMap<usize, DelayRows>,
    n_negatives: usize,
    rng: &mut SeededRng,
) -> Result<LossTerms> {
    if delays.is_empty() {
        return Err(GimError::invalid("infonce_loss", "no prediction pairs"));
    }
    let pool = g.shape(target_rows)[0];
    let d_t = g.shape(target_rows)[1];
    let n = n_negatives + 1;
    let mut per_delay = BTreeMap::new();
    for (&k, rows) in delays {
        let w = head.weight(k)?;
        let a = rows.anchors.len();
        if a == 0 || rows.targets.len() != a {
            return Err(GimError::invalid("infonce_loss", format!("delay {k} has no usable pairs")));
        }
        let mut bag_index = Vec::with_capacity(a * n);
        for &t in &rows.targets {
            bag_index.push(t);
            bag_index.extend(sample_negative_indices(pool, n_negatives, rng)?);
        }
        let anchors = g.index_rows(anchor_rows, &rows.anchors)?;
        let pred = project_anchors(g, anchors, w)?;
        let bag = g.index_rows(target_rows, &bag_index)?;
        let bag = g.reshape(bag, &[a, n, d_t])?;
        per_delay.insert(k, bag_nll(g, pred, bag, &vec![0; a])?);
    }
    let total = sum_scalars(g, per_delay.values().copied())?;
    Ok(LossTerms {
        total,
        per_delay,
        bag_size: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head_with(w: Tensor, delays: &[usize]) -> PredictionHead {
        let mut head = PredictionHead::new(0, w.shape()[0], w.shape()[1], delays, 0, &mut ParamIds::new()).unwrap();
        for p in head.weights.values_mut() {
            p.value = w.clone();
        }
        head
    }

    #[test]
    fn log_bilinear_hand_cases() {
        let z = Tensor::vector(vec![1.0, 2.0]);
        let a = Tensor::vector(vec![3.0, -1.0]);
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 2.0, 1.0]).unwrap();
        assert_eq!(score_log_bilinear(&z, &a, &w).unwrap(), 13.0);
        let e1 = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(score_log_bilinear(&e1, &e1, &Tensor::eye(2)).unwrap(), 1.0);
        let zero = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(score_log_bilinear(&zero, &a, &w).unwrap(), 0.0);
        assert!(score_log_bilinear(&Tensor::vector(vec![1.0; 3]), &a, &w).is_err());
    }

    #[test]
    fn single_row_pool() {
        let pool = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let neg = sample_negatives(&pool, 4, &mut SeededRng::new(0)).unwrap();
        assert_eq!(neg.shape(), &[4, 3]);
        assert!(neg.data().chunks(3).all(|r| r == [1.0, 2.0, 3.0]));
    }

    #[test]
    fn uniform_scores_give_ln_n() {
        let head = head_with(Tensor::zeros(&[3, 3]), &[1]);
        let batch = ContrastiveBatch {
            anchor: Tensor::vector(vec![0.3, -0.1, 0.8]),
            positive: Tensor::vector(vec![1.0, 2.0, 3.0]),
            negatives: Tensor::full(&[16, 3], 0.5),
            delay: 1,
            positive_index: 4,
        };
        let r = infonce_loss(&[batch], &head).unwrap();
        assert!((r.per_delay[&1] - 17f64.ln()).abs() < 1e-12);
        assert!(r.mi_bound[&1].abs() < 1e-12);
    }

    #[test]
    fn two_element_bag() {
        // positive score 1, negative score 0
        let head = head_with(Tensor::eye(1), &[2]);
        let batch = ContrastiveBatch {
            anchor: Tensor::vector(vec![1.0]),
            positive: Tensor::vector(vec![1.0]),
            negatives: Tensor::zeros(&[1, 1]),
            delay: 2,
            positive_index: 0,
        };
        let r = infonce_loss(&[batch], &head).unwrap();
        assert!((r.per_delay[&2] - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn missing_delay_and_empty_input() {
        let head = head_with(Tensor::eye(1), &[1]);
        let batch = ContrastiveBatch {
            anchor: Tensor::vector(vec![1.0]),
            positive: Tensor::vector(vec![1.0]),
            negatives: Tensor::zeros(&[1, 1]),
            delay: 3,
            positive_index: 0,
        };
        assert!(infonce_loss(&[batch], &head).is_err());
        assert!(infonce_loss(&[], &head).is_err());
    }

    #[test]
    fn large_positive_score_drives_loss_to_zero() {
        let head = head_with(Tensor::full(&[1, 1], 1e3), &[1]);
        let batch = ContrastiveBatch {
            anchor: Tensor::vector(vec![1.0]),
            positive: Tensor::vector(vec![1.0]),
            negatives: Tensor::full(&[9, 1], -1.0),
            delay: 1,
            positive_index: 0,
        };
        let r = infonce_loss(&[batch], &head).unwrap();
        assert!(r.per_delay[&1] < 1e-12);
        assert!(r.per_delay[&1] >= 0.0);
        assert!((r.mi_bound[&1] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mi_bound_edges() {
        let mut per = BTreeMap::new();
        per.insert(1, 11f64.ln());
        per.insert(2, 0.0);
        let r = LossReport::from_per_delay(per, 11);
        let b = mi_lower_bound(&r);
        assert!(b[&1].abs() < 1e-15);
        assert!((b[&2] - 11f64.ln()).abs() < 1e-15);
    }
}
