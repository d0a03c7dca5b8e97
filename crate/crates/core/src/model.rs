//! A full Greedy InfoMax model: the encoder stack, one prediction head per
//! module, and an optional context unit, together with the batch layout and
//! loss assembly every schedule shares.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Param, ParamIds, Var};
use crate::context::{context_forward, ContextMode, GruParams};
use crate::contrastive::{infonce_rows, DelayRows, LossTerms, PredictionHead};
use crate::encoder::{build_stack, EncoderModule, InputKind, StackConfig};
use crate::error::{GimError, Result};
use crate::params::{digest_params, HasParams};
use crate::patching::{build_prediction_pairs_grid, extract_patch_batch, grid_dims};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// How items are laid out and which positions predict which.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    /// Items are `[T, d]`; position `t` predicts `t + k`.
    Sequence,
    /// Items are `[C, H, W]` images cut into a patch grid; a patch predicts
    /// patches `skip + 1 ..= skip + k_max` rows below it.
    Grid {
        patch_px: usize,
        overlap_px: usize,
        k_max: usize,
        skip: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub geometry: Geometry,
    pub delays: Vec<usize>,
    pub n_negatives: usize,
    /// Length of the random time window the loss is evaluated on.
    pub loss_window: Option<usize>,
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        if self.delays.is_empty() || self.delays.contains(&0) {
            return Err(GimError::invalid("objective", "delays must be a non-empty set of positive integers"));
        }
        if self.n_negatives == 0 {
            return Err(GimError::invalid("objective", "n_negatives must be >= 1"));
        }
        if let Geometry::Grid { k_max, skip, .. } = self.geometry {
            let expected: Vec<usize> = (skip + 1..=skip + k_max).collect();
            if self.delays != expected {
                return Err(GimError::invalid(
                    "objective",
                    format!("grid delays must be {expected:?} for k_max {k_max} and skip {skip}"),
                ));
            }
            if self.loss_window.is_some() {
                return Err(GimError::invalid("objective", "loss windows apply to sequences only"));
            }
        }
        Ok(())
    }

    pub fn max_delay(&self) -> usize {
        self.delays.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stack: StackConfig,
    pub context_mode: ContextMode,
    pub context_dim: usize,
}

#[derive(Clone, Debug)]
pub struct ContextUnit {
    pub gru: GruParams,
    pub head: PredictionHead,
    pub mode: ContextMode,
}

impl HasParams for ContextUnit {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.gru.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.gru.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Encoders, their heads and the optional context unit. A "unit" is one
/// independently optimised piece: encoder `m` with head `m`, or the context.
#[derive(Clone, Debug)]
pub struct GimModel {
    pub config: ModelConfig,
    pub objective: Objective,
    pub encoders: Vec<EncoderModule>,
    pub heads: Vec<PredictionHead>,
    pub context: Option<ContextUnit>,
}

impl GimModel {
    /// `item_shape` is the shape of one dataset item.
    pub fn new(config: &ModelConfig, objective: &Objective, item_shape: &[usize], seed: u64) -> Result<Self> {
        objective.validate()?;
        let extents = encoder_extents(config.stack.input_kind, &objective.geometry, item_shape)?;
        let mut ids = ParamIds::new();
        let encoders = build_stack(&config.stack, &extents, seed, &mut ids)?;
        let mut heads = Vec::with_capacity(encoders.len());
        for (m, e) in encoders.iter().enumerate() {
            heads.push(PredictionHead::new(m, e.out_dim, e.out_dim, &objective.delays, seed, &mut ids)?);
        }
        let context = match config.context_mode {
            ContextMode::Absent => None,
            mode => {
                if !matches!(objective.geometry, Geometry::Sequence) {
                    return Err(GimError::invalid("model", "a context unit needs sequence geometry"));
                }
                let m = encoders.len();
                let d_in = config.stack.top_dim();
                let gru = GruParams::new(m, d_in, config.context_dim, seed, &mut ids);
                let head = PredictionHead::new(m, d_in, config.context_dim, &objective.delays, seed, &mut ids)?;
                Some(ContextUnit { gru, head, mode })
            }
        };
        Ok(Self {
            config: config.clone(),
            objective: objective.clone(),
            encoders,
            heads,
            context,
        })
    }

    pub fn module_count(&self) -> usize {
        self.encoders.len()
    }

    pub fn unit_count(&self) -> usize {
        self.encoders.len() + usize::from(self.context.is_some())
    }

    pub fn is_context_unit(&self, unit: usize) -> bool {
        self.context.is_some() && unit == self.encoders.len()
    }

    pub fn unit_params(&self, unit: usize) -> Vec<&Param> {
        if self.is_context_unit(unit) {
            return self.context.as_ref().map(|c| c.params()).unwrap_or_default();
        }
        let mut p = self.encoders[unit].params();
        p.extend(self.heads[unit].params());
        p
    }

    pub fn unit_params_mut(&mut self, unit: usize) -> Vec<&mut Param> {
        if self.is_context_unit(unit) {
            return self.context.as_mut().map(|c| c.params_mut()).unwrap_or_default();
        }
        let mut p = self.encoders[unit].params_mut();
        p.extend(self.heads[unit].params_mut());
        p
    }

    pub fn unit_digest(&self, unit: usize) -> String {
        digest_params(self.unit_params(unit))
    }

    pub fn all_params(&self) -> Vec<&Param> {
        (0..self.unit_count()).flat_map(|u| self.unit_params(u)).collect()
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for (e, h) in self.encoders.iter_mut().zip(self.heads.iter_mut()) {
            out.extend(e.params_mut());
            out.extend(h.params_mut());
        }
        if let Some(c) = self.context.as_mut() {
            out.extend(c.params_mut());
        }
        out
    }

    /// Turns gathered items `[B, ...]` into encoder input.
    pub fn prepare_batch(&self, items: &Tensor) -> Result<Tensor> {
        prepare_batch(&self.objective.geometry, items)
    }

    /// Value-only output of encoders `0..upto` on prepared input.
    pub fn eval_encoders(&self, x: &Tensor, upto: usize) -> Result<Tensor> {
        let mut cur = x.clone();
        for e in &self.encoders[..upto] {
            cur = e.eval(&cur)?;
        }
        Ok(cur)
    }

    /// Loss of `unit` given that unit's encoder output (or, for the context
    /// unit, the top encoder output) `z`.
    pub fn unit_loss(
        &self,
        g: &mut Graph,
        unit: usize,
        z: Var,
        batch: usize,
        negatives: &mut SeededRng,
        window: &mut SeededRng,
    ) -> Result<LossTerms> {
        let obj = &self.objective;
        if self.is_context_unit(unit) {
            let ctx = self.context.as_ref().expect("context unit");
            let c = context_forward(g, &ctx.gru, z, ctx.mode)?;
            let t_len = g.shape(z)[2];
            let (c, z, tw) = match obj.loss_window {
                Some(w) => {
                    let off = crate::patching::window_offset(t_len, w, window)?;
                    (g.slice(c, 1, off, w)?, g.slice(z, 2, off, w)?, w)
                }
                None => (c, z, t_len),
            };
            let d_h = g.shape(c)[2];
            let anchors = g.reshape(c, &[batch * tw, d_h])?;
            let zb = g.grad_block(z);
            let targets = sequence_rows(g, zb)?;
            let rows = sequence_delay_rows(batch, tw, &obj.delays)?;
            return infonce_rows(g, &ctx.head, anchors, targets, &rows, obj.n_negatives, negatives);
        }
        let head = &self.heads[unit];
        match &obj.geometry {
            Geometry::Sequence => {
                let t_len = g.shape(z)[2];
                let (z, tw) = match obj.loss_window {
                    Some(w) => {
                        let off = crate::patching::window_offset(t_len, w, window)?;
                        (g.slice(z, 2, off, w)?, w)
                    }
                    None => (z, t_len),
                };
                let rows_v = sequence_rows(g, z)?;
                let rows = sequence_delay_rows(batch, tw, &obj.delays)?;
                infonce_rows(g, head, rows_v, rows_v, &rows, obj.n_negatives, negatives)
            }
            Geometry::Grid { k_max, skip, .. } => {
                let per_image = g.shape(z)[0] / batch;
                let (rows, cols) = grid_shape(per_image)?;
                let pooled = g.mean_pool(z, &[2, 3])?;
                let pairs = build_prediction_pairs_grid(rows, cols, *k_max, *skip)?;
                let mut by_delay: BTreeMap<usize, DelayRows> = BTreeMap::new();
                for b in 0..batch {
                    for p in &pairs.pairs {
                        let e = by_delay.entry(p.delay).or_default();
                        e.anchors.push(b * per_image + p.anchor);
                        e.targets.push(b * per_image + p.target);
                    }
                }
                infonce_rows(g, head, pooled, pooled, &by_delay, obj.n_negatives, negatives)
            }
        }
    }
}

/// Encoder input extents for one item.
fn encoder_extents(kind: InputKind, geometry: &Geometry, item_shape: &[usize]) -> Result<Vec<usize>> {
    match (kind, geometry) {
        (InputKind::Sequence, Geometry::Sequence) => {
            if item_shape.len() != 2 {
                return Err(GimError::invalid("model", format!("sequence items must be [T, d], got {item_shape:?}")));
            }
            Ok(vec![item_shape[0]])
        }
        (
            InputKind::PatchGrid,
            Geometry::Grid {
                patch_px, overlap_px, ..
            },
        ) => {
            if item_shape.len() != 3 {
                return Err(GimError::invalid("model", format!("grid items must be [C, H, W], got {item_shape:?}")));
            }
            grid_dims(item_shape[1], item_shape[2], *patch_px, *overlap_px)?;
            Ok(vec![*patch_px, *patch_px])
        }
        _ => Err(GimError::invalid("model", "stack input kind does not match the objective geometry")),
    }
}

/// Grids are square in every configuration this crate builds.
fn grid_shape(per_image: usize) -> Result<(usize, usize)> {
    let side = (per_image as f64).sqrt().round() as usize;
    if side * side != per_image {
        return Err(GimError::invalid("model", format!("{per_image} patches do not form a square grid")));
    }
    Ok((side, side))
}

pub fn prepare_batch(geometry: &Geometry, items: &Tensor) -> Result<Tensor> {
    match geometry {
        Geometry::Sequence => items.permute(&[0, 2, 1]),
        Geometry::Grid {
            patch_px, overlap_px, ..
        } => Ok(extract_patch_batch(items, *patch_px, *overlap_px)?.0),
    }
}

/// `[B, C, T]` to rows `[B * T, C]` with row `b * T + t`.
fn sequence_rows(g: &mut Graph, z: Var) -> Result<Var> {
    let s = g.shape(z).to_vec();
    let p = g.permute(z, &[0, 2, 1])?;
    g.reshape(p, &[s[0] * s[2], s[1]])
}

fn sequence_delay_rows(batch: usize, t_len: usize, delays: &[usize]) -> Result<BTreeMap<usize, DelayRows>> {
    let mut out = BTreeMap::new();
    for &k in delays {
        if k >= t_len {
            return Err(GimError::invalid(
                "build_prediction_pairs_seq",
                format!("delay {k} needs more than {t_len} steps"),
            ));
        }
        let mut rows = DelayRows::default();
        for b in 0..batch {
            for t in 0..t_len - k {
                rows.anchors.push(b * t_len + t);
                rows.targets.push(b * t_len + t + k);
            }
        }
        out.insert(k, rows);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_model(context: ContextMode) -> GimModel {
        let config = ModelConfig {
            stack: StackConfig::uniform(InputKind::Sequence, 3, 4, 3, 2, 3, 1, 1),
            context_mode: context,
            context_dim: 2,
        };
        let objective = Objective {
            geometry: Geometry::Sequence,
            delays: vec![1, 2],
            n_negatives: 3,
            loss_window: Some(6),
        };
        GimModel::new(&config, &objective, &[10, 3], 5).unwrap()
    }

    fn unit_grads(model: &GimModel, unit: usize) -> crate::autodiff::Gradients {
        let mut rng = SeededRng::new(1);
        let x: Vec<f64> = (0..2 * 10 * 3).map(|_| rng.normal()).collect();
        let items = Tensor::new(vec![2, 10, 3], x).unwrap();
        let mut g = Graph::new();
        let xv = g.input(model.prepare_batch(&items).unwrap());
        let out = crate::encoder::stack_forward(&model.encoders, &mut g, xv).unwrap();
        let z = if model.is_context_unit(unit) {
            out.top()
        } else {
            out.per_module[unit]
        };
        let (mut n, mut w) = (SeededRng::new(2), SeededRng::new(3));
        let loss = model.unit_loss(&mut g, unit, z, 2, &mut n, &mut w).unwrap();
        for u in 0..model.unit_count() {
            for p in model.unit_params(u) {
                g.param(p);
            }
        }
        g.backward(loss.total).unwrap()
    }

    #[test]
    fn unit_losses_touch_only_their_unit() {
        for mode in [ContextMode::Absent, ContextMode::Full, ContextMode::Blocked] {
            let model = seq_model(mode);
            for unit in 0..model.unit_count() {
                let grads = unit_grads(&model, unit);
                let touched: std::collections::BTreeSet<_> = grads
                    .params()
                    .filter(|(_, t)| !t.is_all_zero())
                    .map(|(id, _)| id)
                    .collect();
                let own: std::collections::BTreeSet<_> = model.unit_params(unit).iter().map(|p| p.id).collect();
                // biases start at zero but still receive gradient
                assert_eq!(touched, own, "mode {mode} unit {unit}");
            }
        }
    }

    #[test]
    fn grid_objective_requires_matching_delays() {
        let objective = Objective {
            geometry: Geometry::Grid {
                patch_px: 4,
                overlap_px: 2,
                k_max: 2,
                skip: 1,
            },
            delays: vec![1, 2],
            n_negatives: 4,
            loss_window: None,
        };
        assert!(objective.validate().is_err());
    }

    #[test]
    fn grid_model_loss_is_finite() {
        let config = ModelConfig {
            stack: StackConfig::uniform(InputKind::PatchGrid, 1, 4, 2, 1, 3, 1, 1),
            context_mode: ContextMode::Absent,
            context_dim: 2,
        };
        let objective = Objective {
            geometry: Geometry::Grid {
                patch_px: 4,
                overlap_px: 2,
                k_max: 2,
                skip: 1,
            },
            delays: vec![2, 3],
            n_negatives: 4,
            loss_window: None,
        };
        let model = GimModel::new(&config, &objective, &[1, 10, 10], 0).unwrap();
        let items = Tensor::full(&[2, 1, 10, 10], 0.3);
        let mut g = Graph::new();
        let x = g.input(model.prepare_batch(&items).unwrap());
        assert_eq!(g.shape(x), &[32, 1, 4, 4]);
        let out = crate::encoder::stack_forward(&model.encoders, &mut g, x).unwrap();
        let (mut n, mut w) = (SeededRng::new(2), SeededRng::new(3));
        let loss = model.unit_loss(&mut g, 1, out.top(), 2, &mut n, &mut w).unwrap();
        let r = loss.report(&g);
        assert_eq!(r.per_delay.keys().copied().collect::<Vec<_>>(), vec![2, 3]);
        // constant images give identical rows, so every score in a bag ties
        assert!((r.per_delay[&2] - 5f64.ln()).abs() < 1e-12);
    }
}
