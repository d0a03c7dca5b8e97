//! Which parameters does each module-local loss reach?
//!
//! Builds a three-module stack with a context unit, backpropagates every
//! unit's loss through one shared forward pass and lists the units whose
//! parameters received a nonzero gradient.

use gim::config::RunConfig;
use gim::encoder::stack_forward;
use gim::rng::Purpose;
use gim::run::{build_model, load_data};
use gim::{Graph, SeededRng};

fn main() -> gim::Result<()> {
    let cfg = RunConfig::parse("context.mode = full\ndata.n_items = 4\ndata.test_items = 0\ncontrastive.delays = 1..3")?;
    let data = load_data(&cfg)?;
    let model = build_model(&cfg, data.train.item_shape())?;
    let x = model.prepare_batch(&data.train.inputs)?;

    let mut g = Graph::new();
    let xv = g.input(x);
    let fwd = stack_forward(&model.encoders, &mut g, xv)?;
    for u in 0..model.unit_count() {
        let z = if model.is_context_unit(u) { fwd.top() } else { fwd.per_module[u] };
        let mut neg = SeededRng::derive(cfg.seed, u as u64, 0, Purpose::Negatives);
        let mut win = SeededRng::derive(cfg.seed, u as u64, 0, Purpose::Window);
        let loss = model.unit_loss(&mut g, u, z, data.train.len(), &mut neg, &mut win)?;
        let grads = g.backward(loss.total)?;
        let reached: Vec<usize> = (0..model.unit_count())
            .filter(|&v| model.unit_params(v).iter().any(|p| grads.param(p.id).is_some_and(|t| !t.is_all_zero())))
            .collect();
        let name = if model.is_context_unit(u) { "context".to_string() } else { format!("module {u}") };
        println!("{name:<9} loss {:>8.4}  gradients reach units {reached:?}", g.value(loss.total).item());
    }
    Ok(())
}
