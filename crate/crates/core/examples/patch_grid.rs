//! Images cut into overlapping patches, predicted row by row downwards.

use gim::config::RunConfig;
use gim::patching::{build_prediction_pairs_grid, extract_patch_grid};
use gim::probe::probe_per_module;
use gim::run::{build_model, load_data};
use gim::training::train;

fn main() -> gim::Result<()> {
    let cfg = RunConfig::parse("preset = vision\ndata.n_items = 64\ndata.test_items = 32\ndata.n_classes = 4\nmodel.width = 16\nschedule.epochs = 2\nschedule.batch_size = 8\nprobe.epochs = 20")?;
    let data = load_data(&cfg)?;
    let grid = extract_patch_grid(&data.train.inputs.index0(0)?, 16, 8)?;
    let pairs = build_prediction_pairs_grid(grid.rows, grid.cols, 4, 1)?;
    println!("{}x{} grid of {}px patches, {} pairs over delays {:?}", grid.rows, grid.cols, grid.patch_px, pairs.len(), pairs.delays());

    let mut model = build_model(&cfg, data.train.item_shape())?;
    let out = train(&mut model, &data.train, &cfg.train_settings())?;
    for m in 0..model.module_count() {
        let losses: Vec<f64> = out.records_for(m).map(|r| r.loss_total).collect();
        println!("module {m}: loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);
    }
    for r in probe_per_module(&model, &data.train, data.test.as_ref().unwrap(), &cfg.probe)? {
        println!("{:?}: {:.1}%", r.source, 100.0 * r.accuracy);
    }
    Ok(())
}
