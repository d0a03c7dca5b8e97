//! Train a three-module stack greedily on global-factor sequences and probe
//! every module.

use gim::config::RunConfig;
use gim::probe::probe_per_module;
use gim::run::{build_model, load_data};
use gim::training::train;

fn main() -> gim::Result<()> {
    let cfg = RunConfig::parse("data.n_items = 512\ndata.test_items = 256\ndata.sigma = 1.5\ncontrastive.delays = 1..4\ncontrastive.loss_window = 16\noptim.lr = 1e-3\nschedule.epochs = 3")?;
    let data = load_data(&cfg)?;
    let test = data.test.as_ref().unwrap();
    let mut model = build_model(&cfg, data.train.item_shape())?;
    let before = probe_per_module(&model, &data.train, test, &cfg.probe)?;
    let out = train(&mut model, &data.train, &cfg.train_settings())?;
    let after = probe_per_module(&model, &data.train, test, &cfg.probe)?;
    for (m, (b, a)) in before.iter().zip(&after).enumerate() {
        let last = out.records_for(m).last().unwrap();
        println!("module {m}: final loss {:.3}, probe {:.1}% -> {:.1}%", last.loss_total, 100.0 * b.accuracy, 100.0 * a.accuracy);
    }
    Ok(())
}
