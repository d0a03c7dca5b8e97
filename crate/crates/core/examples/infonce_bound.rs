//! The InfoNCE bound after training never exceeds the latent's true mutual
//! information.

use gim::config::RunConfig;
use gim::config::DataSource;
use gim::data::true_mi_oracle;
use gim::run::{build_model, load_data};
use gim::training::{eval_unit_loss, train};

fn main() -> gim::Result<()> {
    for classes in [2, 4, 8] {
        let cfg = RunConfig::parse(&format!(
            "data.n_classes = {classes}\ndata.n_items = 512\ndata.test_items = 320\n\
             model.kernel = 1\nmodel.pad = 0\ncontrastive.delays = 1..4\ncontrastive.n_negatives = 16\n\
             contrastive.loss_window = 16\noptim.lr = 1e-3\nschedule.epochs = 6"
        ))?;
        let data = load_data(&cfg)?;
        let mut model = build_model(&cfg, data.train.item_shape())?;
        train(&mut model, &data.train, &cfg.train_settings())?;
        let DataSource::Synthetic(spec) = &cfg.data else { unreachable!() };
        let oracle = true_mi_oracle(spec, &[1])?[0];
        let top = model.module_count() - 1;
        let reps = eval_unit_loss(&model, data.test.as_ref().unwrap(), top, 32, 10, cfg.seed)?;
        let bound: f64 = reps.iter().map(|r| r.mi_bound[&1]).sum::<f64>() / reps.len() as f64;
        println!("{classes} classes: bound at delay 1 {bound:.3} nats, true MI {oracle:.3}, ln N {:.3}", 17f64.ln());
    }
    Ok(())
}
