//! Local-factor sequences probed per time-step: a recurrent context with and
//! without backpropagation through time, and no context at all.

use gim::config::RunConfig;
use gim::probe::{probe_source, FeatureSource};
use gim::run::{build_model, load_data};
use gim::training::train;

fn main() -> gim::Result<()> {
    for mode in ["full", "blocked", "absent"] {
        let cfg = RunConfig::parse(&format!(
            "data.kind = seq_local\ndata.n_items = 512\ndata.test_items = 256\ndata.sigma = 1.5\ndata.coherence = 16\n\
             model.kernel = 1\nmodel.pad = 0\ncontext.mode = {mode}\ncontext.dim = 32\ncontrastive.delays = 1..4\n\
             contrastive.n_negatives = 16\ncontrastive.loss_window = 16\noptim.lr = 5e-3\nschedule.epochs = 15"
        ))?;
        let data = load_data(&cfg)?;
        let mut model = build_model(&cfg, data.train.item_shape())?;
        train(&mut model, &data.train, &cfg.train_settings())?;
        let source = if model.context.is_some() {
            FeatureSource::Context
        } else {
            FeatureSource::Encoder(model.module_count() - 1)
        };
        let r = probe_source(&model, &data.train, data.test.as_ref().unwrap(), source, data.train.n_classes, &cfg.probe)?;
        println!("context {mode:<8} per-step probe {:.1}% over {} steps", 100.0 * r.accuracy, r.samples);
    }
    Ok(())
}
