//! Peak bytes of the three schedules, and the cached schedule reproducing
//! iterative training bit for bit.

use gim::config::RunConfig;
use gim::run::{build_model, load_data};
use gim::training::{measure_peak_bytes, train, ScheduleMode};

fn main() -> gim::Result<()> {
    let base = "data.n_items = 128\ndata.test_items = 0\ncontrastive.delays = 1..4\nschedule.epochs = 3";
    let cfg = RunConfig::parse(base)?;
    let data = load_data(&cfg)?;
    let model = build_model(&cfg, data.train.item_shape())?;
    for mode in [ScheduleMode::Simultaneous, ScheduleMode::Iterative, ScheduleMode::Cached] {
        let r = measure_peak_bytes(mode, &model, data.train.item_shape(), 32)?;
        println!("{mode:<13} peak {:>11} B  activations {:>10} B  per unit {:?}", r.peak_bytes, r.peak_activation_bytes, r.unit_activation_bytes);
    }

    let mut digests = Vec::new();
    for mode in ["iterative", "cached"] {
        let cfg = RunConfig::parse(&format!("{base}\nschedule.mode = {mode}"))?;
        let mut m = build_model(&cfg, data.train.item_shape())?;
        let out = train(&mut m, &data.train, &cfg.train_settings())?;
        let bits: Vec<u64> = out.records.iter().map(|r| r.loss_total.to_bits()).collect();
        digests.push((bits, m.unit_digest(2)));
    }
    println!("cached == iterative bitwise: {}", digests[0] == digests[1]);
    Ok(())
}
