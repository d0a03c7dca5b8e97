//! Writes one file of each binary format and reads it back.

use std::collections::BTreeMap;

use gim::config::RunConfig;
use gim::data::{read_dataset, write_dataset};
use gim::run::{build_model, load_data};
use gim::store::{ActivationCacheStore, Checkpoint};
use gim::training::cache_activations;

fn head(path: &std::path::Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{} bytes, starts {:02x?}", bytes.len(), &bytes[..12]))
}

fn main() -> gim::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = RunConfig::parse("data.n_items = 16\ndata.test_items = 0")?;
    let data = load_data(&cfg)?;

    let gimd = dir.path().join("data.gimd");
    write_dataset(&data.train, &gimd)?;
    println!("GIMD {} -> round trip {}", head(&gimd)?, read_dataset(&gimd)?.bitwise_eq(&data.train));

    let model = build_model(&cfg, data.train.item_shape())?;
    let frozen: BTreeMap<usize, String> = (0..1).map(|u| (u, model.unit_digest(u))).collect();
    let store = cache_activations(&model, 1, &frozen, &data.train, 8)?;
    let gima = dir.path().join("module0.gima");
    store.write(&gima)?;
    println!("GIMA {} -> round trip {}", head(&gima)?, ActivationCacheStore::read(&gima)?.values.bitwise_eq(&store.values));

    let gimc = dir.path().join("checkpoint.gimc");
    Checkpoint::from_params(&cfg.digest(), model.all_params(), None).write(&gimc)?;
    let back = Checkpoint::read(&gimc)?;
    println!("GIMC {} -> {} tensors, digest {}", head(&gimc)?, back.params.len(), &back.config_digest[..12]);
    Ok(())
}
