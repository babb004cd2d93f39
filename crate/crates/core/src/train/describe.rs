use std::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::trainer::Checkpoint;
use crate::model::{count_params_macs, Complexity, SeldModel};
use crate::params::ParamStore;
use crate::Result;

/// Closed-form size and compute per second of audio.
pub fn complexity(cfg: &RunConfig) -> Complexity {
    let f = &cfg.features;
    count_params_macs(&cfg.model, 1.0, f.sample_rate, f.hop, f.n_mels)
}

/// Size summary followed by every parameter tensor with its shape.
pub fn describe_store(cfg: &RunConfig, store: &ParamStore) -> String {
    let c = complexity(cfg);
    let mut s = String::new();
    let _ = writeln!(s, "params: {:.2} M ({})", c.params as f64 / 1e6, c.params);
    let _ = writeln!(s, "MACs: {:.2} G/s", c.macs as f64 / 1e9);
    let _ = writeln!(s, "tensors: {} parameters, {} buffers", store.len(), store.buffers().count());
    for (name, t) in store.iter() {
        let _ = writeln!(s, "  {name} {:?}", t.shape());
    }
    s
}

pub fn describe_config(cfg: &RunConfig) -> Result<String> {
    let store = SeldModel::new(cfg.model.clone())?.init(&mut ChaCha8Rng::seed_from_u64(0));
    Ok(describe_store(cfg, &store))
}

pub fn describe_checkpoint(path: impl AsRef<std::path::Path>) -> Result<String> {
    let ck = Checkpoint::load(path)?;
    let mut s = format!("stage {} epochs done {}\n", ck.stage_index, ck.epochs_done);
    s.push_str(&describe_store(&ck.config, &ck.store));
    Ok(s)
}
