#![allow(dead_code)]

use std::path::PathBuf;

use rstbench::clock::{CalibrationProfile, CostFit};
use rstbench::config::{Method, RunConfig};
use rstbench::data::{Corpus, load_and_tokenize};
use rstbench::model::ModelConfig;
use rstbench::tensor::Tensor;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn bundled_corpus() -> Corpus {
    load_and_tokenize(repo_root().join("data/shakespeare.txt")).expect("bundled corpus")
}

/// The committed reference profile.
pub fn reference_profile() -> CalibrationProfile {
    CalibrationProfile::load(repo_root().join("profiles/reference.toml")).expect("reference profile")
}

/// Reference costs for the small test model, with no workload descriptor.
pub fn synthetic_profile() -> CalibrationProfile {
    CalibrationProfile::new("synthetic", CostFit { a: 0.02, b: 0.01 }, CostFit { a: 0.01, b: 0.003 })
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        num_layers: 8,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 0,
        seq_len: 16,
    }
}

/// A method preset shrunk to the small model.
pub fn small_cfg(method: Method, budget: f64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::preset(method);
    cfg.model = small_model();
    cfg.batch_size = 4;
    cfg.budget = budget;
    cfg.seed = seed;
    cfg.val_batches = 2;
    cfg.probe_batches = 2;
    if let Some(s) = cfg.selection.as_mut() {
        s.mega_batch = if method == Method::Rho { 8 } else { 4 };
    }
    if let Some(r) = cfg.rho.as_mut() {
        r.pool_size = 256;
    }
    cfg
}

pub fn bitwise_equal(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

pub fn flat(params: &rstbench::ModelParams64) -> Vec<Tensor<f64>> {
    params.tensors.iter().cloned().collect()
}
