//! Shared fixtures for the benchmarks in `benches/`.

use emalab_core::data::{gen_blobs, Dataset};
use emalab_core::objectives::ObjectiveSpec;
use emalab_core::trainer::{TrainConfig, Trainer};
use emalab_core::{build_encoder, EncoderConfig, MomentumPolicy, Tensor};

/// The 8-blob, 32-dim dataset used throughout the test suite.
pub fn blobs() -> Dataset {
    gen_blobs(8, 32, 64, 0.1, 0).expect("valid blob spec")
}

/// First `batch` rows of `data`.
pub fn head(data: &Dataset, batch: usize) -> Tensor {
    data.x.gather_rows(&(0..batch).collect::<Vec<_>>())
}

/// A negative-cosine trainer on the reference encoder.
pub fn trainer(policy: MomentumPolicy, batch: usize) -> Trainer {
    let cfg = TrainConfig::new(1_000_000, batch, 0.05, ObjectiveSpec::NegCosine, policy);
    let online = build_encoder(&EncoderConfig::paper_shaped(0, true)).expect("valid preset");
    Trainer::new(cfg, online).expect("valid config")
}
