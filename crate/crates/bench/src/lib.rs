//! Shared fixtures for the criterion benches.

use ftclip::experiments::train_set;
use ftclip::train::TrainSet;
use ftclip::{make_splits, GlyphDataset, ModelConfig, SplitProtocol, SynthParams};

/// Default-sized synthetic character zero-shot dataset with few renders.
pub fn dataset() -> GlyphDataset {
    make_splits(&SynthParams {
        renders: 2,
        seed: 1,
        protocol: SplitProtocol::CharZeroShot(300),
        ..SynthParams::default()
    })
    .expect("synthetic dataset")
}

pub fn config(mask_ratio: f64) -> ModelConfig {
    ModelConfig {
        d: 128,
        layers: 4,
        heads: 4,
        d_embed: 128,
        batch: 128,
        mask_ratio,
        ..ModelConfig::default()
    }
}

pub fn training_data(ds: &GlyphDataset) -> TrainSet {
    train_set(ds, ModelConfig::default().patch_px).expect("training set")
}

/// The first `n` characters, one render each, as a training batch.
pub fn batch(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|c| (c, 0)).collect()
}
