//! End-to-end pipelines over a [`GlyphDataset`]: training, split evaluation
//! and the mask-ratio sweep.

use std::collections::HashSet;

use crate::model::{image, EncoderOptions, Model, ModelConfig};
use crate::recognizer::{build_gallery, evaluate, EvalReport};
use crate::synth::{GlyphDataset, Split};
use crate::train::{LogRow, TrainSet, Trainer};
use crate::{Error, Result};

/// Training characters of `dataset` with their renders patchified.
pub fn train_set(dataset: &GlyphDataset, patch_px: usize) -> Result<TrainSet> {
    let mut set = TrainSet::default();
    let mut slot = std::collections::HashMap::new();
    for c in dataset.characters_in(Split::Train) {
        slot.insert(c.char_id, set.trees.len());
        set.trees.push(c.tree(&dataset.vocab)?);
        set.renders.push(Vec::new());
    }
    for s in &dataset.samples {
        if let Some(&i) = slot.get(&s.char_id) {
            set.renders[i].push(image::patchify(&s.image, patch_px)?);
        }
    }
    Ok(set)
}

/// Fresh model for `dataset`, trained on its training split.
pub fn train_model(
    dataset: &GlyphDataset,
    config: &ModelConfig,
    options: EncoderOptions,
    max_steps: Option<usize>,
    on_step: impl FnMut(&LogRow),
) -> Result<(Model<f32>, Vec<LogRow>)> {
    let model = Model::init(config.clone(), options, dataset.vocab.len())?;
    let data = train_set(dataset, config.patch_px)?;
    let mut trainer = Trainer::new(model);
    let log = trainer.fit_limited(&data, max_steps, on_step)?;
    Ok((trainer.model, log))
}

/// Top-1 accuracy on every render of `split`, against a gallery of that
/// split's characters. With `options.tree_mask`, radicals absent from the
/// training split are masked in the gallery trees.
pub fn evaluate_split(model: &Model<f32>, dataset: &GlyphDataset, split: Split) -> Result<EvalReport> {
    let candidates: Vec<(u32, &str)> = dataset
        .characters_in(split)
        .map(|c| (c.char_id, c.ids.as_str()))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Data(format!("the {split} split is empty")));
    }
    let known: Option<HashSet<_>> = if model.options.tree_mask {
        Some(dataset.train_radicals()?)
    } else {
        None
    };
    let gallery = build_gallery(&candidates, &dataset.vocab, model, known.as_ref())?;
    let samples: Vec<(u32, &crate::glyph::GlyphImage)> = dataset
        .samples_in(split)
        .into_iter()
        .map(|s| (s.char_id, &s.image))
        .collect();
    Ok(evaluate(&samples, &gallery, model)?)
}

/// One row of the mask-ratio sweep.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MaskBenchRow {
    pub ratio: f64,
    pub mean_step_ms: f64,
    pub accuracy: f64,
}

impl MaskBenchRow {
    pub const CSV_HEADER: &'static str = "ratio,mean_step_ms,accuracy";

    pub fn csv(&self) -> String {
        format!("{},{:.3},{:.4}", self.ratio, self.mean_step_ms, self.accuracy)
    }
}

/// Trains one model per mask ratio under otherwise identical settings and
/// reports the mean training-step time and final test accuracy.
pub fn bench_mask(
    dataset: &GlyphDataset,
    config: &ModelConfig,
    options: EncoderOptions,
    ratios: &[f64],
    max_steps: Option<usize>,
) -> Result<Vec<MaskBenchRow>> {
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let cfg = ModelConfig {
            mask_ratio: ratio,
            ..config.clone()
        };
        cfg.validate()?;
        let (model, log) = train_model(dataset, &cfg, options, max_steps, |_| {})?;
        let mean_step_ms = mean_step_ms(&log);
        let accuracy = evaluate_split(&model, dataset, Split::Test)?.accuracy;
        rows.push(MaskBenchRow {
            ratio,
            mean_step_ms,
            accuracy,
        });
    }
    Ok(rows)
}

/// Mean wall-clock per step from cumulative log timestamps.
pub fn mean_step_ms(log: &[LogRow]) -> f64 {
    match log.last() {
        Some(last) => last.wallclock_ms / log.len() as f64,
        None => 0.0,
    }
}
