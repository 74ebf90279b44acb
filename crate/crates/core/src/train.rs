//! Contrastive alignment of image and tree embeddings.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ids::FormationTree;
use crate::model::{image, tree, Model, ModelError, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// Upper bound of the learnable logit scale, `ln 100`.
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("a training batch needs at least 2 pairs, got {0}")]
    DegenerateBatch(usize),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("training set is empty")]
    EmptyTrainingSet,
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Symmetric InfoNCE over a batch of matched rows:
/// `S = exp(logit_scale) · img · treeᵀ`, loss is the mean of the row-wise
/// cross-entropy of `S` and of `Sᵀ`, both with diagonal targets.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    img: Var,
    tree: Var,
    logit_scale: Var,
) -> std::result::Result<Var, TensorError> {
    let n = tape.value(img).rows();
    if tape.value(tree).dims() != tape.value(img).dims() {
        return Err(TensorError::ShapeMismatch {
            op: "contrastive_loss",
            lhs: tape.value(img).shape().to_vec(),
            rhs: tape.value(tree).shape().to_vec(),
        });
    }
    let targets: Vec<usize> = (0..n).collect();
    let scale = tape.exp(logit_scale);
    let s = tape.matmul_nt(img, tree)?;
    let s = tape.scale_by(s, scale)?;
    let image_to_tree = tape.cross_entropy_rows(s, &targets)?;
    let st = tape.matmul_nt(tree, img)?;
    let st = tape.scale_by(st, scale)?;
    let tree_to_image = tape.cross_entropy_rows(st, &targets)?;
    let total = tape.add(image_to_tree, tree_to_image)?;
    Ok(tape.scale(total, T::lit(0.5)))
}

/// Adam with bias correction; state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn update(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &HashMap<String, Tensor<f32>>,
        lr: f64,
    ) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Fraction of the run spent in linear warmup.
pub const WARMUP_FRACTION: f64 = 0.1;
/// Upper bound on warmup steps.
pub const MAX_WARMUP_STEPS: usize = 200;

/// Warmup length for a run of `total` steps.
pub fn warmup_steps(total: usize) -> usize {
    ((total as f64 * WARMUP_FRACTION) as usize).min(MAX_WARMUP_STEPS)
}

/// Linear warmup over the first `warmup` steps, then cosine decay from
/// `base` to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// One aligned (tree, image) training pair. The image is given pre-patchified.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub tree: &'a FormationTree,
    pub patches: &'a Tensor<f32>,
}

/// Forward both encoders, compute the loss, backpropagate and apply one Adam
/// update. Image patches are dropped at `model.config.mask_ratio`; the logit
/// scale is clamped to `ln 100` afterwards. Returns the pre-update loss.
pub fn train_step(
    model: &mut Model<f32>,
    optimizer: &mut Adam,
    batch: &[Pair<'_>],
    rng: &mut ChaCha8Rng,
    lr: f64,
) -> Result<f32> {
    if batch.len() < 2 {
        return Err(TrainError::DegenerateBatch(batch.len()));
    }
    let kept: Vec<Vec<usize>> = batch
        .iter()
        .map(|p| image::sample_mask(p.patches.rows(), model.config.mask_ratio, rng))
        .collect();
    let patches: Vec<&Tensor<f32>> = batch.iter().map(|p| p.patches).collect();
    let trees: Vec<&FormationTree> = batch.iter().map(|p| p.tree).collect();

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape)?;
    let image_batch = image::ImageBatch::new(&patches, &kept)?;
    let img = image::encode(&mut tape, &bound, &model.config, &image_batch)?;
    let tree_batch = tree::TreeBatch::new(&trees, &model.options, model.radicals)?;
    let tre = tree::encode(&mut tape, &bound, &model.config, &model.options, &tree_batch)?;
    let loss = contrastive_loss(&mut tape, img, tre, bound.get("logit_scale")?)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: optimizer.steps() as usize,
            value: value as f64,
        });
    }
    let mut grads = tape.backward(loss)?;
    let mut by_name = HashMap::new();
    for (name, &var) in bound.iter() {
        if let Some(g) = grads.take(var) {
            by_name.insert(name.clone(), g);
        }
    }
    optimizer.update(&mut model.params, &by_name, lr);
    if let Some(ls) = model.params.get_mut("logit_scale") {
        let c = ls.data()[0].min(MAX_LOGIT_SCALE as f32);
        ls.data_mut()[0] = c;
    }
    Ok(value)
}

/// A training corpus: parsed trees per character and patchified renders.
#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub trees: Vec<FormationTree>,
    /// Renders of character `i`, pre-patchified.
    pub renders: Vec<Vec<Tensor<f32>>>,
}

impl TrainSet {
    pub fn characters(&self) -> usize {
        self.trees.len()
    }

    /// Batches of `(character, render)` for one epoch. Every render of every
    /// character appears exactly once, and no character repeats inside a batch.
    pub fn epoch_batches(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
        let chars = self.characters();
        let rounds = self.renders.iter().map(Vec::len).max().unwrap_or(0);
        let render_order: Vec<Vec<usize>> = self
            .renders
            .iter()
            .map(|r| {
                let mut o: Vec<usize> = (0..r.len()).collect();
                o.shuffle(rng);
                o
            })
            .collect();
        let mut out: Vec<Vec<(usize, usize)>> = Vec::new();
        for round in 0..rounds {
            let mut order: Vec<usize> = (0..chars)
                .filter(|&c| round < render_order[c].len())
                .collect();
            order.shuffle(rng);
            let first = out.len();
            for chunk in order.chunks(batch.max(2)) {
                let items: Vec<(usize, usize)> =
                    chunk.iter().map(|&c| (c, render_order[c][round])).collect();
                if items.len() < 2 && out.len() > first {
                    out.last_mut().expect("previous batch").extend(items);
                } else {
                    out.push(items);
                }
            }
        }
        out.retain(|b| b.len() >= 2);
        out
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f32,
    pub wallclock_ms: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,loss,wallclock_ms";

    pub fn csv(&self) -> String {
        format!("{},{},{:.3}", self.step, self.loss, self.wallclock_ms)
    }
}

/// Drives epochs of [`train_step`] with a cosine learning-rate schedule.
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5EED_7A1A);
        Self {
            model,
            optimizer: Adam::default(),
            rng,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update on `batch` at learning rate `lr`.
    pub fn step(&mut self, data: &TrainSet, batch: &[(usize, usize)], lr: f64) -> Result<f32> {
        let pairs: Vec<Pair<'_>> = batch
            .iter()
            .map(|&(c, r)| Pair {
                tree: &data.trees[c],
                patches: &data.renders[c][r],
            })
            .collect();
        let loss = train_step(&mut self.model, &mut self.optimizer, &pairs, &mut self.rng, lr)?;
        self.step += 1;
        Ok(loss)
    }

    /// Full training run for `config.epochs` epochs. `on_step` sees every log
    /// row as it is produced.
    pub fn fit(&mut self, data: &TrainSet, on_step: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        self.fit_limited(data, None, on_step)
    }

    /// Like [`Trainer::fit`], stopping after at most `max_steps` updates; the
    /// learning-rate schedule spans the shortened run.
    pub fn fit_limited(
        &mut self,
        data: &TrainSet,
        max_steps: Option<usize>,
        mut on_step: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        if data.characters() < 2 {
            return Err(TrainError::EmptyTrainingSet);
        }
        let epochs = self.model.config.epochs;
        let batch = self.model.config.batch;
        let base_lr = self.model.config.lr;
        let plans: Vec<Vec<Vec<(usize, usize)>>> = (0..epochs)
            .map(|_| data.epoch_batches(batch, &mut self.rng))
            .collect();
        let planned: usize = plans.iter().map(Vec::len).sum();
        let total = max_steps.map_or(planned, |m| m.min(planned));
        let start = Instant::now();
        let mut log = Vec::with_capacity(total);
        let warmup = warmup_steps(total);
        let mut done = 0;
        for plan in plans {
            for b in plan {
                if done == total {
                    return Ok(log);
                }
                let lr = cosine_lr(base_lr, done, total, warmup);
                let loss = self.step(data, &b, lr)?;
                let row = LogRow {
                    step: done,
                    loss,
                    wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
                };
                on_step(&row);
                log.push(row);
                done += 1;
            }
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[&[f64]]) -> Tensor<f64> {
        let cols = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(r.iter().map(|v| v / n));
        }
        Tensor::matrix(rows.len(), cols, data).unwrap()
    }

    fn loss_of(img: Tensor<f64>, tree: Tensor<f64>, ls: f64) -> f64 {
        let mut tape = Tape::new();
        let i = tape.constant(img).unwrap();
        let t = tape.constant(tree).unwrap();
        let s = tape.constant(Tensor::scalar(ls)).unwrap();
        let l = contrastive_loss(&mut tape, i, t, s).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let e = unit_rows(&[&[1.0, 2.0]]);
        assert_eq!(loss_of(e.clone(), e, 2.0), 0.0);
    }

    #[test]
    fn identical_embeddings_give_ln_n() {
        let e = unit_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let l = loss_of(e.clone(), e, (1.0f64 / 0.07).ln());
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separated_pairs_approach_zero() {
        let e = unit_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let l_small = loss_of(e.clone(), e.clone(), 1.0);
        let l_large = loss_of(e.clone(), e, 5.0);
        assert!(l_large < l_small);
        assert!(l_large < 1e-3);
    }

    #[test]
    fn loss_is_symmetric_in_modalities() {
        let a = unit_rows(&[&[1.0, 0.3, -0.2], &[0.1, 1.0, 0.4], &[-0.5, 0.2, 1.0]]);
        let b = unit_rows(&[&[0.8, -0.1, 0.3], &[0.2, 0.9, -0.6], &[0.4, 0.4, 0.7]]);
        let l1 = loss_of(a.clone(), b.clone(), 1.3);
        let l2 = loss_of(b, a, 1.3);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100, 0), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100, 0).abs() < 1e-12);
        assert!((cosine_lr(1e-3, 50, 100, 0) - 5e-4).abs() < 1e-12);
        assert!((cosine_lr(1e-3, 0, 110, 10) - 1e-4).abs() < 1e-12);
        assert_eq!(cosine_lr(1e-3, 9, 110, 10), 1e-3);
        assert_eq!(cosine_lr(1e-3, 10, 110, 10), 1e-3);
        assert!((cosine_lr(1e-3, 60, 110, 10) - 5e-4).abs() < 1e-12);
        assert_eq!(warmup_steps(30), 3);
        assert_eq!(warmup_steps(100_000), MAX_WARMUP_STEPS);
    }

    #[test]
    fn epoch_batches_cover_every_render_once() {
        let tree = crate::ids::parse_str("r0").unwrap();
        let data = TrainSet {
            trees: vec![tree; 7],
            renders: vec![vec![Tensor::zeros(&[1, 1]); 3]; 7],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = data.epoch_batches(3, &mut rng);
        let mut seen = std::collections::HashSet::new();
        for b in &batches {
            assert!(b.len() >= 2);
            let chars: std::collections::HashSet<_> = b.iter().map(|x| x.0).collect();
            assert_eq!(chars.len(), b.len(), "duplicate character in a batch");
            for &x in b {
                assert!(seen.insert(x));
            }
        }
        assert_eq!(seen.len(), 21);
    }
}
