//! Nearest-tree recognition against a precomputed gallery.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glyph::GlyphImage;
use crate::ids::{mask_unknown, parse_with_vocab, tokenize, FormationTree, RadicalId, RadicalVocab};
use crate::model::{image, Model, ModelError};
use crate::tensor::{Scalar, Tensor};

/// Images encoded per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecognizeError {
    #[error("IDS of candidate {char_id} does not parse: {message}")]
    ParseFailure { char_id: u32, message: String },
    #[error("every node of candidate {0} is masked")]
    AllMasked(u32),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("label {0} is not a gallery candidate")]
    LabelNotInGallery(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, RecognizeError>;

/// Candidate tree embeddings, one unit-norm row per character.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery<T> {
    pub char_ids: Vec<u32>,
    pub embeddings: Tensor<T>,
    /// Radicals left unmasked; `None` when no masking was applied.
    pub known: Option<HashSet<RadicalId>>,
}

impl<T: Scalar> Gallery<T> {
    pub fn len(&self) -> usize {
        self.char_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_ids.is_empty()
    }

    /// Index of the best-matching row for one image embedding, ties to the
    /// lowest index.
    pub fn best_match(&self, embedding: &[T]) -> Result<(usize, T)> {
        if self.is_empty() {
            return Err(RecognizeError::EmptyGallery);
        }
        let mut best = (0, T::neg_infinity());
        for i in 0..self.len() {
            let s = self
                .embeddings
                .row(i)
                .iter()
                .zip(embedding)
                .map(|(&a, &b)| a * b)
                .sum::<T>();
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok(best)
    }
}

/// Parses every candidate, masks radicals outside `known` (when given) and
/// encodes the trees.
pub fn build_gallery<T: Scalar>(
    candidates: &[(u32, &str)],
    vocab: &RadicalVocab,
    model: &Model<T>,
    known: Option<&HashSet<RadicalId>>,
) -> Result<Gallery<T>> {
    if candidates.is_empty() {
        return Err(RecognizeError::EmptyGallery);
    }
    let mut trees: Vec<FormationTree> = Vec::with_capacity(candidates.len());
    for &(char_id, ids) in candidates {
        let tree = tokenize(ids)
            .and_then(|t| parse_with_vocab(&t, vocab))
            .map_err(|e| RecognizeError::ParseFailure {
                char_id,
                message: e.to_string(),
            })?;
        let tree = match known {
            Some(k) => mask_unknown(&tree, k),
            None => tree,
        };
        if tree.is_masked(0) {
            return Err(RecognizeError::AllMasked(char_id));
        }
        trees.push(tree);
    }
    let refs: Vec<&FormationTree> = trees.iter().collect();
    let mut rows = Vec::with_capacity(trees.len() * model.config.d_embed);
    for chunk in refs.chunks(EVAL_CHUNK) {
        rows.extend_from_slice(model.encode_trees(chunk)?.data());
    }
    Ok(Gallery {
        char_ids: candidates.iter().map(|c| c.0).collect(),
        embeddings: Tensor::matrix(trees.len(), model.config.d_embed, rows)
            .map_err(ModelError::from)?,
        known: known.cloned(),
    })
}

/// Best candidate and its cosine score for one unmasked image.
pub fn recognize<T: Scalar>(img: &GlyphImage, gallery: &Gallery<T>, model: &Model<T>) -> Result<(u32, T)> {
    if gallery.is_empty() {
        return Err(RecognizeError::EmptyGallery);
    }
    let e = model.encode_images(&[img])?;
    let (i, s) = gallery.best_match(e.row(0))?;
    Ok((gallery.char_ids[i], s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterScore {
    pub correct: usize,
    pub total: usize,
}

/// Top-1 evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub gallery_size: usize,
    /// Predicted character per sample, in input order.
    pub predictions: Vec<u32>,
    pub per_character: BTreeMap<u32, CharacterScore>,
    pub mean_inference_ms: f64,
    pub wallclock_ms: f64,
}

impl EvalReport {
    /// Equality of everything except timings.
    pub fn same_outcome(&self, other: &EvalReport) -> bool {
        self.accuracy == other.accuracy
            && self.correct == other.correct
            && self.total == other.total
            && self.gallery_size == other.gallery_size
            && self.predictions == other.predictions
            && self.per_character == other.per_character
    }
}

/// Classifies every `(label, image)` against `gallery` with masking disabled.
pub fn evaluate<T: Scalar>(
    samples: &[(u32, &GlyphImage)],
    gallery: &Gallery<T>,
    model: &Model<T>,
) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(RecognizeError::EmptyGallery);
    }
    let candidates: HashSet<u32> = gallery.char_ids.iter().copied().collect();
    if let Some(&(label, _)) = samples.iter().find(|(l, _)| !candidates.contains(l)) {
        return Err(RecognizeError::LabelNotInGallery(label));
    }
    let start = Instant::now();
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let patches = chunk
            .iter()
            .map(|(_, img)| image::patchify::<T>(img, model.config.patch_px))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let kept: Vec<Vec<usize>> = patches.iter().map(|p| (0..p.rows()).collect()).collect();
        let refs: Vec<&Tensor<T>> = patches.iter().collect();
        let e = model.encode_patches(&refs, &kept)?;
        for r in 0..chunk.len() {
            predictions.push(gallery.char_ids[gallery.best_match(e.row(r))?.0]);
        }
    }
    let wallclock_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut per_character: BTreeMap<u32, CharacterScore> = BTreeMap::new();
    let mut correct = 0;
    for (&(label, _), &p) in samples.iter().zip(&predictions) {
        let s = per_character.entry(label).or_insert(CharacterScore {
            correct: 0,
            total: 0,
        });
        s.total += 1;
        if p == label {
            s.correct += 1;
            correct += 1;
        }
    }
    let total = samples.len();
    Ok(EvalReport {
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        correct,
        total,
        gallery_size: gallery.len(),
        predictions,
        per_character,
        mean_inference_ms: if total == 0 {
            0.0
        } else {
            wallclock_ms / total as f64
        },
        wallclock_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gallery(rows: Vec<f64>, n: usize) -> Gallery<f64> {
        Gallery {
            char_ids: (10..10 + n as u32).collect(),
            embeddings: Tensor::matrix(n, rows.len() / n, rows).unwrap(),
            known: None,
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let g = gallery(vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0], 3);
        assert_eq!(g.best_match(&[1.0, 0.0]).unwrap().0, 1);
        assert_eq!(g.best_match(&[0.0, 2.0]).unwrap().0, 0);
    }

    #[test]
    fn empty_gallery() {
        let g = Gallery::<f64> {
            char_ids: vec![],
            embeddings: Tensor::zeros(&[0, 2]),
            known: None,
        };
        assert_eq!(g.best_match(&[1.0, 0.0]), Err(RecognizeError::EmptyGallery));
    }
}
