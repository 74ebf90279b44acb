//! Patch transformer for glyph images.
//!
//! Images are cut into square patches, linearly projected, tagged with a
//! learned embedding of their original patch index and prefixed by a class
//! token. During training a random subset of patches is dropped before the
//! transformer, so masked patches cost nothing.

use std::sync::Arc;

use rand::Rng;

use super::layers::{pool_and_project, transformer_block};
use super::{Bound, ModelConfig, ModelError, Result};
use crate::glyph::GlyphImage;
use crate::tensor::{AttentionPattern, Scalar, Tape, Tensor, Var};

/// `patches x patch_px²` matrix in row-major patch order, values in [0, 1].
pub fn patchify<T: Scalar>(img: &GlyphImage, patch_px: usize) -> Result<Tensor<T>> {
    if patch_px == 0 || !img.width.is_multiple_of(patch_px) || !img.height.is_multiple_of(patch_px) {
        return Err(ModelError::IndivisibleImage {
            width: img.width,
            height: img.height,
            patch: patch_px,
        });
    }
    let (gx, gy) = (img.width / patch_px, img.height / patch_px);
    let inv = T::one() / T::lit(255.0);
    let mut data = Vec::with_capacity(img.pixels.len());
    for py in 0..gy {
        for px in 0..gx {
            for y in 0..patch_px {
                for x in 0..patch_px {
                    let v = img.get(px * patch_px + x, py * patch_px + y);
                    data.push(T::from_u8(v).expect("u8") * inv);
                }
            }
        }
    }
    Ok(Tensor::matrix(gx * gy, patch_px * patch_px, data)?)
}

/// Indices of the patches kept after masking `⌊ratio · patches⌋` of them,
/// sorted ascending. Ratio 0 keeps every patch and consumes no randomness.
pub fn sample_mask<R: Rng + ?Sized>(patches: usize, ratio: f64, rng: &mut R) -> Vec<usize> {
    let masked = (ratio * patches as f64).floor() as usize;
    let keep = patches - masked.min(patches.saturating_sub(1));
    if keep == patches {
        return (0..patches).collect();
    }
    let mut kept = rand::seq::index::sample(rng, patches, keep).into_vec();
    kept.sort_unstable();
    kept
}

/// Kept patches of several images packed into one token matrix. Patch tokens
/// come first (image by image), followed by one class token per image.
#[derive(Debug, Clone)]
pub struct ImageBatch<T> {
    pub patches: Tensor<T>,
    pub positions: Vec<usize>,
    pub pattern: Arc<AttentionPattern>,
    pub cls_rows: Vec<usize>,
}

impl<T: Scalar> ImageBatch<T> {
    /// `kept[i]` lists the patch indices of image `i` that enter the encoder,
    /// in any order.
    pub fn new(patches: &[&Tensor<T>], kept: &[Vec<usize>]) -> Result<Self> {
        let Some(first) = patches.first() else {
            return Err(ModelError::InvalidConfig("empty image batch".into()));
        };
        let dim = first.cols();
        let total: usize = kept.iter().map(Vec::len).sum();
        if kept.len() != patches.len() || total == 0 {
            return Err(ModelError::InvalidConfig(
                "kept patch lists do not match the batch".into(),
            ));
        }
        let mut data = Vec::with_capacity(total * dim);
        let mut positions = Vec::with_capacity(total);
        for (p, k) in patches.iter().zip(kept) {
            for &i in k {
                if i >= p.rows() {
                    return Err(ModelError::InvalidConfig(format!(
                        "patch {i} out of {}",
                        p.rows()
                    )));
                }
                data.extend_from_slice(p.row(i));
                positions.push(i);
            }
        }
        let n = patches.len();
        let mut rows = vec![Vec::new(); total + n];
        let mut start = 0;
        for (img, k) in kept.iter().enumerate() {
            let cls = total + img;
            let block: Vec<(usize, Option<usize>)> = std::iter::once(cls)
                .chain(start..start + k.len())
                .map(|t| (t, None))
                .collect();
            for t in (start..start + k.len()).chain(std::iter::once(cls)) {
                rows[t] = block.clone();
            }
            start += k.len();
        }
        Ok(Self {
            patches: Tensor::matrix(total, dim, data)?,
            positions,
            pattern: Arc::new(AttentionPattern::from_rows(&rows)),
            cls_rows: (total..total + n).collect(),
        })
    }

    /// Tokens entering attention: kept patches plus class tokens.
    pub fn tokens(&self) -> usize {
        self.pattern.tokens()
    }
}

/// Unit-norm image embeddings, `images x d_embed`.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    config: &ModelConfig,
    batch: &ImageBatch<T>,
) -> Result<Var> {
    let x = tape.constant(batch.patches.clone())?;
    let tok = tape.matmul(x, bound.get("image.patch.w")?)?;
    let tok = tape.add_row(tok, bound.get("image.patch.b")?)?;
    let pos = tape.gather_rows(bound.get("image.pos_embed")?, &batch.positions)?;
    let tok = tape.add(tok, pos)?;
    let cls = tape.gather_rows(bound.get("image.cls")?, &vec![0; batch.cls_rows.len()])?;
    let mut h = tape.concat_rows(&[tok, cls])?;
    for l in 0..config.layers {
        h = transformer_block(
            tape,
            bound,
            &format!("image.layers.{l}"),
            h,
            batch.pattern.clone(),
            None,
            config.heads,
        )?;
    }
    pool_and_project(tape, bound, "image", h, &batch.cls_rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_counts() {
        let img = GlyphImage::new(32, 32);
        let p = patchify::<f32>(&img, 8).unwrap();
        assert_eq!(p.dims(), (16, 64));
        let small = GlyphImage::from_pixels(8, 8, (0..64).collect()).unwrap();
        let p = patchify::<f64>(&small, 8).unwrap();
        assert_eq!(p.dims(), (1, 64));
        assert_eq!(p.get(0, 9), 9.0 / 255.0);
        assert!(matches!(
            patchify::<f32>(&GlyphImage::new(30, 32), 8),
            Err(ModelError::IndivisibleImage { .. })
        ));
    }

    #[test]
    fn constant_image_patches() {
        let img = GlyphImage::from_pixels(16, 16, vec![51; 256]).unwrap();
        let p = patchify::<f64>(&img, 8).unwrap();
        assert!(p.data().iter().all(|&v| v == 51.0 / 255.0));
    }

    #[test]
    fn mask_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kept = sample_mask(16, 0.5, &mut rng);
        assert_eq!(kept.len(), 8);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_mask(16, 0.0, &mut rng), (0..16).collect::<Vec<_>>());
        let a = sample_mask(16, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_mask(16, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(sample_mask(16, 0.75, &mut rng).len(), 4);
        assert_eq!(sample_mask(1, 0.9, &mut rng).len(), 1);
    }

    #[test]
    fn batch_layout() {
        let a = Tensor::<f64>::zeros(&[4, 4]);
        let b = Tensor::<f64>::zeros(&[4, 4]);
        let batch = ImageBatch::new(&[&a, &b], &[vec![0, 2], vec![1, 2, 3]]).unwrap();
        assert_eq!(batch.tokens(), 7);
        assert_eq!(batch.cls_rows, vec![5, 6]);
        assert_eq!(batch.pattern.keys(5), &[5, 0, 1]);
        assert_eq!(batch.pattern.keys(3), &[6, 2, 3, 4]);
        assert_eq!(batch.positions, vec![0, 2, 1, 2, 3]);
    }
}
