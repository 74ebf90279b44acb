//! Pre-norm transformer block shared by both encoders.

use std::sync::Arc;

use super::{Bound, Result};
use crate::tensor::{AttentionPattern, Scalar, Tape, Tensor, Var, MASK_SENTINEL};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Projection weights of one attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionWeights {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: bound.get(&format!("{prefix}.attn.wq"))?,
            wk: bound.get(&format!("{prefix}.attn.wk"))?,
            wv: bound.get(&format!("{prefix}.attn.wv"))?,
            wo: bound.get(&format!("{prefix}.attn.wo"))?,
            bo: bound.get(&format!("{prefix}.attn.bo"))?,
        })
    }
}

/// Multi-head attention of `h` restricted to `pattern`, with the per-head
/// scalar `bias[head, column]` added to every entry that names a column.
/// Output is projected by `W_O`.
pub fn biased_masked_attention<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    pattern: Arc<AttentionPattern>,
    w: &AttentionWeights,
    bias: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let q = tape.matmul(h, w.wq)?;
    let k = tape.matmul(h, w.wk)?;
    let v = tape.matmul(h, w.wv)?;
    let a = tape.sparse_attention(q, k, v, bias, pattern, heads)?;
    let o = tape.matmul(a, w.wo)?;
    Ok(tape.add_row(o, w.bo)?)
}

/// Reference attention built from dense primitives: per head,
/// `softmax(Q_h K_hᵀ/√d_k + additive_h) V_h`, then `W_O` and its bias.
/// `additive[h]` is an `n x n` constant holding biases for allowed entries and
/// [`MASK_SENTINEL`] elsewhere (see [`dense_additive`]).
pub fn dense_reference_attention<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    w: &AttentionWeights,
    additive: &[Tensor<T>],
) -> Result<Var> {
    let heads = additive.len();
    let d = tape.value(h).cols();
    let dk = d / heads;
    let q = tape.matmul(h, w.wq)?;
    let k = tape.matmul(h, w.wk)?;
    let v = tape.matmul(h, w.wv)?;
    let scale = T::one() / T::from_usize(dk).expect("dk").sqrt();
    let mut total: Option<Var> = None;
    for (head, add) in additive.iter().enumerate() {
        let qh = tape.slice_cols(q, head * dk, dk)?;
        let kh = tape.slice_cols(k, head * dk, dk)?;
        let vh = tape.slice_cols(v, head * dk, dk)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let p = tape.softmax_rows(scores, Some(add))?;
        let ctx = tape.matmul(p, vh)?;
        let rows: Vec<usize> = (head * dk..(head + 1) * dk).collect();
        let wo_h = tape.gather_rows(w.wo, &rows)?;
        let part = tape.matmul(ctx, wo_h)?;
        total = Some(match total {
            Some(t) => tape.add(t, part)?,
            None => part,
        });
    }
    let total = total.expect("at least one head");
    Ok(tape.add_row(total, w.bo)?)
}

/// Per-head additive score matrices for [`dense_reference_attention`].
pub fn dense_additive<T: Scalar>(
    pattern: &AttentionPattern,
    bias: Option<&Tensor<T>>,
    heads: usize,
) -> Vec<Tensor<T>> {
    let n = pattern.tokens();
    (0..heads)
        .map(|head| {
            let mut m = Tensor::full(&[n, n], T::lit(MASK_SENTINEL));
            for q in 0..n {
                for (&k, col) in pattern.keys(q).iter().zip(pattern.bias_columns(q)) {
                    let b = match (bias, col) {
                        (Some(b), Some(c)) => b.get(head, c),
                        _ => T::zero(),
                    };
                    m.row_mut(q)[k] = b;
                }
            }
            m
        })
        .collect()
}

/// `h + attn(LN(h))`, then `h + MLP(LN(h))`.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    h: Var,
    pattern: Arc<AttentionPattern>,
    bias: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let x = layer_norm(tape, bound, &format!("{prefix}.ln1"), h)?;
    let w = AttentionWeights::bind(bound, prefix)?;
    let a = biased_masked_attention(tape, x, pattern, &w, bias, heads)?;
    let h = tape.add(h, a)?;

    let x = layer_norm(tape, bound, &format!("{prefix}.ln2"), h)?;
    let m = tape.matmul(x, bound.get(&format!("{prefix}.mlp.w1"))?)?;
    let m = tape.add_row(m, bound.get(&format!("{prefix}.mlp.b1"))?)?;
    let m = tape.gelu(m);
    let m = tape.matmul(m, bound.get(&format!("{prefix}.mlp.w2"))?)?;
    let m = tape.add_row(m, bound.get(&format!("{prefix}.mlp.b2"))?)?;
    Ok(tape.add(h, m)?)
}

pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = bound.get(&format!("{prefix}.gamma"))?;
    let beta = bound.get(&format!("{prefix}.beta"))?;
    Ok(tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?)
}

/// Final layer norm on the pooled rows, linear projection, unit norm.
pub fn pool_and_project<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    h: Var,
    pooled_rows: &[usize],
) -> Result<Var> {
    let pooled = tape.gather_rows(h, pooled_rows)?;
    let x = layer_norm(tape, bound, &format!("{prefix}.ln_f"), pooled)?;
    let y = tape.matmul(x, bound.get(&format!("{prefix}.proj.w"))?)?;
    let y = tape.add_row(y, bound.get(&format!("{prefix}.proj.b"))?)?;
    Ok(tape.l2_normalize_rows(y))
}
