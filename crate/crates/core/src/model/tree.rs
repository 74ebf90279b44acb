//! Formation-tree transformer.
//!
//! Node inputs are `node_embedding(label) + azimuth_embedding(azimuth)`.
//! Each layer restricts attention to a node and its direct children; scores
//! toward a child carry a learnable per-head scalar indexed by the child's
//! azimuth, and the diagonal carries the SELF scalar (column 0). The root's
//! final hidden state, projected and normalized, is the character embedding.

use std::sync::Arc;

use super::layers::{pool_and_project, transformer_block};
use super::{Bound, EncoderOptions, ModelConfig, ModelError, Result};
use crate::ids::{Azimuth, FormationTree, NodeLabel};
use crate::tensor::{AttentionPattern, Scalar, Tape, Var};

/// Longest token sequence (class token included) in sequential mode.
pub const MAX_SEQUENCE: usize = 64;

/// Bias-table column for diagonal (self) entries.
pub const SELF_BIAS: usize = 0;

/// Several trees packed into one token matrix.
#[derive(Debug, Clone)]
pub struct TreeBatch {
    /// Row of the (node table ++ special token) embedding per token.
    pub labels: Vec<usize>,
    pub azimuths: Vec<usize>,
    /// Sequential-mode position per token; empty in tree mode.
    pub positions: Vec<usize>,
    pub pattern: Arc<AttentionPattern>,
    /// Token row pooled for each tree.
    pub pooled: Vec<usize>,
}

/// Index of a node label in the node embedding table.
pub fn label_row(label: NodeLabel, radicals: usize) -> Result<usize> {
    match label {
        NodeLabel::Radical(r) if (r as usize) < radicals => Ok(r as usize),
        NodeLabel::Radical(r) => Err(ModelError::UnknownLabel(format!("r{r}"))),
        NodeLabel::Formation(f) => Ok(radicals + f.index()),
    }
}

impl TreeBatch {
    pub fn new(
        trees: &[&FormationTree],
        options: &EncoderOptions,
        radicals: usize,
    ) -> Result<Self> {
        if trees.is_empty() {
            return Err(ModelError::EmptyTree);
        }
        let special_row = radicals + 12;
        let mut b = TreeBatch {
            labels: Vec::new(),
            azimuths: Vec::new(),
            positions: Vec::new(),
            pattern: Arc::new(AttentionPattern::from_rows(&[])),
            pooled: Vec::with_capacity(trees.len()),
        };
        let mut rows: Vec<Vec<(usize, Option<usize>)>> = Vec::new();
        for tree in trees {
            if tree.is_masked(0) {
                return Err(ModelError::AllMasked);
            }
            let base = b.labels.len();
            let n = tree.len();
            if options.sequential {
                if n + 1 > MAX_SEQUENCE {
                    return Err(ModelError::SequenceTooLong {
                        len: n + 1,
                        max: MAX_SEQUENCE,
                    });
                }
                // class token first, then the preorder sequence
                b.labels.push(special_row);
                b.azimuths.push(Azimuth::ROOT.id());
                b.positions.push(0);
                for i in 0..n {
                    b.labels.push(label_row(tree.label(i), radicals)?);
                    b.azimuths.push(tree.azimuth(i).id());
                    b.positions.push(i + 1);
                }
                let visible: Vec<usize> = std::iter::once(base)
                    .chain((0..n).filter(|&i| !tree.is_masked(i)).map(|i| base + 1 + i))
                    .collect();
                rows.push(visible.iter().map(|&k| (k, None)).collect());
                for i in 0..n {
                    rows.push(if tree.is_masked(i) {
                        Vec::new()
                    } else {
                        visible.iter().map(|&k| (k, None)).collect()
                    });
                }
                b.pooled.push(base);
            } else {
                for i in 0..n {
                    b.labels.push(label_row(tree.label(i), radicals)?);
                    b.azimuths.push(tree.azimuth(i).id());
                    let mut row = Vec::new();
                    if !tree.is_masked(i) {
                        row.push((base + i, Some(SELF_BIAS)));
                        for c in tree.children(i) {
                            if !tree.is_masked(c) {
                                row.push((base + c, Some(tree.azimuth(c).id())));
                            }
                        }
                    }
                    rows.push(row);
                }
                if options.special_node {
                    let v = base + n;
                    b.labels.push(special_row);
                    b.azimuths.push(Azimuth::ROOT.id());
                    let mut row: Vec<(usize, Option<usize>)> = (0..n)
                        .filter(|&i| !tree.is_masked(i))
                        .map(|i| (base + i, None))
                        .collect();
                    row.push((v, None));
                    rows.push(row);
                    b.pooled.push(v);
                } else {
                    b.pooled.push(base);
                }
            }
        }
        b.pattern = Arc::new(AttentionPattern::from_rows(&rows));
        Ok(b)
    }

    pub fn tokens(&self) -> usize {
        self.labels.len()
    }
}

/// Input embeddings, `tokens x d`.
pub fn embed_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    options: &EncoderOptions,
    batch: &TreeBatch,
) -> Result<Var> {
    let mut table = bound.get("tree.node_embed")?;
    if let Some(special) = bound.try_get("tree.special") {
        table = tape.concat_rows(&[table, special])?;
    }
    let mut h = tape.gather_rows(table, &batch.labels)?;
    if options.azimuth_pe {
        let z = tape.gather_rows(bound.get("tree.azimuth_embed")?, &batch.azimuths)?;
        h = tape.add(h, z)?;
    }
    if options.sequential {
        let p = tape.gather_rows(bound.get("tree.pos_embed")?, &batch.positions)?;
        h = tape.add(h, p)?;
    }
    Ok(h)
}

/// Unit-norm tree embeddings, `trees x d_embed`.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    config: &ModelConfig,
    options: &EncoderOptions,
    batch: &TreeBatch,
) -> Result<Var> {
    let mut h = embed_nodes(tape, bound, options, batch)?;
    let bias = if options.sequential {
        None
    } else {
        Some(bound.get("tree.azimuth_bias")?)
    };
    for l in 0..config.layers {
        h = transformer_block(
            tape,
            bound,
            &format!("tree.layers.{l}"),
            h,
            batch.pattern.clone(),
            bias,
            config.heads,
        )?;
    }
    pool_and_project(tape, bound, "tree", h, &batch.pooled)
}
