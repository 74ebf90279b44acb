//! Sparse multi-head attention over an explicit (query, key) pattern.
//!
//! Several independent sequences are packed into one token matrix; the
//! pattern lists, for every query row, the key rows it may attend to and an
//! optional bias-table column per entry. Queries with no keys produce zeros.

use super::Scalar;

const NO_BIAS: u16 = u16::MAX;

/// CSR list of allowed keys per query, with an optional bias index per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPattern {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    bias: Vec<u16>,
}

impl AttentionPattern {
    /// `rows[q]` lists `(key, bias column)` for query `q`.
    pub fn from_rows(rows: &[Vec<(usize, Option<usize>)>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut bias = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for &(k, b) in row {
                assert!(k < rows.len(), "key {k} outside {} tokens", rows.len());
                cols.push(k);
                bias.push(b.map_or(NO_BIAS, |b| {
                    assert!(b < NO_BIAS as usize);
                    b as u16
                }));
            }
            row_ptr.push(cols.len());
        }
        Self {
            row_ptr,
            cols,
            bias,
        }
    }

    /// Full attention inside each block of `sizes` consecutive tokens.
    pub fn dense_blocks(sizes: &[usize]) -> Self {
        let mut rows = Vec::new();
        let mut start = 0;
        for &s in sizes {
            for _ in 0..s {
                rows.push((start..start + s).map(|k| (k, None)).collect());
            }
            start += s;
        }
        Self::from_rows(&rows)
    }

    pub fn tokens(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn entries(&self) -> usize {
        self.cols.len()
    }

    pub fn keys(&self, q: usize) -> &[usize] {
        &self.cols[self.row_ptr[q]..self.row_ptr[q + 1]]
    }

    pub fn bias_columns(&self, q: usize) -> impl Iterator<Item = Option<usize>> + '_ {
        self.bias[self.row_ptr[q]..self.row_ptr[q + 1]]
            .iter()
            .map(|&b| (b != NO_BIAS).then_some(b as usize))
    }

    pub fn max_bias_column(&self) -> Option<usize> {
        self.bias
            .iter()
            .filter(|&&b| b != NO_BIAS)
            .max()
            .map(|&b| b as usize)
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.keys(q).contains(&k)
    }
}

pub(crate) struct AttnShape {
    pub d: usize,
    pub heads: usize,
    pub bias_cols: usize,
}

/// Returns the output (tokens x d) and attention probabilities laid out as
/// `[entry * heads + head]`.
pub(crate) fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    pattern: &AttentionPattern,
    shape: &AttnShape,
) -> (Vec<T>, Vec<T>) {
    let AttnShape { d, heads, bias_cols } = *shape;
    let dk = d / heads;
    let scale = T::one() / T::from_usize(dk).expect("dk").sqrt();
    let n = pattern.tokens();
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); pattern.entries() * heads];
    let mut scores = Vec::new();
    for qi in 0..n {
        let (lo, hi) = (pattern.row_ptr[qi], pattern.row_ptr[qi + 1]);
        if lo == hi {
            continue;
        }
        for h in 0..heads {
            let qrow = &q[qi * d + h * dk..qi * d + (h + 1) * dk];
            scores.clear();
            let mut max = T::neg_infinity();
            for e in lo..hi {
                let ki = pattern.cols[e];
                let krow = &k[ki * d + h * dk..ki * d + (h + 1) * dk];
                let mut s = dot(qrow, krow) * scale;
                if let (Some(b), c) = (bias, pattern.bias[e]) {
                    if c != NO_BIAS {
                        s += b[h * bias_cols + c as usize];
                    }
                }
                max = max.max(s);
                scores.push(s);
            }
            let mut total = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let orow = &mut out[qi * d + h * dk..qi * d + (h + 1) * dk];
            for (j, e) in (lo..hi).enumerate() {
                let p = scores[j] / total;
                probs[e * heads + h] = p;
                let ki = pattern.cols[e];
                let vrow = &v[ki * d + h * dk..ki * d + (h + 1) * dk];
                for (o, &x) in orow.iter_mut().zip(vrow) {
                    *o += p * x;
                }
            }
        }
    }
    (out, probs)
}

pub(crate) struct AttnGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dbias: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    pattern: &AttentionPattern,
    shape: &AttnShape,
    with_bias: bool,
) -> AttnGrads<T> {
    let AttnShape { d, heads, bias_cols } = *shape;
    let dk = d / heads;
    let scale = T::one() / T::from_usize(dk).expect("dk").sqrt();
    let n = pattern.tokens();
    let mut g = AttnGrads {
        dq: vec![T::zero(); n * d],
        dk: vec![T::zero(); n * d],
        dv: vec![T::zero(); n * d],
        dbias: vec![T::zero(); if with_bias { heads * bias_cols } else { 0 }],
    };
    let mut dp = Vec::new();
    for qi in 0..n {
        let (lo, hi) = (pattern.row_ptr[qi], pattern.row_ptr[qi + 1]);
        if lo == hi {
            continue;
        }
        for h in 0..heads {
            let span = h * dk..(h + 1) * dk;
            let dorow = &dout[qi * d + span.start..qi * d + span.end];
            dp.clear();
            let mut weighted = T::zero();
            for e in lo..hi {
                let ki = pattern.cols[e];
                let p = probs[e * heads + h];
                let vrow = &v[ki * d + span.start..ki * d + span.end];
                let x = dot(dorow, vrow);
                weighted += p * x;
                dp.push(x);
                let dvrow = &mut g.dv[ki * d + span.start..ki * d + span.end];
                for (a, &b) in dvrow.iter_mut().zip(dorow) {
                    *a += p * b;
                }
            }
            for (j, e) in (lo..hi).enumerate() {
                let ki = pattern.cols[e];
                let p = probs[e * heads + h];
                let ds = p * (dp[j] - weighted);
                if with_bias && pattern.bias[e] != NO_BIAS {
                    g.dbias[h * bias_cols + pattern.bias[e] as usize] += ds;
                }
                let dss = ds * scale;
                for t in span.clone() {
                    g.dq[qi * d + t] += dss * k[ki * d + t];
                    g.dk[ki * d + t] += dss * q[qi * d + t];
                }
            }
        }
    }
    g
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_rows_produce_zero_output() {
        let pattern = AttentionPattern::from_rows(&[vec![(0, None)], vec![]]);
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let shape = AttnShape {
            d: 2,
            heads: 1,
            bias_cols: 0,
        };
        let (out, probs) = forward(&x, &x, &x, None, &pattern, &shape);
        assert_eq!(&out[2..], &[0.0, 0.0]);
        assert_eq!(probs, vec![1.0]);
        assert_eq!(&out[..2], &[1.0, 2.0]);
    }

    #[test]
    fn dense_blocks_layout() {
        let p = AttentionPattern::dense_blocks(&[2, 1]);
        assert_eq!(p.tokens(), 3);
        assert_eq!(p.keys(0), &[0, 1]);
        assert_eq!(p.keys(2), &[2]);
        assert!(!p.allows(2, 0));
    }
}
