use std::sync::Arc;

use super::attention::{self, AttentionPattern, AttnShape};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy {
        x: Var,
        s: Var,
    },
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SumAll(Var),
    MeanRows(Var),
    Softmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        pattern: Arc<AttentionPattern>,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation. Nodes are stored
/// in creation order, which is a topological order of the graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf it depends on.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_input(value: &Tensor<T>, what: &'static str) -> Result<()> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFiniteInput(what));
        }
        Ok(())
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        Self::check_input(&value, "leaf")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        Self::check_input(&value, "constant")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims();
        let (br, bc) = self.value(b).dims();
        let (kb, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(mismatch(
                if b_transposed { "matmul_nt" } else { "matmul" },
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        let (rsb, csb) = if b_transposed {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                b_transposed,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(mismatch("add", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (rows, cols) = vx.dims();
        if vb.dims() != (1, cols) {
            return Err(mismatch("add_row", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for r in 0..rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(mismatch("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y);
        let out = Tensor::new(va.shape().to_vec(), data.collect())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Multiplies `x` by the `1 x 1` tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(mismatch("scale_by", self.value(x).shape(), self.value(s).shape()));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy { x, s }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance, then `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.dims();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.dims() != (1, cols) || vb.dims() != (1, cols) {
            return Err(mismatch("layer_norm", vx.shape(), vg.shape()));
        }
        let n = T::from_usize(cols).expect("cols");
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                o[c] = vg.data()[c] * h + vb.data()[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup: output row `i` is `table[index[i]]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, cols) = vt.dims();
        if index.is_empty() {
            return Err(mismatch("gather_rows", vt.shape(), &[0]));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(vt.row(i));
        }
        let out = Tensor::matrix(index.len(), cols, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(mismatch("concat_rows", &[], &[]));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(mismatch("concat_rows", self.value(first).shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.dims();
        if len == 0 || start + len > cols {
            return Err(mismatch("slice_cols", vx.shape(), &[start, len]));
        }
        let out = Tensor::from_fn(rows, len, |r, c| vx.get(r, start + c));
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Column means, `1 x cols`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.dims();
        let inv = T::one() / T::from_usize(rows).expect("rows");
        let mut out = Tensor::zeros(&[1, cols]);
        for r in 0..rows {
            for (o, &v) in out.data_mut().iter_mut().zip(vx.row(r)) {
                *o += v;
            }
        }
        for o in out.data_mut() {
            *o *= inv;
        }
        let rg = self.rg(x);
        self.push(out, Op::MeanRows(x), rg)
    }

    /// Softmax along each row after adding an optional constant `additive`
    /// (use [`super::MASK_SENTINEL`] for disallowed entries).
    pub fn softmax_rows(&mut self, x: Var, additive: Option<&Tensor<T>>) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.dims();
        if let Some(m) = additive {
            if m.dims() != (rows, cols) {
                return Err(mismatch("softmax_rows", vx.shape(), m.shape()));
            }
        }
        let mut out = vx.clone();
        if let Some(m) = additive {
            out.add_assign(m);
        }
        for r in 0..rows {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (rows, _) = vx.dims();
        let tiny = T::lit(1e-12);
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = out.row_mut(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            for v in row.iter_mut() {
                *v = *v / norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`, as `1 x 1`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, cols) = vl.dims();
        if targets.len() != rows {
            return Err(mismatch("cross_entropy_rows", vl.shape(), &[targets.len()]));
        }
        let mut probs = vl.data().to_vec();
        let mut total = T::zero();
        for r in 0..rows {
            let t = targets[r];
            if t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_rows",
                    index: t,
                    bound: cols,
                });
            }
            let row = &mut probs[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[t];
            softmax_in_place(row);
        }
        let loss = total / T::from_usize(rows).expect("rows");
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Multi-head attention restricted to `pattern`. Scores are
    /// `q·k/√d_k + bias[head, column]` for entries carrying a bias column.
    /// `bias` is `heads x columns`.
    pub fn sparse_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        pattern: Arc<AttentionPattern>,
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.value(q).dims();
        for other in [k, v] {
            if self.value(other).dims() != (n, d) {
                return Err(mismatch(
                    "sparse_attention",
                    self.value(q).shape(),
                    self.value(other).shape(),
                ));
            }
        }
        if pattern.tokens() != n || heads == 0 || d % heads != 0 {
            return Err(mismatch("sparse_attention", &[n, d], &[pattern.tokens(), heads]));
        }
        let bias_cols = match bias {
            Some(b) => {
                let (bh, bc) = self.value(b).dims();
                if bh != heads || pattern.max_bias_column().is_some_and(|m| m >= bc) {
                    return Err(mismatch("sparse_attention", &[heads], self.value(b).shape()));
                }
                bc
            }
            None => 0,
        };
        let shape = AttnShape {
            d,
            heads,
            bias_cols,
        };
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            bias.map(|b| self.value(b).data()),
            &pattern,
            &shape,
        );
        let out = Tensor::matrix(n, d, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                pattern,
                heads,
                probs,
            },
            rg,
        ))
    }

    fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Tensor<T>>],
        v: Var,
    ) -> Option<&'g mut Tensor<T>> {
        if !self.rg(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        Some(slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape())))
    }

    /// Reverse pass from a `1 x 1` loss. Returns gradients of every leaf
    /// created with [`Tape::leaf`] that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::MatMul {
                    a,
                    b,
                    b_transposed,
                } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = va.dims();
                    let n = g.cols();
                    if let Some(da) = self.grad_slot(&mut grads, *a) {
                        // dA = dC · Bᵀ (or dC · B when B was transposed)
                        let (rs, cs) = if *b_transposed {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            g.data(),
                            n as isize,
                            1,
                            vb.data(),
                            rs,
                            cs,
                            T::one(),
                            da.data_mut(),
                            k as isize,
                            1,
                        );
                    }
                    if let Some(db) = self.grad_slot(&mut grads, *b) {
                        if *b_transposed {
                            // dB (n x k) = dCᵀ · A
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                g.data(),
                                1,
                                n as isize,
                                va.data(),
                                k as isize,
                                1,
                                T::one(),
                                db.data_mut(),
                                k as isize,
                                1,
                            );
                        } else {
                            // dB (k x n) = Aᵀ · dC
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                va.data(),
                                1,
                                k as isize,
                                g.data(),
                                n as isize,
                                1,
                                T::one(),
                                db.data_mut(),
                                n as isize,
                                1,
                            );
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(d) = self.grad_slot(&mut grads, v) {
                            d.add_assign(&g);
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    if let Some(dx) = self.grad_slot(&mut grads, *x) {
                        dx.add_assign(&g);
                    }
                    if let Some(db) = self.grad_slot(&mut grads, *bias) {
                        for r in 0..g.rows() {
                            for (o, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    if let Some(da) = self.grad_slot(&mut grads, *a) {
                        for ((o, &gv), &y) in da.data_mut().iter_mut().zip(g.data()).zip(vb.data())
                        {
                            *o += gv * y;
                        }
                    }
                    if let Some(db) = self.grad_slot(&mut grads, *b) {
                        for ((o, &gv), &x) in db.data_mut().iter_mut().zip(g.data()).zip(va.data())
                        {
                            *o += gv * x;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if let Some(dx) = self.grad_slot(&mut grads, *x) {
                        for (o, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                            *o += gv * *c;
                        }
                    }
                }
                Op::ScaleBy { x, s } => {
                    let c = self.value(*s).item();
                    if let Some(dx) = self.grad_slot(&mut grads, *x) {
                        for (o, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                            *o += gv * c;
                        }
                    }
                    let vx = self.value(*x);
                    if let Some(ds) = self.grad_slot(&mut grads, *s) {
                        let dot = g.data().iter().zip(vx.data()).map(|(&a, &b)| a * b).sum::<T>();
                        ds.data_mut()[0] += dot;
                    }
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    if let Some(dx) = self.grad_slot(&mut grads, *x) {
                        for ((o, &gv), &yv) in dx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                            *o += gv * yv;
                        }
                    }
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                    let (half, three) = (T::lit(0.5), T::lit(3.0));
                    if let Some(dx) = self.grad_slot(&mut grads, *x) {
                        for ((o, &gv), &v) in dx.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                            let t = (c * (v + a * v * v * v)).tanh();
                            let dt = c * (T::one() + three * a * v * v);
                            let d = half * (T::one() + t) + half * v * (T::one() - t * t) * dt;
                            *o += gv * d;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = g.dims();
                    let vg = self.value(*gamma).clone();
                    if let Some(dgamma) = self.grad_slot(&mut grads, *gamma) {
                        for r in 0..rows {
                            for c in 0..cols {
                                dgamma.data_mut()[c] += g.get(r, c) * xhat[r * cols + c];
                            }
                        }
                    }
                    if let Some(dbeta) = self.grad_slot(&mut grads, *beta) {
                        for r in 0..rows {
                            for (o, &v) in dbeta.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    if let Some(dx) = self.grad_slot(&mut grads, *x) {
                        let n = T::from_usize(cols).expect("cols");
                        let mut dxhat = vec![T::zero(); cols];
                        for r in 0..rows {
                            let xh = &xhat[r * cols..(r + 1) * cols];
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for c in 0..cols {
                                dxhat[c] = g.get(r, c) * vg.data()[c];
                                mean_d += dxhat[c];
                                mean_dx += dxhat[c] * xh[c];
                            }
                            mean_d = mean_d / n;
                            mean_dx = mean_dx / n;
                            let out = dx.row_mut(r);
                            for c in 0..cols {
                                out[c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                    }
                }
                Op::GatherRows { table, index } => {
                    if let Some(dt) = self.grad_slot(&mut grads, *table) {
                        for (r, &i) in index.iter().enumerate() {
                            for (o, &v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if let Some(dp) = self.grad_slot(&mut grads, p) {
                            let src = &g.data()[offset * cols..(offset + rows) * cols];
                            for (o, &v) in dp.data_mut().iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                        offset += rows;
                    }
                }
                Op::SliceCols { x, start } => {
                    let len = g.cols();
                    if let Some(dx) = self.grad_slot(&mut grads, *x) {
                        for r in 0..g.rows() {
                            for (o, &v) in dx.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r))
                            {
                                *o += v;
                            }
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gv = g.item();
                    if let Some(dx) = self.grad_slot(&mut grads, *x) {
                        for o in dx.data_mut() {
                            *o += gv;
                        }
                    }
                }
                Op::MeanRows(x) => {
                    let rows = self.value(*x).rows();
                    let inv = T::one() / T::from_usize(rows).expect("rows");
                    if let Some(dx) = self.grad_slot(&mut grads, *x) {
                        for r in 0..rows {
                            for (o, &v) in dx.row_mut(r).iter_mut().zip(g.data()) {
                                *o += v * inv;
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    if let Some(dx) = self.grad_slot(&mut grads, *x) {
                        for r in 0..y.rows() {
                            let (yr, gr) = (y.row(r), g.row(r));
                            let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                            for ((o, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                                *o += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    if let Some(dx) = self.grad_slot(&mut grads, *x) {
                        for r in 0..y.rows() {
                            let (yr, gr) = (y.row(r), g.row(r));
                            let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                            for ((o, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                                *o += (gv - yv * dot) / norms[r];
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.item() / T::from_usize(targets.len()).expect("rows");
                    if let Some(dl) = self.grad_slot(&mut grads, *logits) {
                        let cols = dl.cols();
                        for (o, &p) in dl.data_mut().iter_mut().zip(probs) {
                            *o += p * scale;
                        }
                        for (r, &t) in targets.iter().enumerate() {
                            dl.data_mut()[r * cols + t] -= scale;
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    bias,
                    pattern,
                    heads,
                    probs,
                } => {
                    let (_, d) = g.dims();
                    let bias_cols = bias.map_or(0, |b| self.value(b).cols());
                    let with_bias = bias.is_some_and(|b| self.rg(b));
                    let ag = attention::backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        g.data(),
                        pattern,
                        &AttnShape {
                            d,
                            heads: *heads,
                            bias_cols,
                        },
                        with_bias,
                    );
                    for (var, dv) in [(*q, &ag.dq), (*k, &ag.dk), (*v, &ag.dv)] {
                        if let Some(slot) = self.grad_slot(&mut grads, var) {
                            for (o, &x) in slot.data_mut().iter_mut().zip(dv) {
                                *o += x;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        if let Some(slot) = self.grad_slot(&mut grads, *b) {
                            for (o, &x) in slot.data_mut().iter_mut().zip(&ag.dbias) {
                                *o += x;
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(1, 2, &[0.0, 0.0])).unwrap();
        let y = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let mut tape = Tape::<f32>::new();
        let x = tape
            .constant(Tensor::matrix(1, 2, vec![3.0, 0.0]).unwrap())
            .unwrap();
        let mask = Tensor::matrix(1, 2, vec![0.0, -1e9]).unwrap();
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, -1.5])).unwrap();
        let s = tape.sum_all(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(1, 3, &[1.0, -2.0, 0.5])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(2, 3, &[0.0; 6])).unwrap();
        let b = tape.leaf(t(2, 3, &[0.0; 6])).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(tape.matmul_nt(a, b).is_ok());
    }

    #[test]
    #[cfg(debug_assertions)]
    fn non_finite_inputs_rejected() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(
            tape.leaf(t(1, 1, &[f64::NAN])),
            Err(TensorError::NonFiniteInput(_))
        ));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0])).unwrap();
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum_all(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn layer_norm_statistics() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(t(2, 4, &[1.0, 2.0, 3.0, 10.0, -5.0, 0.0, 0.5, 7.0]))
            .unwrap();
        let gamma = tape.constant(Tensor::full(&[1, 4], 1.0)).unwrap();
        let beta = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
