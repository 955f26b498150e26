//! Wengert tape: eager forward execution with recorded backward rules.
//!
//! Every op validates shapes at record time, computes its value immediately,
//! and stores what the backward pass needs. `backward` walks the tape in
//! reverse exactly once per recording; gradients for leaves are then exported
//! back into the caller's tensors.
//!
//! Parallel kernels (rayon) partition work by output row only; each output
//! element is produced by one sequential reduction, so results are bitwise
//! identical at any thread count.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

// Below this many MACs the sequential path wins.
const PAR_MACS: usize = 65_536;

enum Op<T: Real> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, T),
    Scale { x: usize, s: usize },
    Exp(usize),
    Gelu(usize),
    AddRow { x: usize, v: usize },
    MulRow { x: usize, v: usize },
    AddTiledRows { x: usize, p: usize },
    MatMul(usize, usize),
    Transpose(usize),
    LayerNormRows { x: usize },
    EmbeddingLookup { table: usize, ids: Vec<usize> },
    L2NormalizeRows { x: usize },
    SoftmaxRows(usize),
    CrossEntropyRows { logits: usize, targets: Vec<usize> },
    MeanAll(usize),
    SumAll(usize),
    SliceBlock { x: usize, r0: usize, c0: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    MeanRowsWeighted { x: usize },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    // op-specific cached values (LN row stats, softmax probs, pooling weights)
    aux: Vec<T>,
    op: Op<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.nodes.push(node);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register an external tensor as a differentiable leaf (copies its data).
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            grad: None,
            needs_grad: t.requires_grad,
            aux: Vec::new(),
            op: if t.requires_grad { Op::Leaf } else { Op::Constant },
        })
    }

    /// Record a non-differentiable value.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        self.push(Node {
            shape,
            data,
            grad: None,
            needs_grad: false,
            aux: Vec::new(),
            op: Op::Constant,
        })
    }

    pub fn scalar_const(&mut self, v: T) -> Result<Var> {
        self.constant(vec![1], vec![v])
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn value_scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    /// Gradient accumulated for `v`, if the node participates in grads and
    /// `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Add the gradient accumulated for `v` into `t.grad` (allocating it on
    /// first use). Gradients accumulate across calls; callers zero them
    /// between optimizer steps.
    pub fn accumulate_grad_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        let node = &self.nodes[v.0];
        if node.shape != t.shape() {
            return Err(Error::Shape {
                op: "accumulate_grad_into",
                lhs: node.shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
        let Some(g) = node.grad.as_ref() else {
            return Ok(());
        };
        if t.grad.is_none() {
            t.grad = Some(vec![T::ZERO; t.numel()]);
        }
        let dst = t.grad.as_mut().unwrap();
        for (d, s) in dst.iter_mut().zip(g) {
            *d += *s;
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(Error::Shape {
                op,
                lhs: s.clone(),
                rhs: vec![],
            }),
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn binary_shape_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("add", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        self.push(Node {
            shape: self.nodes[a.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(a.0) || self.needs(b.0),
            aux: Vec::new(),
            op: Op::Add(a.0, b.0),
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("sub", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        self.push(Node {
            shape: self.nodes[a.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(a.0) || self.needs(b.0),
            aux: Vec::new(),
            op: Op::Sub(a.0, b.0),
        })
    }

    /// Elementwise (Hadamard) product of same-shape nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("mul", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        self.push(Node {
            shape: self.nodes[a.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(a.0) || self.needs(b.0),
            aux: Vec::new(),
            op: Op::Mul(a.0, b.0),
        })
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        self.push(Node {
            shape: self.nodes[x.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(x.0),
            aux: Vec::new(),
            op: Op::MulScalar(x.0, c),
        })
    }

    /// Multiply every element of `x` by the single-element node `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::Shape {
                op: "scale",
                lhs: self.nodes[s.0].shape.clone(),
                rhs: vec![1],
            });
        }
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[x.0].data.iter().map(|&v| v * sv).collect();
        self.push(Node {
            shape: self.nodes[x.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(x.0) || self.needs(s.0),
            aux: Vec::new(),
            op: Op::Scale { x: x.0, s: s.0 },
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|&v| v.exp()).collect();
        self.push(Node {
            shape: self.nodes[x.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(x.0),
            aux: Vec::new(),
            op: Op::Exp(x.0),
        })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_K);
        let half = T::from_f64(0.5);
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::ZERO; src.len()];
        let f = |(o, &v): (&mut T, &T)| {
            let inner = c * (v + k * v * v * v);
            *o = half * v * (T::ONE + inner.tanh());
        };
        if src.len() >= PAR_MACS {
            data.par_iter_mut().zip(src.par_iter()).for_each(f);
        } else {
            data.iter_mut().zip(src.iter()).for_each(f);
        }
        self.push(Node {
            shape: self.nodes[x.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(x.0),
            aux: Vec::new(),
            op: Op::Gelu(x.0),
        })
    }

    /// Broadcast-add a row vector `v` (shape `[n]`) over every row of `x`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row", x)?;
        if self.nodes[v.0].data.len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].data;
        let vv = &self.nodes[v.0].data;
        let mut data = vec![T::ZERO; m * n];
        for (orow, xrow) in data.chunks_mut(n).zip(xv.chunks(n)) {
            for ((o, &a), &b) in orow.iter_mut().zip(xrow).zip(vv) {
                *o = a + b;
            }
        }
        self.push(Node {
            shape: self.nodes[x.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(x.0) || self.needs(v.0),
            aux: Vec::new(),
            op: Op::AddRow { x: x.0, v: v.0 },
        })
    }

    /// Broadcast-multiply every row of `x` by the row vector `v`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = self.dims2("mul_row", x)?;
        if self.nodes[v.0].data.len() != n {
            return Err(Error::Shape {
                op: "mul_row",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].data;
        let vv = &self.nodes[v.0].data;
        let mut data = vec![T::ZERO; m * n];
        for (orow, xrow) in data.chunks_mut(n).zip(xv.chunks(n)) {
            for ((o, &a), &b) in orow.iter_mut().zip(xrow).zip(vv) {
                *o = a * b;
            }
        }
        self.push(Node {
            shape: self.nodes[x.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(x.0) || self.needs(v.0),
            aux: Vec::new(),
            op: Op::MulRow { x: x.0, v: v.0 },
        })
    }

    /// Add `p` (shape `[t, n]`) to `x` (shape `[m, n]`, `m % t == 0`), tiling
    /// `p` down the rows. Used to add positional embeddings to a stacked
    /// batch.
    pub fn add_tiled_rows(&mut self, x: Var, p: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_tiled_rows", x)?;
        let (t, pn) = self.dims2("add_tiled_rows", p)?;
        if pn != n || t == 0 || m % t != 0 {
            return Err(Error::Shape {
                op: "add_tiled_rows",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[p.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].data;
        let pv = &self.nodes[p.0].data;
        let mut data = vec![T::ZERO; m * n];
        for (i, (orow, xrow)) in data.chunks_mut(n).zip(xv.chunks(n)).enumerate() {
            let prow = &pv[(i % t) * n..(i % t + 1) * n];
            for ((o, &a), &b) in orow.iter_mut().zip(xrow).zip(prow) {
                *o = a + b;
            }
        }
        self.push(Node {
            shape: self.nodes[x.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(x.0) || self.needs(p.0),
            aux: Vec::new(),
            op: Op::AddTiledRows { x: x.0, p: p.0 },
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = vec![T::ZERO; m * n];
        matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut data);
        self.push(Node {
            shape: vec![m, n],
            data,
            grad: None,
            needs_grad: self.needs(a.0) || self.needs(b.0),
            aux: Vec::new(),
            op: Op::MatMul(a.0, b.0),
        })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", x)?;
        let xv = &self.nodes[x.0].data;
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv[i * n + j];
            }
        }
        self.push(Node {
            shape: vec![n, m],
            data,
            grad: None,
            needs_grad: self.needs(x.0),
            aux: Vec::new(),
            op: Op::Transpose(x.0),
        })
    }

    /// Row-wise normalization `(x - mean) / sqrt(var + eps)`, no affine.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        if eps <= T::ZERO {
            return Err(Error::Param {
                op: "layer_norm",
                message: format!("eps must be positive, got {eps}"),
            });
        }
        let (m, n) = self.dims2("layer_norm", x)?;
        let xv = &self.nodes[x.0].data;
        let inv_n = T::ONE / T::from_f64(n as f64);
        let mut data = vec![T::ZERO; m * n];
        let mut aux = vec![T::ZERO; 2 * m]; // (mean, rstd) per row
        let row_fn = |((orow, xrow), st): ((&mut [T], &[T]), &mut [T])| {
            let mut mean = T::ZERO;
            for &v in xrow {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::ZERO;
            for &v in xrow {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let rstd = T::ONE / (var + eps).sqrt();
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = (v - mean) * rstd;
            }
            st[0] = mean;
            st[1] = rstd;
        };
        if m * n >= PAR_MACS {
            data.par_chunks_mut(n)
                .zip(xv.par_chunks(n))
                .zip(aux.par_chunks_mut(2))
                .for_each(row_fn);
        } else {
            data.chunks_mut(n)
                .zip(xv.chunks(n))
                .zip(aux.chunks_mut(2))
                .for_each(row_fn);
        }
        self.push(Node {
            shape: self.nodes[x.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(x.0),
            aux,
            op: Op::LayerNormRows { x: x.0 },
        })
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, width) = self.dims2("embedding_lookup", table)?;
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embedding_lookup",
                    index: id,
                    size: vocab,
                });
            }
        }
        let tv = &self.nodes[table.0].data;
        let mut data = vec![T::ZERO; ids.len() * width];
        for (row, &id) in data.chunks_mut(width).zip(ids) {
            row.copy_from_slice(&tv[id * width..(id + 1) * width]);
        }
        self.push(Node {
            shape: vec![ids.len(), width],
            data,
            grad: None,
            needs_grad: self.needs(table.0),
            aux: Vec::new(),
            op: Op::EmbeddingLookup {
                table: table.0,
                ids: ids.to_vec(),
            },
        })
    }

    /// Scale each row to unit Euclidean norm: `x / sqrt(sum(x^2) + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        if eps <= T::ZERO {
            return Err(Error::Param {
                op: "l2_normalize_rows",
                message: format!("eps must be positive, got {eps}"),
            });
        }
        let (m, n) = self.dims2("l2_normalize_rows", x)?;
        let xv = &self.nodes[x.0].data;
        let mut data = vec![T::ZERO; m * n];
        let mut aux = vec![T::ZERO; m];
        for ((orow, xrow), inv) in data.chunks_mut(n).zip(xv.chunks(n)).zip(aux.iter_mut()) {
            let mut s = T::ZERO;
            for &v in xrow {
                s += v * v;
            }
            *inv = T::ONE / (s + eps).sqrt();
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = v * *inv;
            }
        }
        self.push(Node {
            shape: self.nodes[x.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(x.0),
            aux,
            op: Op::L2NormalizeRows { x: x.0 },
        })
    }

    /// Numerically stable row-wise softmax (per-row max subtraction).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("softmax_rows", x)?;
        let xv = &self.nodes[x.0].data;
        let mut data = vec![T::ZERO; m * n];
        let row_fn = |(orow, xrow): (&mut [T], &[T])| {
            softmax_row(xrow, orow);
        };
        if m * n >= PAR_MACS {
            data.par_chunks_mut(n).zip(xv.par_chunks(n)).for_each(row_fn);
        } else {
            data.chunks_mut(n).zip(xv.chunks(n)).for_each(row_fn);
        }
        self.push(Node {
            shape: self.nodes[x.0].shape.clone(),
            data,
            grad: None,
            needs_grad: self.needs(x.0),
            aux: Vec::new(),
            op: Op::SoftmaxRows(x.0),
        })
    }

    /// Mean over rows of `-log softmax(logits)[row][target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("cross_entropy_rows", logits)?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy_rows",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= n {
                return Err(Error::Index {
                    op: "cross_entropy_rows",
                    index: t,
                    size: n,
                });
            }
        }
        let xv = &self.nodes[logits.0].data;
        let inv_m = T::ONE / T::from_f64(m as f64);
        let mut probs = vec![T::ZERO; m * n];
        let mut loss = T::ZERO;
        for ((prow, xrow), &t) in probs.chunks_mut(n).zip(xv.chunks(n)).zip(targets) {
            let lse = softmax_row(xrow, prow);
            loss += lse - xrow[t];
        }
        loss *= inv_m;
        self.push(Node {
            shape: vec![1],
            data: vec![loss],
            grad: None,
            needs_grad: self.needs(logits.0),
            aux: probs,
            op: Op::CrossEntropyRows {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let numel = self.nodes[x.0].data.len();
        let mut s = T::ZERO;
        for &v in &self.nodes[x.0].data {
            s += v;
        }
        s *= T::ONE / T::from_f64(numel as f64);
        self.push(Node {
            shape: vec![1],
            data: vec![s],
            grad: None,
            needs_grad: self.needs(x.0),
            aux: Vec::new(),
            op: Op::MeanAll(x.0),
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut s = T::ZERO;
        for &v in &self.nodes[x.0].data {
            s += v;
        }
        self.push(Node {
            shape: vec![1],
            data: vec![s],
            grad: None,
            needs_grad: self.needs(x.0),
            aux: Vec::new(),
            op: Op::SumAll(x.0),
        })
    }

    /// Copy out the `[r0..r0+rows, c0..c0+cols]` block of a 2-D node.
    pub fn slice_block(&mut self, x: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_block", x)?;
        if r0 + rows > m || c0 + cols > n || rows == 0 || cols == 0 {
            return Err(Error::Shape {
                op: "slice_block",
                lhs: vec![m, n],
                rhs: vec![r0 + rows, c0 + cols],
            });
        }
        let xv = &self.nodes[x.0].data;
        let mut data = vec![T::ZERO; rows * cols];
        for r in 0..rows {
            let src = &xv[(r0 + r) * n + c0..(r0 + r) * n + c0 + cols];
            data[r * cols..(r + 1) * cols].copy_from_slice(src);
        }
        self.push(Node {
            shape: vec![rows, cols],
            data,
            grad: None,
            needs_grad: self.needs(x.0),
            aux: Vec::new(),
            op: Op::SliceBlock { x: x.0, r0, c0 },
        })
    }

    /// Stack 2-D nodes with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_rows: empty input list".into()));
        }
        let (_, n) = self.dims2("concat_rows", parts[0])?;
        let mut total_rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims2("concat_rows", p)?;
            if pn != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            total_rows += pm;
        }
        let mut data = Vec::with_capacity(total_rows * n);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let needs = parts.iter().any(|&p| self.needs(p.0));
        self.push(Node {
            shape: vec![total_rows, n],
            data,
            grad: None,
            needs_grad: needs,
            aux: Vec::new(),
            op: Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
        })
    }

    /// Concatenate 2-D nodes with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols: empty input list".into()));
        }
        let (m, _) = self.dims2("concat_cols", parts[0])?;
        let mut total_cols = 0;
        for &p in parts {
            let (pm, pn) = self.dims2("concat_cols", p)?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            total_cols += pn;
        }
        let mut data = vec![T::ZERO; m * total_cols];
        let mut off = 0;
        for &p in parts {
            let (_, pn) = self.dims2("concat_cols", p)?;
            let pv = &self.nodes[p.0].data;
            for r in 0..m {
                data[r * total_cols + off..r * total_cols + off + pn]
                    .copy_from_slice(&pv[r * pn..(r + 1) * pn]);
            }
            off += pn;
        }
        let needs = parts.iter().any(|&p| self.needs(p.0));
        self.push(Node {
            shape: vec![m, total_cols],
            data,
            grad: None,
            needs_grad: needs,
            aux: Vec::new(),
            op: Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        })
    }

    /// Weighted mean over rows: `out[j] = sum_i w[i] x[i][j] / sum_i w[i]`.
    /// Weights are fixed (no gradient flows to them). Zero-weight rows are
    /// fully ignored, which is what masks PAD positions out of text pooling.
    pub fn mean_rows_weighted(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let (m, n) = self.dims2("mean_rows_weighted", x)?;
        if weights.len() != m {
            return Err(Error::Shape {
                op: "mean_rows_weighted",
                lhs: vec![m, n],
                rhs: vec![weights.len()],
            });
        }
        let mut wsum = T::ZERO;
        for &w in weights {
            wsum += w;
        }
        if !(wsum > T::ZERO) {
            return Err(Error::Param {
                op: "mean_rows_weighted",
                message: "weights must have a positive sum".into(),
            });
        }
        let inv = T::ONE / wsum;
        let norm_w: Vec<T> = weights.iter().map(|&w| w * inv).collect();
        let xv = &self.nodes[x.0].data;
        let mut data = vec![T::ZERO; n];
        for (xrow, &w) in xv.chunks(n).zip(&norm_w) {
            if w == T::ZERO {
                continue;
            }
            for (o, &v) in data.iter_mut().zip(xrow) {
                *o += w * v;
            }
        }
        self.push(Node {
            shape: vec![1, n],
            data,
            grad: None,
            needs_grad: self.needs(x.0),
            aux: norm_w,
            op: Op::MeanRowsWeighted { x: x.0 },
        })
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn take_grad_buf(&mut self, i: usize) -> Vec<T> {
        match self.nodes[i].grad.take() {
            Some(g) => g,
            None => vec![T::ZERO; self.nodes[i].data.len()],
        }
    }

    /// Run reverse-mode accumulation from the scalar `loss` node. Consumes
    /// the recording: a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.consumed = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.backprop_node(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // The node's op is moved out and restored so parents can be borrowed
        // freely while dispatching.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Constant);
        match &op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.needs(p) {
                        let mut gp = self.take_grad_buf(p);
                        axpy(&mut gp, g, T::ONE);
                        self.nodes[p].grad = Some(gp);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let mut gp = self.take_grad_buf(*a);
                    axpy(&mut gp, g, T::ONE);
                    self.nodes[*a].grad = Some(gp);
                }
                if self.needs(*b) {
                    let mut gp = self.take_grad_buf(*b);
                    axpy(&mut gp, g, -T::ONE);
                    self.nodes[*b].grad = Some(gp);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let mut gp = self.take_grad_buf(*a);
                    let bv = &self.nodes[*b].data;
                    for ((o, &gv), &v) in gp.iter_mut().zip(g).zip(bv) {
                        *o += gv * v;
                    }
                    self.nodes[*a].grad = Some(gp);
                }
                if self.needs(*b) {
                    let mut gp = self.take_grad_buf(*b);
                    let av = &self.nodes[*a].data;
                    for ((o, &gv), &v) in gp.iter_mut().zip(g).zip(av) {
                        *o += gv * v;
                    }
                    self.nodes[*b].grad = Some(gp);
                }
            }
            Op::MulScalar(x, c) => {
                if self.needs(*x) {
                    let mut gp = self.take_grad_buf(*x);
                    axpy(&mut gp, g, *c);
                    self.nodes[*x].grad = Some(gp);
                }
            }
            Op::Scale { x, s } => {
                let sv = self.nodes[*s].data[0];
                if self.needs(*x) {
                    let mut gp = self.take_grad_buf(*x);
                    axpy(&mut gp, g, sv);
                    self.nodes[*x].grad = Some(gp);
                }
                if self.needs(*s) {
                    let mut acc = T::ZERO;
                    for (&gv, &xv) in g.iter().zip(&self.nodes[*x].data) {
                        acc += gv * xv;
                    }
                    let mut gp = self.take_grad_buf(*s);
                    gp[0] += acc;
                    self.nodes[*s].grad = Some(gp);
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    let mut gp = self.take_grad_buf(*x);
                    for ((o, &gv), &yv) in gp.iter_mut().zip(g).zip(&self.nodes[i].data) {
                        *o += gv * yv;
                    }
                    self.nodes[*x].grad = Some(gp);
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let c = T::from_f64(GELU_C);
                    let k = T::from_f64(GELU_K);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let mut gp = self.take_grad_buf(*x);
                    let xv = &self.nodes[*x].data;
                    let f = |((o, &gv), &v): ((&mut T, &T), &T)| {
                        let inner = c * (v + k * v * v * v);
                        let t = inner.tanh();
                        let d_inner = c * (T::ONE + three * k * v * v);
                        let d = half * (T::ONE + t) + half * v * (T::ONE - t * t) * d_inner;
                        *o += gv * d;
                    };
                    if gp.len() >= PAR_MACS {
                        gp.par_iter_mut().zip(g.par_iter()).zip(xv.par_iter()).for_each(f);
                    } else {
                        gp.iter_mut().zip(g.iter()).zip(xv.iter()).for_each(f);
                    }
                    self.nodes[*x].grad = Some(gp);
                }
            }
            Op::AddRow { x, v } => {
                let n = self.nodes[*v].data.len();
                if self.needs(*x) {
                    let mut gp = self.take_grad_buf(*x);
                    axpy(&mut gp, g, T::ONE);
                    self.nodes[*x].grad = Some(gp);
                }
                if self.needs(*v) {
                    let mut gp = self.take_grad_buf(*v);
                    for grow in g.chunks(n) {
                        for (o, &gv) in gp.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    self.nodes[*v].grad = Some(gp);
                }
            }
            Op::MulRow { x, v } => {
                let n = self.nodes[*v].data.len();
                if self.needs(*x) {
                    let vv = self.nodes[*v].data.clone();
                    let mut gp = self.take_grad_buf(*x);
                    for (grow, gprow) in g.chunks(n).zip(gp.chunks_mut(n)) {
                        for ((o, &gv), &bv) in gprow.iter_mut().zip(grow).zip(&vv) {
                            *o += gv * bv;
                        }
                    }
                    self.nodes[*x].grad = Some(gp);
                }
                if self.needs(*v) {
                    let mut gp = self.take_grad_buf(*v);
                    let xv = &self.nodes[*x].data;
                    for (grow, xrow) in g.chunks(n).zip(xv.chunks(n)) {
                        for ((o, &gv), &xvv) in gp.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xvv;
                        }
                    }
                    self.nodes[*v].grad = Some(gp);
                }
            }
            Op::AddTiledRows { x, p } => {
                if self.needs(*x) {
                    let mut gp = self.take_grad_buf(*x);
                    axpy(&mut gp, g, T::ONE);
                    self.nodes[*x].grad = Some(gp);
                }
                if self.needs(*p) {
                    let n = self.nodes[*p].shape[self.nodes[*p].shape.len() - 1];
                    let t = self.nodes[*p].data.len() / n;
                    let mut gp = self.take_grad_buf(*p);
                    for (r, grow) in g.chunks(n).enumerate() {
                        let prow = &mut gp[(r % t) * n..(r % t + 1) * n];
                        for (o, &gv) in prow.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    self.nodes[*p].grad = Some(gp);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2_of(&self.nodes[*a].shape);
                let n = self.nodes[i].shape[1];
                if self.needs(*a) {
                    let mut gp = self.take_grad_buf(*a);
                    matmul_nt(g, &self.nodes[*b].data, m, n, k, &mut gp);
                    self.nodes[*a].grad = Some(gp);
                }
                if self.needs(*b) {
                    let mut gp = self.take_grad_buf(*b);
                    matmul_tn(&self.nodes[*a].data, g, m, k, n, &mut gp);
                    self.nodes[*b].grad = Some(gp);
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    let (n, m) = dims2_of(&self.nodes[i].shape); // output is [n, m]
                    let mut gp = self.take_grad_buf(*x);
                    for j in 0..n {
                        for r in 0..m {
                            gp[r * n + j] += g[j * m + r];
                        }
                    }
                    self.nodes[*x].grad = Some(gp);
                }
            }
            Op::LayerNormRows { x } => {
                if self.needs(*x) {
                    let (m, n) = dims2_of(&self.nodes[i].shape);
                    let inv_n = T::ONE / T::from_f64(n as f64);
                    let mut gp = self.take_grad_buf(*x);
                    let y = &self.nodes[i].data;
                    let aux = &self.nodes[i].aux;
                    let row_fn = |(((gprow, grow), yrow), st): (((&mut [T], &[T]), &[T]), &[T])| {
                        let rstd = st[1];
                        let mut mean_g = T::ZERO;
                        let mut mean_gy = T::ZERO;
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            mean_g += gv;
                            mean_gy += gv * yv;
                        }
                        mean_g *= inv_n;
                        mean_gy *= inv_n;
                        for ((o, &gv), &yv) in gprow.iter_mut().zip(grow).zip(yrow) {
                            *o += rstd * (gv - mean_g - yv * mean_gy);
                        }
                    };
                    if m * n >= PAR_MACS {
                        gp.par_chunks_mut(n)
                            .zip(g.par_chunks(n))
                            .zip(y.par_chunks(n))
                            .zip(aux.par_chunks(2))
                            .for_each(row_fn);
                    } else {
                        gp.chunks_mut(n)
                            .zip(g.chunks(n))
                            .zip(y.chunks(n))
                            .zip(aux.chunks(2))
                            .for_each(row_fn);
                    }
                    self.nodes[*x].grad = Some(gp);
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                if self.needs(*table) {
                    let width = self.nodes[i].shape[1];
                    let mut gp = self.take_grad_buf(*table);
                    for (grow, &id) in g.chunks(width).zip(ids) {
                        let dst = &mut gp[id * width..(id + 1) * width];
                        for (o, &gv) in dst.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    self.nodes[*table].grad = Some(gp);
                }
            }
            Op::L2NormalizeRows { x } => {
                if self.needs(*x) {
                    let (_, n) = dims2_of(&self.nodes[i].shape);
                    let mut gp = self.take_grad_buf(*x);
                    let y = &self.nodes[i].data;
                    let aux = &self.nodes[i].aux;
                    for (((gprow, grow), yrow), &inv) in
                        gp.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).zip(aux)
                    {
                        let mut dot = T::ZERO;
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dot += gv * yv;
                        }
                        for ((o, &gv), &yv) in gprow.iter_mut().zip(grow).zip(yrow) {
                            *o += inv * (gv - yv * dot);
                        }
                    }
                    self.nodes[*x].grad = Some(gp);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let (m, n) = dims2_of(&self.nodes[i].shape);
                    let mut gp = self.take_grad_buf(*x);
                    let y = &self.nodes[i].data;
                    let row_fn = |((gprow, grow), yrow): ((&mut [T], &[T]), &[T])| {
                        let mut dot = T::ZERO;
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dot += gv * yv;
                        }
                        for ((o, &gv), &yv) in gprow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    };
                    if m * n >= PAR_MACS {
                        gp.par_chunks_mut(n)
                            .zip(g.par_chunks(n))
                            .zip(y.par_chunks(n))
                            .for_each(row_fn);
                    } else {
                        gp.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).for_each(row_fn);
                    }
                    self.nodes[*x].grad = Some(gp);
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                if self.needs(*logits) {
                    let n = self.nodes[*logits].shape[self.nodes[*logits].shape.len() - 1];
                    let m = targets.len();
                    let scale = g[0] / T::from_f64(m as f64);
                    let mut gp = self.take_grad_buf(*logits);
                    let probs = &self.nodes[i].aux;
                    for ((gprow, prow), &t) in gp.chunks_mut(n).zip(probs.chunks(n)).zip(targets) {
                        for (j, (o, &p)) in gprow.iter_mut().zip(prow).enumerate() {
                            let delta = if j == t { T::ONE } else { T::ZERO };
                            *o += scale * (p - delta);
                        }
                    }
                    self.nodes[*logits].grad = Some(gp);
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let numel = self.nodes[*x].data.len();
                    let gv = g[0] / T::from_f64(numel as f64);
                    let mut gp = self.take_grad_buf(*x);
                    for o in gp.iter_mut() {
                        *o += gv;
                    }
                    self.nodes[*x].grad = Some(gp);
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let gv = g[0];
                    let mut gp = self.take_grad_buf(*x);
                    for o in gp.iter_mut() {
                        *o += gv;
                    }
                    self.nodes[*x].grad = Some(gp);
                }
            }
            Op::SliceBlock { x, r0, c0 } => {
                if self.needs(*x) {
                    let (rows, cols) = dims2_of(&self.nodes[i].shape);
                    let (_, n) = dims2_of(&self.nodes[*x].shape);
                    let mut gp = self.take_grad_buf(*x);
                    for r in 0..rows {
                        let dst = &mut gp[(r0 + r) * n + c0..(r0 + r) * n + c0 + cols];
                        for (o, &gv) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *o += gv;
                        }
                    }
                    self.nodes[*x].grad = Some(gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut row_off = 0;
                for &p in parts {
                    let numel = self.nodes[p].data.len();
                    if self.needs(p) {
                        let mut gp = self.take_grad_buf(p);
                        axpy(&mut gp, &g[row_off..row_off + numel], T::ONE);
                        self.nodes[p].grad = Some(gp);
                    }
                    row_off += numel;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2_of(&self.nodes[i].shape);
                let mut off = 0;
                for &p in parts {
                    let (_, pn) = dims2_of(&self.nodes[p].shape);
                    if self.needs(p) {
                        let mut gp = self.take_grad_buf(p);
                        for r in 0..m {
                            let src = &g[r * total + off..r * total + off + pn];
                            for (o, &gv) in gp[r * pn..(r + 1) * pn].iter_mut().zip(src) {
                                *o += gv;
                            }
                        }
                        self.nodes[p].grad = Some(gp);
                    }
                    off += pn;
                }
            }
            Op::MeanRowsWeighted { x } => {
                if self.needs(*x) {
                    let n = self.nodes[i].shape[1];
                    let norm_w = self.nodes[i].aux.clone();
                    let mut gp = self.take_grad_buf(*x);
                    for (gprow, &w) in gp.chunks_mut(n).zip(&norm_w) {
                        if w == T::ZERO {
                            continue;
                        }
                        for (o, &gv) in gprow.iter_mut().zip(g) {
                            *o += w * gv;
                        }
                    }
                    self.nodes[*x].grad = Some(gp);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn dims2_of(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        1 => (1, shape[0]),
        _ => unreachable!("ops only produce 1-D/2-D nodes"),
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], c: T) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += c * s;
    }
}

/// Stable softmax of one row into `out`; returns the log-sum-exp.
fn softmax_row<T: Real>(row: &[T], out: &mut [T]) -> T {
    let mut max = row[0];
    for &v in row {
        max = max.maximum(v);
    }
    let mut sum = T::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = T::ONE / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    sum.ln() + max
}

/// `out += a @ b` for row-major `a [m,k]`, `b [k,n]`.
fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let row_fn = |(i, orow): (usize, &mut [T])| {
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MACS {
        out.par_chunks_mut(n).enumerate().for_each(row_fn);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_fn);
    }
}

/// `out += a @ b^T` for `a [m,n]`, `b [k,n]`, out `[m,k]`.
fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    let row_fn = |(i, orow): (usize, &mut [T])| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o += s;
        }
    };
    if m * n * k >= PAR_MACS {
        out.par_chunks_mut(k).enumerate().for_each(row_fn);
    } else {
        out.chunks_mut(k).enumerate().for_each(row_fn);
    }
}

/// `out += a^T @ b` for `a [m,k]`, `b [m,n]`, out `[k,n]`.
fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let row_fn = |(p, orow): (usize, &mut [T])| {
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MACS {
        out.par_chunks_mut(n).enumerate().for_each(row_fn);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_fn);
    }
}
