//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that depends on a leaf created with [`Graph::param`].
//! Shape errors are programming errors and panic.

use super::kernels::{self, gelu_grad, normalize_row, sigmoid, softmax_row};
use super::tensor::{dot, matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Abs,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Gelu,
    Relu,
    Sin,
    Cos,
    Square,
    Recip,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    Unary(Var, Unary),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    NormalizeRows(Var, Vec<f64>),
    RowDot(Var, Var),
    RowNorm(Var),
    ReverseGrad(Var, f64),
    EmaScan(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` is not on
    /// a differentiable path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Same as [`get`](Self::get) but zero-filled for nodes that received no
    /// gradient.
    pub fn tensor(&self, v: Var) -> Tensor {
        let [r, c] = self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::raw(r, c, g.to_vec()),
            None => Tensor::zeros(r, c),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copies the current value of `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul {m}x{k} by {k2}x{n}");
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::raw(m, n, out), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`; with `b` a `[out × in]` weight this is the usual linear map
    /// applied to the rows of `a`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_bt {m}x{k} by ({n}x{k2})ᵀ");
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::raw(m, n, out), Op::MatMulBt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(t, Op::Transpose(a), ng)
    }

    // ---- element-wise ---------------------------------------------------

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "element-wise shape mismatch");
        let (m, n) = self.dims(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::raw(m, n, out), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 × n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.shape(row), [1, n], "add_row shape");
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(Tensor::raw(m, n, out), Op::AddRow(a, row), ng)
    }

    /// Scales row `i` of `a` by entry `i` of the `m × 1` column `col`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.shape(col), [m, 1], "mul_col shape");
        let c = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for (chunk, s) in out.chunks_mut(n).zip(c) {
            for o in chunk.iter_mut() {
                *o *= s;
            }
        }
        let ng = self.ng(&[a, col]);
        self.push(Tensor::raw(m, n, out), Op::MulCol(a, col), ng)
    }

    /// Multiplies every entry of `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), [1, 1], "scale_by expects a scalar node");
        let k = self.item(s);
        let t = self.value(a).map(|x| x * k);
        let ng = self.ng(&[a, s]);
        self.push(t, Op::ScaleBy(a, s), ng)
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(&[a]);
        self.push(t, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    /// Element-wise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const shape");
        let (m, n) = self.dims(a);
        let out = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::raw(m, n, out), Op::MulConst(a, c.data().to_vec()), ng)
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let f: fn(f64) -> f64 = match u {
            Unary::Abs => f64::abs,
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Gelu => kernels::gelu,
            Unary::Relu => |x| x.max(0.0),
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Square => |x| x * x,
            Unary::Recip => |x| 1.0 / x,
        };
        let t = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(t, Op::Unary(a, u), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    /// `a^p` for positive entries.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let t = self.value(a).map(|x| x.powf(p));
        let ng = self.ng(&[a]);
        self.push(t, Op::Pow(a, p), ng)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(&[a]);
        self.push(t, Op::Clamp(a, lo, hi), ng)
    }

    // ---- reductions and reshaping --------------------------------------

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `m × 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).data().chunks(n).map(|r| r.iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::raw(m, 1, out), Op::SumRows(a), ng)
    }

    /// Per-column sums, `1 × n`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = vec![0.0; n];
        for r in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let _ = m;
        let ng = self.ng(&[a]);
        self.push(Tensor::raw(1, n, out), Op::SumCols(a), ng)
    }

    /// Column-wise mean, `1 × n`.
    pub fn mean_rows_of(&mut self, a: Var) -> Var {
        let m = self.dims(a).0 as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / m)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.dims(parts[0]).0;
        assert!(parts.iter().all(|&p| self.dims(p).0 == m), "concat_cols row mismatch");
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = self.ng(parts);
        self.push(Tensor::raw(m, n, out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.dims(parts[0]).1;
        assert!(parts.iter().all(|&p| self.dims(p).1 == n), "concat_rows col mismatch");
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n;
        let ng = self.ng(parts);
        self.push(Tensor::raw(m, n, out), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Rows of `a` selected (with repetition allowed) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        assert!(!idx.is_empty(), "gather_rows with no indices");
        let (m, n) = self.dims(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "gather_rows index {i} out of {m}");
            out.extend_from_slice(self.value(a).row(i));
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::raw(idx.len(), n, out), Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(width > 0 && start + width <= n, "slice_cols out of range");
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&self.value(a).row(i)[start..start + width]);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::raw(m, width, out), Op::SliceCols(a, start), ng)
    }

    // ---- fused kernels -------------------------------------------------

    /// Row-wise layer normalisation with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(self.shape(gain), [1, n], "layer_norm gain shape");
        assert_eq!(self.shape(bias), [1, n], "layer_norm bias shape");
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for (src, dst) in self.value(x).data().chunks(n).zip(xhat.chunks_mut(n)) {
            inv_std.push(normalize_row(src, dst, eps));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for ((o, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            Tensor::raw(m, n, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::raw(m, n, out), Op::Softmax(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::raw(m, n, out), Op::LogSoftmax(a), ng)
    }

    /// Multi-head scaled dot-product attention over consecutive row segments.
    ///
    /// `q`, `k`, `v` are `N × d` with `N` a multiple of `seq_len`; rows
    /// `s·seq_len .. (s+1)·seq_len` form one independent sequence. Columns
    /// are split into `heads` contiguous blocks of width `d / heads`, and
    /// scores are scaled by `1/sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (rows, d) = self.dims(q);
        assert_eq!(self.shape(k), [rows, d], "attention key shape");
        assert_eq!(self.shape(v), [rows, d], "attention value shape");
        assert!(seq_len > 0 && rows % seq_len == 0, "rows {rows} not a multiple of {seq_len}");
        assert!(heads > 0 && d % heads == 0, "d={d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_seq = rows / seq_len;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * d];
        for s in 0..n_seq {
            for h in 0..heads {
                let pb = &mut probs[(s * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let qi = &qd[(s * seq_len + i) * d + h * dh..][..dh];
                    let row = &mut pb[i * seq_len..(i + 1) * seq_len];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kd[(s * seq_len + j) * d + h * dh..][..dh];
                        *r = dot(qi, kj) * scale;
                    }
                    softmax_row(row);
                    let oi = &mut out[(s * seq_len + i) * d + h * dh..][..dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vd[(s * seq_len + j) * d + h * dh..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            Tensor::raw(rows, d, out),
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Attention probabilities recorded by an [`attention`](Self::attention)
    /// node, laid out as `[sequence][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero and pass no
    /// gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_mut(n) {
            let nrm = dot(row, row).sqrt();
            norms.push(nrm);
            if nrm > 0.0 {
                row.iter_mut().for_each(|v| *v /= nrm);
            }
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::raw(m, n, out), Op::NormalizeRows(a, norms), ng)
    }

    /// Per-row inner products, `m × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "row_dot shape");
        let (m, n) = self.dims(a);
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .zip(self.value(b).data().chunks(n))
            .map(|(x, y)| dot(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::raw(m, 1, out), Op::RowDot(a, b), ng)
    }

    /// Per-row L2 norms, `m × 1`. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).data().chunks(n).map(|r| dot(r, r).sqrt()).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::raw(m, 1, out), Op::RowNorm(a), ng)
    }

    /// Row-wise cosine similarity, `m × 1`; zero when either row is zero.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let na = self.normalize_rows(a);
        let nb = self.normalize_rows(b);
        self.row_dot(na, nb)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-alpha` on the backward pass.
    pub fn reverse_grad(&mut self, a: Var, alpha: f64) -> Var {
        let t = self.value(a).clone();
        let ng = self.ng(&[a]);
        self.push(t, Op::ReverseGrad(a, alpha), ng)
    }

    /// Exponential smoothing down an `n × 1` column:
    /// `out_w = beta · out_{w-1} + (1 - beta) · a_w` with `out_{-1} = 0`.
    pub fn ema_scan(&mut self, a: Var, beta: f64) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(n, 1, "ema_scan expects a column");
        let mut out = Vec::with_capacity(m);
        let mut prev = 0.0;
        for &x in self.value(a).data() {
            prev = beta * prev + (1.0 - beta) * x;
            out.push(prev);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::raw(m, 1, out), Op::EmaScan(a, beta), ng)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from the `1 × 1` node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), [1, 1], "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let (m, n) = (node.value.rows(), node.value.cols());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.dims(*a);
                if let Some(ga) = self.slot(*a, grads) {
                    // dA = dC · Bᵀ
                    matmul_bt_into(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    // dB = Aᵀ · dC
                    matmul_at_into(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (_, k) = self.dims(*a);
                if let Some(ga) = self.slot(*a, grads) {
                    // dA = dC · B
                    matmul_into(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    // dB = dCᵀ · A
                    matmul_at_into(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                accumulate(self.slot(*a, grads), g, 1.0);
                accumulate(self.slot(*b, grads), g, 1.0);
            }
            Op::Sub(a, b) => {
                accumulate(self.slot(*a, grads), g, 1.0);
                accumulate(self.slot(*b, grads), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(*a, grads) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                accumulate(self.slot(*a, grads), g, 1.0);
                if let Some(gr) = self.slot(*row, grads) {
                    for chunk in g.chunks(n) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a).data(), self.value(*col).data());
                if let Some(ga) = self.slot(*a, grads) {
                    for (i, s) in cv.iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * s;
                        }
                    }
                }
                if let Some(gc) = self.slot(*col, grads) {
                    for (i, o) in gc.iter_mut().enumerate() {
                        *o += dot(&g[i * n..(i + 1) * n], &av[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.item(*s);
                accumulate(self.slot(*a, grads), g, k);
                if let Some(gs) = self.slot(*s, grads) {
                    gs[0] += dot(g, self.value(*a).data());
                }
            }
            Op::Affine(a, scale) => accumulate(self.slot(*a, grads), g, *scale),
            Op::MulConst(a, c) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for ((o, gi), ci) in ga.iter_mut().zip(g).zip(c) {
                        *o += gi * ci;
                    }
                }
            }
            Op::Unary(a, u) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(*a, grads) {
                    for i in 0..ga.len() {
                        let d = match u {
                            Unary::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => out[i],
                            Unary::Ln => 1.0 / x[i],
                            Unary::Tanh => 1.0 - out[i] * out[i],
                            Unary::Sigmoid => out[i] * (1.0 - out[i]),
                            Unary::Gelu => gelu_grad(x[i]),
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sin => x[i].cos(),
                            Unary::Cos => -x[i].sin(),
                            Unary::Square => 2.0 * x[i],
                            Unary::Recip => -out[i] * out[i],
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Pow(a, p) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(*a, grads) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * p * x[i].powf(p - 1.0);
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(*a, grads) {
                    for i in 0..ga.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SumRows(a) => {
                let an = self.dims(*a).1;
                if let Some(ga) = self.slot(*a, grads) {
                    for (chunk, gi) in ga.chunks_mut(an).zip(g) {
                        chunk.iter_mut().for_each(|o| *o += gi);
                    }
                }
            }
            Op::SumCols(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for chunk in ga.chunks_mut(n) {
                        for (o, gi) in chunk.iter_mut().zip(g) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    // out is n_a x m_a = m x n, so a is n x m
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if let Some(gp) = self.slot(p, grads) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(self.slot(p, grads), &g[offset..offset + len], 1.0);
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let an = self.dims(*a).1;
                if let Some(ga) = self.slot(*a, grads) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * an + start + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                if let Some(gx) = self.slot(*x, grads) {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dot(&dxhat, xh);
                        let k = inv_std[i] / nf;
                        for j in 0..n {
                            gx[i * n + j] += k * (nf * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
                if let Some(gg) = self.slot(*gain, grads) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(*bias, grads) {
                    for chunk in g.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for i in 0..m {
                        let y = &out[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s = dot(y, gr);
                        for j in 0..n {
                            ga[i * n + j] += y[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for i in 0..m {
                        let y = &out[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[i * n + j] += gr[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *seq_len, *heads, probs, g, grads),
            Op::NormalizeRows(a, norms) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for (i, &nrm) in norms.iter().enumerate() {
                        if nrm == 0.0 {
                            continue;
                        }
                        let y = &out[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s = dot(y, gr);
                        for j in 0..n {
                            ga[i * n + j] += (gr[j] - y[j] * s) / nrm;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let an = self.dims(*a).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(*a, grads) {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..an {
                            ga[i * an + j] += gi * bv[i * an + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..an {
                            gb[i * an + j] += gi * av[i * an + j];
                        }
                    }
                }
            }
            Op::RowNorm(a) => {
                let an = self.dims(*a).1;
                let av = self.value(*a).data();
                if let Some(ga) = self.slot(*a, grads) {
                    for (i, (gi, nrm)) in g.iter().zip(out).enumerate() {
                        if *nrm == 0.0 {
                            continue;
                        }
                        for j in 0..an {
                            ga[i * an + j] += gi * av[i * an + j] / nrm;
                        }
                    }
                }
            }
            Op::ReverseGrad(a, alpha) => accumulate(self.slot(*a, grads), g, -alpha),
            Op::EmaScan(a, beta) => {
                if let Some(ga) = self.slot(*a, grads) {
                    let mut carry = 0.0;
                    for w in (0..m).rev() {
                        carry = g[w] + beta * carry;
                        ga[w] += (1.0 - beta) * carry;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, d) = self.dims(q);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_seq = rows / seq_len;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq_len];
        for s in 0..n_seq {
            for h in 0..heads {
                let pb = &probs[(s * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let gi = &g[(s * seq_len + i) * d + h * dh..][..dh];
                    let prow = &pb[i * seq_len..(i + 1) * seq_len];
                    for j in 0..seq_len {
                        let vj = &vd[(s * seq_len + j) * d + h * dh..][..dh];
                        dp[j] = dot(gi, vj);
                        let dvj = &mut dv[(s * seq_len + j) * d + h * dh..][..dh];
                        for (o, x) in dvj.iter_mut().zip(gi) {
                            *o += prow[j] * x;
                        }
                    }
                    let sdp = dot(prow, &dp);
                    let qi_off = (s * seq_len + i) * d + h * dh;
                    for j in 0..seq_len {
                        let ds = prow[j] * (dp[j] - sdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj_off = (s * seq_len + j) * d + h * dh;
                        for c in 0..dh {
                            dq[qi_off + c] += ds * kd[kj_off + c];
                            dk[kj_off + c] += ds * qd[qi_off + c];
                        }
                    }
                }
            }
        }
        accumulate(self.slot(q, grads), &dq, 1.0);
        accumulate(self.slot(k, grads), &dk, 1.0);
        accumulate(self.slot(v, grads), &dv, 1.0);
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v` does
    /// not need a gradient.
    fn slot<'a>(&self, v: Var, grads: &'a mut [Option<Vec<f64>>]) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

fn accumulate(dst: Option<&mut [f64]>, src: &[f64], k: f64) {
    if let Some(dst) = dst {
        for (o, s) in dst.iter_mut().zip(src) {
            *o += k * s;
        }
    }
}
