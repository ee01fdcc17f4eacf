//! Single-use reverse-mode tape.
//!
//! A [`Graph`] records one forward pass. Calling [`Graph::backward`] consumes
//! it: intermediate values are dropped and only leaf gradients remain.

use super::ops::softmax_rows;
use super::{numel, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    MaskedNll {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    state: TapeState,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            state: TapeState::Recording,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_recording(&self) -> Result<()> {
        match self.state {
            TapeState::Recording => Ok(()),
            TapeState::Consumed => Err(TensorError::Contract(
                "tape already consumed by backward; re-run the forward pass".into(),
            )),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Forward value of a node. Empty once the tape has been consumed
    /// (leaves excepted).
    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor<T>> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Records a tensor as a leaf. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.check_recording()?;
        Ok(self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        ))
    }

    /// Records a constant leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.check_recording()?;
        if numel(&shape) != data.len() {
            return Err(TensorError::Dimension {
                op: "constant",
                msg: format!("shape {shape:?} does not hold {} values", data.len()),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Dimension {
                op,
                msg: format!("expected a matrix, got shape {:?}", self.shape(v)),
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_recording()?;
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            T::ZERO,
            &mut out,
        );
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`; the natural layout for `x W^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_recording()?;
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (1, k as isize),
            T::ZERO,
            &mut out,
        );
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), ng))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, bool)> {
        self.check_recording()?;
        self.same_shape(a, b, op)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((out, self.requires_grad(a) || self.requires_grad(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ng) = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ng) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ng) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    /// Adds a `[d]` vector to every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.check_recording()?;
        let (_, d) = self.matrix_dims(a, "add_row")?;
        if self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.requires_grad(a) || self.requires_grad(bias);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.check_recording()?;
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.requires_grad(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_recording()?;
        let total = self.value(a).iter().copied().sum();
        let ng = self.requires_grad(a);
        Ok(self.push(vec![], vec![total], Op::Sum(a), ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_recording()?;
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.requires_grad(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Gelu(a), ng))
    }

    /// Softmax over the last dimension.
    pub fn softmax_row(&mut self, a: Var) -> Result<Var> {
        self.check_recording()?;
        let width = self.shape(a).last().copied().unwrap_or(1);
        let out = softmax_rows(self.value(a), width)?;
        let ng = self.requires_grad(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), ng))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_recording()?;
        let (vocab, d) = self.matrix_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Dimension {
                op: "embedding",
                msg: "no ids given".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Dimension {
                op: "embedding",
                msg: format!("id {bad} outside table of {vocab} rows"),
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let ng = self.requires_grad(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise layer normalization with affine parameters `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_recording()?;
        let (n, d) = self.matrix_dims(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let (g, b, xs) = (self.value(gamma), self.value(beta), self.value(x));
        let mut out = vec![T::ZERO; n * d];
        let mut xhat = vec![T::ZERO; n * d];
        let mut rstd = vec![T::ZERO; n];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::ONE / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            vec![n, d],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head causal self-attention over pre-projected `q`, `k`, `v`
    /// (each `[n, d]`, heads laid out as contiguous column blocks).
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.check_recording()?;
        let (n, d) = self.matrix_dims(q, "causal_attention")?;
        self.same_shape(q, k, "causal_attention")?;
        self.same_shape(q, v, "causal_attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Dimension {
                op: "causal_attention",
                msg: format!("width {d} not divisible into {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::ZERO; heads * n * n];
        let mut out = vec![T::ZERO; n * d];
        let mut row = vec![T::ZERO; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qs[i * d + off..i * d + off + dh];
                let mut max = T::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &ks[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut total = T::ZERO;
                for s in row.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let pij = row[j] / total;
                    p[j] = pij;
                    let vj = &vs[j * d + off..j * d + off + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += pij * x;
                    }
                }
            }
        }
        let ng = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        Ok(self.push(
            vec![n, d],
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Summed negative log-likelihood `-sum_t log softmax(logits_t)[target_t]`
    /// over rows where `mask[t]` is set. Unmasked targets are never read.
    pub fn masked_nll(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        self.check_recording()?;
        let (n, vocab) = self.matrix_dims(logits, "masked_nll")?;
        if targets.len() != n || mask.len() != n {
            return Err(TensorError::Dimension {
                op: "masked_nll",
                msg: format!(
                    "{n} rows but {} targets and {} mask entries",
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let xs = self.value(logits);
        let mut probs = vec![T::ZERO; n * vocab];
        let mut loss = T::ZERO;
        for t in (0..n).filter(|&t| mask[t]) {
            let target = targets[t];
            if target >= vocab {
                return Err(TensorError::Dimension {
                    op: "masked_nll",
                    msg: format!("target {target} outside vocabulary of {vocab}"),
                });
            }
            let row = &xs[t * vocab..(t + 1) * vocab];
            let p = softmax_rows(row, vocab)?;
            let max = row.iter().copied().fold(T::NEG_INFINITY, T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            loss += lse - row[target];
            probs[t * vocab..(t + 1) * vocab].copy_from_slice(&p);
        }
        let ng = self.requires_grad(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::MaskedNll {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Populates gradients of `loss` with respect to every leaf that requires
    /// them, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_recording()?;
        if self.node(loss).value.len() != 1 || self.node(loss).shape.len() > 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dout, &mut grads);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                node.value = Vec::new();
                node.op = Op::Leaf;
                grads[i] = None;
            }
        }
        self.grads = grads;
        self.state = TapeState::Consumed;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds this leaf's gradient into `tensor.grad`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.grad(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn backprop_node(&self, idx: usize, dout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            let len = nodes[v.0].value.len();
            f(grads[v.0].get_or_insert_with(|| vec![T::ZERO; len]));
        };
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if needs(*a) {
                    acc(grads, *a, &mut |g| {
                        T::gemm(m, n, k, dout, (n as isize, 1), &nodes[b.0].value, (1, n as isize), T::ONE, g)
                    });
                }
                if needs(*b) {
                    acc(grads, *b, &mut |g| {
                        T::gemm(k, m, n, &nodes[a.0].value, (1, k as isize), dout, (n as isize, 1), T::ONE, g)
                    });
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                if needs(*a) {
                    acc(grads, *a, &mut |g| {
                        T::gemm(m, n, k, dout, (n as isize, 1), &nodes[b.0].value, (k as isize, 1), T::ONE, g)
                    });
                }
                if needs(*b) {
                    acc(grads, *b, &mut |g| {
                        T::gemm(n, m, k, dout, (1, n as isize), &nodes[a.0].value, (k as isize, 1), T::ONE, g)
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc(grads, v, &mut |g| add_into(g, dout));
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(grads, *a, &mut |g| add_into(g, dout));
                }
                if needs(*b) {
                    acc(grads, *b, &mut |g| {
                        g.iter_mut().zip(dout).for_each(|(x, &d)| *x -= d)
                    });
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let other = &nodes[b.0].value;
                    acc(grads, *a, &mut |g| {
                        for ((x, &d), &o) in g.iter_mut().zip(dout).zip(other) {
                            *x += d * o;
                        }
                    });
                }
                if needs(*b) {
                    let other = &nodes[a.0].value;
                    acc(grads, *b, &mut |g| {
                        for ((x, &d), &o) in g.iter_mut().zip(dout).zip(other) {
                            *x += d * o;
                        }
                    });
                }
            }
            Op::AddRow(a, bias) => {
                if needs(*a) {
                    acc(grads, *a, &mut |g| add_into(g, dout));
                }
                if needs(*bias) {
                    let d = nodes[bias.0].value.len();
                    acc(grads, *bias, &mut |g| {
                        for row in dout.chunks_exact(d) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(grads, *a, &mut |g| {
                    g.iter_mut().zip(dout).for_each(|(x, &d)| *x += d * s)
                });
            }
            Op::Sum(a) => {
                let d = dout[0];
                acc(grads, *a, &mut |g| g.iter_mut().for_each(|x| *x += d));
            }
            Op::Gelu(a) => {
                let xs = &nodes[a.0].value;
                acc(grads, *a, &mut |g| {
                    for ((x, &d), &v) in g.iter_mut().zip(dout).zip(xs) {
                        *x += d * gelu_grad(v);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let width = node.shape.last().copied().unwrap_or(1);
                acc(grads, *a, &mut |g| {
                    for ((gr, yr), dr) in g
                        .chunks_exact_mut(width)
                        .zip(y.chunks_exact(width))
                        .zip(dout.chunks_exact(width))
                    {
                        let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for ((x, &p), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *x += p * (d - dot);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                acc(grads, *table, &mut |g| {
                    for (row, &i) in ids.iter().enumerate() {
                        add_into(&mut g[i * d..(i + 1) * d], &dout[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.len();
                let gv = &nodes[gamma.0].value;
                if needs(*gamma) {
                    acc(grads, *gamma, &mut |g| {
                        for (dr, hr) in dout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for ((x, &dy), &h) in g.iter_mut().zip(dr).zip(hr) {
                                *x += dy * h;
                            }
                        }
                    });
                }
                if needs(*beta) {
                    acc(grads, *beta, &mut |g| {
                        for dr in dout.chunks_exact(d) {
                            add_into(g, dr);
                        }
                    });
                }
                if needs(*x) {
                    let inv_d = T::from_f64(1.0 / d as f64);
                    acc(grads, *x, &mut |g| {
                        for (i, ((gr, dr), hr)) in g
                            .chunks_exact_mut(d)
                            .zip(dout.chunks_exact(d))
                            .zip(xhat.chunks_exact(d))
                            .enumerate()
                        {
                            let mut mean_dh = T::ZERO;
                            let mut mean_dh_h = T::ZERO;
                            for j in 0..d {
                                let dh = dr[j] * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[j];
                            }
                            mean_dh *= inv_d;
                            mean_dh_h *= inv_d;
                            for j in 0..d {
                                let dh = dr[j] * gv[j];
                                gr[j] += rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, d) = (nodes[q.0].shape[0], nodes[q.0].shape[1]);
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (qs, ks, vs) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut dq = vec![T::ZERO; n * d];
                let mut dk = vec![T::ZERO; n * d];
                let mut dv = vec![T::ZERO; n * d];
                let mut ds = vec![T::ZERO; n];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                        let doi = &dout[i * d + off..i * d + off + dh];
                        let mut dot = T::ZERO;
                        for j in 0..=i {
                            let vj = &vs[j * d + off..j * d + off + dh];
                            let dp: T = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            ds[j] = dp;
                            dot += p[j] * dp;
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (x, &g) in dvj.iter_mut().zip(doi) {
                                *x += p[j] * g;
                            }
                        }
                        for j in 0..=i {
                            let dsc = p[j] * (ds[j] - dot) * scale;
                            for c in 0..dh {
                                dq[i * d + off + c] += dsc * ks[j * d + off + c];
                                dk[j * d + off + c] += dsc * qs[i * d + off + c];
                            }
                        }
                    }
                }
                for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        acc(grads, var, &mut |dst| add_into(dst, &g));
                    }
                }
            }
            Op::MaskedNll {
                logits,
                targets,
                mask,
                probs,
            } => {
                let vocab = nodes[logits.0].shape[1];
                let scale = dout[0];
                acc(grads, *logits, &mut |g| {
                    for t in (0..targets.len()).filter(|&t| mask[t]) {
                        let gr = &mut g[t * vocab..(t + 1) * vocab];
                        let pr = &probs[t * vocab..(t + 1) * vocab];
                        for (x, &p) in gr.iter_mut().zip(pr) {
                            *x += scale * p;
                        }
                        gr[targets[t]] -= scale;
                    }
                });
            }
        }
    }
}
