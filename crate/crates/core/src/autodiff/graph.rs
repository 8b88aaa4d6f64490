// SPDX-License-Identifier: Apache-2.0

//! Single-threaded reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. Parameter leaves
//! borrow their storage; only activations are owned by the graph.

use std::borrow::Cow;

use rand::Rng;

use super::real::{gemm, MatView};
use super::{Real, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp applied to probabilities before the log in BCE.
pub const BCE_EPS: f64 = 1e-7;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    MeanPool {
        x: Var,
        mask: Vec<bool>,
        counts: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    Bce {
        p: Var,
        labels: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<'p, T: Real> {
    value: Cow<'p, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of leaves after a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph<'p, T: Real = f32> {
    nodes: Vec<Node<'p, T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node holds a valid tensor")
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that owns its data.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, requires_grad)
    }

    /// Leaf that borrows external storage, typically a parameter.
    pub fn leaf_ref(&mut self, data: &'p [T], shape: &[usize], requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() || shape.is_empty() {
            return Err(TensorError::invalid(
                "leaf",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(data),
            shape: shape.to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Elementwise `a + b`; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::shapes("add", sa, sb));
        }
        let vb = self.value(b);
        let n = vb.len();
        let out: Vec<T> = self.value(a).iter().enumerate().map(|(i, &x)| x + vb[i % n]).collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, shape, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::Scale { a, c }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh_op()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::Sigmoid(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        let out = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh_op()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::Gelu(a), rg)
    }

    /// Batched `a @ b` (or `a @ b^T` with `trans_b`).
    ///
    /// `a` is `[.., m, k]`. `b` is either 2-D (shared across the batch) or
    /// has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shapes("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let batch = numel(&sa[..sa.len() - 2]);
        let b_batched = sb.len() > 2;
        if bk != k || (b_batched && sb[..sb.len() - 2] != sa[..sa.len() - 2]) {
            return Err(TensorError::shapes("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..batch {
                let am = MatView::new(&va[i * m * k..(i + 1) * m * k], m, k);
                let boff = if b_batched { i * k * n } else { 0 };
                let bs = &vb[boff..boff + k * n];
                let bm = if trans_b {
                    MatView::new(bs, n, k).t()
                } else {
                    MatView::new(bs, k, n)
                };
                gemm(T::one(), am, bm, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            shape,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                b_batched,
            },
            rg,
        ))
    }

    /// `x @ w^T + b` with `w: [out, in]` and `x: [.., in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx[sx.len() - 1] != sw[1] {
            return Err(TensorError::shapes("linear", &sx, &sw));
        }
        let (dout, din) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(TensorError::shapes("linear", &sw, self.shape(b)));
            }
        }
        let rows = numel(&sx) / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let vb = self.value(b);
            for r in out.chunks_exact_mut(dout) {
                r.copy_from_slice(vb);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatView::new(self.value(x), rows, din),
            MatView::new(self.value(w), dout, din).t(),
            beta,
            &mut out,
        );
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(dout);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            shape,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    ///
    /// `mask` marks valid positions. Consecutive blocks of `group_rows` rows
    /// share one mask row of length `n`; masked positions get exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>, group_rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let rows = numel(&shape) / n;
        if let Some(mask) = mask {
            if group_rows == 0 || !rows.is_multiple_of(group_rows) || mask.len() != (rows / group_rows) * n {
                return Err(TensorError::shapes("softmax", &shape, &[mask.len(), group_rows]));
            }
        }
        let vx = self.value(x);
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let m = mask.map(|m| &m[(r / group_rows) * n..(r / group_rows + 1) * n]);
            let valid = |j: usize| m.is_none_or(|m| m[j]);
            let row = &vx[r * n..(r + 1) * n];
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            // NaN inputs fall through and propagate.
            if !(0..n).any(valid) {
                return Err(TensorError::FullyMasked { op: "softmax", row: r });
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut sum = T::zero();
            for j in 0..n {
                if valid(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            let inv = T::one() / sum;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, shape, Op::Softmax(x), rg))
    }

    /// Normalises the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::shapes("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = numel(&shape) / d;
        let (vx, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let inv_d = T::one() / T::lit(d as f64);
        let eps = T::lit(eps);
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            shape,
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

    /// Inverted dropout. `rng = None` (evaluation) or `p == 0` returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("p must be in [0,1), got {p}")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let scale = T::lit(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() >= p { scale } else { T::zero() })
            .collect();
        let out = self.value(x).iter().zip(&keep).map(|(&a, &k)| a * k).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(out, shape, Op::Dropout { x, keep }, rg))
    }

    /// Mean over valid positions: `[b, l, d]` with mask `[b * l]` -> `[b, d]`.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || mask.len() != shape[0] * shape[1] {
            return Err(TensorError::shapes("mean_pool", &shape, &[mask.len()]));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let vx = self.value(x);
        let mut out = vec![T::zero(); b * d];
        let mut counts = Vec::with_capacity(b);
        for s in 0..b {
            let c = mask[s * l..(s + 1) * l].iter().filter(|&&m| m).count();
            if c == 0 {
                return Err(TensorError::FullyMasked {
                    op: "mean_pool",
                    row: s,
                });
            }
            counts.push(c);
            let o = &mut out[s * d..(s + 1) * d];
            for t in 0..l {
                if mask[s * l + t] {
                    let row = &vx[(s * l + t) * d..(s * l + t + 1) * d];
                    o.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
            }
            let inv = T::one() / T::lit(c as f64);
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            vec![b, d],
            Op::MeanPool {
                x,
                mask: mask.to_vec(),
                counts,
            },
            rg,
        ))
    }

    /// `[b, l, h * dk]` -> `[b * h, l, dk]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || heads == 0 || !shape[2].is_multiple_of(heads) {
            return Err(TensorError::shapes("split_heads", &shape, &[heads]));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let dk = d / heads;
        let vx = self.value(x);
        let mut out = vec![T::zero(); vx.len()];
        for s in 0..b {
            for t in 0..l {
                for h in 0..heads {
                    let src = (s * l + t) * d + h * dk;
                    let dst = ((s * heads + h) * l + t) * dk;
                    out[dst..dst + dk].copy_from_slice(&vx[src..src + dk]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, vec![b * heads, l, dk], Op::SplitHeads { x, heads }, rg))
    }

    /// `[b * h, l, dk]` -> `[b, l, h * dk]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || heads == 0 || !shape[0].is_multiple_of(heads) {
            return Err(TensorError::shapes("merge_heads", &shape, &[heads]));
        }
        let (bh, l, dk) = (shape[0], shape[1], shape[2]);
        let b = bh / heads;
        let d = heads * dk;
        let vx = self.value(x);
        let mut out = vec![T::zero(); vx.len()];
        for s in 0..b {
            for t in 0..l {
                for h in 0..heads {
                    let dst = (s * l + t) * d + h * dk;
                    let src = ((s * heads + h) * l + t) * dk;
                    out[dst..dst + dk].copy_from_slice(&vx[src..src + dk]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, vec![b, l, d], Op::MergeHeads { x, heads }, rg))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `labels`.
    pub fn bce(&mut self, p: Var, labels: &[T]) -> Result<Var> {
        let n = self.value(p).len();
        if labels.len() != n {
            return Err(TensorError::shapes("bce", self.shape(p), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(TensorError::invalid("bce", format!("label {bad:?} is not 0 or 1")));
        }
        let (lo, hi) = (T::lit(BCE_EPS), T::one() - T::lit(BCE_EPS));
        let total: T = self
            .value(p)
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.max(lo).min(hi);
                -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
            })
            .sum();
        let out = vec![total / T::lit(n as f64)];
        let rg = self.rg(&[p]);
        Ok(self.push(
            out,
            vec![1],
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::invalid("backward", "loss must be a scalar"));
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with(&self, out: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.value(out).len() {
            return Err(TensorError::shapes("backward", self.shape(out), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if wants(v) {
                let len = nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]));
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    g.iter().enumerate().for_each(|(i, &d)| gb[i % n] += d)
                });
            }
            Op::Scale { a, c } => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * *c)),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((x, &d), &t) in ga.iter_mut().zip(g).zip(y.iter()) {
                    *x += d * (T::one() - t * t);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, &d), &s) in ga.iter_mut().zip(g).zip(y.iter()) {
                    *x += d * s * (T::one() - s);
                }
            }),
            Op::Gelu(a) => {
                let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                let three = T::lit(3.0);
                let xin = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((gx, &d), &x) in ga.iter_mut().zip(g).zip(xin.iter()) {
                        let t = (c * (x + k * x * x * x)).tanh_op();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        *gx += d * (half * (T::one() + t) + half * x * dt);
                    }
                });
            }
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                b_batched,
            } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |ga| {
                    for i in 0..batch {
                        let gc = MatView::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let boff = if b_batched { i * k * n } else { 0 };
                        let bs = &vb[boff..boff + k * n];
                        // dA = dC @ B^T ; with trans_b B is stored [n, k].
                        let bt = if trans_b {
                            MatView::new(bs, n, k)
                        } else {
                            MatView::new(bs, k, n).t()
                        };
                        gemm(T::one(), gc, bt, T::one(), &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..batch {
                        let gc = MatView::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let am = MatView::new(&va[i * m * k..(i + 1) * m * k], m, k);
                        let boff = if b_batched { i * k * n } else { 0 };
                        let out = &mut gb[boff..boff + k * n];
                        if trans_b {
                            // dB[n, k] = dC^T @ A
                            gemm(T::one(), gc.t(), am, T::one(), out);
                        } else {
                            // dB[k, n] = A^T @ dC
                            gemm(T::one(), am.t(), gc, T::one(), out);
                        }
                    }
                });
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let gy = MatView::new(g, rows, dout);
                let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                acc(x, &mut |gx| {
                    gemm(T::one(), gy, MatView::new(vw, dout, din), T::one(), gx)
                });
                acc(w, &mut |gw| {
                    gemm(T::one(), gy.t(), MatView::new(vx, rows, din), T::one(), gw)
                });
                if let Some(b) = b {
                    acc(b, &mut |gb| {
                        for r in g.chunks_exact(dout) {
                            gb.iter_mut().zip(r).for_each(|(x, &d)| *x += d);
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                acc(*x, &mut |gx| {
                    for ((gr, yr), dr) in gx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
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
                let d = *node.shape.last().unwrap();
                let gv = &nodes[gamma.0].value;
                acc(*x, &mut |gx| {
                    let inv_d = T::one() / T::lit(d as f64);
                    for r in 0..rstd.len() {
                        let dy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_xh = T::zero();
                        for j in 0..d {
                            let dh = dy[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_xh += dh * xh[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_xh *= inv_d;
                        for j in 0..d {
                            let dh = dy[j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_dh - xh[j] * mean_dh_xh);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (dy, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += dy[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for dy in g.chunks_exact(d) {
                        gb.iter_mut().zip(dy).for_each(|(x, &v)| *x += v);
                    }
                });
            }
            Op::Dropout { x, keep } => acc(*x, &mut |gx| {
                for ((a, &d), &k) in gx.iter_mut().zip(g).zip(keep) {
                    *a += d * k;
                }
            }),
            Op::MeanPool { x, mask, counts } => {
                let shape = &nodes[x.0].shape;
                let (l, d) = (shape[1], shape[2]);
                acc(*x, &mut |gx| {
                    for (s, &c) in counts.iter().enumerate() {
                        let inv = T::one() / T::lit(c as f64);
                        for t in 0..l {
                            if mask[s * l + t] {
                                let dst = &mut gx[(s * l + t) * d..(s * l + t + 1) * d];
                                dst.iter_mut()
                                    .zip(&g[s * d..(s + 1) * d])
                                    .for_each(|(a, &v)| *a += v * inv);
                            }
                        }
                    }
                });
            }
            &Op::SplitHeads { x, heads } => {
                let shape = &nodes[x.0].shape;
                let (b, l, d) = (shape[0], shape[1], shape[2]);
                let dk = d / heads;
                acc(x, &mut |gx| {
                    for s in 0..b {
                        for t in 0..l {
                            for h in 0..heads {
                                let dst = (s * l + t) * d + h * dk;
                                let src = ((s * heads + h) * l + t) * dk;
                                gx[dst..dst + dk]
                                    .iter_mut()
                                    .zip(&g[src..src + dk])
                                    .for_each(|(a, &v)| *a += v);
                            }
                        }
                    }
                });
            }
            &Op::MergeHeads { x, heads } => {
                let shape = &nodes[x.0].shape;
                let (bh, l, dk) = (shape[0], shape[1], shape[2]);
                let (b, d) = (bh / heads, heads * dk);
                acc(x, &mut |gx| {
                    for s in 0..b {
                        for t in 0..l {
                            for h in 0..heads {
                                let src = (s * l + t) * d + h * dk;
                                let dst = ((s * heads + h) * l + t) * dk;
                                gx[dst..dst + dk]
                                    .iter_mut()
                                    .zip(&g[src..src + dk])
                                    .for_each(|(a, &v)| *a += v);
                            }
                        }
                    }
                });
            }
            Op::Bce { p, labels } => {
                let vp = &nodes[p.0].value;
                let inv_n = T::one() / T::lit(labels.len() as f64);
                let (lo, hi) = (T::lit(BCE_EPS), T::one() - T::lit(BCE_EPS));
                acc(*p, &mut |gp| {
                    for ((gx, &pv), &yv) in gp.iter_mut().zip(vp.iter()).zip(labels) {
                        let pc = pv.max(lo).min(hi);
                        *gx += g[0] * inv_n * (-(yv / pc) + (T::one() - yv) / (T::one() - pc));
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_softmax() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![4]), false);
        let y = g.softmax(x, None, 1).unwrap();
        assert_eq!(g.value(y), [0.25; 4]);
    }

    #[test]
    fn masked_softmax_zeroes_and_errors() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap(),
            false,
        );
        let y = g.softmax(x, Some(&[true, false, true]), 2).unwrap();
        let v = g.value(y);
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!(matches!(
            g.softmax(x, Some(&[false, false, false]), 2),
            Err(TensorError::FullyMasked { .. })
        ));
    }

    #[test]
    fn tanh_grad_at_zero_is_one() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.tanh(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), [1.0]);
    }

    #[test]
    fn bce_values_and_grad() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.leaf(Tensor::scalar(0.5), true);
        let l = g.bce(p, &[1.0]).unwrap();
        assert!((g.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        assert!((grads.get(p).unwrap()[0] + 2.0).abs() < 1e-12);

        let p2 = g.leaf(Tensor::scalar(1.0 - 1e-7), false);
        let l2 = g.bce(p2, &[1.0]).unwrap();
        assert!(g.value(l2)[0] < 1.1e-7);
        assert!(g.bce(p2, &[0.5]).is_err());
        // p = 1 exactly is clamped and stays finite.
        let p3 = g.leaf(Tensor::scalar(1.0), false);
        let l3 = g.bce(p3, &[0.0]).unwrap();
        assert!(g.value(l3)[0].is_finite());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = g.leaf(Tensor::zeros(vec![4, 5]), false);
        let err = g.matmul(a, b, false).unwrap_err();
        assert_eq!(err.to_string(), "matmul: shape mismatch [2, 3] vs [4, 5]");
        assert!(g.add(a, b).is_err());
        assert!(g.linear(a, b, None).is_err());
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g: Graph<f32> = Graph::new();
        let w = g.leaf(Tensor::from_fn(vec![2, 2], |i| i as f32), false);
        let x = g.leaf(Tensor::from_fn(vec![1, 2], |i| i as f32 + 1.0), true);
        let y = g.linear(x, w, None).unwrap();
        let grads = g.backward_with(y, vec![1.0, 1.0]).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn split_merge_round_trip() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(Tensor::from_fn(vec![2, 3, 8], |i| i as f32), false);
        let s = g.split_heads(x, 4).unwrap();
        assert_eq!(g.shape(s), [8, 3, 2]);
        // Sample 0, position 1, head 2 -> features 4..6.
        assert_eq!(&g.value(s)[(2 * 3 + 1) * 2..(2 * 3 + 1) * 2 + 2], &[12.0, 13.0]);
        let m = g.merge_heads(s, 4).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(Tensor::from_fn(vec![10], |i| i as f32), false);
        let y = g.dropout::<rand_chacha::ChaCha8Rng>(x, 0.5, None).unwrap();
        assert_eq!(x, y);
    }
}
