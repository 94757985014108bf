//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. Nodes only reference earlier nodes, so walking the
//! tape from the loss towards index zero visits a valid reverse topological
//! order and touches each node once.
//!
//! All matrix ops view a tensor as `rows × cols` where `cols` is the last
//! extent. A node requires a gradient iff it is a trainable leaf or any of its
//! inputs requires one; subgraphs built only from frozen values are skipped
//! during `backward`.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice { x: Var, row0: usize, col0: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    NormalizeRows { x: Var, norms: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Transpose(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Tensor<T>>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    /// NaN/Inf scanning of every op output follows `debug_assertions`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product of `a` (`m×k`) and `b` (`k×n`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a` (`m×k`) and `b` (`n×k`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, &[a, b], Op::MatMul { a, b, trans_b })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(op, value, &[a, b], node)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(bias).numel() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let v = self.value(x);
        let data = v
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&p, &q)| p + q))
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push("add_row", value, &[x, bias], Op::AddRow { x, bias })
    }

    fn map(&mut self, op: &'static str, x: Var, f: impl Fn(T) -> T, node: Op<T>) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&p| f(p)).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push(op, value, &[x], node)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.map("scale", x, |p| p * s, Op::Scale(x, s))
    }

    /// `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |p| if p > T::zero() { p } else { T::zero() }, Op::Relu(x))
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, |p| T::from_f64(gelu_parts(p.to_f64()).0), Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map("abs", x, |p| p.abs(), Op::Abs(x))
    }

    /// Row-wise softmax over the last axis. `allowed`, when given, has one flag
    /// per element; disallowed entries get probability exactly zero. A row with
    /// no allowed entries is all zeros.
    pub fn softmax(&mut self, x: Var, allowed: Option<&Rc<[bool]>>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(m) = allowed {
            if m.len() != r * c {
                return Err(Error::shape("softmax", self.shape(x), &[m.len()]));
            }
        }
        let v = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let ok = |j: usize| allowed.map_or(true, |m| m[i * c + j]);
            let mut mx = T::neg_infinity();
            for (j, &p) in row.iter().enumerate() {
                if ok(j) && p > mx {
                    mx = p;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for (j, &p) in row.iter().enumerate() {
                if ok(j) {
                    let e = (p - mx).exp();
                    out[i * c + j] = e;
                    total = total + e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o = *o / total;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("softmax", value, &[x], Op::Softmax(x))
    }

    /// Row-wise normalization to zero mean and unit variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let v = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::from_f64(c as f64);
        let eps = T::from_f64(LN_EPS);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mean = row.iter().fold(T::zero(), |s, &p| s + p) / n;
            let var = row.iter().fold(T::zero(), |s, &p| s + (p - mean) * (p - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Mean negative log-likelihood of `targets` (one per row) under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target id {bad} outside vocabulary of {c}")));
        }
        let v = self.value(logits).data();
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mx = row.iter().fold(T::neg_infinity(), |m, &p| m.max(p));
            let total = row.iter().fold(T::zero(), |s, &p| s + (p - mx).exp());
            let lse = mx + total.ln();
            loss = loss + lse - row[targets[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / T::from_f64(r as f64));
        self.push(
            "cross_entropy",
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Gathers rows of `table` (`vocab×h`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, h) = self.matrix_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index(format!("id {bad} outside table of {vocab} rows")));
        }
        let t = self.value(table);
        let data = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let value = Tensor::new(vec![ids.len(), h], data)?;
        self.push(
            "embedding",
            value,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| Error::Input("concat of nothing".into()))?;
        for &p in parts {
            if self.dims(p).0 != r {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        self.push("concat_cols", value, parts, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let mut out = Vec::new();
        for &p in parts {
            if self.dims(p).1 != c {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c;
        let value = Tensor::new(vec![r, c], out)?;
        self.push("concat_rows", value, parts, Op::ConcatRows(parts.to_vec()))
    }

    /// Rectangular block `[row0, row0+rows) × [col0, col0+cols)`.
    pub fn slice(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if rows == 0 || cols == 0 || row0 + rows > r || col0 + cols > c {
            return Err(Error::Index(format!(
                "slice rows {row0}+{rows} cols {col0}+{cols} of {r}x{c}"
            )));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&v.row(i)[col0..col0 + cols]);
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push("slice", value, &[x], Op::Slice { x, row0, col0 })
    }

    /// Splits columns into consecutive blocks of the given widths.
    pub fn split_cols(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let (r, c) = self.dims(x);
        if widths.iter().sum::<usize>() != c {
            return Err(Error::shape("split_cols", self.shape(x), widths));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice(x, 0, r, start, w)?);
            start += w;
        }
        Ok(out)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if rows.is_empty() {
            return Err(Error::Input("select_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} of {r}")));
        }
        let v = self.value(x);
        let data = rows.iter().flat_map(|&i| v.row(i).iter().copied()).collect();
        let value = Tensor::new(vec![rows.len(), c], data)?;
        self.push(
            "select_rows",
            value,
            &[x],
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().fold(T::zero(), |a, &b| a + b) / T::from_f64(v.numel() as f64);
        self.push("mean", Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let v = self.value(x).data();
        let floor = T::from_f64(1e-12);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let n = row.iter().fold(T::zero(), |s, &p| s + p * p).sqrt().max(floor);
            norms.push(n);
            out.extend(row.iter().map(|&p| p / n));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("normalize_rows", value, &[x], Op::NormalizeRows { x, norms })
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged without recording a node.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout rate {p} must be below 1")));
        }
        let keep = T::from_f64(1.0 / (1.0 - p as f64));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f32>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push("dropout", value, &[x], Op::Dropout { x, mask })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let v = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, &[x], Op::Transpose(x))
    }

    /// Populates gradients of every trainable leaf reachable from `loss`.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients do not
    /// persist, so two passes over two losses sum exactly like one pass over
    /// their sum.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes[..i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul { a, b, trans_b } => {
                    let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let nn = out.cols();
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    accumulate(&mut grads, nodes, *a, |ga| {
                        T::gemm(m, nn, k, &g, false, bv, !trans_b, ga, true)
                    });
                    accumulate(&mut grads, nodes, *b, |gb| {
                        if *trans_b {
                            T::gemm(nn, m, k, &g, true, av, false, gb, true)
                        } else {
                            T::gemm(k, m, nn, av, true, &g, false, gb, true)
                        }
                    });
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, nodes, *a, |ga| add_into(ga, &g));
                    accumulate(&mut grads, nodes, *b, |gb| add_into(gb, &g));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, nodes, *a, |ga| add_into(ga, &g));
                    accumulate(&mut grads, nodes, *b, |gb| {
                        gb.iter_mut().zip(&g).for_each(|(d, &s)| *d = *d - s)
                    });
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    accumulate(&mut grads, nodes, *a, |ga| {
                        for ((d, &s), &o) in ga.iter_mut().zip(&g).zip(bv) {
                            *d = *d + s * o;
                        }
                    });
                    accumulate(&mut grads, nodes, *b, |gb| {
                        for ((d, &s), &o) in gb.iter_mut().zip(&g).zip(av) {
                            *d = *d + s * o;
                        }
                    });
                }
                Op::AddRow { x, bias } => {
                    let c = out.cols();
                    accumulate(&mut grads, nodes, *x, |gx| add_into(gx, &g));
                    accumulate(&mut grads, nodes, *bias, |gb| {
                        for row in g.chunks(c) {
                            add_into(gb, row);
                        }
                    });
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, nodes, *x, |gx| {
                        gx.iter_mut().zip(&g).for_each(|(d, &u)| *d = *d + u * *s)
                    });
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for ((d, &u), &p) in gx.iter_mut().zip(&g).zip(xv) {
                            if p > T::zero() {
                                *d = *d + u;
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for ((d, &u), &p) in gx.iter_mut().zip(&g).zip(xv) {
                            *d = *d + u * T::from_f64(gelu_parts(p.to_f64()).1);
                        }
                    });
                }
                Op::Abs(x) => {
                    let xv = nodes[x.0].value.data();
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for ((d, &u), &p) in gx.iter_mut().zip(&g).zip(xv) {
                            if p > T::zero() {
                                *d = *d + u;
                            } else if p < T::zero() {
                                *d = *d - u;
                            }
                        }
                    });
                }
                Op::Softmax(x) => {
                    let c = out.cols();
                    let y = out.data();
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                            let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                            for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                                *d = *d + yy * (gg - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let c = out.cols();
                    let gv = nodes[gain.0].value.data();
                    let n = T::from_f64(c as f64);
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for (i, ((gr, hr), dr)) in
                            g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate()
                        {
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..c {
                                let dh = gr[j] * gv[j];
                                s1 = s1 + dh;
                                s2 = s2 + dh * hr[j];
                            }
                            let (m1, m2) = (s1 / n, s2 / n);
                            for j in 0..c {
                                let dh = gr[j] * gv[j];
                                dr[j] = dr[j] + rstd[i] * (dh - m1 - hr[j] * m2);
                            }
                        }
                    });
                    accumulate(&mut grads, nodes, *gain, |gg| {
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] = gg[j] + gr[j] * hr[j];
                            }
                        }
                    });
                    accumulate(&mut grads, nodes, *bias, |gb| {
                        for gr in g.chunks(c) {
                            add_into(gb, gr);
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = nodes[logits.0].value.cols();
                    let scale = g[0] / T::from_f64(targets.len() as f64);
                    accumulate(&mut grads, nodes, *logits, |gl| {
                        for (i, (pr, dr)) in probs.chunks(c).zip(gl.chunks_mut(c)).enumerate() {
                            for j in 0..c {
                                let hit = if j == targets[i] { T::one() } else { T::zero() };
                                dr[j] = dr[j] + scale * (pr[j] - hit);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let h = out.cols();
                    accumulate(&mut grads, nodes, *table, |gt| {
                        for (row, &id) in g.chunks(h).zip(ids) {
                            add_into(&mut gt[id * h..(id + 1) * h], row);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let mut start = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.cols();
                        accumulate(&mut grads, nodes, p, |gp| {
                            for (gr, dr) in g.chunks(total).zip(gp.chunks_mut(w)) {
                                add_into(dr, &gr[start..start + w]);
                            }
                        });
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.numel();
                        accumulate(&mut grads, nodes, p, |gp| add_into(gp, &g[start..start + len]));
                        start += len;
                    }
                }
                Op::Slice { x, row0, col0 } => {
                    let (rows, cols) = (out.rows(), out.cols());
                    let c = nodes[x.0].value.cols();
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for i in 0..rows {
                            let dst = &mut gx[(row0 + i) * c + col0..(row0 + i) * c + col0 + cols];
                            add_into(dst, &g[i * cols..(i + 1) * cols]);
                        }
                    });
                }
                Op::SelectRows { x, rows } => {
                    let c = out.cols();
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for (gr, &r) in g.chunks(c).zip(rows) {
                            add_into(&mut gx[r * c..(r + 1) * c], gr);
                        }
                    });
                }
                Op::Sum(x) => {
                    accumulate(&mut grads, nodes, *x, |gx| gx.iter_mut().for_each(|d| *d = *d + g[0]));
                }
                Op::Mean(x) => {
                    let s = g[0] / T::from_f64(nodes[x.0].value.numel() as f64);
                    accumulate(&mut grads, nodes, *x, |gx| gx.iter_mut().for_each(|d| *d = *d + s));
                }
                Op::NormalizeRows { x, norms } => {
                    let c = out.cols();
                    let y = out.data();
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for (i, ((yr, gr), dr)) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                            let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                            for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                                *d = *d + (gg - yy * dot) / norms[i];
                            }
                        }
                    });
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for ((d, &u), &m) in gx.iter_mut().zip(&g).zip(mask) {
                            *d = *d + u * m;
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (r, c) = (out.rows(), out.cols());
                    accumulate(&mut grads, nodes, *x, |gx| {
                        // out is r×c, x is c×r
                        for i in 0..r {
                            for j in 0..c {
                                gx[j * r + i] = gx[j * r + i] + g[i * c + j];
                            }
                        }
                    });
                }
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(existing) => add_into(existing.data_mut(), &g),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
    f(buf);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f32>::new();
        let i = tape.constant(Tensor::eye(2));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 4., 5., 6.]);

        let r = tape.constant(t(&[1, 2], &[1., 2.]));
        let col = tape.constant(t(&[2, 1], &[3., 4.]));
        let p = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(p).data(), &[11.]);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(t(&[3, 2], &[1., -2., 3.5, 4., 5., 6.]));
        let zz = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(zz).data(), &[0.; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 3], &[-1., 0., 2.]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);

        let neg = tape.constant(t(&[1, 2], &[-3., -0.5]));
        let yn = tape.relu(neg).unwrap();
        assert_eq!(tape.value(yn).data(), &[0., 0.]);

        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 2], &[-1., 2.]), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0., 1.]);
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 3], &[0., 0., 0.]));
        let y = tape.softmax(x, None).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        let mask: Rc<[bool]> = vec![true, false, true].into();
        let ym = tape.softmax(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(ym).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn layer_norm_moments() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 3], &[1., 2., 3.]));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let v = tape.value(y).data();
        let mean: f32 = v.iter().sum::<f32>() / 3.0;
        let var: f32 = v.iter().map(|p| (p - mean) * (p - mean)).sum::<f32>() / 3.0;
        assert!(mean.abs() < 1e-5);
        // eps in the denominator pulls the variance slightly below one
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }

    #[test]
    fn cross_entropy_decreases_with_margin() {
        let mut last = f32::INFINITY;
        for margin in [0.0f32, 1.0, 2.0, 4.0] {
            let mut tape = Tape::<f32>::new();
            let l = tape.constant(t(&[1, 3], &[margin, 0., 0.]));
            let loss = tape.cross_entropy(l, &[0]).unwrap();
            let v = tape.value(loss).item();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.cross_entropy(l, &[0, 3]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]), false);
        let x = tape.leaf(t(&[1, 2], &[1., 1.]), true);
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn non_finite_outputs_are_reported_when_checking() {
        let mut tape = Tape::<f32>::new().with_finite_checks(true);
        let x = tape.constant(t(&[1, 1], &[f32::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite("scale"))));
        let mut tape = Tape::<f32>::new().with_finite_checks(false);
        let x = tape.constant(t(&[1, 1], &[f32::MAX]));
        assert!(tape.scale(x, 10.0).is_ok());
    }
}
