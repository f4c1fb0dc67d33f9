use std::collections::HashMap;

use super::{ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param,
    MatMul { a: usize, b: usize, transpose_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize },
    Scale(usize, S),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize },
    MeanRows(usize),
    MeanCols(usize),
    Sum(usize),
    Dropout(usize),
    Gather { table: usize, ids: Vec<usize> },
    Pick { a: usize, ids: Vec<usize> },
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize },
    ConcatRows(Vec<usize>),
    SliceRows { a: usize, start: usize },
    RowDot(usize, usize),
    ScaleRows { a: usize, w: usize },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
    finite: bool,
    /// Op-specific saved state (layer-norm statistics, dropout mask).
    aux: Vec<S>,
}

/// Records operations in execution order. Every node's inputs precede it,
/// so a single reverse sweep visits each node exactly once.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a leaf or parameter var.
    pub fn wrt(&self, var: Var) -> Option<&[S]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients that were reached by the backward sweep.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[S])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        a: a.to_vec(),
        b: b.to_vec(),
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[usize], aux: Vec<S>) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let finite = inputs.iter().all(|&i| self.nodes[i].finite);
        debug_assert!(
            !finite || value.is_finite(),
            "non-finite output from {op:?} on finite inputs"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            finite,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let finite = value.is_finite();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad && self.grad_enabled,
            finite,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Brings a stored parameter onto the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let finite = p.value.is_finite();
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            needs_grad: p.trainable && self.grad_enabled,
            finite,
            aux: Vec::new(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(shape_err(op, other, &[])),
        }
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            S::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                transpose_b: false,
            },
            &[a.0, b.0],
            Vec::new(),
        ))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_t", a)?;
        let (n, k2) = self.dims2("matmul_t", b)?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            S::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                transpose_b: true,
            },
            &[a.0, b.0],
            Vec::new(),
        ))
    }

    // ---- elementwise ----

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op_name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a.0, b.0], Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds a `[d]` vector to every row of `a: [… × d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.value(a).cols();
        if self.value(row).len() != d || self.shape(row).len() > 1 {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { a: a.0, row: row.0 }, &[a.0, row.0], Vec::new()))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Scale(a.0, factor), &[a.0], Vec::new()))
    }

    fn map(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a.0], Vec::new()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, sigmoid, Op::Sigmoid(a.0))
    }

    /// Inverted dropout with an explicit keep-mask already scaled by
    /// `1/(1-p)`.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<S>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(shape_err("dropout", self.shape(a), &[mask.len()]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Dropout(a.0), &[a.0], mask))
    }

    // ---- row-wise normalisers ----

    /// Row softmax over `a: [m×n]`. `mask[i*n+j] == false` removes entry
    /// `(i, j)`: it behaves as an additive −∞ and receives exactly zero
    /// probability.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims2("softmax_rows", a)?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(shape_err("softmax_rows mask", &[m, n], &[mask.len()]));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let row = &x[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(None, |acc: Option<S>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(TensorError::DegenerateMask { row: i })?;
            let o = &mut out[i * n..(i + 1) * n];
            let mut total = S::zero();
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    total = total + e;
                }
            }
            o.iter_mut().for_each(|v| *v = *v / total);
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Softmax(a.0), &[a.0], Vec::new()))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("log_softmax_rows", a)?;
        let x = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::LogSoftmax(a.0), &[a.0], Vec::new()))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = S::lit(eps);
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / d;
        let inv_d = S::lit(1.0 / d as f64);
        let mut out = vec![S::zero(); xs.len()];
        // aux layout: x̂ (rows*d) followed by 1/σ per row
        let mut aux = vec![S::zero(); xs.len() + rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rstd = S::one() / (var + eps).sqrt();
            aux[xs.len() + r] = rstd;
            for j in 0..d {
                let xh = (row[j] - mean) * rstd;
                aux[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            &[x.0, gain.0, bias.0],
            aux,
        ))
    }

    // ---- reductions ----

    /// Mean over the first axis: `[m×d] → [d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, d) = self.dims2("mean_rows", a)?;
        if m == 0 {
            return Err(TensorError::EmptyInput { op: "mean_rows" });
        }
        let mut out = vec![S::zero(); d];
        for row in self.value(a).data().chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
        }
        let inv = S::lit(1.0 / m as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        let value = Tensor::new(vec![d], out)?;
        Ok(self.push(value, Op::MeanRows(a.0), &[a.0], Vec::new()))
    }

    /// Mean over the last axis: `[n×v] → [n]`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let (n, v) = self.dims2("mean_cols", a)?;
        if v == 0 {
            return Err(TensorError::EmptyInput { op: "mean_cols" });
        }
        let inv = S::lit(1.0 / v as f64);
        let out = self
            .value(a)
            .data()
            .chunks(v)
            .map(|row| row.iter().copied().sum::<S>() * inv)
            .collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(value, Op::MeanCols(a.0), &[a.0], Vec::new()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum::<S>();
        Ok(self.push(Tensor::scalar(total), Op::Sum(a.0), &[a.0], Vec::new()))
    }

    // ---- indexing ----

    /// Row lookup: `table: [V×d]`, returns `[ids.len() × d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("gather_rows", table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
            Vec::new(),
        ))
    }

    /// Selects `a[i, ids[i]]` for each row: `[n×v] → [n]`.
    pub fn pick(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2("pick", a)?;
        if ids.len() != n {
            return Err(shape_err("pick", &[n, v], &[ids.len()]));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(TensorError::Index {
                    op: "pick",
                    index: id,
                    bound: v,
                });
            }
            out.push(x[i * v + id]);
        }
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(
            value,
            Op::Pick {
                a: a.0,
                ids: ids.to_vec(),
            },
            &[a.0],
            Vec::new(),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyInput { op: "concat_cols" })?;
        let (n, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != n {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![n, total], out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::ConcatCols(ids.clone()), &ids, Vec::new()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (n, c) = self.dims2("slice_cols", a)?;
        if start + width > c {
            return Err(shape_err("slice_cols", &[n, c], &[start, width]));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            out.extend_from_slice(&x[i * c + start..i * c + start + width]);
        }
        let value = Tensor::new(vec![n, width], out)?;
        Ok(self.push(value, Op::SliceCols { a: a.0, start }, &[a.0], Vec::new()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyInput { op: "concat_rows" })?;
        let (_, d) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != d {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::ConcatRows(ids.clone()), &ids, Vec::new()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, d) = self.dims2("slice_rows", a)?;
        if start + len > r {
            return Err(shape_err("slice_rows", &[r, d], &[start, len]));
        }
        let out = self.value(a).data()[start * d..(start + len) * d].to_vec();
        let value = Tensor::new(vec![len, d], out)?;
        Ok(self.push(value, Op::SliceRows { a: a.0, start }, &[a.0], Vec::new()))
    }

    /// Per-row dot product: `[n×d], [n×d] → [n×1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2("row_dot", a)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("row_dot", self.shape(a), self.shape(b)));
        }
        let x = self.value(a).data();
        let y = self.value(b).data();
        let out = (0..n)
            .map(|i| {
                x[i * d..(i + 1) * d]
                    .iter()
                    .zip(&y[i * d..(i + 1) * d])
                    .map(|(&p, &q)| p * q)
                    .sum::<S>()
            })
            .collect();
        let value = Tensor::new(vec![n, 1], out)?;
        Ok(self.push(value, Op::RowDot(a.0, b.0), &[a.0, b.0], Vec::new()))
    }

    /// Scales row `i` of `a: [n×d]` by `w[i]`, `w: [n×1]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (n, d) = self.dims2("scale_rows", a)?;
        if self.value(w).len() != n {
            return Err(shape_err("scale_rows", self.shape(a), self.shape(w)));
        }
        let x = self.value(a).data();
        let ws = self.value(w).data();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend(x[i * d..(i + 1) * d].iter().map(|&v| v * ws[i]));
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::ScaleRows { a: a.0, w: w.0 }, &[a.0, w.0], Vec::new()))
    }

    // ---- reverse sweep ----

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let shape = self.shape(loss);
        if !(shape.is_empty() || shape == [1]) {
            return Err(TensorError::Rank {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v.0)).collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        let wants = |i: usize| self.nodes[i].needs_grad;
        let nodes = &self.nodes;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [S])| {
            if nodes[i].needs_grad {
                let buf = grads[i].get_or_insert_with(|| vec![S::zero(); nodes[i].value.len()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, transpose_b } => {
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = node.value.cols();
                if !transpose_b {
                    // C = A·B, B: [k×n]
                    acc(a, &mut |da| {
                        S::gemm(m, n, k, g, n as isize, 1, val(b), 1, n as isize, S::one(), da)
                    });
                    acc(b, &mut |db| {
                        S::gemm(k, m, n, val(a), 1, k as isize, g, n as isize, 1, S::one(), db)
                    });
                } else {
                    // C = A·Bᵀ, B: [n×k]
                    acc(a, &mut |da| {
                        S::gemm(m, n, k, g, n as isize, 1, val(b), k as isize, 1, S::one(), da)
                    });
                    acc(b, &mut |db| {
                        S::gemm(n, m, k, g, 1, n as isize, val(a), k as isize, 1, S::one(), db)
                    });
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |d| {
                    for ((x, &y), &w) in d.iter_mut().zip(g).zip(vb) {
                        *x = *x + y * w;
                    }
                });
                acc(b, &mut |d| {
                    for ((x, &y), &w) in d.iter_mut().zip(g).zip(va) {
                        *x = *x + y * w;
                    }
                });
            }
            &Op::AddRow { a, row } => {
                acc(a, &mut |d| add_into(d, g));
                let cols = node.value.cols();
                acc(row, &mut |d| {
                    for chunk in g.chunks(cols) {
                        add_into(d, chunk);
                    }
                });
            }
            &Op::Scale(a, f) => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * f));
            }
            &Op::Relu(a) => {
                let y = node.value.data();
                acc(a, &mut |d| {
                    for ((x, &gy), &yy) in d.iter_mut().zip(g).zip(y) {
                        if yy > S::zero() {
                            *x = *x + gy;
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(a, &mut |d| {
                    for ((x, &gy), &yy) in d.iter_mut().zip(g).zip(y) {
                        *x = *x + gy * yy * (S::one() - yy);
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: S = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: S = gr.iter().copied().sum();
                        for j in 0..n {
                            dr[j] = dr[j] + gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            &Op::LayerNorm { x, gain, bias } => {
                let dim = node.value.cols();
                let len = node.value.len();
                let xhat = &node.aux[..len];
                let rstd = &node.aux[len..];
                let gv = val(gain);
                acc(gain, &mut |d| {
                    for (gr, xr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            d[j] = d[j] + gr[j] * xr[j];
                        }
                    }
                });
                acc(bias, &mut |d| {
                    for gr in g.chunks(dim) {
                        add_into(d, gr);
                    }
                });
                if wants(x) {
                    let inv_d = S::lit(1.0 / dim as f64);
                    acc(x, &mut |d| {
                        for (r, ((dr, gr), xr)) in d
                            .chunks_mut(dim)
                            .zip(g.chunks(dim))
                            .zip(xhat.chunks(dim))
                            .enumerate()
                        {
                            let mut mean_gh = S::zero();
                            let mut mean_ghx = S::zero();
                            for j in 0..dim {
                                let gh = gr[j] * gv[j];
                                mean_gh = mean_gh + gh;
                                mean_ghx = mean_ghx + gh * xr[j];
                            }
                            mean_gh = mean_gh * inv_d;
                            mean_ghx = mean_ghx * inv_d;
                            for j in 0..dim {
                                let gh = gr[j] * gv[j];
                                dr[j] = dr[j] + rstd[r] * (gh - mean_gh - xr[j] * mean_ghx);
                            }
                        }
                    });
                }
            }
            &Op::MeanRows(a) => {
                let m = self.nodes[a].value.rows();
                let inv = S::lit(1.0 / m as f64);
                acc(a, &mut |d| {
                    for dr in d.chunks_mut(g.len()) {
                        dr.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * inv);
                    }
                });
            }
            &Op::MeanCols(a) => {
                let v = self.nodes[a].value.cols();
                let inv = S::lit(1.0 / v as f64);
                acc(a, &mut |d| {
                    for (dr, &gi) in d.chunks_mut(v).zip(g) {
                        dr.iter_mut().for_each(|x| *x = *x + gi * inv);
                    }
                });
            }
            &Op::Sum(a) => {
                let gi = g[0];
                acc(a, &mut |d| d.iter_mut().for_each(|x| *x = *x + gi));
            }
            &Op::Dropout(a) => {
                let mask = &node.aux;
                acc(a, &mut |d| {
                    for ((x, &gy), &m) in d.iter_mut().zip(g).zip(mask) {
                        *x = *x + gy * m;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dim = node.value.cols();
                acc(*table, &mut |d| {
                    for (gr, &id) in g.chunks(dim).zip(ids) {
                        add_into(&mut d[id * dim..(id + 1) * dim], gr);
                    }
                });
            }
            Op::Pick { a, ids } => {
                let v = self.nodes[*a].value.cols();
                acc(*a, &mut |d| {
                    for (i, (&gi, &id)) in g.iter().zip(ids).enumerate() {
                        d[i * v + id] = d[i * v + id] + gi;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    acc(p, &mut |d| {
                        for (dr, gr) in d.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(dr, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::SliceCols { a, start } => {
                let c = self.nodes[a].value.cols();
                let w = node.value.cols();
                acc(a, &mut |d| {
                    for (dr, gr) in d.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut dr[start..start + w], gr);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    acc(p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::SliceRows { a, start } => {
                let dim = node.value.cols();
                acc(a, &mut |d| add_into(&mut d[start * dim..start * dim + g.len()], g));
            }
            &Op::RowDot(a, b) => {
                let dim = self.nodes[a].value.cols();
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |d| {
                    for ((dr, br), &gi) in d.chunks_mut(dim).zip(vb.chunks(dim)).zip(g) {
                        dr.iter_mut().zip(br).for_each(|(x, &y)| *x = *x + gi * y);
                    }
                });
                acc(b, &mut |d| {
                    for ((dr, ar), &gi) in d.chunks_mut(dim).zip(va.chunks(dim)).zip(g) {
                        dr.iter_mut().zip(ar).for_each(|(x, &y)| *x = *x + gi * y);
                    }
                });
            }
            &Op::ScaleRows { a, w } => {
                let dim = node.value.cols();
                let (va, vw) = (val(a), val(w));
                acc(a, &mut |d| {
                    for ((dr, gr), &wi) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(vw) {
                        dr.iter_mut().zip(gr).for_each(|(x, &y)| *x = *x + y * wi);
                    }
                });
                acc(w, &mut |d| {
                    for (i, (gr, ar)) in g.chunks(dim).zip(va.chunks(dim)).enumerate() {
                        d[i] = d[i] + gr.iter().zip(ar).map(|(&p, &q)| p * q).sum::<S>();
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(x, &y)| *x = *x + y);
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
