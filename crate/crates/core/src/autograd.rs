//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so a single reverse sweep in [`Graph::backward`]
//! visits each node after all of its consumers.

use std::collections::HashMap;

use crate::error::{FlowDetError, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, ConvGeom, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in a fixed, insertion-defined order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.values.iter_mut()
    }

    /// `self += k · other`, matching tensors by position.
    pub fn add_scaled(&mut self, other: &ParamStore<T>, k: T) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += k * *y;
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same names and shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (_, name, v) in self.iter() {
            out.insert(name, Tensor::zeros(v.shape()));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (_, name, v) in self.iter() {
            out.insert(name, v.cast());
        }
        out
    }
}

/// A differentiable operation implemented outside this module.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (or `None` where it is not needed).
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, out_grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    SumAll(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node[v.0].as_ref()
    }

    /// Adds each parameter gradient (scaled by `k`) into `acc`.
    pub fn accumulate_params(&self, acc: &mut ParamStore<T>, k: T) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.by_node[node] {
                let dst = acc.get_mut(pid).data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += k * *s;
                }
            }
        }
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
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

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(FlowDetError::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        tensor::matmul_acc(av.data(), bv.data(), out.data_mut(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        if bv.len() != n {
            return Err(FlowDetError::Shape(format!(
                "add_row: {} columns vs bias of {}",
                n,
                bv.len()
            )));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += *b;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    /// `a[m,n] * b[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        if bv.len() != n {
            return Err(FlowDetError::Shape(format!(
                "mul_row: {} columns vs scale of {}",
                n,
                bv.len()
            )));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o *= *b;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MulRow(a, b), ng))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(FlowDetError::Shape(format!(
                "{what}: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::from_vec(av.shape(), data).expect("same size");
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        self.unary(a, Op::AddScalar(a, k), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x / (T::one() + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(FlowDetError::Shape(format!("row {r} of {m}")));
            }
            data.extend_from_slice(&av.data()[r * n..(r + 1) * n]);
        }
        let out = Tensor::from_vec(&[rows.len(), n], data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        if start > end || end > n {
            return Err(FlowDetError::Shape(format!("columns {start}..{end} of {n}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&av.data()[r * n + start..r * n + end]);
        }
        let out = Tensor::from_vec(&[m, w], data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start, end), ng))
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let nf = T::from_usize_lossy(n);
        let mut out = Tensor::zeros(&[m, n]);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &av.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|x| (*x - mean) * (*x - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            for (o, x) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Convolution of a `[C,H,W]` input with `w: [O, C·k·k]` and bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != geom.in_ch * geom.height * geom.width {
            return Err(FlowDetError::Shape(format!(
                "conv input {:?} vs geometry {:?}",
                xv.shape(),
                geom
            )));
        }
        let wv = self.value(w);
        let out_ch = wv.rows();
        if wv.cols() != geom.patch_len() || self.value(b).len() != out_ch {
            return Err(FlowDetError::Shape(format!(
                "conv weight {:?} vs patch {}",
                wv.shape(),
                geom.patch_len()
            )));
        }
        let cols = tensor::im2col(xv.data(), &geom);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let p = oh * ow;
        let mut out = Tensor::zeros(&[out_ch, oh, ow]);
        {
            let bias = self.value(b).data();
            let od = out.data_mut();
            for (o, chunk) in od.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
        }
        tensor::matmul_acc(self.value(w).data(), &cols, out.data_mut(), out_ch, geom.patch_len(), p);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, cols, geom }, ng))
    }

    /// Records the result of an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(output, Op::Custom(inputs.to_vec(), op), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] =
            Some(Tensor::from_vec(self.value(loss).shape(), vec![T::one(); self.value(loss).len()]).expect("shape"));

        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if let Op::Param(pid) = node.op {
                params.push((pid, i));
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        params.reverse();
        Gradients { by_node: grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("just set").data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc(grads, *a, |ga| tensor::matmul_nt_acc(gd, bv.data(), ga, m, n, k));
                self.acc(grads, *b, |gb| tensor::matmul_tn_acc(av.data(), gd, gb, k, m, n));
            }
            Op::AddRow(a, b) => {
                let n = self.value(*a).cols();
                self.acc(grads, *a, |ga| add_into(ga, gd));
                self.acc(grads, *b, |gb| {
                    for row in gd.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.cols();
                self.acc(grads, *a, |ga| {
                    for (grow, orow) in ga.chunks_mut(n).zip(gd.chunks(n)) {
                        for ((x, o), s) in grow.iter_mut().zip(orow).zip(bv.data()) {
                            *x += *o * *s;
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for (orow, arow) in gd.chunks(n).zip(av.data().chunks(n)) {
                        for ((x, o), a) in gb.iter_mut().zip(orow).zip(arow) {
                            *x += *o * *a;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, gd));
                self.acc(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, gd));
                self.acc(grads, *b, |gb| {
                    for (x, o) in gb.iter_mut().zip(gd) {
                        *x -= *o;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((x, o), s) in ga.iter_mut().zip(gd).zip(bv.data()) {
                        *x += *o * *s;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((x, o), s) in gb.iter_mut().zip(gd).zip(av.data()) {
                        *x += *o * *s;
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.acc(grads, *a, |ga| {
                    for (x, o) in ga.iter_mut().zip(gd) {
                        *x += k * *o;
                    }
                });
            }
            Op::AddScalar(a, _) | Op::Reshape(a) => {
                self.acc(grads, *a, |ga| add_into(ga, gd));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for ((x, o), v) in ga.iter_mut().zip(gd).zip(av.data()) {
                        if *v > T::zero() {
                            *x += *o;
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for ((x, o), v) in ga.iter_mut().zip(gd).zip(av.data()) {
                        let s = T::one() / (T::one() + (-*v).exp());
                        *x += *o * s * (T::one() + *v * (T::one() - s));
                    }
                });
            }
            Op::Exp(a) => {
                let out = node.value.data();
                self.acc(grads, *a, |ga| {
                    for ((x, o), y) in ga.iter_mut().zip(gd).zip(out) {
                        *x += *o * *y;
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for ((x, o), v) in ga.iter_mut().zip(gd).zip(av.data()) {
                        if *v > T::zero() {
                            *x += *o;
                        } else if *v < T::zero() {
                            *x -= *o;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a);
                let two = T::lit(2.0);
                self.acc(grads, *a, |ga| {
                    for ((x, o), v) in ga.iter_mut().zip(gd).zip(av.data()) {
                        *x += two * *o * *v;
                    }
                });
            }
            Op::SumAll(a) => {
                let s = gd[0];
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::GatherRows(a, rows) => {
                let n = self.value(*a).cols();
                self.acc(grads, *a, |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * n..(r + 1) * n], &gd[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::SliceCols(a, start, end) => {
                let n = self.value(*a).cols();
                let w = end - start;
                self.acc(grads, *a, |ga| {
                    for (r, orow) in gd.chunks(w).enumerate() {
                        add_into(&mut ga[r * n + start..r * n + end], orow);
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let n = node.value.cols();
                let nf = T::from_usize_lossy(n);
                self.acc(grads, *x, |gx| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gy = &gd[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mean_g = gy.iter().copied().sum::<T>() / nf;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| *a * *b).sum::<T>() / nf;
                        for ((dst, gv), yv) in gx[r * n..(r + 1) * n].iter_mut().zip(gy).zip(yr) {
                            *dst += *inv * (*gv - mean_g - *yv * mean_gy);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, cols, geom } => {
                let out_ch = self.value(*w).rows();
                let q = geom.patch_len();
                let p = geom.out_h() * geom.out_w();
                self.acc(grads, *w, |gw| tensor::matmul_nt_acc(gd, cols, gw, out_ch, p, q));
                self.acc(grads, *b, |gb| {
                    for (o, chunk) in gd.chunks(p).enumerate() {
                        gb[o] += chunk.iter().copied().sum::<T>();
                    }
                });
                if self.ng(*x) {
                    let mut gcols = vec![T::zero(); q * p];
                    tensor::matmul_tn_acc(self.value(*w).data(), gd, &mut gcols, q, out_ch, p);
                    self.acc(grads, *x, |gx| tensor::col2im_acc(&gcols, geom, gx));
                }
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, &node.value, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.acc(grads, *v, |dst| add_into(dst, gi.data()));
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
