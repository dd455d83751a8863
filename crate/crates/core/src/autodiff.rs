//! Minimal define-by-run reverse-mode automatic differentiation.
//!
//! Values are dense row-major `f64` matrices (vectors are `1 x n`).
//! Trainable parameters live in a [`ParamStore`]; a [`Tape`] borrows the
//! store for one forward pass and records every operation, and
//! [`Tape::backward`] accumulates parameter gradients into a
//! [`Gradients`] buffer.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("backward requires a scalar loss, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("target id {target} out of range for {classes} classes")]
    TargetOutOfRange { target: u32, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter with entries drawn from `uniform(-scale, scale)`.
    pub fn add_uniform<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut R) -> ParamId {
        let value = (0..rows * cols)
            .map(|_| if scale > 0.0 { rng.random_range(-scale..scale) } else { 0.0 })
            .collect();
        self.add(name, rows, cols, value)
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, value: Vec<f64>) -> ParamId {
        assert_eq!(value.len(), rows * cols, "parameter {name} has wrong length");
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.grads.iter()
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len(), "gradient sets differ");
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Rescales so that the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a (m x n) + b (1 x n)` broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Embedding(Var, Vec<u32>),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Sum(Var),
}

#[derive(Debug)]
enum Storage {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    storage: Storage,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass over parameters borrowed from a [`ParamStore`].
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            storage: Storage::Owned(value),
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].storage {
            Storage::Owned(x) => x,
            Storage::Param(id) => &self.params.params[id.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Constant or differentiable input.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf shape mismatch");
        self.push(rows, cols, value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.leaf(rows, cols, value, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    /// Gradient accumulated for a differentiable leaf by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = &self.params.params[id.0];
        let (rows, cols) = (p.rows, p.cols);
        self.nodes.push(Node {
            rows,
            cols,
            storage: Storage::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions {m}x{k} . {k2}x{n}");
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += s * w;
                }
            }
        }
        let rg = self.needs(&[a, b]);
        self.push(m, n, out, Op::MatMul(a, b), rg)
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(b);
        assert_eq!(n, bn, "add column mismatch");
        let rg = self.needs(&[a, b]);
        if bm == m {
            let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
            self.push(m, n, out, Op::Add(a, b), rg)
        } else {
            assert_eq!(bm, 1, "add expects equal shapes or a broadcast row");
            let bv = self.value(b);
            let out = self
                .value(a)
                .chunks(n)
                .flat_map(|r| r.iter().zip(bv).map(|(x, y)| x + y))
                .collect();
            self.push(m, n, out, Op::AddRow(a, b), rg)
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.needs(&[a, b]);
        self.push(m, n, out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.needs(&[a, b]);
        self.push(m, n, out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.needs(&[a]);
        self.push(m, n, out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.needs(&[a]);
        self.push(m, n, out, Op::AddScalar(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.needs(&[a]);
        self.push(m, n, out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.needs(&[a]);
        self.push(m, n, out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.needs(&[a]);
        self.push(m, n, out, Op::Relu(a), rg)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, m, "concat row mismatch");
                self.shape(p).1
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        self.push(m, n, out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `start..end` of every row.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start < end && end <= n, "slice {start}..{end} out of 0..{n}");
        let w = end - start;
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let rg = self.needs(&[a]);
        self.push(m, w, out, Op::SliceCols(a, start), rg)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            assert_eq!(pn, n, "stack_rows column mismatch");
            out.extend_from_slice(self.value(p));
            m += pm;
        }
        let rg = self.needs(parts);
        self.push(m, n, out, Op::StackRows(parts.to_vec()), rg)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(i < m, "row {i} out of {m}");
        let out = self.value(a)[i * n..(i + 1) * n].to_vec();
        let rg = self.needs(&[a]);
        self.push(1, n, out, Op::Row(a, i), rg)
    }

    /// Gathers rows of `table`; the backward pass scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Var {
        let (v, e) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            assert!((id as usize) < v, "embedding id {id} out of {v}");
            out.extend_from_slice(&tv[id as usize * e..(id as usize + 1) * e]);
        }
        let rg = self.needs(&[table]);
        self.push(ids.len(), e, out, Op::Embedding(table, ids.to_vec()), rg)
    }

    /// Mean over rows of `-log softmax(logits_i)[target_i]`, computed with
    /// max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var, AutodiffError> {
        let (m, v) = self.shape(logits);
        assert_eq!(m, targets.len(), "one target per logits row");
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(AutodiffError::TargetOutOfRange { target: bad, classes: v });
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(m * v);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &x in row {
                z += (x - max).exp();
            }
            let log_z = z.ln();
            total += -(row[t as usize] - max - log_z);
            probs.extend(row.iter().map(|&x| ((x - max) - log_z).exp()));
        }
        let loss = total / m as f64;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout; identity when not training or `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R, training: bool) -> Var {
        if !training || rate <= 0.0 {
            return a;
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let (m, n) = self.shape(a);
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..m * n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, k)| x * k).collect();
        let rg = self.needs(&[a]);
        self.push(m, n, out, Op::Dropout(a, mask), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.needs(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (m * n) as f64)
    }

    /// Back-propagates from a scalar `loss`, adding parameter gradients into
    /// `grads` and leaf gradients into the tape. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var, grads: &mut Gradients) -> Result<(), AutodiffError> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(AutodiffError::NonScalarLoss { rows: r, cols: c });
        }
        let mut node_grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = node_grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let n = node.cols;
            match &node.op {
                Op::Leaf => {
                    let slot = self.leaf_grads[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, d) in slot.iter_mut().zip(&g) {
                        *s += d;
                    }
                }
                Op::Param(id) => {
                    for (s, d) in grads.grads[id.0].iter_mut().zip(&g) {
                        *s += d;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                da[i * k + p] = dot(grow, &bv[p * n..(p + 1) * n]);
                            }
                        }
                        accumulate(&mut node_grads, &self.nodes, grads, *a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut apply = |db: &mut [f64]| {
                            for i in 0..m {
                                let grow = &g[i * n..(i + 1) * n];
                                for p in 0..k {
                                    let s = av[i * k + p];
                                    if s == 0.0 {
                                        continue;
                                    }
                                    for (d, &gg) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                        *d += s * gg;
                                    }
                                }
                            }
                        };
                        with_grad_slot(&mut node_grads, &self.nodes, grads, *b, &mut apply);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut node_grads, &self.nodes, grads, *a, &g);
                    accumulate(&mut node_grads, &self.nodes, grads, *b, &g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut node_grads, &self.nodes, grads, *a, &g);
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    accumulate(&mut node_grads, &self.nodes, grads, *b, &db);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut node_grads, &self.nodes, grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(&mut node_grads, &self.nodes, grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut node_grads, &self.nodes, grads, *a, &da);
                    accumulate(&mut node_grads, &self.nodes, grads, *b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                    accumulate(&mut node_grads, &self.nodes, grads, *a, &da);
                }
                Op::AddScalar(a) => accumulate(&mut node_grads, &self.nodes, grads, *a, &g),
                Op::Sigmoid(a) => {
                    let y = self.value(Var(idx));
                    let da: Vec<f64> = g.iter().zip(y).map(|(d, y)| d * y * (1.0 - y)).collect();
                    accumulate(&mut node_grads, &self.nodes, grads, *a, &da);
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(idx));
                    let da: Vec<f64> = g.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect();
                    accumulate(&mut node_grads, &self.nodes, grads, *a, &da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                        .collect();
                    accumulate(&mut node_grads, &self.nodes, grads, *a, &da);
                }
                Op::ConcatCols(parts) => {
                    let m = node.rows;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].cols;
                        if self.nodes[p.0].requires_grad {
                            let mut dp = Vec::with_capacity(m * w);
                            for i in 0..m {
                                dp.extend_from_slice(&g[i * n + offset..i * n + offset + w]);
                            }
                            accumulate(&mut node_grads, &self.nodes, grads, p, &dp);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, an) = self.shape(*a);
                    let mut da = vec![0.0; m * an];
                    for i in 0..m {
                        da[i * an + start..i * an + start + n].copy_from_slice(&g[i * n..(i + 1) * n]);
                    }
                    accumulate(&mut node_grads, &self.nodes, grads, *a, &da);
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].rows * n;
                        accumulate(&mut node_grads, &self.nodes, grads, p, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Row(a, i) => {
                    let i = *i;
                    let mut apply = |da: &mut [f64]| {
                        for (d, x) in da[i * n..(i + 1) * n].iter_mut().zip(&g) {
                            *d += x;
                        }
                    };
                    with_grad_slot(&mut node_grads, &self.nodes, grads, *a, &mut apply);
                }
                Op::Embedding(table, ids) => {
                    let mut apply = |dt: &mut [f64]| {
                        for (row, &id) in ids.iter().enumerate() {
                            let id = id as usize;
                            for (d, x) in dt[id * n..(id + 1) * n].iter_mut().zip(&g[row * n..(row + 1) * n]) {
                                *d += x;
                            }
                        }
                    };
                    with_grad_slot(&mut node_grads, &self.nodes, grads, *table, &mut apply);
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let v = self.nodes[logits.0].cols;
                    let m = targets.len() as f64;
                    let scale = g[0] / m;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[i * v + t as usize] -= scale;
                    }
                    accumulate(&mut node_grads, &self.nodes, grads, *logits, &dl);
                }
                Op::Dropout(a, mask) => {
                    let da: Vec<f64> = g.iter().zip(mask).map(|(d, k)| d * k).collect();
                    accumulate(&mut node_grads, &self.nodes, grads, *a, &da);
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].rows * self.nodes[a.0].cols;
                    accumulate(&mut node_grads, &self.nodes, grads, *a, &vec![g[0]; len]);
                }
            }
        }
        Ok(())
    }
}

fn with_grad_slot(
    node_grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    grads: &mut Gradients,
    target: Var,
    apply: &mut dyn FnMut(&mut [f64]),
) {
    let node = &nodes[target.0];
    if !node.requires_grad {
        return;
    }
    // parameter gradients go straight into the shared buffer
    if let Storage::Param(id) = node.storage {
        apply(&mut grads.grads[id.0]);
        return;
    }
    let slot = node_grads[target.0].get_or_insert_with(|| vec![0.0; node.rows * node.cols]);
    apply(slot);
}

fn accumulate(node_grads: &mut [Option<Vec<f64>>], nodes: &[Node], grads: &mut Gradients, target: Var, delta: &[f64]) {
    let node = &nodes[target.0];
    if !node.requires_grad {
        return;
    }
    if let Storage::Param(id) = node.storage {
        for (s, d) in grads.grads[id.0].iter_mut().zip(delta) {
            *s += d;
        }
        return;
    }
    match &mut node_grads[target.0] {
        Some(slot) => {
            for (s, d) in slot.iter_mut().zip(delta) {
                *s += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-4;
    const TOL: f64 = 1e-3;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central finite differences over every entry of the leaf inputs,
    /// compared against the tape's analytic gradients.
    fn check<F>(inputs: &[(usize, usize)], seed: u64, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<Vec<f64>> = inputs.iter().map(|&(r, c)| random(&mut rng, r * c)).collect();

        let eval = |vals: &[Vec<f64>]| {
            let mut tape = Tape::new(&store);
            let vars: Vec<Var> = inputs
                .iter()
                .zip(vals)
                .map(|(&(r, c), v)| tape.leaf(r, c, v.clone(), true))
                .collect();
            let out = build(&mut tape, &vars);
            let s = tape.sum(out);
            tape.scalar(s)
        };

        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&values)
            .map(|(&(r, c), v)| tape.leaf(r, c, v.clone(), true))
            .collect();
        let out = build(&mut tape, &vars);
        let s = tape.sum(out);
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(s, &mut grads).unwrap();

        for (k, var) in vars.iter().enumerate() {
            let analytic = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; values[k].len()]);
            for j in 0..values[k].len() {
                let mut plus = values.clone();
                plus[k][j] += STEP;
                let mut minus = values.clone();
                minus[k][j] -= STEP;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
                let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
                assert!(err < TOL, "input {k}[{j}]: analytic {} numeric {numeric}", analytic[j]);
            }
        }
    }

    #[test]
    fn matmul_values() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let i = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let c = t.matmul(a, i);
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
        let d = t.matmul(i, a);
        assert_eq!(t.value(d), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gradient_checks() {
        check(&[(2, 3), (3, 4)], 1, |t, v| t.matmul(v[0], v[1]));
        check(&[(3, 4), (3, 4)], 2, |t, v| t.add(v[0], v[1]));
        check(&[(3, 4), (1, 4)], 3, |t, v| t.add(v[0], v[1]));
        check(&[(2, 4), (2, 4)], 4, |t, v| t.sub(v[0], v[1]));
        check(&[(2, 4), (2, 4)], 5, |t, v| {
            let m = t.mul(v[0], v[1]);
            t.mul(m, v[0])
        });
        check(&[(2, 3), (2, 2)], 6, |t, v| {
            let c = t.concat(&[v[0], v[1], v[0]]);
            t.mul(c, c)
        });
        check(&[(3, 5)], 7, |t, v| {
            let s = t.slice(v[0], 1, 4);
            t.mul(s, s)
        });
        check(&[(2, 3)], 8, |t, v| t.sigmoid(v[0]));
        check(&[(2, 3)], 9, |t, v| t.tanh(v[0]));
        check(&[(1, 3), (2, 3)], 10, |t, v| {
            let s = t.stack_rows(&[v[0], v[1], v[0]]);
            let r = t.row(s, 2);
            let r2 = t.row(s, 1);
            let q = t.mul(r, r2);
            t.scale(q, 3.0)
        });
        check(&[(5, 3)], 11, |t, v| {
            let e = t.embedding(v[0], &[4, 1, 4, 0]);
            t.mul(e, e)
        });
        check(&[(3, 6)], 12, |t, v| t.softmax_cross_entropy(v[0], &[0, 5, 2]).unwrap());
        check(&[(2, 3)], 13, |t, v| {
            let x = t.add_scalar(v[0], 0.5);
            let y = t.relu(x);
            t.mean(y)
        });
    }

    #[test]
    fn embedding_duplicates_accumulate() {
        let mut store = ParamStore::new();
        let table = store.add("emb", 3, 2, vec![0.0; 6]);
        let mut t = Tape::new(&store);
        let tv = t.param(table);
        let e = t.embedding(tv, &[1, 1, 2]);
        assert_eq!(t.value(e), &[0.0; 6]);
        let s = t.sum(e);
        let mut g = Gradients::zeros_like(&store);
        t.backward(s, &mut g).unwrap();
        assert_eq!(g.get(table), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn activations_at_zero() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let z = t.zeros(1, 1);
        let s = t.sigmoid(z);
        let h = t.tanh(z);
        assert_eq!(t.scalar(s), 0.5);
        assert_eq!(t.scalar(h), 0.0);
    }

    #[test]
    fn cross_entropy_cases() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let u = t.constant(1, 7, vec![0.3; 7]);
        let l = t.softmax_cross_entropy(u, &[4]).unwrap();
        assert!((t.scalar(l) - 7f64.ln()).abs() < 1e-12);
        let mut peaked = vec![-50.0; 5];
        peaked[2] = 50.0;
        let p = t.constant(1, 5, peaked);
        let l = t.softmax_cross_entropy(p, &[2]).unwrap();
        assert!(t.scalar(l) < 1e-12);
        let huge = t.constant(1, 3, vec![1e4, -1e4, 0.0]);
        let l = t.softmax_cross_entropy(huge, &[1]).unwrap();
        assert!(t.scalar(l).is_finite());
        assert_eq!(
            t.softmax_cross_entropy(huge, &[3]).unwrap_err(),
            AutodiffError::TargetOutOfRange { target: 3, classes: 3 }
        );
    }

    #[test]
    fn dropout_modes() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new(&store);
        let x = t.constant(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.dropout(x, 0.0, &mut rng, true), x);
        assert_eq!(t.dropout(x, 0.3, &mut rng, false), x);
    }

    #[test]
    fn dropout_preserves_mean() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut t = Tape::new(&store);
        let x = t.constant(1, 10_000, vec![1.5; 10_000]);
        let d = t.dropout(x, 0.3, &mut rng, true);
        let mean = t.value(d).iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.5).abs() / 1.5 < 0.02, "mean {mean}");
    }

    #[test]
    fn backward_basics() {
        let mut store = ParamStore::new();
        let w = store.add("x", 1, 1, vec![0.0]);
        let mut g = Gradients::zeros_like(&store);
        {
            let mut t = Tape::new(&store);
            let x = t.param(w);
            let y = t.scale(x, 3.0);
            t.backward(y, &mut g).unwrap();
            assert_eq!(g.get(w), &[3.0]);
            // accumulation
            t.backward(y, &mut g).unwrap();
            assert_eq!(g.get(w), &[6.0]);
        }
        g.zero();
        let mut t = Tape::new(&store);
        let x = t.param(w);
        let y = t.scale(x, 2.0);
        let y = t.tanh(y);
        t.backward(y, &mut g).unwrap();
        assert_eq!(g.get(w), &[2.0]);
        let v = t.constant(1, 2, vec![1.0, 2.0]);
        assert!(matches!(t.backward(v, &mut g), Err(AutodiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", 1, 2, vec![0.0, 0.0]);
        let mut g = Gradients::zeros_like(&store);
        g.grads[w.0] = vec![30.0, 40.0];
        let before = g.clip_global_norm(5.0);
        assert_eq!(before, 50.0);
        assert!(g.global_norm() <= 5.0 + 1e-12);
    }
}
