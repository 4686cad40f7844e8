//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough cached state to run its backward rule. Graphs are built per example
//! and thrown away after [`Graph::backward`]. Parameters live outside the tape
//! in a [`ParamStore`]; a graph only records which nodes read which parameter.

use std::collections::{BTreeSet, HashMap};

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Checkpoint block a parameter belongs to. Freezing works per block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Backbone,
    Sc,
    Pa,
    Heads,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Backbone, Block::Sc, Block::Pa, Block::Heads];

    pub fn tag(self) -> &'static str {
        match self {
            Block::Backbone => "backbone",
            Block::Sc => "sc",
            Block::Pa => "pa",
            Block::Heads => "heads",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Block> {
        Block::ALL.into_iter().find(|b| b.tag() == tag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub block: Block,
    pub value: Mat,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, block: Block, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, block, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, block: Block) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(move |(_, p)| p.block == block).map(|(id, _)| id)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count across the given parameter ids.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.value(*id).len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × n` row to every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// Constant left-multiplication `m · x`, used for pooling matrices.
    LeftConst(Mat, Var),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    /// Column-wise max over row segments; caches the winning row per cell.
    SegmentMax(Var, Vec<Vec<usize>>),
    Dropout(Var, Mat),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
        count: usize,
    },
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
    frozen: BTreeSet<Block>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if it required one.
    pub fn wrt(&self, var: Var) -> Option<&Mat> {
        self.grads[var.0].as_ref()
    }

    /// Gradients for every parameter that was read by the graph and not frozen.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

const LN_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x · sigmoid(x)`
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Graph {
    /// A graph without an rng; dropout in `Mode::Train` needs [`Graph::training`].
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: None,
            frozen: BTreeSet::new(),
            params: HashMap::new(),
        }
    }

    /// Training graph whose dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        let mut g = Graph::new(Mode::Train);
        g.rng = Some(rng);
        g
    }

    pub fn with_frozen(mut self, blocks: impl IntoIterator<Item = Block>) -> Self {
        self.frozen.extend(blocks);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.ncols()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.nrows()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
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

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input leaf whose gradient is tracked.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Reads a parameter. Repeated reads share one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let trainable = !self.frozen.contains(&p.block);
        let v = self.push(p.value.clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.rows(row), 1);
        assert_eq!(self.cols(a), self.cols(row), "add_row width mismatch");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let rows = self.rows(parts[0]);
        let width: usize = parts.iter().map(|p| self.cols(*p)).sum();
        let mut value = Mat::zeros((rows, width));
        let mut at = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
            value.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let cols = self.cols(parts[0]);
        let height: usize = parts.iter().map(|p| self.rows(*p)).sum();
        let mut value = Mat::zeros((height, cols));
        let mut at = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.ncols(), cols, "concat_rows column mismatch");
            value.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Row gather; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), indices);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, indices.to_vec()), rg)
    }

    pub fn left_const(&mut self, m: Mat, a: Var) -> Var {
        let value = m.dot(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::LeftConst(m, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(swish);
        let rg = self.rg(a);
        self.push(value, Op::Swish(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Column-wise max over each segment of rows.
    pub fn segment_max(&mut self, a: Var, segments: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let cols = av.ncols();
        let mut value = Mat::zeros((segments.len(), cols));
        let mut winners = Vec::with_capacity(segments.len());
        for (k, &(start, end)) in segments.iter().enumerate() {
            assert!(start < end, "empty segment");
            let mut win = vec![start; cols];
            for c in 0..cols {
                let mut best = av[[start, c]];
                for r in start + 1..end {
                    if av[[r, c]] > best {
                        best = av[[r, c]];
                        win[c] = r;
                    }
                }
                value[[k, c]] = best;
            }
            winners.push(win);
        }
        let rg = self.rg(a);
        self.push(value, Op::SegmentMax(a, winners), rg)
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let (r, c) = self.shape(a);
        let rng = self.rng.as_mut().expect("training graph without rng");
        let mask = Mat::from_shape_fn((r, c), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let value = self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(value, Op::Dropout(a, mask), rg)
    }

    /// Mean cross-entropy over rows with a defined target. `allowed` restricts
    /// the softmax to a subset of classes (others get zero probability).
    ///
    /// Returns `None` when no row has a target.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        allowed: Option<&[bool]>,
    ) -> Option<Var> {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy row mismatch");
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return None;
        }
        let mut probs = Mat::zeros(lv.dim());
        let mut loss = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = lv.row(r);
            let ok = |c: usize| allowed.is_none_or(|a| a[c]);
            assert!(ok(t), "target class {t} is not allowed");
            let max = (0..row.len())
                .filter(|&c| ok(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..row.len() {
                if ok(c) {
                    let e = (row[c] - max).exp();
                    probs[[r, c]] = e;
                    sum += e;
                }
            }
            probs.row_mut(r).mapv_inplace(|v| v / sum);
            loss -= (row[t] - max) - sum.ln();
        }
        let value = Mat::from_elem((1, 1), loss / count as f64);
        let rg = self.rg(logits);
        Some(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar");
        m[[0, 0]]
    }

    /// Backpropagates from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, gy.dot(&self.value(*b).t()));
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&gy));
                    }
                }
                Op::MatMulT(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, gy.dot(self.value(*b)));
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, gy.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, gy.clone());
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, gy.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if rg(*row) {
                        acc(&mut grads, *row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if rg(*a) {
                        acc(&mut grads, *a, gy.clone());
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, &gy * self.value(*b));
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, &gy * self.value(*a));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &gy * *k),
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.cols(*p);
                        if rg(*p) {
                            acc(&mut grads, *p, gy.slice(s![.., at..at + w]).to_owned());
                        }
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let h = self.rows(*p);
                        if rg(*p) {
                            acc(&mut grads, *p, gy.slice(s![at..at + h, ..]).to_owned());
                        }
                        at += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut g = Mat::zeros(self.value(*a).dim());
                    g.slice_mut(s![.., *start..*start + gy.ncols()]).assign(&gy);
                    acc(&mut grads, *a, g);
                }
                Op::GatherRows(a, idx) => {
                    let mut g = Mat::zeros(self.value(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = g.row_mut(src);
                        dst += &gy.row(r);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LeftConst(m, a) => acc(&mut grads, *a, m.t().dot(&gy)),
                Op::Sigmoid(a) => {
                    let g = Zip::from(&gy)
                        .and(&node.value)
                        .map_collect(|&d, &y| d * y * (1.0 - y));
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let g = Zip::from(&gy)
                        .and(&node.value)
                        .map_collect(|&d, &y| d * (1.0 - y * y));
                    acc(&mut grads, *a, g);
                }
                Op::Swish(a) => {
                    let g = Zip::from(&gy).and(self.value(*a)).map_collect(|&d, &x| {
                        let s = sigmoid(x);
                        d * (s + x * s * (1.0 - s))
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let g = Zip::from(&gy)
                        .and(self.value(*a))
                        .map_collect(|&d, &x| d * gelu_grad(x));
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = &gy * y;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.sum();
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv * dot);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if rg(*bias) {
                        acc(&mut grads, *bias, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if rg(*gain) {
                        acc(
                            &mut grads,
                            *gain,
                            (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if rg(*x) {
                        let n = xhat.ncols() as f64;
                        let dxhat = &gy * self.value(*gain);
                        let mut g = Mat::zeros(xhat.dim());
                        for r in 0..xhat.nrows() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let sum_d = dr.sum();
                            let sum_dx = dr.dot(&xr);
                            let k = inv_std[r] / n;
                            for c in 0..xhat.ncols() {
                                g[[r, c]] = k * (n * dr[c] - sum_d - xr[c] * sum_dx);
                            }
                        }
                        acc(&mut grads, *x, g);
                    }
                }
                Op::SegmentMax(a, winners) => {
                    let mut g = Mat::zeros(self.value(*a).dim());
                    for (k, win) in winners.iter().enumerate() {
                        for (c, &r) in win.iter().enumerate() {
                            g[[r, c]] += gy[[k, c]];
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Dropout(a, mask) => acc(&mut grads, *a, &gy * mask),
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let k = gy[[0, 0]] / *count as f64;
                    let mut g = probs * k;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            g[[r, *t]] -= k;
                        }
                    }
                    acc(&mut grads, *logits, g);
                }
                Op::Sum(a) => {
                    let d = gy[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(self.value(*a).dim(), d));
                }
            }
            grads[i] = Some(gy);
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(k, v)| (*k, *v)).collect();
        params.sort();
        Gradients { grads, params }
    }
}
