//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every operation of
//! one forward pass, and replays the tape backwards to produce gradients for
//! both parameters and intermediate nodes. Graphs are single-threaded; build
//! one per sentence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamGrads, ParamId, ParamStore};
use crate::numerics::tensor::{
    matmul_at_into, matmul_bt_into, matmul_into, sigmoid, softmax, softplus, Tensor,
};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather { param: ParamId, indices: Vec<usize> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    MaxPoolRows { input: Var, argmax: Vec<usize> },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64> },
    SumAll(Var),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
    pub params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not reach the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.nodes[v.0] {
            Some(g) => Tensor::new(r, c, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(r, c),
        }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            dropout_rng: None,
        }
    }

    /// Training-mode graph drawing dropout masks from `rng`.
    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            ..Self::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A node that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (useful for probing intermediate inputs).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(rows, cols))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param(id), true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Rows of a parameter table selected by index.
    pub fn gather(&mut self, id: ParamId, indices: &[usize]) -> Result<Var> {
        let table = self.params.get(id);
        let cols = table.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= table.rows() {
                return Err(Error::shape(
                    "gather",
                    format!("row {i} of table with {} rows", table.rows()),
                ));
            }
            data.extend_from_slice(table.row(i));
        }
        let value = Tensor::new(indices.len(), cols, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                param: id,
                indices: indices.to_vec(),
            },
            true,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMulBt(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        check_same(name, self.value(a), self.value(b))?;
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a + b` with the single row `b` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (1, n) {
            return Err(Error::shape(
                "add_row",
                format!("{m}x{n} + {:?}", self.shape(b)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(a).clone();
        for r in 0..m {
            for (x, bv) in t.row_mut(r).iter_mut().zip(&bias) {
                *x += bv;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    /// Elementwise product with a constant mask of the same shape.
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape("mul_const", "mask length"));
        }
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(r, c, data)?, Op::MulConst(a, mask), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut t = self.value(a).clone();
        t.scale_in_place(factor);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        Tensor::new(r, c, data).expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x < 0.0 { 0.0 } else { x });
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(softmax(self.value(a).row(i)));
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(r, c, data).expect("same shape"), Op::SoftmaxRows(a), rg)
    }

    /// Dropout with inverted scaling; identity in evaluation mode or when `rate` is 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.nodes[a.0].value.len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(a, mask)
    }

    /// Concatenates along columns; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let rows = self.shape(*first).0;
        if parts.iter().any(|p| self.shape(*p).0 != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(rows, cols, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks along rows; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let cols = self.shape(*first).1;
        if parts.iter().any(|p| self.shape(*p).1 != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = parts.iter().map(|p| self.shape(*p).0).sum();
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(len, c, data)?, Op::SliceRows { input: a, start }, rg))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        self.slice_rows(a, index, 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {c}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(r, len, data)?, Op::SliceCols { input: a, start }, rg))
    }

    /// Column-wise maximum over the rows of `a`; ties resolve to the lowest row.
    pub fn max_pool_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::InvalidArgument("max-pool over an empty sequence".into()));
        }
        let x = self.value(a);
        let mut argmax = vec![0usize; c];
        let mut out = x.row(0).to_vec();
        for i in 1..r {
            for (j, v) in x.row(i).iter().enumerate() {
                if *v > out[j] {
                    out[j] = *v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row_vector(out), Op::MaxPoolRows { input: a, argmax }, rg))
    }

    /// Per-row layer normalisation with learned gain and bias rows.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::shape("layer_norm", "gain/bias must be 1 x cols"));
        }
        let x = self.value(a);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                normalized.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[a, gain, bias]);
        Ok(self.push(
            Tensor::new(r, c, out)?,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// `-log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if r != 1 || c < 2 {
            return Err(Error::shape("cross_entropy", format!("logits {r}x{c}")));
        }
        if label >= c {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let row = self.value(logits).row(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let d = lse - row[label];
        let loss = if d < 0.0 { 0.0 } else { d };
        let probs = softmax(row);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// Sum of binary cross-entropy-with-logits terms, elementwise over `logits`.
    pub fn bce_with_logits_sum(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if targets.len() != self.value(logits).len() {
            return Err(Error::shape("bce_with_logits", "target length"));
        }
        if targets.iter().any(|t| *t != 0.0 && *t != 1.0) {
            return Err(Error::InvalidArgument("binary targets must be 0 or 1".into()));
        }
        let loss: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .map(|(x, t)| softplus(*x) - t * x)
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("sum", "no inputs"));
        };
        let mut acc = self.value(*first).clone();
        for p in &parts[1..] {
            check_same("sum", &acc, self.value(*p))?;
            acc.add_assign(self.value(*p));
        }
        let rg = self.rg(parts);
        Ok(self.push(acc, Op::Sum(parts.to_vec()), rg))
    }

    /// Replays the tape from `loss` (a 1×1 node).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params = ParamGrads::for_store(self.params);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            nodes: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            params,
        })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut ParamGrads,
    ) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$acc:ident| $body:block) => {
                if nodes[$v.0].requires_grad {
                    let len = nodes[$v.0].value.len();
                    let $acc: &mut Vec<f64> = grads[$v.0].get_or_insert_with(|| vec![0.0; len]);
                    $body
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let acc = params.slot(*id, node.value.shape());
                for (a, gv) in acc.data_mut().iter_mut().zip(g) {
                    *a += gv;
                }
            }
            Op::Gather { param, indices } => {
                let shape = self.params.get(*param).shape();
                let cols = shape.1;
                let acc = params.slot(*param, shape);
                for (r, &idx) in indices.iter().enumerate() {
                    let dst = acc.row_mut(idx);
                    for (d, gv) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *d += gv;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.shape();
                let n = nodes[b.0].value.cols();
                let bv = nodes[b.0].value.data();
                let av = nodes[a.0].value.data();
                with_grad!(*a, |acc| {
                    matmul_bt_into(g, bv, acc, m, n, k);
                });
                with_grad!(*b, |acc| {
                    matmul_at_into(av, g, acc, m, k, n);
                });
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = nodes[a.0].value.shape();
                let n = nodes[b.0].value.rows();
                let bv = nodes[b.0].value.data();
                let av = nodes[a.0].value.data();
                with_grad!(*a, |acc| {
                    matmul_into(g, bv, acc, m, n, k);
                });
                with_grad!(*b, |acc| {
                    matmul_at_into(g, av, acc, m, n, k);
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |acc| {
                    add_into(acc, g);
                });
                with_grad!(*b, |acc| {
                    add_into(acc, g);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |acc| {
                    add_into(acc, g);
                });
                with_grad!(*b, |acc| {
                    for (x, gv) in acc.iter_mut().zip(g) {
                        *x -= gv;
                    }
                });
            }
            Op::AddRow(a, b) => {
                with_grad!(*a, |acc| {
                    add_into(acc, g);
                });
                let n = nodes[b.0].value.cols();
                with_grad!(*b, |acc| {
                    for row in g.chunks(n) {
                        add_into(acc, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                with_grad!(*a, |acc| {
                    for ((x, gv), y) in acc.iter_mut().zip(g).zip(bv) {
                        *x += gv * y;
                    }
                });
                with_grad!(*b, |acc| {
                    for ((x, gv), y) in acc.iter_mut().zip(g).zip(av) {
                        *x += gv * y;
                    }
                });
            }
            Op::MulConst(a, mask) => {
                with_grad!(*a, |acc| {
                    for ((x, gv), m) in acc.iter_mut().zip(g).zip(mask) {
                        *x += gv * m;
                    }
                });
            }
            Op::Scale(a, s) => {
                with_grad!(*a, |acc| {
                    for (x, gv) in acc.iter_mut().zip(g) {
                        *x += gv * s;
                    }
                });
            }
            Op::Relu(a) => {
                let xv = nodes[a.0].value.data();
                with_grad!(*a, |acc| {
                    for ((x, gv), v) in acc.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                with_grad!(*a, |acc| {
                    for ((x, gv), yv) in acc.iter_mut().zip(g).zip(y) {
                        *x += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                with_grad!(*a, |acc| {
                    for ((x, gv), yv) in acc.iter_mut().zip(g).zip(y) {
                        *x += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                with_grad!(*a, |acc| {
                    for ((acc_row, g_row), y_row) in
                        acc.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c))
                    {
                        let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                        for ((x, gv), yv) in acc_row.iter_mut().zip(g_row).zip(y_row) {
                            *x += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].value.cols();
                    with_grad!(*p, |acc| {
                        for (acc_row, g_row) in acc.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(acc_row, &g_row[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    with_grad!(*p, |acc| {
                        add_into(acc, &g[offset..offset + len]);
                    });
                    offset += len;
                }
            }
            Op::SliceRows { input, start } => {
                let c = node.value.cols();
                with_grad!(*input, |acc| {
                    add_into(&mut acc[start * c..start * c + g.len()], g);
                });
            }
            Op::SliceCols { input, start } => {
                let c_in = nodes[input.0].value.cols();
                let c = node.value.cols();
                with_grad!(*input, |acc| {
                    for (acc_row, g_row) in acc.chunks_mut(c_in).zip(g.chunks(c)) {
                        add_into(&mut acc_row[*start..start + c], g_row);
                    }
                });
            }
            Op::MaxPoolRows { input, argmax } => {
                let c = node.value.cols();
                with_grad!(*input, |acc| {
                    for (j, &i) in argmax.iter().enumerate() {
                        acc[i * c + j] += g[j];
                    }
                });
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let c = node.value.cols();
                let gain_v = nodes[gain.0].value.data();
                with_grad!(*gain, |acc| {
                    for (g_row, xh_row) in g.chunks(c).zip(normalized.chunks(c)) {
                        for ((x, gv), xh) in acc.iter_mut().zip(g_row).zip(xh_row) {
                            *x += gv * xh;
                        }
                    }
                });
                with_grad!(*bias, |acc| {
                    for g_row in g.chunks(c) {
                        add_into(acc, g_row);
                    }
                });
                with_grad!(*input, |acc| {
                    let nf = c as f64;
                    for (((acc_row, g_row), xh_row), is) in acc
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(normalized.chunks(c))
                        .zip(inv_std)
                    {
                        let dxh: Vec<f64> = g_row.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let sum_dxh: f64 = dxh.iter().sum();
                        let sum_dxh_xh: f64 = dxh.iter().zip(xh_row).map(|(a, b)| a * b).sum();
                        for ((x, d), xh) in acc_row.iter_mut().zip(&dxh).zip(xh_row) {
                            *x += is / nf * (nf * d - sum_dxh - xh * sum_dxh_xh);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                with_grad!(*logits, |acc| {
                    for (j, (x, p)) in acc.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { 1.0 } else { 0.0 };
                        *x += g[0] * (p - target);
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let xv = nodes[logits.0].value.data();
                with_grad!(*logits, |acc| {
                    for ((x, v), t) in acc.iter_mut().zip(xv).zip(targets) {
                        *x += g[0] * (sigmoid(*v) - t);
                    }
                });
            }
            Op::SumAll(a) => {
                with_grad!(*a, |acc| {
                    for x in acc.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            Op::Sum(parts) => {
                for p in parts {
                    with_grad!(*p, |acc| {
                        add_into(acc, g);
                    });
                }
            }
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| s.register(*n, t.clone()).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn matmul_gradients_by_hand() {
        let a = Tensor::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(2, 1, vec![3.0, 4.0]).unwrap();
        let (store, ids) = store_with(&[("a", a), ("b", b)]);
        let mut g = Graph::new(&store);
        let av = g.param(ids[0]);
        let bv = g.param(ids[1]);
        let y = g.matmul(av, bv).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.params.get(ids[0]).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.params.get(ids[1]).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn unreachable_nodes_have_zero_grad() {
        let (store, ids) = store_with(&[("a", Tensor::row_vector(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        let side = g.tanh(a);
        let loss = g.sum_all(a);
        let grads = g.backward(loss).unwrap();
        assert!(grads.grad(side).data().iter().all(|v| *v == 0.0));
        assert_eq!(grads.grad(a).data(), &[1.0, 1.0]);
    }

    #[test]
    fn param_node_is_shared_within_graph() {
        let (store, ids) = store_with(&[("a", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&store);
        let a1 = g.param(ids[0]);
        let a2 = g.param(ids[0]);
        assert_eq!(a1, a2);
        let sq = g.mul(a1, a2).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.params.get(ids[0]).unwrap().data(), &[6.0]);
    }

    #[test]
    fn gather_scatters_into_rows() {
        let table = Tensor::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let (store, ids) = store_with(&[("emb", table)]);
        let mut g = Graph::new(&store);
        let rows = g.gather(ids[0], &[2, 2, 0]).unwrap();
        assert_eq!(g.value(rows).row(0), &[4.0, 5.0]);
        let loss = g.sum_all(rows);
        let grads = g.backward(loss).unwrap();
        assert_eq!(
            grads.params.get(ids[0]).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
        assert!(g.gather(ids[0], &[3]).is_err());
    }

    #[test]
    fn max_pool_routes_to_first_argmax() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(3, 2, vec![1.0, 5.0, 3.0, 5.0, 3.0, 2.0]).unwrap());
        let m = g.max_pool_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        let loss = g.sum_all(m);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.grad(x).data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_zeroes_and_rescales_in_training() {
        use rand::SeedableRng;
        let store = ParamStore::new();
        let mut g = Graph::training(&store, ChaCha8Rng::seed_from_u64(7));
        let x = g.constant(Tensor::filled(1, 1000, 1.0));
        let y = g.dropout(x, 0.75).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|v| *v == 0.0 || *v == 4.0));
        let kept = vals.iter().filter(|v| **v > 0.0).count();
        assert!((150..350).contains(&kept), "kept {kept}");
    }

    #[test]
    fn shape_errors_are_reported() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        assert!(g.add(a, b).is_ok());
        let c = g.constant(Tensor::zeros(1, 2));
        assert!(g.add_row(a, c).is_err());
        assert!(g.backward(a).is_err());
    }
}
