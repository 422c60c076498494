//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every forward op appends a node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes in exact reverse recording order and returns the gradients of
//! the leaves that were registered with `requires_grad`. Only ops with at
//! least one gradient-carrying input propagate anything backward.
//!
//! ```
//! use segconsist::autodiff::Tape;
//! use segconsist::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_grad());
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Zero,
    /// Periodic boundary; used by the translation-equivariance harness.
    Wrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
            mode: PadMode::Zero,
        }
    }
}

/// Op discriminant, used to target a [`BackwardFault`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Conv2d,
    Relu,
    Softmax,
    Log,
    Sum,
    Mean,
    SumLastAxis,
    Square,
    Sqrt,
    Gather,
    GatherRows,
    RowNormalize,
    Reshape,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "scale" => OpKind::Scale,
            "matmul" => OpKind::MatMul,
            "conv2d" => OpKind::Conv2d,
            "relu" => OpKind::Relu,
            "softmax" => OpKind::Softmax,
            "log" => OpKind::Log,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "sum_last_axis" => OpKind::SumLastAxis,
            "square" => OpKind::Square,
            "sqrt" => OpKind::Sqrt,
            "gather" => OpKind::Gather,
            "gather_rows" => OpKind::GatherRows,
            "row_normalize" => OpKind::RowNormalize,
            "reshape" => OpKind::Reshape,
            other => return Err(invalid(format!("unknown op kind {other:?}"))),
        })
    }
}

/// Test-harness hook: scales every gradient a given op kind sends to its
/// inputs, producing a deliberately wrong backward rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub scale: f64,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Relu(Var),
    Softmax(Var),
    Log {
        x: Var,
        floor: f64,
    },
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    Square(Var),
    Sqrt(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Log { .. } => OpKind::Log,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumLastAxis(_) => OpKind::SumLastAxis,
            Op::Square(_) => OpKind::Square,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Gather { .. } => OpKind::Gather,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::RowNormalize { .. } => OpKind::RowNormalize,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the gradient-carrying leaves, indexed by their [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `var` into `target`'s grad buffer.
    /// A leaf unreachable from the loss contributes zeros.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a copy of `t` as a leaf; it carries gradient iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers `t` as a constant leaf that never carries gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
            }
        }
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// 2-D convolution over a channels-last `[H, W, Ci]` input with a
    /// `[kh, kw, Ci, Co]` kernel and optional `[Co]` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 3 || sk.len() != 4 || si[2] != sk[2] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [sk[3]] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: sk,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        if spec.stride == 0 {
            return Err(invalid("conv2d: stride must be positive"));
        }
        let geo = ConvGeometry::new(&si, &sk, spec)?;
        let out = conv_forward(&geo, self.data(input), self.data(kernel), bias.map(|b| self.data(b)));
        let v = Tensor::new(&[geo.ho, geo.wo, geo.co], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            },
            &inputs,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    /// Softmax over the trailing (class) axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.push(v, Op::Softmax(a), &[a]))
    }

    /// Natural log with inputs clamped from below at `floor`; the clamped
    /// region has zero derivative.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let v = self.map(a, |x| x.max(floor).ln());
        self.push(v, Op::Log { x: a, floor }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sums the trailing axis: `[..., C] -> [...]` (a 1-D input becomes `[1]`).
    pub fn sum_last_axis(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.last_dim();
        let out: Vec<f64> = x.data().chunks(c).map(|r| r.iter().sum()).collect();
        let shape = match x.shape() {
            [_] => vec![1],
            s => s[..s.len() - 1].to_vec(),
        };
        let v = Tensor::new(&shape, out).expect("row count matches");
        self.push(v, Op::SumLastAxis(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x < 0.0) {
            return Err(invalid("sqrt: negative input"));
        }
        let v = self.map(a, f64::sqrt);
        Ok(self.push(v, Op::Sqrt(a), &[a]))
    }

    /// Selects flat elements by index, producing a 1-D tensor.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let d = self.data(a);
        if idx.is_empty() {
            return Err(Error::EmptyAxis { op: "gather" });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d.len()) {
            return Err(invalid(format!("gather: index {bad} out of range {}", d.len())));
        }
        let out: Vec<f64> = idx.iter().map(|&i| d[i]).collect();
        let v = Tensor::from_vec(out);
        Ok(self.push(v, Op::Gather { x: a, idx }, &[a]))
    }

    /// Selects trailing-axis rows: a `[..., C]` input viewed as `[R, C]`
    /// yields `[rows.len(), C]`.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        let r = x.rows();
        if rows.is_empty() {
            return Err(Error::EmptyAxis { op: "gather_rows" });
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(invalid(format!("gather_rows: row {bad} out of range {r}")));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            out.extend_from_slice(x.row(i));
        }
        let v = Tensor::new(&[rows.len(), c], out)?;
        Ok(self.push(v, Op::GatherRows { x: a, rows }, &[a]))
    }

    /// Scales every trailing-axis row to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(x.rows());
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(invalid("row_normalize: zero-norm row"));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.push(v, Op::RowNormalize { x: a, norms }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).detached().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Reverse pass from a scalar `loss`. Clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss { shape });
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaf_grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(g);
                continue;
            }
            let mut contribs = backward_rule(&nodes, node, &g);
            if let Some(f) = self.fault {
                if f.op == node.op.kind() {
                    for (_, c) in contribs.iter_mut() {
                        c.iter_mut().for_each(|v| *v *= f.scale);
                    }
                }
            }
            for (input, c) in contribs {
                if !nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn backward_rule(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let val = |v: Var| nodes[v.0].value.data();
    let needs = |v: Var| nodes[v.0].requires_grad;
    let out = node.value.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => {
            let mut r = Vec::new();
            if needs(*a) {
                r.push((*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
            }
            if needs(*b) {
                r.push((*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
            }
            r
        }
        Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
        Op::MatMul(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (da, db) = (val(*a), val(*b));
            let mut r = Vec::new();
            if needs(*a) {
                // dA = G B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        ga[i * k + p] = (0..n).map(|j| g[i * n + j] * db[p * n + j]).sum();
                    }
                }
                r.push((*a, ga));
            }
            if needs(*b) {
                // dB = A^T G
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = da[i * k + p];
                        let grow = &g[i * n..(i + 1) * n];
                        gb[p * n..(p + 1) * n]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(o, &gv)| *o += av * gv);
                    }
                }
                r.push((*b, gb));
            }
            r
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            spec,
        } => {
            let geo = ConvGeometry::new(nodes[input.0].value.shape(), nodes[kernel.0].value.shape(), *spec)
                .expect("validated in forward");
            let mut r = Vec::new();
            if needs(*input) {
                r.push((*input, conv_backward_input(&geo, val(*kernel), g)));
            }
            if needs(*kernel) {
                r.push((*kernel, conv_backward_kernel(&geo, val(*input), g)));
            }
            if let Some(b) = bias {
                if needs(*b) {
                    let mut gb = vec![0.0; geo.co];
                    for px in g.chunks(geo.co) {
                        gb.iter_mut().zip(px).for_each(|(o, v)| *o += v);
                    }
                    r.push((*b, gb));
                }
            }
            r
        }
        Op::Relu(a) => vec![(
            *a,
            g.iter()
                .zip(val(*a))
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect(),
        )],
        Op::Softmax(a) => {
            let c = node.value.last_dim();
            let mut dx = vec![0.0; g.len()];
            for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = y * (gv - dot);
                }
            }
            vec![(*a, dx)]
        }
        Op::Log { x, floor } => vec![(
            *x,
            g.iter()
                .zip(val(*x))
                .map(|(&g, &v)| if v > *floor { g / v } else { 0.0 })
                .collect(),
        )],
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
        Op::Mean(a) => {
            let n = val(*a).len();
            vec![(*a, vec![g[0] / n as f64; n])]
        }
        Op::SumLastAxis(a) => {
            let c = nodes[a.0].value.last_dim();
            let mut dx = Vec::with_capacity(val(*a).len());
            for &gv in g {
                dx.extend(std::iter::repeat_n(gv, c));
            }
            vec![(*a, dx)]
        }
        Op::Square(a) => vec![(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * x * g).collect())],
        Op::Sqrt(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g / (2.0 * y)).collect())],
        Op::Gather { x, idx } => {
            let mut dx = vec![0.0; val(*x).len()];
            for (&i, &gv) in idx.iter().zip(g) {
                dx[i] += gv;
            }
            vec![(*x, dx)]
        }
        Op::GatherRows { x, rows } => {
            let c = nodes[x.0].value.last_dim();
            let mut dx = vec![0.0; val(*x).len()];
            for (&r, gr) in rows.iter().zip(g.chunks(c)) {
                dx[r * c..(r + 1) * c].iter_mut().zip(gr).for_each(|(d, v)| *d += v);
            }
            vec![(*x, dx)]
        }
        Op::RowNormalize { x, norms } => {
            let c = node.value.last_dim();
            let mut dx = vec![0.0; g.len()];
            for (((dr, gr), yr), &n) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)).zip(norms) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = (gv - y * dot) / n;
                }
            }
            vec![(*x, dx)]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
    }
}

struct ConvGeometry {
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeometry {
    fn new(si: &[usize], sk: &[usize], spec: ConvSpec) -> Result<Self> {
        let (h, w, ci) = (si[0], si[1], si[2]);
        let (kh, kw, co) = (sk[0], sk[1], sk[3]);
        if h + 2 * spec.pad < kh || w + 2 * spec.pad < kw {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: si.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        if spec.mode == PadMode::Wrap && (spec.pad > h || spec.pad > w) {
            return Err(invalid("conv2d: wrap padding wider than the image"));
        }
        Ok(Self {
            h,
            w,
            ci,
            kh,
            kw,
            co,
            ho: (h + 2 * spec.pad - kh) / spec.stride + 1,
            wo: (w + 2 * spec.pad - kw) / spec.stride + 1,
            spec,
        })
    }

    /// Maps an output coordinate plus kernel offset to a source coordinate.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + k) as isize - self.spec.pad as isize;
        if (0..extent as isize).contains(&pos) {
            Some(pos as usize)
        } else {
            match self.spec.mode {
                PadMode::Zero => None,
                PadMode::Wrap => Some(pos.rem_euclid(extent as isize) as usize),
            }
        }
    }
}

fn conv_forward(geo: &ConvGeometry, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ci, co) = (geo.ci, geo.co);
    let mut out = vec![0.0; geo.ho * geo.wo * co];
    for oy in 0..geo.ho {
        for ox in 0..geo.wo {
            let opx = &mut out[(oy * geo.wo + ox) * co..][..co];
            if let Some(b) = bias {
                opx.copy_from_slice(b);
            }
            for ky in 0..geo.kh {
                let Some(iy) = geo.source(oy, ky, geo.h) else { continue };
                for kx in 0..geo.kw {
                    let Some(ix) = geo.source(ox, kx, geo.w) else { continue };
                    let ipx = &input[(iy * geo.w + ix) * ci..][..ci];
                    let kbase = (ky * geo.kw + kx) * ci * co;
                    for (c, &v) in ipx.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &kernel[kbase + c * co..][..co];
                        opx.iter_mut().zip(krow).for_each(|(o, &k)| *o += v * k);
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(geo: &ConvGeometry, kernel: &[f64], g: &[f64]) -> Vec<f64> {
    let (ci, co) = (geo.ci, geo.co);
    // [kh, kw, co, ci] so the inner loop runs contiguously over ci.
    let mut kt = vec![0.0; kernel.len()];
    for tap in 0..geo.kh * geo.kw {
        for c in 0..ci {
            for o in 0..co {
                kt[tap * co * ci + o * ci + c] = kernel[tap * ci * co + c * co + o];
            }
        }
    }
    let mut dx = vec![0.0; geo.h * geo.w * ci];
    for oy in 0..geo.ho {
        for ox in 0..geo.wo {
            let gpx = &g[(oy * geo.wo + ox) * co..][..co];
            for ky in 0..geo.kh {
                let Some(iy) = geo.source(oy, ky, geo.h) else { continue };
                for kx in 0..geo.kw {
                    let Some(ix) = geo.source(ox, kx, geo.w) else { continue };
                    let dpx = &mut dx[(iy * geo.w + ix) * ci..][..ci];
                    let kbase = (ky * geo.kw + kx) * co * ci;
                    for (o, &gv) in gpx.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let krow = &kt[kbase + o * ci..][..ci];
                        dpx.iter_mut().zip(krow).for_each(|(d, &k)| *d += gv * k);
                    }
                }
            }
        }
    }
    dx
}

fn conv_backward_kernel(geo: &ConvGeometry, input: &[f64], g: &[f64]) -> Vec<f64> {
    let (ci, co) = (geo.ci, geo.co);
    let mut dk = vec![0.0; geo.kh * geo.kw * ci * co];
    for oy in 0..geo.ho {
        for ox in 0..geo.wo {
            let gpx = &g[(oy * geo.wo + ox) * co..][..co];
            if gpx.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..geo.kh {
                let Some(iy) = geo.source(oy, ky, geo.h) else { continue };
                for kx in 0..geo.kw {
                    let Some(ix) = geo.source(ox, kx, geo.w) else { continue };
                    let ipx = &input[(iy * geo.w + ix) * ci..][..ci];
                    let kbase = (ky * geo.kw + kx) * ci * co;
                    for (c, &v) in ipx.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let drow = &mut dk[kbase + c * co..][..co];
                        drow.iter_mut().zip(gpx).for_each(|(d, &gv)| *d += v * gv);
                    }
                }
            }
        }
    }
    dk
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let mut probe = x.clone();
        (0..x.len())
            .map(|i| {
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + h;
                let up = f(&probe);
                probe.data_mut()[i] = orig - h;
                let down = f(&probe);
                probe.data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Checks d(sum(op(x) * w)) / dx for a fixed random weighting w.
    fn check_unary(seed: u64, shape: &[usize], op: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, shape).with_grad();
        let eval = |t: &Tensor, grads: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(t);
            let y = op(&mut tape, xv);
            let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let w = random(&mut wrng, tape.value(y).shape());
            let wv = tape.constant(w);
            let p = tape.mul(y, wv).unwrap();
            let l = tape.sum(p);
            let val = tape.value(l).item();
            let g = grads.then(|| tape.backward(l).unwrap().get(xv).unwrap().to_vec());
            (val, g)
        };
        let analytic = eval(&x, true).1.unwrap();
        let numeric = numeric_grad(&x, 1e-3, |t| eval(t, false).0);
        max_rel_err(&analytic, &numeric)
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4], 3.7));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[5, 5, 6]);
        let shifted = Tensor::new(x.shape(), x.data().iter().map(|v| v * 30.0 + 17.0).collect()).unwrap();
        let base = Tensor::new(x.shape(), x.data().iter().map(|v| v * 30.0).collect()).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(base);
        let b = tape.constant(shifted);
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        for r in 0..25 {
            let s: f64 = tape.value(sa).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) <= 1e-10);
    }

    #[test]
    fn softmax_over_empty_axis_is_rejected() {
        // A zero extent cannot even be constructed.
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn identity_kernel_conv_reproduces_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random(&mut rng, &[6, 7, 2]);
        let mut k = Tensor::zeros(&[3, 3, 2, 2]);
        for c in 0..2 {
            k.data_mut()[(4 * 2 + c) * 2 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let kv = tape.constant(k);
        let y = tape.conv2d(x, kv, None, ConvSpec::same(3)).unwrap();
        assert_eq!(tape.value(y).data(), img.data());
    }

    #[test]
    fn conv_shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 4, 3]));
        let k = tape.constant(Tensor::zeros(&[3, 3, 2, 5]));
        let err = tape.conv2d(x, k, None, ConvSpec::same(3)).unwrap_err().to_string();
        assert!(
            err.contains("conv2d") && err.contains("[4, 4, 3]") && err.contains("[3, 3, 2, 5]"),
            "{err}"
        );
    }

    #[test]
    fn strided_conv_output_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[8, 6, 1]));
        let k = tape.constant(Tensor::zeros(&[3, 3, 1, 2]));
        let spec = ConvSpec {
            stride: 2,
            pad: 1,
            mode: PadMode::Zero,
        };
        let y = tape.conv2d(x, k, None, spec).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 3, 2]);
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 3, 4]).with_grad());
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 24]);
        assert!(tape.is_empty());
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_grad());
        let p = tape.mul(x, x).unwrap();
        let l = tape.sum(p);
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[3]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_mse_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let target_logits = random(&mut rng, &[4, 4, 3]);
            let x = random(&mut rng, &[4, 4, 3]).with_grad();
            let eval = |t: &Tensor, grads: bool| {
                let mut tape = Tape::new();
                let a = tape.leaf(t);
                let b = tape.constant(target_logits.clone());
                let sa = tape.softmax(a).unwrap();
                let sb = tape.softmax(b).unwrap();
                let d = tape.sub(sa, sb).unwrap();
                let sq = tape.square(d);
                let l = tape.mean(sq);
                let v = tape.value(l).item();
                (v, grads.then(|| tape.backward(l).unwrap().get(a).unwrap().to_vec()))
            };
            let analytic = eval(&x, true).1.unwrap();
            let numeric = numeric_grad(&x, 1e-3, |t| eval(t, false).0);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        for seed in 0..20 {
            let ops: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
                ("softmax", Box::new(|t: &mut Tape, x| t.softmax(x).unwrap())),
                ("square", Box::new(|t: &mut Tape, x| t.square(x))),
                ("scale", Box::new(|t: &mut Tape, x| t.scale(x, -2.5))),
                ("sum_last_axis", Box::new(|t: &mut Tape, x| t.sum_last_axis(x))),
                (
                    "row_normalize",
                    Box::new(|t: &mut Tape, x| {
                        let s = t.softmax(x).unwrap();
                        t.row_normalize(s).unwrap()
                    }),
                ),
                ("mean", Box::new(|t: &mut Tape, x| t.mean(x))),
                ("reshape", Box::new(|t: &mut Tape, x| t.reshape(x, &[12, 3]).unwrap())),
                (
                    "gather",
                    Box::new(|t: &mut Tape, x| t.gather(x, vec![0, 5, 5, 35, 2]).unwrap()),
                ),
                (
                    "gather_rows",
                    Box::new(|t: &mut Tape, x| t.gather_rows(x, vec![3, 1, 3, 0]).unwrap()),
                ),
                (
                    "log",
                    Box::new(|t: &mut Tape, x| {
                        let s = t.softmax(x).unwrap();
                        t.log_clamped(s, 1e-12)
                    }),
                ),
                (
                    "sqrt",
                    Box::new(|t: &mut Tape, x| {
                        let sq = t.square(x);
                        let one = t.constant(Tensor::full(&[3, 4, 3], 1.0));
                        let s = t.add(sq, one).unwrap();
                        t.sqrt(s).unwrap()
                    }),
                ),
            ];
            for (name, op) in ops {
                let err = check_unary(seed, &[3, 4, 3], op);
                assert!(err < 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn relu_matches_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..30)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::new(&[30], data).unwrap().with_grad();
        let eval = |t: &Tensor| {
            let mut tape = Tape::new();
            let a = tape.leaf(t);
            let r = tape.relu(a);
            let s = tape.square(r);
            let l = tape.sum(s);
            (tape.value(l).item(), tape.backward(l).unwrap().get(a).unwrap().to_vec())
        };
        let analytic = eval(&x).1;
        let numeric = numeric_grad(&x, 1e-3, |t| eval(t).0);
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[3, 4]).with_grad();
            let b = random(&mut rng, &[3, 4]).with_grad();
            let m = random(&mut rng, &[4, 2]).with_grad();
            let eval = |a: &Tensor, b: &Tensor, m: &Tensor| {
                let mut tape = Tape::new();
                let (av, bv, mv) = (tape.leaf(a), tape.leaf(b), tape.leaf(m));
                let s = tape.add(av, bv).unwrap();
                let d = tape.sub(s, bv).unwrap();
                let p = tape.mul(d, bv).unwrap();
                let mm = tape.matmul(p, mv).unwrap();
                let sq = tape.square(mm);
                let l = tape.sum(sq);
                let v = tape.value(l).item();
                let g = tape.backward(l).unwrap();
                (
                    v,
                    g.get(av).unwrap().to_vec(),
                    g.get(bv).unwrap().to_vec(),
                    g.get(mv).unwrap().to_vec(),
                )
            };
            let (_, ga, gb, gm) = eval(&a, &b, &m);
            let na = numeric_grad(&a, 1e-3, |t| eval(t, &b, &m).0);
            let nb = numeric_grad(&b, 1e-3, |t| eval(&a, t, &m).0);
            let nm = numeric_grad(&m, 1e-3, |t| eval(&a, &b, t).0);
            assert!(max_rel_err(&ga, &na) < 1e-4);
            assert!(max_rel_err(&gb, &nb) < 1e-4);
            assert!(max_rel_err(&gm, &nm) < 1e-4);
        }
    }

    #[test]
    fn conv_matches_finite_differences() {
        for (seed, spec) in [
            (0, ConvSpec::same(3)),
            (
                1,
                ConvSpec {
                    stride: 2,
                    pad: 1,
                    mode: PadMode::Zero,
                },
            ),
            (
                2,
                ConvSpec {
                    stride: 1,
                    pad: 1,
                    mode: PadMode::Wrap,
                },
            ),
            (
                3,
                ConvSpec {
                    stride: 1,
                    pad: 0,
                    mode: PadMode::Zero,
                },
            ),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[5, 6, 2]).with_grad();
            let k = random(&mut rng, &[3, 3, 2, 3]).with_grad();
            let b = random(&mut rng, &[3]).with_grad();
            let eval = |x: &Tensor, k: &Tensor, b: &Tensor| {
                let mut tape = Tape::new();
                let (xv, kv, bv) = (tape.leaf(x), tape.leaf(k), tape.leaf(b));
                let y = tape.conv2d(xv, kv, Some(bv), spec).unwrap();
                let sq = tape.square(y);
                let l = tape.sum(sq);
                let v = tape.value(l).item();
                let g = tape.backward(l).unwrap();
                (
                    v,
                    [
                        g.get(xv).unwrap().to_vec(),
                        g.get(kv).unwrap().to_vec(),
                        g.get(bv).unwrap().to_vec(),
                    ],
                )
            };
            let (_, [gx, gk, gb]) = eval(&x, &k, &b);
            assert!(max_rel_err(&gx, &numeric_grad(&x, 1e-3, |t| eval(t, &k, &b).0)) < 1e-4);
            assert!(max_rel_err(&gk, &numeric_grad(&k, 1e-3, |t| eval(&x, t, &b).0)) < 1e-4);
            assert!(max_rel_err(&gb, &numeric_grad(&b, 1e-3, |t| eval(&x, &k, t).0)) < 1e-4);
        }
    }

    #[test]
    fn fault_hook_corrupts_gradient() {
        let mut tape = Tape::with_fault(Some(BackwardFault {
            op: OpKind::Square,
            scale: 2.0,
        }));
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let s = tape.square(x);
        let l = tape.sum(s);
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let x = random(&mut rng, &[6, 6, 3]).with_grad();
            let k = random(&mut rng, &[3, 3, 3, 4]).with_grad();
            let mut tape = Tape::new();
            let (xv, kv) = (tape.leaf(&x), tape.leaf(&k));
            let y = tape.conv2d(xv, kv, None, ConvSpec::same(3)).unwrap();
            let s = tape.softmax(y).unwrap();
            let q = tape.square(s);
            let l = tape.mean(q);
            let v = tape.value(l).item();
            let g = tape.backward(l).unwrap();
            (
                v.to_bits(),
                g.get(kv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
