//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive in evaluation order. Values are
//! computed eagerly; [`Tape::backward`] walks the record once in reverse and
//! accumulates gradients for every node that depends on a leaf created with
//! [`Tape::param`].
//!
//! ```
//! use mgnt_core::autodiff::Tape;
//! use mgnt_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y);
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use std::cell::RefCell;
use std::fmt;

use crate::error::TensorError;
use crate::tensor::{gemm, Tensor};

type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    LeakyRelu(usize, f64),
    ClampMin(usize, f64),
    Softplus(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    SegmentSum { x: usize, ids: Vec<usize> },
    Gather { x: usize, idx: Vec<usize> },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    Transpose(usize),
    SumAll(usize),
    ColSum(usize),
    DivCol(usize, usize),
    MulCol(usize, usize),
    Custom {
        inputs: Vec<usize>,
        backward: CustomBackward,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Softplus(..) => "softplus",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(..) => "softmax",
            Op::SegmentSum { .. } => "segment_sum",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(..) => "transpose",
            Op::SumAll(..) => "sum_all",
            Op::ColSum(..) => "col_sum",
            Op::DivCol(..) => "div_col",
            Op::MulCol(..) => "mul_col",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    flops: u64,
}

/// One recorded primitive, for cost accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub kind: &'static str,
    pub shape: [usize; 2],
    pub flops: u64,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let [r, c] = v.shape();
            Tensor::zeros(r, c)
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, flops: u64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            flops,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, 0)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Primitive records from node `from` onward (leaves excluded).
    pub fn op_log(&self, from: usize) -> Vec<OpRecord> {
        self.nodes.borrow()[from..]
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| OpRecord {
                kind: n.op.kind(),
                shape: n.value.shape(),
                flops: n.flops,
            })
            .collect()
    }

    /// Which side of its kink every input element of a piecewise-linear op
    /// lies on, packed as bits in tape order.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let nodes = self.nodes.borrow();
        let mut bits = Vec::new();
        let mut n = 0usize;
        let mut push = |b: bool| {
            if n % 64 == 0 {
                bits.push(0u64);
            }
            if b {
                *bits.last_mut().expect("pushed above") |= 1 << (n % 64);
            }
            n += 1;
        };
        for node in nodes.iter() {
            match node.op {
                Op::LeakyRelu(x, _) => nodes[x].value.data().iter().for_each(|&v| push(v > 0.0)),
                Op::ClampMin(x, lo) => nodes[x].value.data().iter().for_each(|&v| push(v > lo)),
                _ => {}
            }
        }
        bits
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Records a primitive with a caller-supplied gradient rule. The rule maps
    /// (output gradient, input values, output value) to one gradient per input.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        let flops = value.len() as u64;
        self.push(
            value,
            Op::Custom {
                inputs: ids,
                backward: Box::new(backward),
            },
            rg,
            flops,
        )
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let [r, c] = nodes[output.id].value.shape();
        grads[output.id] = Some(Tensor::full(r, c, 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if rg(*a) {
                let mut ga = Tensor::zeros(val(*a).rows(), val(*a).cols());
                gemm(false, true, g, val(*b), &mut ga, 0.0);
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let mut gb = Tensor::zeros(val(*b).rows(), val(*b).cols());
                gemm(true, false, val(*a), g, &mut gb, 0.0);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if rg(*b) {
                accumulate(nodes, grads, *b, g.scale(-1.0));
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let ga = zip_map(g, val(*b), |x, y| x * y);
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let gb = zip_map(g, val(*a), |x, y| x * y);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::AddRow(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if rg(*b) {
                accumulate(nodes, grads, *b, col_sum(g));
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.scale(*s)),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::LeakyRelu(a, slope) => {
            let ga = zip_map(g, val(*a), |gv, x| if x > 0.0 { gv } else { gv * slope });
            accumulate(nodes, grads, *a, ga);
        }
        Op::ClampMin(a, lo) => {
            let ga = zip_map(g, val(*a), |gv, x| if x > *lo { gv } else { 0.0 });
            accumulate(nodes, grads, *a, ga);
        }
        Op::Softplus(a) => {
            let ga = zip_map(g, val(*a), |gv, x| gv * sigmoid(x));
            accumulate(nodes, grads, *a, ga);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = xhat.cols();
            let gamma = val(*gain).data();
            if rg(*x) {
                let mut gx = Tensor::zeros(xhat.rows(), d);
                for r in 0..xhat.rows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gamma[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xr[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    let out = gx.row_mut(r);
                    for j in 0..d {
                        let dxh = gr[j] * gamma[j];
                        out[j] = inv_std[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            if rg(*gain) {
                let mut gg = Tensor::zeros(1, d);
                for r in 0..xhat.rows() {
                    for ((o, gv), xv) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                        *o += gv * xv;
                    }
                }
                accumulate(nodes, grads, *gain, gg);
            }
            if rg(*bias) {
                accumulate(nodes, grads, *bias, col_sum(g));
            }
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut ga = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = g.row(r);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SegmentSum { x, ids } => {
            accumulate(nodes, grads, *x, g.gather_rows(ids));
        }
        Op::Gather { x, idx } => {
            let src = val(*x);
            let mut gx = Tensor::zeros(src.rows(), src.cols());
            for (r, &i) in idx.iter().enumerate() {
                for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if rg(p) {
                    accumulate(nodes, grads, p, slice_cols(g, offset, w));
                }
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let src = val(*x);
            let mut gx = Tensor::zeros(src.rows(), src.cols());
            let w = g.cols();
            for r in 0..g.rows() {
                gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::SumAll(a) => {
            let s = val(*a);
            accumulate(nodes, grads, *a, Tensor::full(s.rows(), s.cols(), g.data()[0]));
        }
        Op::ColSum(a) => {
            let s = val(*a);
            let mut ga = Tensor::zeros(s.rows(), s.cols());
            for r in 0..s.rows() {
                ga.row_mut(r).copy_from_slice(g.data());
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::DivCol(a, b) => {
            let bv = val(*b).data();
            if rg(*a) {
                let mut ga = g.clone();
                for (r, &d) in bv.iter().enumerate() {
                    ga.row_mut(r).iter_mut().for_each(|v| *v /= d);
                }
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let av = val(*a);
                let mut gb = Tensor::zeros(bv.len(), 1);
                for (r, &d) in bv.iter().enumerate() {
                    let s: f64 = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                    gb.data_mut()[r] = -s / (d * d);
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::MulCol(a, b) => {
            let bv = val(*b).data();
            if rg(*a) {
                let mut ga = g.clone();
                for (r, &m) in bv.iter().enumerate() {
                    ga.row_mut(r).iter_mut().for_each(|v| *v *= m);
                }
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let av = val(*a);
                let mut gb = Tensor::zeros(bv.len(), 1);
                for r in 0..bv.len() {
                    gb.data_mut()[r] = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Custom { inputs, backward } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let gs = backward(g, &ins, &node.value);
            for (&i, gi) in inputs.iter().zip(gs) {
                accumulate(nodes, grads, i, gi);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("matching shapes")
}

fn col_sum(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

fn slice_cols(t: &Tensor, start: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.rows() * width);
    for r in 0..t.rows() {
        data.extend_from_slice(&t.row(r)[start..start + width]);
    }
    Tensor::from_vec(t.rows(), width, data).expect("slice extent")
}

/// Row-wise softmax with max subtraction.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Value of a `1×1` variable.
    pub fn scalar(&self) -> f64 {
        self.with_value(|t| t.data()[0])
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor, flops_per: u64) -> Var<'t> {
        let out = self.with_value(f);
        let flops = out.len() as u64 * flops_per;
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(out, op, rg, flops)
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<(), TensorError> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(TensorError::Shape {
                op,
                left: a,
                right: b,
            });
        }
        Ok(())
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Tensor,
        flops_per: u64,
    ) -> Var<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        let flops = out.len() as u64 * flops_per;
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(out, op, rg, flops)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.shape(), other.shape());
        if a[1] != b[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                left: a,
                right: b,
            });
        }
        let flops = 2 * (a[0] * a[1] * b[1]) as u64;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let mut out = Tensor::zeros(a[0], b[1]);
            gemm(false, false, &nodes[self.id].value, &nodes[other.id].value, &mut out, 0.0);
            out
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg, flops))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_shape(other, "add")?;
        Ok(self.binary(other, Op::Add(self.id, other.id), |a, b| zip_map(a, b, |x, y| x + y), 1))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_shape(other, "sub")?;
        Ok(self.binary(other, Op::Sub(self.id, other.id), |a, b| zip_map(a, b, |x, y| x - y), 1))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_shape(other, "mul")?;
        Ok(self.binary(other, Op::Mul(self.id, other.id), |a, b| zip_map(a, b, |x, y| x * y), 1))
    }

    /// Adds a `1×n` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.shape(), row.shape());
        if b[0] != 1 || a[1] != b[1] {
            return Err(TensorError::Shape {
                op: "add_row",
                left: a,
                right: b,
            });
        }
        Ok(self.binary(
            row,
            Op::AddRow(self.id, row.id),
            |x, r| {
                let mut out = x.clone();
                for i in 0..out.rows() {
                    for (o, v) in out.row_mut(i).iter_mut().zip(r.data()) {
                        *o += v;
                    }
                }
                out
            },
            1,
        ))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x.scale(s), 1)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x.map(|v| v + c), 1)
    }

    /// `max(x, slope·x)`; the derivative at 0 is `slope`.
    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>, TensorError> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(TensorError::Argument {
                op: "leaky_relu",
                msg: format!("slope {slope} outside (0, 1)"),
            });
        }
        Ok(self.unary(
            Op::LeakyRelu(self.id, slope),
            |x| x.map(|v| if v > 0.0 { v } else { slope * v }),
            1,
        ))
    }

    /// `max(x, lo)`; no gradient flows where the clamp is active.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.unary(Op::ClampMin(self.id, lo), |x| x.map(|v| v.max(lo)), 1)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), |x| x.map(softplus), 4)
    }

    /// Standardizes each row, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::Argument {
                op: "layer_norm",
                msg: format!("eps {eps} must be positive"),
            });
        }
        let [n, d] = self.shape();
        for p in [gain, bias] {
            if p.shape() != [1, d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    left: [n, d],
                    right: p.shape(),
                });
            }
        }
        let (out, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = nodes[gain.id].value.data();
            let b = nodes[bias.id].value.data();
            let mut xhat = Tensor::zeros(n, d);
            let mut out = Tensor::zeros(n, d);
            let mut inv_std = Vec::with_capacity(n);
            for r in 0..n {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                let xh = xhat.row_mut(r);
                for j in 0..d {
                    xh[j] = (row[j] - mean) * is;
                }
                let o = out.row_mut(r);
                for j in 0..d {
                    o[j] = g[j] * xh[j] + b[j];
                }
            }
            (out, xhat, inv_std)
        };
        let rg = self.tape.requires(&[self.id, gain.id, bias.id]);
        let flops = 8 * (n * d) as u64;
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
            flops,
        ))
    }

    /// Softmax along `axis` (0: down columns, 1: along rows).
    pub fn softmax(self, axis: usize) -> Result<Var<'t>, TensorError> {
        match axis {
            1 => Ok(self.unary(Op::SoftmaxRows(self.id), softmax_rows, 5)),
            0 => Ok(self.transpose().softmax(1)?.transpose()),
            _ => Err(TensorError::Argument {
                op: "softmax",
                msg: format!("axis {axis} invalid for a matrix"),
            }),
        }
    }

    /// Row `i` of the result sums the rows whose id is `i`, in ascending row order.
    pub fn segment_sum(self, ids: &[usize], n_segments: usize) -> Result<Var<'t>, TensorError> {
        let [rows, cols] = self.shape();
        if ids.len() != rows {
            return Err(TensorError::Shape {
                op: "segment_sum",
                left: [rows, cols],
                right: [ids.len(), 1],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n_segments) {
            return Err(TensorError::Index {
                op: "segment_sum",
                index: bad,
                bound: n_segments,
            });
        }
        let ids = ids.to_vec();
        let out = self.with_value(|x| {
            let mut out = Tensor::zeros(n_segments, cols);
            for (r, &i) in ids.iter().enumerate() {
                for (o, v) in out.row_mut(i).iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            out
        });
        let rg = self.tape.requires(&[self.id]);
        let flops = (rows * cols) as u64;
        Ok(self
            .tape
            .push(out, Op::SegmentSum { x: self.id, ids }, rg, flops))
    }

    /// Rows selected by `index`.
    pub fn gather(self, index: &[usize]) -> Result<Var<'t>, TensorError> {
        let [rows, cols] = self.shape();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "gather",
                index: bad,
                bound: rows,
            });
        }
        let out = self.with_value(|x| x.gather_rows(index));
        let rg = self.tape.requires(&[self.id]);
        let flops = (index.len() * cols) as u64;
        Ok(self.tape.push(
            out,
            Op::Gather {
                x: self.id,
                idx: index.to_vec(),
            },
            rg,
            flops,
        ))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let first = parts.first().ok_or(TensorError::Argument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let rows = first.shape()[0];
        for p in parts {
            if p.shape()[0] != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
        }
        let out = {
            let nodes = tape.nodes.borrow();
            let total: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row(r));
                }
            }
            Tensor::from_vec(rows, total, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        let flops = out.len() as u64;
        Ok(tape.push(out, Op::ConcatCols(ids), rg, flops))
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        if start + width > shape[1] {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + width,
                bound: shape[1],
            });
        }
        Ok(self.unary(
            Op::SliceCols {
                x: self.id,
                start,
            },
            |x| slice_cols(x, start, width),
            1,
        ))
    }

    pub fn transpose(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), |x| x.transpose(), 1)
    }

    /// Sum of every entry, as `1×1`.
    pub fn sum_all(self) -> Var<'t> {
        let out = self.with_value(|x| Tensor::scalar(x.sum()));
        let flops = self.with_value(|x| x.len() as u64);
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(out, Op::SumAll(self.id), rg, flops)
    }

    /// Column sums, as `1×n`.
    pub fn col_sum(self) -> Var<'t> {
        let out = self.with_value(col_sum);
        let flops = self.with_value(|x| x.len() as u64);
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(out, Op::ColSum(self.id), rg, flops)
    }

    /// Divides row `i` by `col[i]` for an `m×1` column.
    pub fn div_col(self, col: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.col_broadcast(col, "div_col", true)
    }

    /// Multiplies row `i` by `col[i]` for an `m×1` column.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.col_broadcast(col, "mul_col", false)
    }

    fn col_broadcast(self, col: Var<'t>, name: &'static str, divide: bool) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.shape(), col.shape());
        if b != [a[0], 1] {
            return Err(TensorError::Shape {
                op: name,
                left: a,
                right: b,
            });
        }
        let op = if divide {
            Op::DivCol(self.id, col.id)
        } else {
            Op::MulCol(self.id, col.id)
        };
        Ok(self.binary(
            col,
            op,
            |x, c| {
                let mut out = x.clone();
                for (r, &s) in c.data().iter().enumerate() {
                    out.row_mut(r).iter_mut().for_each(|v| {
                        if divide {
                            *v /= s
                        } else {
                            *v *= s
                        }
                    });
                }
                out
            },
            1,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(&[2.0, -1.0]));
        let y = x.leaky_relu(0.01).unwrap().value();
        assert_eq!(y.data(), &[2.0, -0.01]);
    }

    #[test]
    fn leaky_relu_subgradient_at_zero_is_slope() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = x.leaky_relu(0.01).unwrap();
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().data(), &[0.01]);
    }

    #[test]
    fn leaky_relu_rejects_bad_slope() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1.0));
        assert!(x.leaky_relu(1.5).is_err());
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(&[1.0, 1.0, 1.0]));
        let g = tape.constant(Tensor::full(1, 3, 1.0));
        let b = tape.constant(Tensor::zeros(1, 3));
        let y = x.layer_norm(g, b, 1e-5).unwrap().value();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_standardized_row_is_fixed_point() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(&[-1.0, 1.0]));
        let g = tape.constant(Tensor::full(1, 2, 1.0));
        let b = tape.constant(Tensor::zeros(1, 2));
        let y = x.layer_norm(g, b, 1e-14).unwrap().value();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let tape = Tape::new();
        let y = tape
            .constant(Tensor::row_vector(&[0.0, 0.0]))
            .softmax(1)
            .unwrap()
            .value();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let z = tape
            .constant(Tensor::row_vector(&[1000.0, 0.0]))
            .softmax(1)
            .unwrap()
            .value();
        assert!((z.data()[0] - 1.0).abs() < 1e-12 && z.data()[1].abs() < 1e-12);
        assert!(z.is_finite());
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let tape = Tape::new();
        let y = tape
            .constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -4.0]]))
            .softmax(0)
            .unwrap()
            .value();
        for c in 0..2 {
            assert!((y.get(0, c) + y.get(1, c) - 1.0).abs() < 1e-12);
        }
        assert!(tape.constant(Tensor::scalar(1.0)).softmax(2).is_err());
    }

    #[test]
    fn segment_sum_examples() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]));
        let s = v.segment_sum(&[0, 0, 1], 3).unwrap().value();
        assert_eq!(s.data(), &[3.0, 3.0, 0.0]);

        let empty = tape.constant(Tensor::zeros(0, 4));
        let s = empty.segment_sum(&[], 3).unwrap().value();
        assert_eq!(s, Tensor::zeros(3, 4));

        assert!(matches!(
            v.segment_sum(&[0, 3, 1], 3),
            Err(TensorError::Index { index: 3, .. })
        ));
    }

    #[test]
    fn segment_sum_gradient_scatters() {
        let tape = Tape::new();
        let v = tape.param(Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]));
        let s = v.segment_sum(&[0, 0, 1], 2).unwrap();
        let w = tape.constant(Tensor::from_rows(&[&[10.0], &[20.0]]));
        let loss = s.mul(w).unwrap().sum_all();
        let g = tape.backward(loss);
        assert_eq!(g.get(v).unwrap().data(), &[10.0, 10.0, 20.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let p = tape.param(Tensor::scalar(3.0));
        let y = c.mul(p).unwrap();
        let g = tape.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn op_log_records_matmul_flops() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(3, 4));
        let b = tape.constant(Tensor::zeros(4, 5));
        a.matmul(b).unwrap();
        let log = tape.op_log(0);
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].flops, 2 * 3 * 4 * 5);
    }
}
