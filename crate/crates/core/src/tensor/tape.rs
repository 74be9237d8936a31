use std::cell::{Ref, RefCell};

use super::kernels as k;
use super::{matmul_dims, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddScalarVar(usize, usize),
    MulScalarVar(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Powf(usize, f64),
    Clamp(usize, f64, f64),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    ChannelAffine(usize, usize, usize),
    Upsample(usize, usize, usize),
    Smooth(usize, Vec<f64>),
    CumSumRows(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of executed ops. One tape per worker; not shareable
/// across threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        value.grad = None;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn op1(&self, x: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn op2(&self, a: usize, b: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return dim_err("concat_rows", "no inputs");
        }
        let nodes = self.nodes.borrow();
        let cols = nodes[parts[0].id].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &nodes[p.id].value;
            if v.shape().len() != 2 || v.cols() != cols {
                return dim_err("concat_rows", format!("{:?} vs width {cols}", v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        drop(nodes);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return dim_err("concat_cols", "no inputs");
        }
        let nodes = self.nodes.borrow();
        let rows = nodes[parts[0].id].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| nodes[p.id].value.cols()).collect();
        if parts
            .iter()
            .any(|p| nodes[p.id].value.shape().len() != 2 || nodes[p.id].value.rows() != rows)
        {
            return dim_err("concat_cols", "row counts differ");
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = nodes[p.id].value.data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        drop(nodes);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(ids), rg))
    }

    /// Gradient slot of `v` after [`Tape::backward`].
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].value.grad()
    }

    /// Propagates d(loss)/d(node) to every recorded node, visiting each op
    /// once in reverse execution order. Nodes the loss does not reach get
    /// zero gradients. Previous gradients are discarded.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[loss.id].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        for n in nodes.iter_mut() {
            n.value.grad = None;
        }
        nodes[loss.id].value.grad = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = nodes[id].value.grad.take() else {
                continue;
            };
            let contributions = backward_op(&nodes, id, &g);
            nodes[id].value.grad = Some(g);
            for (input, delta) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut nodes[input].value.grad {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        for n in nodes.iter_mut() {
            if n.value.grad.is_none() {
                n.value.grad = Some(vec![0.0; n.value.len()]);
            }
        }
        Ok(())
    }
}

fn backward_op(nodes: &[Node], id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| &nodes[i].value;
    let out = &nodes[id].value;
    let zeros = |i: usize| vec![0.0; nodes[i].value.len()];
    let unary = |x: usize, f: &dyn Fn(usize) -> f64| -> Vec<(usize, Vec<f64>)> {
        vec![(x, (0..g.len()).map(|i| g[i] * f(i)).collect())]
    };
    match &nodes[id].op {
        Op::Leaf => vec![],
        &Op::MatMul(a, b) => {
            let (m, kk, n) = (val(a).shape()[0], val(a).shape()[1], val(b).shape()[1]);
            let mut da = zeros(a);
            let mut db = zeros(b);
            if nodes[a].requires_grad {
                k::matmul_grad_a(g, val(b).data(), &mut da, m, kk, n);
            }
            if nodes[b].requires_grad {
                k::matmul_grad_b(val(a).data(), g, &mut db, m, kk, n);
            }
            vec![(a, da), (b, db)]
        }
        &Op::Transpose(x) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            vec![(x, k::transpose(g, m, n))]
        }
        &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
        &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            vec![
                (a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                (b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
            ]
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            vec![
                (a, (0..g.len()).map(|i| g[i] / bv[i]).collect()),
                (b, (0..g.len()).map(|i| -g[i] * av[i] / (bv[i] * bv[i])).collect()),
            ]
        }
        &Op::Min(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let mut da = zeros(a);
            let mut db = zeros(b);
            for i in 0..g.len() {
                if av[i] <= bv[i] {
                    da[i] = g[i];
                } else {
                    db[i] = g[i];
                }
            }
            vec![(a, da), (b, db)]
        }
        &Op::AddRow(x, b) => {
            let n = val(b).len();
            let mut db = vec![0.0; n];
            for (i, gv) in g.iter().enumerate() {
                db[i % n] += gv;
            }
            vec![(x, g.to_vec()), (b, db)]
        }
        &Op::Scale(x, c) => vec![(x, g.iter().map(|v| v * c).collect())],
        &Op::AddScalar(x) => vec![(x, g.to_vec())],
        &Op::AddScalarVar(x, s) => vec![(x, g.to_vec()), (s, vec![g.iter().sum()])],
        &Op::MulScalarVar(x, s) => {
            let sv = val(s).data()[0];
            let xv = val(x).data();
            vec![
                (x, g.iter().map(|v| v * sv).collect()),
                (s, vec![g.iter().zip(xv).map(|(g, x)| g * x).sum()]),
            ]
        }
        &Op::Relu(x) => {
            let xv = val(x).data();
            unary(x, &|i| if xv[i] > 0.0 { 1.0 } else { 0.0 })
        }
        &Op::Sigmoid(x) => {
            let y = out.data();
            unary(x, &|i| y[i] * (1.0 - y[i]))
        }
        &Op::Tanh(x) => {
            let y = out.data();
            unary(x, &|i| 1.0 - y[i] * y[i])
        }
        &Op::Exp(x) => {
            let y = out.data();
            unary(x, &|i| y[i])
        }
        &Op::Ln(x) => {
            let xv = val(x).data();
            unary(x, &|i| 1.0 / xv[i])
        }
        &Op::Abs(x) => {
            let xv = val(x).data();
            unary(x, &|i| xv[i].signum() * (xv[i] != 0.0) as u8 as f64)
        }
        &Op::Powf(x, p) => {
            let xv = val(x).data();
            unary(x, &|i| p * xv[i].powf(p - 1.0))
        }
        &Op::Clamp(x, lo, hi) => {
            let xv = val(x).data();
            unary(x, &|i| (xv[i] >= lo && xv[i] <= hi) as u8 as f64)
        }
        &Op::Softmax(x, axis) => {
            let (o, l, i) = k::axis_split(out.shape(), axis);
            let mut dx = zeros(x);
            k::softmax_grad(out.data(), g, &mut dx, o, l, i);
            vec![(x, dx)]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = val(*gain).len();
            let gv = val(*gain).data();
            let rows = g.len() / n;
            let mut dx = vec![0.0; g.len()];
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            for r in 0..rows {
                let gr = &g[r * n..(r + 1) * n];
                let hr = &xhat[r * n..(r + 1) * n];
                let mut sum_d = 0.0;
                let mut sum_dh = 0.0;
                for j in 0..n {
                    let dh = gr[j] * gv[j];
                    sum_d += dh;
                    sum_dh += dh * hr[j];
                    dgain[j] += gr[j] * hr[j];
                    dbias[j] += gr[j];
                }
                let nf = n as f64;
                for j in 0..n {
                    let dh = gr[j] * gv[j];
                    dx[r * n + j] = inv_std[r] / nf * (nf * dh - sum_d - hr[j] * sum_dh);
                }
            }
            vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
        }
        &Op::GlobalAvgPool(x) => {
            let s = val(x).shape();
            let hw = s[1] * s[2];
            let dx = (0..val(x).len()).map(|i| g[i / hw] / hw as f64).collect();
            vec![(x, dx)]
        }
        &Op::Sum(x) => vec![(x, vec![g[0]; val(x).len()])],
        &Op::Mean(x) => {
            let n = val(x).len();
            vec![(x, vec![g[0] / n as f64; n])]
        }
        &Op::Reshape(x) => vec![(x, g.to_vec())],
        Op::ConcatRows(ids) => {
            let mut off = 0;
            ids.iter()
                .map(|&i| {
                    let n = val(i).len();
                    let d = g[off..off + n].to_vec();
                    off += n;
                    (i, d)
                })
                .collect()
        }
        &Op::SliceRows(x, start) => {
            let mut dx = zeros(x);
            let n = out.cols();
            dx[start * n..start * n + g.len()].copy_from_slice(g);
            vec![(x, dx)]
        }
        Op::ConcatCols(ids) => {
            let rows = out.rows();
            let total = out.cols();
            let mut off = 0;
            ids.iter()
                .map(|&i| {
                    let w = val(i).cols();
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    (i, d)
                })
                .collect()
        }
        &Op::SliceCols(x, start) => {
            let (rows, total) = (val(x).rows(), val(x).cols());
            let w = out.cols();
            let mut dx = zeros(x);
            for r in 0..rows {
                dx[r * total + start..r * total + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![(x, dx)]
        }
        &Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let xs = val(x).shape();
            let ws = val(w).shape();
            let (c, h, wd) = (xs[0], xs[1], xs[2]);
            let (o, kk) = (ws[0], ws[2]);
            let (ho, wo) = (out.shape()[1], out.shape()[2]);
            let cols = k::im2col(val(x).data(), c, h, wd, kk, stride, pad, ho, wo);
            let ckk = c * kk * kk;
            let mut dw = zeros(w);
            let mut db = vec![0.0; o];
            for oc in 0..o {
                db[oc] = g[oc * ho * wo..(oc + 1) * ho * wo].iter().sum();
            }
            let mut res = Vec::with_capacity(3);
            if nodes[w].requires_grad {
                // dW = dOut · colsᵀ
                k::matmul_grad_a(g, &cols, &mut dw, o, ckk, ho * wo);
            }
            if nodes[x].requires_grad {
                let mut dcols = vec![0.0; ckk * ho * wo];
                k::matmul_grad_b(val(w).data(), g, &mut dcols, o, ckk, ho * wo);
                let mut dx = zeros(x);
                k::col2im_add(&dcols, &mut dx, c, h, wd, kk, stride, pad, ho, wo);
                res.push((x, dx));
            }
            res.push((w, dw));
            res.push((b, db));
            res
        }
        &Op::ChannelAffine(x, alpha, beta) => {
            let c = val(alpha).len();
            let plane = val(x).len() / c;
            let xv = val(x).data();
            let av = val(alpha).data();
            let mut dx = vec![0.0; g.len()];
            let mut da = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ch in 0..c {
                for p in 0..plane {
                    let i = ch * plane + p;
                    dx[i] = g[i] * av[ch];
                    da[ch] += g[i] * xv[i];
                    dbeta[ch] += g[i];
                }
            }
            vec![(x, dx), (alpha, da), (beta, dbeta)]
        }
        &Op::Upsample(x, fy, fx) => {
            let s = val(x).shape();
            let (p, h, w) = (s[0], s[1], s[2]);
            let (oh, ow) = (h * fy, w * fx);
            let mut dx = zeros(x);
            for pl in 0..p {
                for i in 0..oh {
                    for j in 0..ow {
                        dx[(pl * h + i / fy) * w + j / fx] += g[(pl * oh + i) * ow + j];
                    }
                }
            }
            vec![(x, dx)]
        }
        Op::Smooth(x, kernel) => {
            // The smoothing operator is symmetric, so it is its own adjoint.
            let s = out.shape();
            vec![(*x, k::smooth_planes(g, s[0], s[1], s[2], kernel))]
        }
        &Op::CumSumRows(x) => {
            let (rows, cols) = (out.rows(), out.cols());
            let mut dx = vec![0.0; g.len()];
            for c in 0..cols {
                let mut acc = 0.0;
                for r in (0..rows).rev() {
                    acc += g[r * cols + c];
                    dx[r * cols + c] = acc;
                }
            }
            vec![(x, dx)]
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node_value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        let mut t = self.node_value().clone();
        t.grad = None;
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node_value().shape().to_vec()
    }

    pub fn scalar_value(&self) -> f64 {
        self.node_value().data()[0]
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return dim_err(op, format!("{a:?} vs {b:?}"));
        }
        Ok(())
    }

    fn map_value(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.node_value().map(f)
    }

    fn zip_value(&self, other: &Var<'t>, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let a = self.node_value();
        let b = other.node_value();
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(a.shape().to_vec(), data)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.node_value();
            let b = other.node_value();
            let (m, kk, n) = matmul_dims(a.shape(), b.shape())?;
            Tensor::from_parts(vec![m, n], k::matmul(a.data(), b.data(), m, kk, n))
        };
        Ok(self.tape.op2(self.id, other.id, value, Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let value = self.node_value().transpose()?;
        Ok(self.tape.op1(self.id, value, Op::Transpose(self.id)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "add")?;
        let v = self.zip_value(&other, |a, b| a + b);
        Ok(self.tape.op2(self.id, other.id, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "sub")?;
        let v = self.zip_value(&other, |a, b| a - b);
        Ok(self.tape.op2(self.id, other.id, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "mul")?;
        let v = self.zip_value(&other, |a, b| a * b);
        Ok(self.tape.op2(self.id, other.id, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "div")?;
        let v = self.zip_value(&other, |a, b| a / b);
        Ok(self.tape.op2(self.id, other.id, v, Op::Div(self.id, other.id)))
    }

    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "minimum")?;
        let v = self.zip_value(&other, |a, b| if a <= b { a } else { b });
        Ok(self.tape.op2(self.id, other.id, v, Op::Min(self.id, other.id)))
    }

    /// Adds `bias` (length = last extent) to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let x = self.node_value();
            let b = bias.node_value();
            let n = b.len();
            if x.cols() != n {
                return dim_err("add_row", format!("{:?} + [{n}]", x.shape()));
            }
            let data = x.data().iter().enumerate().map(|(i, v)| v + b.data()[i % n]).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        Ok(self.tape.op2(self.id, bias.id, value, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.map_value(|x| x * c);
        self.tape.op1(self.id, v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.map_value(|x| x + c);
        self.tape.op1(self.id, v, Op::AddScalar(self.id))
    }

    fn check_scalar(s: &Var<'t>, op: &'static str) -> Result<f64> {
        let t = s.node_value();
        if t.len() != 1 {
            return dim_err(op, format!("expected a scalar, got {:?}", t.shape()));
        }
        Ok(t.data()[0])
    }

    pub fn add_scalar_var(self, s: Var<'t>) -> Result<Var<'t>> {
        let c = Self::check_scalar(&s, "add_scalar_var")?;
        let v = self.map_value(|x| x + c);
        Ok(self.tape.op2(self.id, s.id, v, Op::AddScalarVar(self.id, s.id)))
    }

    pub fn mul_scalar_var(self, s: Var<'t>) -> Result<Var<'t>> {
        let c = Self::check_scalar(&s, "mul_scalar_var")?;
        let v = self.map_value(|x| x * c);
        Ok(self.tape.op2(self.id, s.id, v, Op::MulScalarVar(self.id, s.id)))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.map_value(|x| x.max(0.0));
        self.tape.op1(self.id, v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.map_value(sigmoid);
        self.tape.op1(self.id, v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.map_value(f64::tanh);
        self.tape.op1(self.id, v, Op::Tanh(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.map_value(f64::exp);
        self.tape.op1(self.id, v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.map_value(f64::ln);
        self.tape.op1(self.id, v, Op::Ln(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.map_value(f64::abs);
        self.tape.op1(self.id, v, Op::Abs(self.id))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let v = self.map_value(|x| x.powf(p));
        self.tape.op1(self.id, v, Op::Powf(self.id, p))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.map_value(|x| x.clamp(lo, hi));
        self.tape.op1(self.id, v, Op::Clamp(self.id, lo, hi))
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = self.node_value().softmax(axis)?;
        Ok(self.tape.op1(self.id, v, Op::Softmax(self.id, axis)))
    }

    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (value, xhat, inv_std) = {
            let x = self.node_value();
            let g = gain.node_value();
            let b = bias.node_value();
            let n = x.cols();
            if g.len() != n || b.len() != n {
                return dim_err("layer_norm", format!("affine width {} vs {n}", g.len()));
            }
            let (y, xhat, inv) = k::layer_norm(x.data(), n, g.data(), b.data(), eps);
            (Tensor::from_parts(x.shape().to_vec(), y), xhat, inv)
        };
        let rg = self.tape.rg(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let v = self.node_value().global_avg_pool()?;
        Ok(self.tape.op1(self.id, v, Op::GlobalAvgPool(self.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.node_value().sum());
        self.tape.op1(self.id, v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = {
            let x = self.node_value();
            Tensor::scalar(x.sum() / x.len() as f64)
        };
        self.tape.op1(self.id, v, Op::Mean(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.node_value().reshape(shape)?;
        Ok(self.tape.op1(self.id, v, Op::Reshape(self.id)))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = {
            let x = self.node_value();
            if x.shape().len() != 2 || start + len > x.rows() || len == 0 {
                return dim_err("slice_rows", format!("{start}+{len} of {:?}", x.shape()));
            }
            let n = x.cols();
            Tensor::from_parts(vec![len, n], x.data()[start * n..(start + len) * n].to_vec())
        };
        Ok(self.tape.op1(self.id, v, Op::SliceRows(self.id, start)))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = {
            let x = self.node_value();
            if x.shape().len() != 2 || start + len > x.cols() || len == 0 {
                return dim_err("slice_cols", format!("{start}+{len} of {:?}", x.shape()));
            }
            let (rows, n) = (x.rows(), x.cols());
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&x.data()[r * n + start..r * n + start + len]);
            }
            Tensor::from_parts(vec![rows, len], data)
        };
        Ok(self.tape.op1(self.id, v, Op::SliceCols(self.id, start)))
    }

    /// 2-D convolution of a `C×H×W` input with `O×C×k×k` weights and `O` biases.
    pub fn conv2d(self, w: Var<'t>, b: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.node_value();
            let wt = w.node_value();
            let bt = b.node_value();
            let (xs, ws) = (x.shape(), wt.shape());
            if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || bt.len() != ws[0] {
                return dim_err("conv2d", format!("input {xs:?}, weight {ws:?}"));
            }
            if stride == 0 || xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
                return dim_err("conv2d", "kernel larger than padded input");
            }
            let (c, h, wd, kk, o) = (xs[0], xs[1], xs[2], ws[2], ws[0]);
            let ho = (h + 2 * pad - kk) / stride + 1;
            let wo = (wd + 2 * pad - kk) / stride + 1;
            let cols = k::im2col(x.data(), c, h, wd, kk, stride, pad, ho, wo);
            let mut y = k::matmul(wt.data(), &cols, o, c * kk * kk, ho * wo);
            for oc in 0..o {
                for v in &mut y[oc * ho * wo..(oc + 1) * ho * wo] {
                    *v += bt.data()[oc];
                }
            }
            Tensor::from_parts(vec![o, ho, wo], y)
        };
        let rg = self.tape.rg(&[self.id, w.id, b.id]);
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.id,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Per-channel `alpha[c]·x + beta[c]` over a `C×…` tensor.
    pub fn channel_affine(self, alpha: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let x = self.node_value();
            let a = alpha.node_value();
            let b = beta.node_value();
            let c = x.shape()[0];
            if a.len() != c || b.len() != c {
                return dim_err("channel_affine", format!("{c} channels vs {} params", a.len()));
            }
            let plane = x.len() / c;
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| a.data()[i / plane] * v + b.data()[i / plane])
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        let rg = self.tape.rg(&[self.id, alpha.id, beta.id]);
        Ok(self
            .tape
            .push(value, Op::ChannelAffine(self.id, alpha.id, beta.id), rg))
    }

    pub fn upsample_nearest(self, fy: usize, fx: usize) -> Result<Var<'t>> {
        let v = {
            let x = self.node_value();
            let s = x.shape();
            if s.len() != 3 || fy == 0 || fx == 0 {
                return dim_err("upsample_nearest", format!("{s:?} by {fy}×{fx}"));
            }
            let data = k::upsample_nearest(x.data(), s[0], s[1], s[2], fy, fx);
            Tensor::from_parts(vec![s[0], s[1] * fy, s[2] * fx], data)
        };
        Ok(self.tape.op1(self.id, v, Op::Upsample(self.id, fy, fx)))
    }

    /// Separable symmetric smoothing of each plane of a `P×H×W` tensor.
    pub fn smooth(self, kernel: &[f64]) -> Result<Var<'t>> {
        let v = {
            let x = self.node_value();
            let s = x.shape();
            if s.len() != 3 || kernel.len().is_multiple_of(2) {
                return dim_err("smooth", format!("{s:?} with kernel {}", kernel.len()));
            }
            Tensor::from_parts(s.to_vec(), k::smooth_planes(x.data(), s[0], s[1], s[2], kernel))
        };
        Ok(self.tape.op1(self.id, v, Op::Smooth(self.id, kernel.to_vec())))
    }

    /// Running sum down the rows: `out[t] = Σ_{s≤t} x[s]`, left fold.
    pub fn cumsum_rows(self) -> Result<Var<'t>> {
        let v = {
            let x = self.node_value();
            if x.shape().len() != 2 {
                return dim_err("cumsum_rows", format!("{:?}", x.shape()));
            }
            let (rows, cols) = (x.rows(), x.cols());
            let mut out = x.data().to_vec();
            for r in 1..rows {
                for c in 0..cols {
                    out[r * cols + c] = out[(r - 1) * cols + c] + x.data()[r * cols + c];
                }
            }
            Tensor::from_parts(vec![rows, cols], out)
        };
        Ok(self.tape.op1(self.id, v, Op::CumSumRows(self.id)))
    }

    /// `softmax(self·keysᵀ/√scale_dim)·values`.
    pub fn attention(self, keys: Var<'t>, values: Var<'t>, scale_dim: usize) -> Result<Var<'t>> {
        let (qs, ks, vs) = (self.shape(), keys.shape(), values.shape());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
            return dim_err("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}"));
        }
        self.matmul(keys.t()?)?
            .scale(1.0 / (scale_dim as f64).sqrt())
            .softmax(1)?
            .matmul(values)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
