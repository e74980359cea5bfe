//! Reverse-mode gradient tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its value and the handles of its parents, so node order is already
//! topological and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::nn::FocalConfig;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Max(Var, Var),
    Min(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SumAll(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Cosine(Var, Var),
    CrossEntropy {
        x: Var,
        target: usize,
        tau: f64,
        probs: Vec<f64>,
    },
    Focal {
        p: Var,
        targets: Vec<f64>,
        cfg: FocalConfig,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Max(..) => "max",
            Op::Min(..) => "min",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRows(..) => "select_rows",
            Op::SumAll(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::Cosine(..) => "cosine",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Focal { .. } => "focal",
        }
    }
}

/// Names accepted by [`Tape::corrupt_rule`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "matmul_nt",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "add_row",
    "scale",
    "add_scalar",
    "sigmoid",
    "relu",
    "gelu",
    "exp",
    "log",
    "sqrt",
    "abs",
    "max",
    "min",
    "softmax",
    "layer_norm",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "select_rows",
    "sum",
    "reshape",
    "conv2d",
    "cosine",
    "cross_entropy",
    "focal",
];

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

const COSINE_GUARD: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(&'static str, f64)>,
}

/// Gradients for every node of a tape after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// contribute.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the backward rule of the named op by `factor`. Only used to
    /// confirm that gradient checks catch a broken rule.
    #[doc(hidden)]
    pub fn corrupt_rule(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, factor));
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf excluded from gradient propagation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copies the current value into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "max", |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "min", |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    /// Adds a `[c]` or `[1×c]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let rv = self.value(row);
        if rv.len() != c {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let rd = rv.data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..r {
            for (o, b) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&rd) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Softmax over the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let mut out = self.value(a).clone();
        for i in 0..r {
            tensor::softmax_row_inplace(&mut out.data_mut()[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if start + len > c || len == 0 {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, len]));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims2(parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index { index: i, len: r });
            }
            out.extend_from_slice(&self.value(a).data()[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![idx.len(), c], out)?, Op::SelectRows(a, idx.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Sum of a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// 2-D convolution of `x [C_in, H, W]` with `w [C_out, C_in, k, k]` and
    /// bias `b [C_out]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([cin, h, wd], [cout, cin2, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape("conv2d", &xs, &ws));
        };
        let (cin, h, wd, cout, kh, kw) = (*cin, *h, *wd, *cout, *kh, *kw);
        if cin != *cin2 || self.value(b).len() != cout || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let xd = self.value(x).data();
        let wdt = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bd[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                s += wdt[((co * cin + ci) * kh + ky) * kw + kx]
                                    * xd[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![cout, ho, wo], out)?,
            Op::Conv2d { x, w, b, stride, pad },
            ng,
        ))
    }

    /// Pairwise cosine similarity `[n×d] , [k×d] -> [n×k]`, with `1e-12`
    /// added to each denominator.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(a)?;
        let (k, d2) = self.dims2(b)?;
        if d != d2 {
            return Err(Error::shape("cosine", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let na: Vec<f64> = (0..n).map(|i| norm(&ad[i * d..(i + 1) * d])).collect();
        let nb: Vec<f64> = (0..k).map(|j| norm(&bd[j * d..(j + 1) * d])).collect();
        let mut out = vec![0.0; n * k];
        tensor::matmul_nt_into(ad, bd, &mut out, n, d, k);
        for i in 0..n {
            for j in 0..k {
                out[i * k + j] /= na[i] * nb[j] + COSINE_GUARD;
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::Cosine(a, b), ng))
    }

    /// `-log softmax(x / tau)[target]` for a single score row.
    pub fn cross_entropy(&mut self, x: Var, target: usize, tau: f64) -> Result<Var> {
        let n = self.value(x).len();
        if target >= n {
            return Err(Error::Index { index: target, len: n });
        }
        if tau <= 0.0 {
            return Err(Error::config("tau", "must be positive"));
        }
        let mut probs: Vec<f64> = self.value(x).data().iter().map(|v| v / tau).collect();
        let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + probs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - probs[target];
        for p in probs.iter_mut() {
            *p = (*p - lse).exp();
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { x, target, tau, probs },
            ng,
        ))
    }

    /// Summed focal loss of probabilities `p` against binary `targets`.
    pub fn focal_sum(&mut self, p: Var, targets: &[f64], cfg: FocalConfig) -> Result<Var> {
        if self.value(p).len() != targets.len() {
            return Err(Error::shape("focal", self.shape(p), &[targets.len()]));
        }
        let s = self
            .value(p)
            .data()
            .iter()
            .zip(targets)
            .map(|(&pv, &t)| focal_value(pv, t, cfg))
            .sum();
        let ng = self.ng(&[p]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Focal {
                p,
                targets: targets.to_vec(),
                cfg,
            },
            ng,
        ))
    }

    /// Propagates gradients from the scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            if let Some((name, factor)) = self.fault {
                if name == node.op.name() {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().1;
                acc(*a, &mut |ga| tensor::matmul_nt_into(g, val(*b), ga, m, n, k));
                acc(*b, &mut |gb| tensor::matmul_tn_into(val(*a), g, gb, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().0;
                acc(*a, &mut |ga| tensor::matmul_into(g, val(*b), ga, m, n, k));
                acc(*b, &mut |gb| tensor::matmul_tn_into(g, val(*a), gb, m, n, k));
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2().unwrap();
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = self.nodes[row.0].value.len();
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gr| {
                    for (i, v) in g.iter().enumerate() {
                        gr[i % c] += v;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * s)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(x[i]);
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * 0.5 / y[i];
                }
            }),
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sign(x[i]);
                    }
                })
            }
            Op::Max(a, b) | Op::Min(a, b) => {
                let is_max = matches!(node.op, Op::Max(..));
                let (av, bv) = (val(*a), val(*b));
                let pick_a = |i: usize| if is_max { av[i] >= bv[i] } else { av[i] <= bv[i] };
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if pick_a(i) {
                            ga[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        if !pick_a(i) {
                            gb[i] += g[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = node.value.dims2().unwrap();
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - dot);
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
                let (r, c) = node.value.dims2().unwrap();
                let gm = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for i in 0..r * c {
                        gg[i % c] += g[i] * xhat[i];
                    }
                });
                acc(*beta, &mut |gb| {
                    for i in 0..r * c {
                        gb[i % c] += g[i];
                    }
                });
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = g[i * c + j] * gm[j];
                            m1 += dh;
                            m2 += dh * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = g[i * c + j] * gm[j];
                            gx[i * c + j] += rstd[i] * (dh - m1 - xhat[i * c + j] * m2);
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let c = self.nodes[a.0].value.dims2().unwrap().1;
                let (r, len) = node.value.dims2().unwrap();
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..len {
                            ga[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.dims2().unwrap().1;
                    acc(p, &mut |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SelectRows(a, idx) => {
                let c = node.value.dims2().unwrap().1;
                acc(*a, &mut |ga| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = node.value.shape();
                let (ho, wo) = (os[1], os[2]);
                let (xd, wdt) = (val(*x), val(*w));
                let taps = |f: &mut dyn FnMut(usize, usize, f64)| {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g[(co * ho + oy) * wo + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                            let xi = (ci * h + iy as usize) * wd + ix as usize;
                                            f(wi, xi, go);
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                acc(*w, &mut |gw| taps(&mut |wi, xi, go| gw[wi] += go * xd[xi]));
                acc(*x, &mut |gx| taps(&mut |wi, xi, go| gx[xi] += go * wdt[wi]));
                acc(*b, &mut |gb| {
                    for co in 0..cout {
                        gb[co] += g[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (n, d) = self.nodes[a.0].value.dims2().unwrap();
                let k = self.nodes[b.0].value.dims2().unwrap().0;
                let (ad, bd) = (val(*a), val(*b));
                let na: Vec<f64> = (0..n).map(|i| norm(&ad[i * d..(i + 1) * d])).collect();
                let nb: Vec<f64> = (0..k).map(|j| norm(&bd[j * d..(j + 1) * d])).collect();
                // s = a·b / D with D = |a||b| + eps:
                // ds/da = b/D - (a·b)|b| a / (|a| D²), symmetric for b.
                let coef = |i: usize, j: usize| -> (f64, f64, f64) {
                    let den = na[i] * nb[j] + COSINE_GUARD;
                    let dot = y[i * k + j] * den;
                    let gij = g[i * k + j];
                    let ca = if na[i] > 0.0 { dot * nb[j] / (na[i] * den * den) } else { 0.0 };
                    let cb = if nb[j] > 0.0 { dot * na[i] / (nb[j] * den * den) } else { 0.0 };
                    (gij / den, gij * ca, gij * cb)
                };
                acc(*a, &mut |ga| {
                    for i in 0..n {
                        for j in 0..k {
                            let (gd, ca, _) = coef(i, j);
                            for t in 0..d {
                                ga[i * d + t] += gd * bd[j * d + t] - ca * ad[i * d + t];
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..n {
                        for j in 0..k {
                            let (gd, _, cb) = coef(i, j);
                            for t in 0..d {
                                gb[j * d + t] += gd * ad[i * d + t] - cb * bd[j * d + t];
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { x, target, tau, probs } => acc(*x, &mut |gx| {
                for (j, p) in probs.iter().enumerate() {
                    let onehot = if j == *target { 1.0 } else { 0.0 };
                    gx[j] += g[0] * (p - onehot) / tau;
                }
            }),
            Op::Focal { p, targets, cfg } => {
                let pv = val(*p);
                acc(*p, &mut |gp| {
                    for i in 0..pv.len() {
                        gp[i] += g[0] * focal_grad(pv[i], targets[i], *cfg);
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Focal loss of one probability after clamping into `[1e-7, 1 - 1e-7]`.
pub fn focal_value(p: f64, target: f64, cfg: FocalConfig) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (a, gm) = (cfg.alpha, cfg.gamma);
    let pos = -a * (1.0 - p).powf(gm) * p.ln();
    let neg = -(1.0 - a) * p.powf(gm) * (1.0 - p).ln();
    target * pos + (1.0 - target) * neg
}

fn focal_grad(p: f64, target: f64, cfg: FocalConfig) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    let (a, gm) = (cfg.alpha, cfg.gamma);
    let pow_m1 = |base: f64| if gm == 0.0 { 0.0 } else { gm * base.powf(gm - 1.0) };
    let dpos = a * (pow_m1(1.0 - p) * p.ln() - (1.0 - p).powf(gm) / p);
    let dneg = -(1.0 - a) * (pow_m1(p) * (1.0 - p).ln() - p.powf(gm) / (1.0 - p));
    target * dpos + (1.0 - target) * dneg
}
