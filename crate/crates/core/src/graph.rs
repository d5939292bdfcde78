//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op appends one node
//! whose inputs have strictly smaller ids, so the arena order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Element, Tensor};
use crate::IGNORE_ID;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise ops. Binary ops accept equal shapes or a one-element `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Log,
    Negate,
    Sqrt,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div
        )
    }
}

/// Op kinds, used for fault injection and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Elementwise(Elementwise),
    Scale,
    AddConst,
    Sum,
    Mean,
    MatMul,
    Softmax,
    Conv2d,
    ConcatChannels,
    ConcatFlat,
    CrossEntropy,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary(Elementwise, Var),
    Binary(Elementwise, Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Softmax(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
    },
    ConcatChannels(Vec<Var>),
    ConcatFlat(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        weights: Option<Vec<T>>,
        probs: Vec<T>,
        counted: usize,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Unary(e, _) | Op::Binary(e, _, _) => OpKind::Elementwise(*e),
            Op::Scale(..) => OpKind::Scale,
            Op::AddConst(_) => OpKind::AddConst,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConcatChannels(_) => OpKind::ConcatChannels,
            Op::ConcatFlat(_) => OpKind::ConcatFlat,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<T>>,
}

/// Summary of a cross-entropy evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CeInfo {
    /// Pixels that contributed (label not ignored).
    pub counted: usize,
    /// True when every pixel was ignored and the loss is an exact zero.
    pub all_ignored: bool,
}

/// The compute graph (one per forward pass).
#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of `kind` (gradients scaled by 1.5).
    /// Only useful as a negative control for gradient checking.
    pub fn with_fault(mut self, kind: OpKind) -> Self {
        self.fault = Some(kind);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it tracks gradients iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Adds a constant leaf (never differentiated).
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---------------------------------------------------------------
    // element-wise
    // ---------------------------------------------------------------

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => self.unary(op, a),
            (true, None) => Err(Error::Invalid(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::Invalid(format!("{op:?} takes one operand"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Div, a, b)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Relu, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Negate, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Sqrt, a)
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let data: Vec<T> = match op {
            Elementwise::Relu => x
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            Elementwise::Exp => x.data().iter().map(|&v| v.exp()).collect(),
            Elementwise::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| !(v > T::zero())) {
                    return Err(Error::Domain(format!(
                        "log of non-positive value {:?}",
                        bad
                    )));
                }
                x.data().iter().map(|&v| v.ln()).collect()
            }
            Elementwise::Negate => x.data().iter().map(|&v| -v).collect(),
            Elementwise::Sqrt => {
                if let Some(bad) = x.data().iter().find(|&&v| v < T::zero()) {
                    return Err(Error::Domain(format!("sqrt of negative value {:?}", bad)));
                }
                x.data().iter().map(|&v| v.sqrt()).collect()
            }
            _ => unreachable!("binary op routed to unary"),
        };
        let value = Tensor::new(x.shape(), data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Unary(op, a), ng))
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let scalar_b = y.numel() == 1 && x.numel() != 1;
        if !scalar_b && x.shape() != y.shape() && !(x.numel() == 1 && y.numel() == 1) {
            return Err(Error::Shape(format!(
                "{op:?}: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let f = |p: T, q: T| match op {
            Elementwise::Add => p + q,
            Elementwise::Sub => p - q,
            Elementwise::Mul => p * q,
            Elementwise::Div => p / q,
            _ => unreachable!(),
        };
        if op == Elementwise::Div && y.data().iter().any(|&v| v == T::zero()) {
            return Err(Error::Domain("division by zero".into()));
        }
        let data: Vec<T> = if scalar_b {
            let q = y.data()[0];
            x.data().iter().map(|&p| f(p, q)).collect()
        } else {
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect()
        };
        let value = Tensor::new(x.shape(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b), ng))
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let x = &self.nodes[a.0].value;
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v * c).collect())
            .expect("shape preserved");
        let ng = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// `a + c` for a constant `c`.
    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let x = &self.nodes[a.0].value;
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v + c).collect())
            .expect("shape preserved");
        let ng = self.needs(&[a]);
        self.push(value, Op::AddConst(a), ng)
    }

    // ---------------------------------------------------------------
    // reductions / linear algebra
    // ---------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.0].value.data().iter().map(|v| v.to_f64()).sum();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(T::from_f64(total)), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if x.numel() == 0 {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let total: f64 = x.data().iter().map(|v| v.to_f64()).sum();
        let value = Tensor::scalar(T::from_f64(total / x.numel() as f64));
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Mean(a), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, x.data(), y.data(), &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// Softmax over the trailing (channel) axis, max-shifted per pixel.
    pub fn softmax_channel(&mut self, logits: Var) -> Result<Var> {
        let x = &self.nodes[logits.0].value;
        if x.rank() == 0 || x.channels() == 0 {
            return Err(Error::Shape("softmax needs at least one channel".into()));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let c = x.channels();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(x.shape(), out)?;
        let ng = self.needs(&[logits]);
        Ok(self.push(value, Op::Softmax(logits), ng))
    }

    // ---------------------------------------------------------------
    // structural
    // ---------------------------------------------------------------

    /// Concatenates along the trailing axis; leading dimensions must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let lead = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape(format!(
                    "concat_channels: {:?} vs leading {:?}",
                    s, lead
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        let ng = self.needs(parts);
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), ng))
    }

    /// Flattens each input and concatenates them into one vector.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.nodes[p.0].value.data());
        }
        let n = out.len();
        let value = Tensor::new(&[n], out).expect("flat");
        let ng = self.needs(parts);
        self.push(value, Op::ConcatFlat(parts.to_vec()), ng)
    }

    // ---------------------------------------------------------------
    // convolution
    // ---------------------------------------------------------------

    /// Stride-1 "same" dilated convolution.
    ///
    /// `input` is `[H, W, Cin]` or `[B, H, W, Cin]`, `kernel` is
    /// `[kh, kw, Cin, Cout]` with odd `kh`, `kw`, and `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::Invalid("dilation must be positive".into()));
        }
        let geo = ConvGeometry::new(self.shape(input), self.shape(kernel), self.shape(bias), dilation)?;
        let x = self.nodes[input.0].value.data();
        let w = self.nodes[kernel.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let rows = geo.rows();
        let mut out = vec![T::zero(); rows * geo.cout];
        for r in 0..rows {
            out[r * geo.cout..(r + 1) * geo.cout].copy_from_slice(b);
        }
        if geo.is_pointwise() {
            gemm_nn(rows, geo.cin, geo.cout, x, w, &mut out, true);
        } else {
            let cols = geo.im2col(x);
            gemm_nn(rows, geo.patch(), geo.cout, &cols, w, &mut out, true);
        }
        let value = Tensor::new(&geo.out_shape(), out)?;
        let ng = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dilation,
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------
    // loss
    // ---------------------------------------------------------------

    /// Mean over non-ignored pixels of `-w[y] * log softmax(logits)[y]`.
    ///
    /// `labels` has one entry per pixel (`logits.numel() / C`); pixels equal
    /// to [`IGNORE_ID`] are skipped. When all pixels are ignored the result
    /// is an exact zero and `CeInfo::all_ignored` is set.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        weights: Option<&[T]>,
    ) -> Result<(Var, CeInfo)> {
        let x = &self.nodes[logits.0].value;
        let c = x.channels();
        if x.rank() == 0 || c == 0 || x.numel() / c != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} vs {} labels",
                x.shape(),
                labels.len()
            )));
        }
        if let Some(w) = weights {
            if w.len() != c {
                return Err(Error::Shape(format!(
                    "cross_entropy: {} class weights for {} classes",
                    w.len(),
                    c
                )));
            }
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let mut probs = x.data().to_vec();
        let mut total = 0.0f64;
        let mut counted = 0usize;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            if y == IGNORE_ID {
                continue;
            }
            if y as usize >= c {
                return Err(Error::Invalid(format!(
                    "label id {y} out of range for {c} classes"
                )));
            }
            let lse = log_sum_exp(row);
            let nll = lse - row[y as usize].to_f64();
            let wy = weights.map_or(1.0, |w| w[y as usize].to_f64());
            total += wy * nll;
            counted += 1;
            softmax_in_place(row);
        }
        let loss = if counted == 0 {
            0.0
        } else {
            total / counted as f64
        };
        let info = CeInfo {
            counted,
            all_ignored: counted == 0,
        };
        let ng = self.needs(&[logits]);
        let v = self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.map(|w| w.to_vec()),
                probs,
                counted,
            },
            ng,
        );
        Ok((v, info))
    }

    // ---------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across
    /// calls; intermediate gradients are transient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += *d),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let contributions = self.local_backward(i, &g)?;
            for (var, mut delta) in contributions {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                if self.fault == Some(self.nodes[i].op.kind()) {
                    let k = T::from_f64(1.5);
                    delta.iter_mut().for_each(|d| *d *= k);
                }
                match grads[var.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                    None => grads[var.0] = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_backward(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = val(*a).data();
                let y = node.value.data();
                let d: Vec<T> = match op {
                    Elementwise::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                    Elementwise::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                    Elementwise::Log => g.iter().zip(x).map(|(&g, &x)| g / x).collect(),
                    Elementwise::Negate => g.iter().map(|&g| -g).collect(),
                    Elementwise::Sqrt => {
                        let half = T::from_f64(0.5);
                        g.iter()
                            .zip(y)
                            .map(|(&g, &y)| if y > T::zero() { g * half / y } else { T::zero() })
                            .collect()
                    }
                    _ => unreachable!(),
                };
                out.push((*a, d));
            }
            Op::Binary(op, a, b) => {
                let x = val(*a).data();
                let y = val(*b).data();
                let scalar_b = y.len() == 1 && x.len() != 1;
                let yb = |j: usize| if scalar_b { y[0] } else { y[j] };
                if want(*a) {
                    let d: Vec<T> = match op {
                        Elementwise::Add | Elementwise::Sub => g.to_vec(),
                        Elementwise::Mul => g.iter().enumerate().map(|(j, &g)| g * yb(j)).collect(),
                        Elementwise::Div => g.iter().enumerate().map(|(j, &g)| g / yb(j)).collect(),
                        _ => unreachable!(),
                    };
                    out.push((*a, d));
                }
                if want(*b) {
                    let per: Vec<T> = match op {
                        Elementwise::Add => g.to_vec(),
                        Elementwise::Sub => g.iter().map(|&g| -g).collect(),
                        Elementwise::Mul => g.iter().zip(x).map(|(&g, &x)| g * x).collect(),
                        Elementwise::Div => g
                            .iter()
                            .enumerate()
                            .map(|(j, &g)| -g * x[j] / (yb(j) * yb(j)))
                            .collect(),
                        _ => unreachable!(),
                    };
                    let d = if scalar_b {
                        vec![T::from_f64(per.iter().map(|v| v.to_f64()).sum())]
                    } else {
                        per
                    };
                    out.push((*b, d));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&g| g * *c).collect())),
            Op::AddConst(a) => out.push((*a, g.to_vec())),
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).numel()])),
            Op::Mean(a) => {
                let n = val(*a).numel();
                out.push((*a, vec![g[0] / T::from_f64(n as f64); n]));
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if want(*a) {
                    let mut d = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g, y.data(), &mut d, false);
                    out.push((*a, d));
                }
                if want(*b) {
                    let mut d = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, x.data(), g, &mut d, false);
                    out.push((*b, d));
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.channels();
                let mut d = vec![T::zero(); y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: T = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                out.push((*a, d));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                dilation,
            } => {
                let geo = ConvGeometry::new(
                    val(*input).shape(),
                    val(*kernel).shape(),
                    val(*bias).shape(),
                    *dilation,
                )?;
                let rows = geo.rows();
                let x = val(*input).data();
                let w = val(*kernel).data();
                let cols = if geo.is_pointwise() || !want(*kernel) {
                    None
                } else {
                    Some(geo.im2col(x))
                };
                if want(*kernel) {
                    let mut d = vec![T::zero(); geo.patch() * geo.cout];
                    let src: &[T] = cols.as_deref().unwrap_or(x);
                    gemm_tn(geo.patch(), rows, geo.cout, src, g, &mut d, false);
                    out.push((*kernel, d));
                }
                if want(*bias) {
                    let mut acc = vec![0.0f64; geo.cout];
                    for row in g.chunks(geo.cout) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v.to_f64();
                        }
                    }
                    out.push((*bias, acc.into_iter().map(T::from_f64).collect()));
                }
                if want(*input) {
                    if geo.is_pointwise() {
                        let mut d = vec![T::zero(); rows * geo.cin];
                        gemm_nt(rows, geo.cout, geo.cin, g, w, &mut d, false);
                        out.push((*input, d));
                    } else {
                        drop(cols);
                        let mut dcols = vec![T::zero(); rows * geo.patch()];
                        gemm_nt(rows, geo.cout, geo.patch(), g, w, &mut dcols, false);
                        out.push((*input, geo.col2im(&dcols)));
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let total = node.value.channels();
                let rows = node.value.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).channels();
                    if want(p) {
                        let mut d = vec![T::zero(); rows * w];
                        for r in 0..rows {
                            d[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatFlat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if want(p) {
                        out.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
                counted,
            } => {
                let c = val(*logits).channels();
                let mut d = vec![T::zero(); probs.len()];
                if *counted > 0 {
                    let scale = g[0] / T::from_f64(*counted as f64);
                    for ((drow, prow), &y) in d.chunks_mut(c).zip(probs.chunks(c)).zip(labels) {
                        if y == IGNORE_ID {
                            continue;
                        }
                        let wy = weights.as_ref().map_or(T::one(), |w| w[y as usize]);
                        let s = scale * wy;
                        for j in 0..c {
                            drow[j] = s * prow[j];
                        }
                        drow[y as usize] -= s;
                    }
                }
                out.push((*logits, d));
            }
        }
        Ok(out)
    }
}

fn log_sum_exp<T: Element>(row: &[T]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
    let s: f64 = row.iter().map(|v| (v.to_f64() - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let m = row.iter().fold(row[0], |m, &v| m.max(v));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// Index bookkeeping for a "same"-padded, stride-1 dilated convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
    batched: bool,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize], bias: &[usize], dilation: usize) -> Result<Self> {
        let (batch, h, w, cin, batched) = match *input {
            [h, w, c] => (1, h, w, c, false),
            [b, h, w, c] => (b, h, w, c, true),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d input must be HxWxC or BxHxWxC, got {input:?}"
                )))
            }
        };
        let [kh, kw, kcin, cout] = *kernel else {
            return Err(Error::Shape(format!("conv2d kernel must be 4-D, got {kernel:?}")));
        };
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel {kh}x{kw} must be odd-sized")));
        }
        if bias != [cout] {
            return Err(Error::Shape(format!("conv2d bias {bias:?}, expected [{cout}]")));
        }
        Ok(ConvGeometry {
            batch,
            h,
            w,
            cin,
            cout,
            kh,
            kw,
            dilation,
            batched,
        })
    }

    fn rows(&self) -> usize {
        self.batch * self.h * self.w
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.batch, self.h, self.w, self.cout]
        } else {
            vec![self.h, self.w, self.cout]
        }
    }

    /// Calls `f(row, col_offset, src_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w, d) = (self.h as isize, self.w as isize, self.dilation as isize);
        let (ch, cw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for b in 0..self.batch {
            let img = b * self.h * self.w;
            for y in 0..h {
                for x in 0..w {
                    let row = img + (y * w + x) as usize;
                    for ky in 0..self.kh as isize {
                        let sy = y + (ky - ch) * d;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for kx in 0..self.kw as isize {
                            let sx = x + (kx - cw) * d;
                            if sx < 0 || sx >= w {
                                continue;
                            }
                            let col = ((ky as usize) * self.kw + kx as usize) * self.cin;
                            let src = (img + (sy * w + sx) as usize) * self.cin;
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Element>(&self, x: &[T]) -> Vec<T> {
        let p = self.patch();
        let cin = self.cin;
        let mut cols = vec![T::zero(); self.rows() * p];
        self.for_each_tap(|row, col, src| {
            cols[row * p + col..row * p + col + cin].copy_from_slice(&x[src..src + cin]);
        });
        cols
    }

    fn col2im<T: Element>(&self, cols: &[T]) -> Vec<T> {
        let p = self.patch();
        let cin = self.cin;
        let mut x = vec![T::zero(); self.rows() * cin];
        self.for_each_tap(|row, col, src| {
            let from = &cols[row * p + col..row * p + col + cin];
            for (dst, &v) in x[src..src + cin].iter_mut().zip(from) {
                *dst += v;
            }
        });
        x
    }
}
