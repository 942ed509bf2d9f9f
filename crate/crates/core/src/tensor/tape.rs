use std::cell::{Cell, RefCell};
use std::fmt;

use super::ops::{self, col2im_add, gemm, im2col, ConvGeom};
use super::{Activation, Padding, Parameter, PoolMode, Tensor};
use crate::error::{Error, Result};

/// Clamp applied to probabilities before the log in [`Tape::bce`].
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, k: usize, geom: ConvGeom },
    AddBias { x: usize, b: usize },
    Act { x: usize, kind: Activation },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    GlobalPool { x: usize, mode: PoolMode, argmax: Vec<usize> },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Mul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    ScaleChannels { x: usize, s: usize },
    Reshape { x: usize },
    ConcatRows { parts: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
    Select { x: usize, index: usize },
    Bce { p: usize, label: f64 },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward pass so it can be differentiated once.
///
/// Operations are appended in execution order, which is a valid
/// topological order by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
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

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are valid")
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on a value with {} elements", v.len());
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

/// Gradients produced by [`Tape::backward`], indexed by recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, if it was reachable and tracked.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

fn as_volume(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(Error::dim(op, format!("expected an H×W×C volume, got shape {shape:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn owns(&self, v: Var<'_>) -> bool {
        std::ptr::eq(self, v.tape)
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), false, Op::Leaf)
    }

    /// Binds a parameter as a gradient-tracked leaf (frozen ones included).
    pub fn param(&self, p: &Parameter) -> Var<'_> {
        self.push(p.shape().to_vec(), p.data().to_vec(), true, Op::Leaf)
    }

    fn unary(&self, x: Var<'_>, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'_> {
        let rg = x.requires_grad();
        self.push(shape, value, rg, op)
    }

    /// 2-D convolution of an `H×W×Cin` volume with a `k×k×Cin×Cout` kernel.
    pub fn conv2d<'a>(
        &'a self,
        input: Var<'a>,
        kernel: Var<'a>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var<'a>> {
        let (h, w, cin) = as_volume("conv2d", &input.shape())?;
        let kshape = kernel.shape();
        let [kh, kw, kcin, cout] = kshape[..] else {
            return Err(Error::dim("conv2d", format!("kernel must be k×k×Cin×Cout, got {kshape:?}")));
        };
        if kh != kw {
            return Err(Error::dim("conv2d", format!("non-square kernel {kh}×{kw} (axes 0,1)")));
        }
        if kcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input channels {cin} (input axis 2) != kernel Cin {kcin} (kernel axis 2)"),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be ≥ 1"));
        }
        let k = kh;
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if h < k || w < k {
                    return Err(Error::dim(
                        "conv2d",
                        format!("input {h}×{w} (axes 0,1) smaller than kernel {k} with valid padding"),
                    ));
                }
                ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + k).saturating_sub(h);
                let pw = ((ow - 1) * stride + k).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        let geom = ConvGeom {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        };
        let nodes = self.nodes.borrow();
        let x = &nodes[input.id].value;
        let kv = &nodes[kernel.id].value;
        let mut out = vec![0.0; geom.positions() * cout];
        let pl = geom.patch_len();
        if geom.is_pointwise() {
            gemm(oh * ow, pl, cout, x, (pl as isize, 1), kv, (cout as isize, 1), &mut out, 0.0);
        } else {
            let cols = im2col(&geom, x);
            gemm(oh * ow, pl, cout, &cols, (pl as isize, 1), kv, (cout as isize, 1), &mut out, 0.0);
        }
        let rg = nodes[input.id].requires_grad || nodes[kernel.id].requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![oh, ow, cout],
            out,
            rg,
            Op::Conv2d {
                x: input.id,
                k: kernel.id,
                geom,
            },
        ))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias<'a>(&'a self, x: Var<'a>, bias: Var<'a>) -> Result<Var<'a>> {
        let shape = x.shape();
        let c = *shape.last().expect("non-empty shape");
        if bias.len() != c {
            return Err(Error::dim(
                "add_bias",
                format!("bias has {} elements, last axis of {shape:?} is {c}", bias.len()),
            ));
        }
        let nodes = self.nodes.borrow();
        let b = &nodes[bias.id].value;
        let value: Vec<f64> = nodes[x.id]
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        let rg = nodes[x.id].requires_grad || nodes[bias.id].requires_grad;
        drop(nodes);
        Ok(self.push(shape, value, rg, Op::AddBias { x: x.id, b: bias.id }))
    }

    pub fn activation<'a>(&'a self, x: Var<'a>, kind: Activation) -> Var<'a> {
        let shape = x.shape();
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id].value;
            match kind {
                Activation::Relu => xv.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                Activation::Sigmoid => xv.iter().map(|&v| ops::sigmoid(v)).collect(),
                Activation::Tanh => xv.iter().map(|v| v.tanh()).collect(),
                Activation::Softmax => ops::softmax_rows(xv, *shape.last().unwrap()),
            }
        };
        self.unary(x, shape, value, Op::Act { x: x.id, kind })
    }

    pub fn relu<'a>(&'a self, x: Var<'a>) -> Var<'a> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid<'a>(&'a self, x: Var<'a>) -> Var<'a> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh<'a>(&'a self, x: Var<'a>) -> Var<'a> {
        self.activation(x, Activation::Tanh)
    }

    pub fn softmax<'a>(&'a self, x: Var<'a>) -> Var<'a> {
        self.activation(x, Activation::Softmax)
    }

    /// 2×2 max-pool with stride 2. Ties go to the first element in row-major order.
    pub fn max_pool2<'a>(&'a self, x: Var<'a>) -> Result<Var<'a>> {
        let (h, w, c) = as_volume("max_pool2", &x.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("max_pool2", format!("spatial size {h}×{w} (axes 0,1) must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut value = vec![0.0; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id].value;
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_i = ((2 * oy) * w + 2 * ox) * c + ch;
                        let mut best = xv[best_i];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xv[i] > best {
                                best = xv[i];
                                best_i = i;
                            }
                        }
                        let o = (oy * ow + ox) * c + ch;
                        value[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        Ok(self.unary(x, vec![oh, ow, c], value, Op::MaxPool2 { x: x.id, argmax }))
    }

    /// Per-channel mean or max over the spatial axes; output is `1×1×C`.
    pub fn global_pool<'a>(&'a self, x: Var<'a>, mode: PoolMode) -> Result<Var<'a>> {
        let (h, w, c) = as_volume("global_pool", &x.shape())?;
        let hw = h * w;
        let mut value = vec![0.0; c];
        let mut argmax = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id].value;
            match mode {
                PoolMode::Avg => {
                    for px in xv.chunks(c) {
                        value.iter_mut().zip(px).for_each(|(a, v)| *a += v);
                    }
                    value.iter_mut().for_each(|a| *a /= hw as f64);
                }
                PoolMode::Max => {
                    argmax = (0..c).collect();
                    value.copy_from_slice(&xv[..c]);
                    for p in 1..hw {
                        for ch in 0..c {
                            let v = xv[p * c + ch];
                            if v > value[ch] {
                                value[ch] = v;
                                argmax[ch] = p * c + ch;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.unary(x, vec![1, 1, c], value, Op::GlobalPool { x: x.id, mode, argmax }))
    }

    /// Matrix product of `m×k` and `k×n`.
    pub fn matmul<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let (m, k) = as_matrix("matmul", &a.shape())?;
        let (k2, n) = as_matrix("matmul", &b.shape())?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: lhs axis 1 = {k}, rhs axis 0 = {k2}"),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &nodes[a.id].value,
            (k as isize, 1),
            &nodes[b.id].value,
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let rg = nodes[a.id].requires_grad || nodes[b.id].requires_grad;
        drop(nodes);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a: a.id, b: b.id, m, k, n }))
    }

    pub fn transpose<'a>(&'a self, x: Var<'a>) -> Result<Var<'a>> {
        let (rows, cols) = as_matrix("transpose", &x.shape())?;
        let xv = x.data();
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                value[c * rows + r] = xv[r * cols + c];
            }
        }
        Ok(self.unary(x, vec![cols, rows], value, Op::Transpose { x: x.id, rows, cols }))
    }

    /// `input·weights + bias` for a `1×n` row, `n×m` weights and `m` biases.
    pub fn dense<'a>(&'a self, input: Var<'a>, weights: Var<'a>, bias: Var<'a>) -> Result<Var<'a>> {
        let y = self.matmul(input, weights)?;
        self.add_bias(y, bias)
    }

    /// Elementwise product of equal shapes.
    pub fn mul<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let shape = a.shape();
        check_same("mul", &shape, &b.shape())?;
        let nodes = self.nodes.borrow();
        let value = nodes[a.id]
            .value
            .iter()
            .zip(&nodes[b.id].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = nodes[a.id].requires_grad || nodes[b.id].requires_grad;
        drop(nodes);
        Ok(self.push(shape, value, rg, Op::Mul { a: a.id, b: b.id }))
    }

    pub fn add<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let shape = a.shape();
        check_same("add", &shape, &b.shape())?;
        let nodes = self.nodes.borrow();
        let value = nodes[a.id]
            .value
            .iter()
            .zip(&nodes[b.id].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = nodes[a.id].requires_grad || nodes[b.id].requires_grad;
        drop(nodes);
        Ok(self.push(shape, value, rg, Op::Add { a: a.id, b: b.id }))
    }

    pub fn scale<'a>(&'a self, x: Var<'a>, factor: f64) -> Var<'a> {
        let value = x.data().into_iter().map(|v| v * factor).collect();
        self.unary(x, x.shape(), value, Op::Scale { x: x.id, factor })
    }

    /// Multiplies channel `c` of an `H×W×C` volume by `s[c]`.
    pub fn scale_channels<'a>(&'a self, x: Var<'a>, s: Var<'a>) -> Result<Var<'a>> {
        let shape = x.shape();
        let (_, _, c) = as_volume("scale_channels", &shape)?;
        if s.len() != c {
            return Err(Error::dim(
                "scale_channels",
                format!("{} gates for {c} channels (axis 2)", s.len()),
            ));
        }
        let nodes = self.nodes.borrow();
        let sv = &nodes[s.id].value;
        let value = nodes[x.id]
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i % c])
            .collect();
        let rg = nodes[x.id].requires_grad || nodes[s.id].requires_grad;
        drop(nodes);
        Ok(self.push(shape, value, rg, Op::ScaleChannels { x: x.id, s: s.id }))
    }

    pub fn reshape<'a>(&'a self, x: Var<'a>, shape: &[usize]) -> Result<Var<'a>> {
        if shape.iter().product::<usize>() != x.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", x.shape()),
            ));
        }
        Ok(self.unary(x, shape.to_vec(), x.data(), Op::Reshape { x: x.id }))
    }

    /// Stacks `1×C` (or any `C`-element) rows into an `I×C` matrix.
    pub fn concat_rows<'a>(&'a self, rows: &[Var<'a>]) -> Result<Var<'a>> {
        let first = rows
            .first()
            .ok_or_else(|| Error::contract("concat_rows: no rows"))?;
        let c = first.len();
        let nodes = self.nodes.borrow();
        let mut value = Vec::with_capacity(rows.len() * c);
        let mut rg = false;
        for (i, r) in rows.iter().enumerate() {
            let n = &nodes[r.id];
            if n.value.len() != c {
                return Err(Error::dim(
                    "concat_rows",
                    format!("row {i} has {} elements, row 0 has {c}", n.value.len()),
                ));
            }
            value.extend_from_slice(&n.value);
            rg |= n.requires_grad;
        }
        drop(nodes);
        Ok(self.push(
            vec![rows.len(), c],
            value,
            rg,
            Op::ConcatRows {
                parts: rows.iter().map(|r| r.id).collect(),
            },
        ))
    }

    pub fn sum<'a>(&'a self, x: Var<'a>) -> Var<'a> {
        let s = x.data().iter().sum();
        self.unary(x, vec![1], vec![s], Op::Sum { x: x.id })
    }

    pub fn mean<'a>(&'a self, x: Var<'a>) -> Var<'a> {
        let d = x.data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.unary(x, vec![1], vec![s], Op::Mean { x: x.id })
    }

    /// Picks one element (flat index) as a scalar.
    pub fn select<'a>(&'a self, x: Var<'a>, index: usize) -> Result<Var<'a>> {
        let d = x.data();
        let v = *d.get(index).ok_or_else(|| {
            Error::dim("select", format!("index {index} out of {} elements", d.len()))
        })?;
        Ok(self.unary(x, vec![1], vec![v], Op::Select { x: x.id, index }))
    }

    /// Binary cross-entropy of a probability against a 0/1 label, with the
    /// probability clamped to `[ε, 1−ε]`.
    pub fn bce<'a>(&'a self, p: Var<'a>, label: f64) -> Result<Var<'a>> {
        if p.len() != 1 {
            return Err(Error::dim("bce", format!("prediction must be scalar, got {:?}", p.shape())));
        }
        let pc = p.item().clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        let loss = -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln());
        Ok(self.unary(p, vec![1], vec![loss], Op::Bce { p: p.id, label }))
    }

    /// Reverse pass from a scalar loss. The tape can only be differentiated once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.owns(loss) {
            return Err(Error::contract("backward: loss was recorded on a different tape"));
        }
        if self.consumed.replace(true) {
            return Err(Error::contract("backward: tape already consumed"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        // Only tracked values keep gradients.
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn propagate(nodes: &[Node], node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, k, geom } => {
            let g = geom;
            let pl = g.patch_len();
            let p = g.positions();
            let xv = &nodes[*x].value;
            let kv = &nodes[*k].value;
            let owned_cols;
            let cols: &[f64] = if g.is_pointwise() {
                xv
            } else if nodes[*k].requires_grad {
                owned_cols = im2col(g, xv);
                &owned_cols
            } else {
                &[]
            };
            if let Some(dk) = acc(grads, nodes, *k) {
                // dK += colsᵀ · dY
                gemm(pl, p, g.cout, cols, (1, pl as isize), dy, (g.cout as isize, 1), dk, 1.0);
            }
            if nodes[*x].requires_grad {
                // dCols = dY · Kᵀ
                let dx = acc(grads, nodes, *x).expect("tracked");
                if g.is_pointwise() {
                    gemm(p, g.cout, pl, dy, (g.cout as isize, 1), kv, (1, g.cout as isize), dx, 1.0);
                } else {
                    let mut dcols = vec![0.0; p * pl];
                    gemm(p, g.cout, pl, dy, (g.cout as isize, 1), kv, (1, g.cout as isize), &mut dcols, 0.0);
                    col2im_add(g, &dcols, dx);
                }
            }
        }
        Op::AddBias { x, b } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                dx.iter_mut().zip(dy).for_each(|(a, g)| *a += g);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                let c = db.len();
                for (i, g) in dy.iter().enumerate() {
                    db[i % c] += g;
                }
            }
        }
        Op::Act { x, kind } => {
            let y = &node.value;
            if let Some(dx) = acc(grads, nodes, *x) {
                match kind {
                    Activation::Relu => {
                        for ((d, g), v) in dx.iter_mut().zip(dy).zip(y) {
                            if *v > 0.0 {
                                *d += g;
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for ((d, g), v) in dx.iter_mut().zip(dy).zip(y) {
                            *d += g * v * (1.0 - v);
                        }
                    }
                    Activation::Tanh => {
                        for ((d, g), v) in dx.iter_mut().zip(dy).zip(y) {
                            *d += g * (1.0 - v * v);
                        }
                    }
                    Activation::Softmax => {
                        let width = *node.shape.last().unwrap();
                        for ((drow, grow), yrow) in dx
                            .chunks_mut(width)
                            .zip(dy.chunks(width))
                            .zip(y.chunks(width))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(g, v)| g * v).sum();
                            for ((d, g), v) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += v * (g - dot);
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool2 { x, argmax } | Op::GlobalPool { x, mode: PoolMode::Max, argmax } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                for (g, &src) in dy.iter().zip(argmax) {
                    dx[src] += g;
                }
            }
        }
        Op::GlobalPool { x, mode: PoolMode::Avg, .. } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                let c = dy.len();
                let hw = dx.len() / c;
                for (i, d) in dx.iter_mut().enumerate() {
                    *d += dy[i % c] / hw as f64;
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if let Some(da) = acc(grads, nodes, *a) {
                // dA += dY · Bᵀ
                gemm(m, n, k, dy, (n as isize, 1), bv, (1, n as isize), da, 1.0);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                // dB += Aᵀ · dY
                gemm(k, m, n, av, (1, k as isize), dy, (n as isize, 1), db, 1.0);
            }
        }
        Op::Transpose { x, rows, cols } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[r * cols + c] += dy[c * rows + r];
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, g), v) in da.iter_mut().zip(dy).zip(bv) {
                    *d += g * v;
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for ((d, g), v) in db.iter_mut().zip(dy).zip(av) {
                    *d += g * v;
                }
            }
        }
        Op::Add { a, b } => {
            for id in [*a, *b] {
                if let Some(d) = acc(grads, nodes, id) {
                    d.iter_mut().zip(dy).for_each(|(x, g)| *x += g);
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g * factor);
            }
        }
        Op::ScaleChannels { x, s } => {
            let xv = &nodes[*x].value;
            let sv = &nodes[*s].value;
            let c = sv.len();
            if let Some(dx) = acc(grads, nodes, *x) {
                for (i, (d, g)) in dx.iter_mut().zip(dy).enumerate() {
                    *d += g * sv[i % c];
                }
            }
            if let Some(ds) = acc(grads, nodes, *s) {
                for (i, (g, v)) in dy.iter().zip(xv).enumerate() {
                    ds[i % c] += g * v;
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
            }
        }
        Op::ConcatRows { parts } => {
            let c = dy.len() / parts.len();
            for (i, &p) in parts.iter().enumerate() {
                if let Some(dp) = acc(grads, nodes, p) {
                    dp.iter_mut()
                        .zip(&dy[i * c..(i + 1) * c])
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                dx.iter_mut().for_each(|d| *d += dy[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                let n = dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += dy[0] / n);
            }
        }
        Op::Select { x, index } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                dx[*index] += dy[0];
            }
        }
        Op::Bce { p, label } => {
            let pv = nodes[*p].value[0];
            if let Some(dp) = acc(grads, nodes, *p) {
                // The clamp is flat outside [ε, 1−ε].
                if (BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&pv) {
                    dp[0] += dy[0] * (-label / pv + (1.0 - label) / (1.0 - pv));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel_is_bit_exact() {
        let tape = Tape::new();
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.37).sin() * 1e3).collect();
        let mut k = vec![0.0; 16];
        for c in 0..4 {
            k[c * 4 + c] = 1.0;
        }
        let xv = tape.constant(&t(&[2, 3, 4], x.clone()));
        let kv = tape.constant(&t(&[1, 1, 4, 4], k));
        let y = tape.conv2d(xv, kv, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 4]);
        assert_eq!(y.data(), x);
    }

    #[test]
    fn conv_valid_all_ones_sums() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[3, 3, 1], (1..=9).map(f64::from).collect()));
        let k = tape.constant(&Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1]);
        assert_eq!(y.item(), 45.0);
    }

    #[test]
    fn conv_same_padding_keeps_size_and_strides() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[5, 7, 2], 1.0));
        let k = tape.constant(&Tensor::full(&[3, 3, 2, 3], 1.0));
        let y = tape.conv2d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), vec![5, 7, 3]);
        // centre pixel sees all 9 taps × 2 channels, corner only 4 × 2
        let d = y.data();
        assert_eq!(d[(2 * 7 + 3) * 3], 18.0);
        assert_eq!(d[0], 8.0);
        let y2 = tape.conv2d(x, k, 2, Padding::Same).unwrap();
        assert_eq!(y2.shape(), vec![3, 4, 3]);
    }

    #[test]
    fn conv_channel_mismatch_reports_axes() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[4, 4, 3]));
        let k = tape.constant(&Tensor::zeros(&[3, 3, 2, 1]));
        let err = tape.conv2d(x, k, 1, Padding::Same).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(err.to_string().contains("axis 2"), "{err}");
    }

    #[test]
    fn global_pool_small_case() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(tape.global_pool(x, PoolMode::Max).unwrap().item(), 4.0);
        assert_eq!(tape.global_pool(x, PoolMode::Avg).unwrap().item(), 2.5);
    }

    #[test]
    fn max_grad_goes_to_first_argmax() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2, 1], vec![3.0, 3.0, 1.0, 3.0]).with_requires_grad(true));
        let y = tape.global_pool(x, PoolMode::Max).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_hand_matmul() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], vec![1.0, 2.0]));
        let w = tape.constant(&t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(&t(&[1, 2], vec![1.0, 1.0]));
        assert_eq!(tape.dense(x, w, b).unwrap().data(), vec![2.0, 3.0]);
        let z = tape.constant(&Tensor::zeros(&[2, 2]));
        let zb = tape.constant(&Tensor::zeros(&[1, 2]));
        assert_eq!(tape.dense(x, z, zb).unwrap().data(), vec![0.0, 0.0]);
        let bad = tape.constant(&Tensor::zeros(&[3, 2]));
        assert!(tape.dense(x, bad, b).is_err());
    }

    #[test]
    fn activation_analytic_values() {
        let tape = Tape::new();
        let z = tape.constant(&t(&[1, 2], vec![0.0, 0.0]));
        assert_eq!(tape.softmax(z).data(), vec![0.5, 0.5]);
        let s = tape.softmax(tape.constant(&t(&[1, 2], vec![1f64.ln(), 3f64.ln()]))).data();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        let x = tape.constant(&t(&[3], vec![0.0, 0.0, -1.0]));
        assert_eq!(tape.sigmoid(x).data()[0], 0.5);
        assert_eq!(tape.tanh(x).data()[0], 0.0);
        assert_eq!(tape.relu(x).data()[2], 0.0);
    }

    #[test]
    fn bce_values_and_gradient() {
        let tape = Tape::new();
        let p = tape.leaf(&Tensor::scalar(0.5).with_requires_grad(true));
        let l = tape.bce(p, 1.0).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert!((g.wrt(p).unwrap()[0] + 2.0).abs() < 1e-12);

        let tape = Tape::new();
        let p = tape.constant(&Tensor::scalar(1.0 - BCE_EPSILON));
        let l = tape.bce(p, 1.0).unwrap().item();
        assert!(l > 0.0 && l < 2e-7, "{l}");
        // probabilities outside (0,1) are clamped, not NaN
        let p = tape.constant(&Tensor::scalar(0.0));
        assert!(tape.bce(p, 1.0).unwrap().item().is_finite());
    }

    #[test]
    fn sum_gives_ones_and_tape_is_single_use() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[2, 3, 2], 0.3).with_requires_grad(true));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).unwrap().iter().all(|&v| v == 1.0));
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[1, 2], 1.0).with_requires_grad(true));
        let c = tape.constant(&Tensor::full(&[2, 1], 2.0));
        let y = tape.matmul(x, c).unwrap();
        let g = tape.backward(tape.sum(y)).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 2.0]);
        assert!(g.wrt(c).is_none());
    }
}
