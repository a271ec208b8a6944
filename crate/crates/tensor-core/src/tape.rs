use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

/// Records every primitive application so one backward pass can fill in
/// gradients for all tracked ancestors of a scalar loss.
///
/// Nodes are appended in construction order, which is already a topological
/// order: every node's inputs have smaller ids. Saved activations are owned
/// copies; inputs are never mutated. A tape is confined to one thread.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one node on a tape. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Which operand of an elementwise multiply is the broadcast single-channel
/// map. Broadcasting a `[N,1,H,W]` map over the channels of a `[N,C,H,W]`
/// tensor is the only implicit broadcast supported anywhere.
#[derive(Clone, Copy, PartialEq)]
enum MulKind {
    Plain,
    /// `a` is full, `b` is the single-channel map.
    BroadcastB,
    /// `b` is full, `a` is the single-channel map.
    BroadcastA,
}

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    Sigmoid(usize),
    Relu(usize),
    Ln(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul {
        a: usize,
        b: usize,
        kind: MulKind,
    },
    Div(usize, usize),
    Affine {
        x: usize,
        scale: f64,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    UpsampleNearest {
        x: usize,
        factor: usize,
    },
    WeightedSum {
        x: usize,
        weights: Vec<f64>,
    },
    Gather {
        x: usize,
        indices: Vec<usize>,
    },
    Reshape(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    /// Elementwise smooth-L1 map: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
    Huber(usize),
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Places a tensor on the tape. Gradients accumulate into it during
    /// backward iff `tensor.requires_grad` is set.
    pub fn leaf(&self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor.shape().to_vec(), tensor.into_data(), needs, Op::Leaf)
    }

    /// Places a non-differentiable constant on the tape.
    pub fn constant(&self, tensor: Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.into_data(), false, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        inner.grads.push(None);
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

fn check_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(TensorError::Dimension(format!(
            "{what}: shapes {a:?} and {b:?} differ"
        )));
    }
    Ok(())
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Handle to the tape this value lives on.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        Tensor::new(node.shape.clone(), node.data.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self) -> Result<f64> {
        self.value().scalar_value()
    }

    /// Gradient accumulated by the most recent backward pass, if any.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        inner.grads[self.id].as_ref().map(|g| {
            let mut t = Tensor::new(inner.nodes[self.id].shape.clone(), g.clone())
                .expect("grad shape matches node");
            t.requires_grad = inner.nodes[self.id].needs_grad;
            t
        })
    }

    /// Forward value re-inserted as a constant: gradient stops here.
    pub fn detach(&self) -> Var {
        self.tape.constant(self.value())
    }

    fn unary(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let needs = self.tape.inner.borrow().nodes[self.id].needs_grad;
        self.tape.push(shape, data, needs, op)
    }

    // ---- primitives -------------------------------------------------------

    pub fn sigmoid(&self) -> Var {
        let data: Vec<f64> = self
            .tape
            .with_data(self.id, |x| x.iter().map(|&v| sigmoid(v)).collect());
        self.unary(self.shape(), data, Op::Sigmoid(self.id))
    }

    pub fn relu(&self) -> Var {
        let data: Vec<f64> = self
            .tape
            .with_data(self.id, |x| x.iter().map(|&v| v.max(0.0)).collect());
        self.unary(self.shape(), data, Op::Relu(self.id))
    }

    /// Natural log; every element must be strictly positive.
    pub fn ln(&self) -> Result<Var> {
        let data: Result<Vec<f64>> = self.tape.with_data(self.id, |x| {
            x.iter()
                .map(|&v| {
                    if v > 0.0 {
                        Ok(v.ln())
                    } else {
                        Err(TensorError::Argument(format!("ln of non-positive {v}")))
                    }
                })
                .collect()
        });
        Ok(self.unary(self.shape(), data?, Op::Ln(self.id)))
    }

    /// `scale * x + shift`, the only scalar broadcast.
    pub fn affine(&self, scale: f64, shift: f64) -> Var {
        let data: Vec<f64> = self
            .tape
            .with_data(self.id, |x| x.iter().map(|&v| scale * v + shift).collect());
        self.unary(self.shape(), data, Op::Affine { x: self.id, scale })
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Argument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let data = self.tape.with_data(self.id, |x| {
            let mut out = vec![0.0; x.len()];
            for_each_lane(&shape, axis, |offset, stride, n| {
                let mut max = f64::NEG_INFINITY;
                for i in 0..n {
                    max = max.max(x[offset + i * stride]);
                }
                let mut sum = 0.0;
                for i in 0..n {
                    let e = (x[offset + i * stride] - max).exp();
                    out[offset + i * stride] = e;
                    sum += e;
                }
                for i in 0..n {
                    out[offset + i * stride] /= sum;
                }
            });
            out
        });
        Ok(self.unary(shape, data, Op::Softmax { x: self.id, axis }))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary_check(other, "add")?;
        let data = self.tape.with_two(self.id, other.id, |a, b| {
            a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>()
        });
        Ok(self.binary_push(other, self.shape(), data, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary_check(other, "sub")?;
        let data = self.tape.with_two(self.id, other.id, |a, b| {
            a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>()
        });
        Ok(self.binary_push(other, self.shape(), data, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product. Shapes must match exactly, except that one
    /// operand may be a `[N,1,H,W]` map multiplied onto a `[N,C,H,W]`
    /// tensor (per-channel gating).
    pub fn mul(&self, other: &Var) -> Result<Var> {
        if !self.tape.same_tape(&other.tape) {
            return Err(TensorError::Argument("mul across tapes".into()));
        }
        let sa = self.shape();
        let sb = other.shape();
        let kind = if sa == sb {
            MulKind::Plain
        } else if broadcastable(&sb, &sa) {
            MulKind::BroadcastB
        } else if broadcastable(&sa, &sb) {
            MulKind::BroadcastA
        } else {
            return Err(TensorError::Dimension(format!(
                "mul: shapes {sa:?} and {sb:?} differ and are not channel-broadcastable"
            )));
        };
        let out_shape = match kind {
            MulKind::Plain | MulKind::BroadcastB => sa.clone(),
            MulKind::BroadcastA => sb.clone(),
        };
        let data = self.tape.with_two(self.id, other.id, |a, b| match kind {
            MulKind::Plain => a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<f64>>(),
            MulKind::BroadcastB => mul_broadcast(a, &sa, b),
            MulKind::BroadcastA => mul_broadcast(b, &sb, a),
        });
        Ok(self.binary_push(
            other,
            out_shape,
            data,
            Op::Mul {
                a: self.id,
                b: other.id,
                kind,
            },
        ))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary_check(other, "div")?;
        let data = self.tape.with_two(self.id, other.id, |a, b| {
            a.iter().zip(b).map(|(x, y)| x / y).collect::<Vec<f64>>()
        });
        Ok(self.binary_push(other, self.shape(), data, Op::Div(self.id, other.id)))
    }

    /// 2-D convolution over NCHW input with OCkk weights, zero padding.
    /// Kernels must be 1x1 or 3x3.
    pub fn conv2d(
        &self,
        weight: &Var,
        bias: &Var,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        if !self.tape.same_tape(&weight.tape) || !self.tape.same_tape(&bias.tape) {
            return Err(TensorError::Argument("conv2d across tapes".into()));
        }
        let xs = self.shape();
        let ws = weight.shape();
        let bs = bias.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "conv2d wants NCHW input and OCkk weight, got {xs:?} and {ws:?}"
            )));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(TensorError::Argument(format!(
                "conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}"
            )));
        }
        if stride < 1 || dilation < 1 {
            return Err(TensorError::Argument(format!(
                "conv2d stride/dilation must be >= 1, got {stride}/{dilation}"
            )));
        }
        if ws[1] != xs[1] {
            return Err(TensorError::Dimension(format!(
                "conv2d: input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if bs != vec![ws[0]] {
            return Err(TensorError::Dimension(format!(
                "conv2d: bias shape {bs:?} does not match {} output channels",
                ws[0]
            )));
        }
        let out_h = conv_out_dim(xs[2], kh, stride, dilation, padding)?;
        let out_w = conv_out_dim(xs[3], kw, stride, dilation, padding)?;
        let out_shape = vec![xs[0], ws[0], out_h, out_w];

        let data = {
            let inner = self.tape.inner.borrow();
            conv2d_forward(
                &inner.nodes[self.id].data,
                &xs,
                &inner.nodes[weight.id].data,
                &ws,
                &inner.nodes[bias.id].data,
                &out_shape,
                stride,
                dilation,
                padding,
            )
        };
        let needs = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].needs_grad
                || inner.nodes[weight.id].needs_grad
                || inner.nodes[bias.id].needs_grad
        };
        Ok(self.tape.push(
            out_shape,
            data,
            needs,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                stride,
                dilation,
                padding,
            },
        ))
    }

    /// Nearest-neighbour upsampling of the two trailing spatial dims.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(TensorError::Argument("upsample factor must be >= 1".into()));
        }
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "upsample_nearest wants NCHW, got {xs:?}"
            )));
        }
        let out_shape = vec![xs[0], xs[1], xs[2] * factor, xs[3] * factor];
        let data = self.tape.with_data(self.id, |x| {
            let mut out = vec![0.0; numel(&out_shape)];
            let (h, w) = (xs[2], xs[3]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            for nc in 0..xs[0] * xs[1] {
                let src = nc * h * w;
                let dst = nc * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        out[dst + i * ow + j] = x[src + (i / factor) * w + (j / factor)];
                    }
                }
            }
            out
        });
        Ok(self.unary(
            out_shape,
            data,
            Op::UpsampleNearest {
                x: self.id,
                factor,
            },
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Argument("concat of zero tensors".into()))?;
        let tape = first.tape.clone();
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::Argument(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            if !tape.same_tape(&p.tape) {
                return Err(TensorError::Argument("concat across tapes".into()));
            }
            let s = p.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::Dimension(format!(
                    "concat: shape {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;

        let outer: usize = base[..axis].iter().product();
        let inner_elems: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&out_shape)];
        {
            let tin = tape.inner.borrow();
            let mut axis_offset = 0;
            for p in parts {
                let s = &tin.nodes[p.id].shape;
                let src = &tin.nodes[p.id].data;
                let span = s[axis] * inner_elems;
                for o in 0..outer {
                    let from = o * span;
                    let to = (o * axis_total + axis_offset) * inner_elems;
                    data[to..to + span].copy_from_slice(&src[from..from + span]);
                }
                axis_offset += s[axis];
            }
        }
        let needs = {
            let tin = tape.inner.borrow();
            parts.iter().any(|p| tin.nodes[p.id].needs_grad)
        };
        Ok(tape.push(
            out_shape,
            data,
            needs,
            Op::Concat {
                xs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Dot product with a fixed weight vector, yielding a scalar. The
    /// weights are not differentiated.
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.len() {
            return Err(TensorError::Dimension(format!(
                "weighted_sum: {} weights for {} elements",
                weights.len(),
                self.len()
            )));
        }
        let v = self
            .tape
            .with_data(self.id, |x| x.iter().zip(weights).map(|(a, w)| a * w).sum());
        Ok(self.unary(
            vec![],
            vec![v],
            Op::WeightedSum {
                x: self.id,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&self) -> Var {
        self.weighted_sum(&vec![1.0; self.len()])
            .expect("weights sized to match")
    }

    pub fn mean(&self) -> Var {
        let n = self.len() as f64;
        self.weighted_sum(&vec![1.0 / n; self.len()])
            .expect("weights sized to match")
    }

    /// Picks elements at flat `indices` into a 1-D tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(TensorError::Argument("gather of zero indices".into()));
        }
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::Argument(format!(
                "gather index {bad} out of range ({n} elements)"
            )));
        }
        let data = self
            .tape
            .with_data(self.id, |x| indices.iter().map(|&i| x[i]).collect());
        Ok(self.unary(
            vec![indices.len()],
            data,
            Op::Gather {
                x: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let data = self.tape.with_data(self.id, |x| x.to_vec());
        Ok(self.unary(shape.to_vec(), data, Op::Reshape(self.id)))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp binds.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(TensorError::Argument(format!("clamp bounds {lo} >= {hi}")));
        }
        let data: Vec<f64> = self
            .tape
            .with_data(self.id, |x| x.iter().map(|&v| v.clamp(lo, hi)).collect());
        Ok(self.unary(self.shape(), data, Op::Clamp { x: self.id, lo, hi }))
    }

    /// Elementwise smooth-L1 of a difference map.
    pub fn huber(&self) -> Var {
        let data: Vec<f64> = self.tape.with_data(self.id, |x| {
            x.iter()
                .map(|&d| {
                    if d.abs() < 1.0 {
                        0.5 * d * d
                    } else {
                        d.abs() - 0.5
                    }
                })
                .collect()
        });
        self.unary(self.shape(), data, Op::Huber(self.id))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates d(self)/d(node) into every tracked ancestor. `self` must
    /// hold a single element. Any gradients from a previous backward pass
    /// on this tape are cleared first.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.nodes[self.id].data.len() != 1 {
            return Err(TensorError::Argument(format!(
                "backward needs a scalar loss, shape is {:?}",
                inner.nodes[self.id].shape
            )));
        }
        for g in inner.grads.iter_mut() {
            *g = None;
        }
        if !inner.nodes[self.id].needs_grad {
            return Ok(());
        }
        inner.grads[self.id] = Some(vec![1.0]);

        let TapeInner { nodes, grads } = &mut *inner;
        for id in (0..=self.id).rev() {
            let go = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backward_step(nodes, grads, id, &go);
            grads[id] = Some(go);
        }
        Ok(())
    }
}

impl Var {
    fn binary_check(&self, other: &Var, what: &str) -> Result<()> {
        if !self.tape.same_tape(&other.tape) {
            return Err(TensorError::Argument(format!("{what} across tapes")));
        }
        check_same_shape(&self.shape(), &other.shape(), what)
    }

    fn binary_push(&self, other: &Var, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let needs = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].needs_grad || inner.nodes[other.id].needs_grad
        };
        self.tape.push(shape, data, needs, op)
    }
}

impl Tape {
    fn with_data<R>(&self, id: usize, f: impl FnOnce(&[f64]) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[id].data)
    }

    fn with_two<R>(&self, a: usize, b: usize, f: impl FnOnce(&[f64], &[f64]) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[a].data, &inner.nodes[b].data)
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

fn conv_out_dim(
    input: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return Err(TensorError::Degenerate(format!(
            "conv2d: padded extent {padded} smaller than kernel span {span}"
        )));
    }
    Ok((padded - span) / stride + 1)
}

/// True when `small` is `big` with the channel extent collapsed to 1.
fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    small.len() == 4
        && big.len() == 4
        && small[1] == 1
        && big[1] >= 1
        && small[0] == big[0]
        && small[2] == big[2]
        && small[3] == big[3]
}

/// `full [N,C,H,W] * map [N,1,H,W]`, map broadcast over channels.
fn mul_broadcast(full: &[f64], full_shape: &[usize], map: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (full_shape[0], full_shape[1], full_shape[2], full_shape[3]);
    let hw = h * w;
    let mut out = vec![0.0; full.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let mbase = ni * hw;
            for s in 0..hw {
                out[base + s] = full[base + s] * map[mbase + s];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    b: &[f64],
    out_shape: &[usize],
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Vec<f64> {
    let (n, c, h, width) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut out = vec![0.0; numel(out_shape)];
    for ni in 0..n {
        for oi in 0..oc {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for u in 0..kh {
                            let y = (i * stride + u * dilation) as isize - padding as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let xx = (j * stride + v * dilation) as isize - padding as isize;
                                if xx < 0 || xx >= width as isize {
                                    continue;
                                }
                                acc += x[((ni * c + ci) * h + y as usize) * width + xx as usize]
                                    * w[((oi * c + ci) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((ni * oc + oi) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, add: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
    add(slot);
}

fn backward_step(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, go: &[f64]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Sigmoid(x) => {
            let y = &nodes[id].data;
            accumulate(grads, nodes, *x, |g| {
                for i in 0..go.len() {
                    g[i] += go[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Relu(x) => {
            let xin = &nodes[*x].data;
            accumulate(grads, nodes, *x, |g| {
                for i in 0..go.len() {
                    if xin[i] > 0.0 {
                        g[i] += go[i];
                    }
                }
            });
        }
        Op::Ln(x) => {
            let xin = &nodes[*x].data;
            accumulate(grads, nodes, *x, |g| {
                for i in 0..go.len() {
                    g[i] += go[i] / xin[i];
                }
            });
        }
        Op::Softmax { x, axis } => {
            let y = &nodes[id].data;
            let shape = &nodes[id].shape;
            accumulate(grads, nodes, *x, |g| {
                for_each_lane(shape, *axis, |offset, stride, n| {
                    let mut dot = 0.0;
                    for i in 0..n {
                        let idx = offset + i * stride;
                        dot += go[idx] * y[idx];
                    }
                    for i in 0..n {
                        let idx = offset + i * stride;
                        g[idx] += y[idx] * (go[idx] - dot);
                    }
                });
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |g| {
                for i in 0..go.len() {
                    g[i] += go[i];
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for i in 0..go.len() {
                    g[i] += go[i];
                }
            });
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |g| {
                for i in 0..go.len() {
                    g[i] += go[i];
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for i in 0..go.len() {
                    g[i] -= go[i];
                }
            });
        }
        Op::Mul { a, b, kind } => {
            let (da, db) = (&nodes[*a].data, &nodes[*b].data);
            match kind {
                MulKind::Plain => {
                    accumulate(grads, nodes, *a, |g| {
                        for i in 0..go.len() {
                            g[i] += go[i] * db[i];
                        }
                    });
                    accumulate(grads, nodes, *b, |g| {
                        for i in 0..go.len() {
                            g[i] += go[i] * da[i];
                        }
                    });
                }
                MulKind::BroadcastB => {
                    mul_broadcast_backward(nodes, grads, *a, *b, da, db, go);
                }
                MulKind::BroadcastA => {
                    mul_broadcast_backward(nodes, grads, *b, *a, db, da, go);
                }
            }
        }
        Op::Div(a, b) => {
            let (da, db) = (&nodes[*a].data, &nodes[*b].data);
            accumulate(grads, nodes, *a, |g| {
                for i in 0..go.len() {
                    g[i] += go[i] / db[i];
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for i in 0..go.len() {
                    g[i] -= go[i] * da[i] / (db[i] * db[i]);
                }
            });
        }
        Op::Affine { x, scale } => {
            accumulate(grads, nodes, *x, |g| {
                for i in 0..go.len() {
                    g[i] += go[i] * scale;
                }
            });
        }
        Op::Concat { xs, axis } => {
            let out_shape = &nodes[id].shape;
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut axis_offset = 0;
            for &xid in xs {
                let part = nodes[xid].shape[*axis];
                let span = part * inner;
                accumulate(grads, nodes, xid, |g| {
                    for o in 0..outer {
                        let from = (o * total + axis_offset) * inner;
                        let to = o * span;
                        for i in 0..span {
                            g[to + i] += go[from + i];
                        }
                    }
                });
                axis_offset += part;
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            dilation,
            padding,
        } => {
            conv2d_backward(nodes, grads, id, *x, *w, *b, *stride, *dilation, *padding, go);
        }
        Op::UpsampleNearest { x, factor } => {
            let xs = &nodes[*x].shape;
            let os = &nodes[id].shape;
            let (h, w) = (xs[2], xs[3]);
            let (oh, ow) = (os[2], os[3]);
            accumulate(grads, nodes, *x, |g| {
                for nc in 0..xs[0] * xs[1] {
                    let src = nc * h * w;
                    let dst = nc * oh * ow;
                    for i in 0..oh {
                        for j in 0..ow {
                            g[src + (i / factor) * w + (j / factor)] += go[dst + i * ow + j];
                        }
                    }
                }
            });
        }
        Op::WeightedSum { x, weights } => {
            accumulate(grads, nodes, *x, |g| {
                for i in 0..g.len() {
                    g[i] += go[0] * weights[i];
                }
            });
        }
        Op::Gather { x, indices } => {
            accumulate(grads, nodes, *x, |g| {
                for (k, &i) in indices.iter().enumerate() {
                    g[i] += go[k];
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(grads, nodes, *x, |g| {
                for i in 0..go.len() {
                    g[i] += go[i];
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            let xin = &nodes[*x].data;
            accumulate(grads, nodes, *x, |g| {
                for i in 0..go.len() {
                    if xin[i] > *lo && xin[i] < *hi {
                        g[i] += go[i];
                    }
                }
            });
        }
        Op::Huber(x) => {
            let d = &nodes[*x].data;
            accumulate(grads, nodes, *x, |g| {
                for i in 0..go.len() {
                    g[i] += go[i] * if d[i].abs() < 1.0 { d[i] } else { d[i].signum() };
                }
            });
        }
    }
}

fn mul_broadcast_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    full_id: usize,
    map_id: usize,
    full: &[f64],
    map: &[f64],
    go: &[f64],
) {
    let fs = &nodes[full_id].shape;
    let (n, c, hw) = (fs[0], fs[1], fs[2] * fs[3]);
    accumulate(grads, nodes, full_id, |g| {
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mbase = ni * hw;
                for s in 0..hw {
                    g[base + s] += go[base + s] * map[mbase + s];
                }
            }
        }
    });
    accumulate(grads, nodes, map_id, |g| {
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mbase = ni * hw;
                for s in 0..hw {
                    g[mbase + s] += go[base + s] * full[base + s];
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    out_id: usize,
    x_id: usize,
    w_id: usize,
    b_id: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
    go: &[f64],
) {
    let xs = &nodes[x_id].shape;
    let ws = &nodes[w_id].shape;
    let os = &nodes[out_id].shape;
    let (n, c, h, width) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (os[2], os[3]);
    let xdata = &nodes[x_id].data;
    let wdata = &nodes[w_id].data;

    accumulate(grads, nodes, b_id, |g| {
        for ni in 0..n {
            for oi in 0..oc {
                let base = (ni * oc + oi) * oh * ow;
                for s in 0..oh * ow {
                    g[oi] += go[base + s];
                }
            }
        }
    });
    accumulate(grads, nodes, w_id, |g| {
        for ni in 0..n {
            for oi in 0..oc {
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = go[((ni * oc + oi) * oh + i) * ow + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            for u in 0..kh {
                                let y = (i * stride + u * dilation) as isize - padding as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let xx =
                                        (j * stride + v * dilation) as isize - padding as isize;
                                    if xx < 0 || xx >= width as isize {
                                        continue;
                                    }
                                    g[((oi * c + ci) * kh + u) * kw + v] += gv
                                        * xdata
                                            [((ni * c + ci) * h + y as usize) * width + xx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    accumulate(grads, nodes, x_id, |g| {
        for ni in 0..n {
            for oi in 0..oc {
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = go[((ni * oc + oi) * oh + i) * ow + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            for u in 0..kh {
                                let y = (i * stride + u * dilation) as isize - padding as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let xx =
                                        (j * stride + v * dilation) as isize - padding as isize;
                                    if xx < 0 || xx >= width as isize {
                                        continue;
                                    }
                                    g[((ni * c + ci) * h + y as usize) * width + xx as usize] +=
                                        gv * wdata[((oi * c + ci) * kh + u) * kw + v];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Visits every 1-D lane along `axis`: calls `f(offset, stride, len)`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let n = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..stride {
            f(o * n * stride + i, stride, n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = leaf(&tape, vec![], vec![2.0]);
        let y = leaf(&tape, vec![], vec![3.0]);
        let loss = x.mul(&y).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3.0]);
        assert_eq!(y.grad().unwrap().data(), &[2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = leaf(&tape, vec![], vec![0.0]);
        let y = x.sigmoid();
        assert_eq!(y.scalar_value().unwrap(), 0.5);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.25]);
    }

    #[test]
    fn elementwise_mul_example() {
        let tape = Tape::new();
        let a = leaf(&tape, vec![2], vec![2.0, 3.0]);
        let b = leaf(&tape, vec![2], vec![4.0, 5.0]);
        assert_eq!(a.mul(&b).unwrap().value().data(), &[8.0, 15.0]);
    }

    #[test]
    fn softmax_two_logits() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.9, 0.1]).unwrap());
        let s = x.softmax(0).unwrap().value();
        // independent e^x / sum e^x evaluation
        let e: Vec<f64> = [0.9f64, 0.1].iter().map(|v| v.exp()).collect();
        let z = e[0] + e[1];
        assert!((s.data()[0] - e[0] / z).abs() < 1e-15);
        assert!((s.data()[1] - e[1] / z).abs() < 1e-15);
        assert!((s.data()[0] - 0.6900).abs() < 5e-5);
        assert!((s.data()[1] - 0.3100).abs() < 5e-5);
    }

    #[test]
    fn conv_1x1_is_scalar_multiply() {
        let tape = Tape::new();
        let x = leaf(&tape, vec![1, 1, 1, 1], vec![2.0]);
        let w = leaf(&tape, vec![1, 1, 1, 1], vec![3.0]);
        let b = leaf(&tape, vec![1], vec![0.0]);
        let y = x.conv2d(&w, &b, 1, 1, 0).unwrap();
        assert_eq!(y.value().data(), &[6.0]);
    }

    #[test]
    fn conv_3x3_ones_counts_overlap() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = x.conv2d(&w, &b, 1, 1, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 2, 2), 4.0);
        assert_eq!(y.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv_shape_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![1, 2, 4, 4]));
        let w = tape.constant(Tensor::ones(vec![1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(matches!(
            x.conv2d(&w, &b, 1, 1, 0),
            Err(TensorError::Dimension(_))
        ));
        // 4x4 input, 3x3 kernel at dilation 2 spans 5: degenerate without padding
        let w2 = tape.constant(Tensor::ones(vec![1, 2, 3, 3]));
        assert!(matches!(
            x.conv2d(&w2, &b, 1, 2, 0),
            Err(TensorError::Degenerate(_))
        ));
    }

    #[test]
    fn upsample_nearest_2x() {
        let tape = Tape::new();
        let x = leaf(&tape, vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.upsample_nearest(2).unwrap();
        assert_eq!(
            y.value().data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        // identity at factor 1
        let z = x.upsample_nearest(1).unwrap();
        assert_eq!(z.value().data(), x.value().data());
        // backward of a sum: every source cell sees gradient factor^2
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 4.0, 4.0, 4.0]);
        assert!(x.upsample_nearest(0).is_err());
    }

    #[test]
    fn concat_routes_gradient_slices() {
        let tape = Tape::new();
        let a = leaf(&tape, vec![1, 2, 1, 1], vec![1.0, 2.0]);
        let b = leaf(&tape, vec![1, 3, 1, 1], vec![3.0, 4.0, 5.0]);
        let cat = Var::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(cat.shape(), vec![1, 5, 1, 1]);
        // one-hot probe on element 3 (second element of b)
        let mut w = vec![0.0; 5];
        w[3] = 1.0;
        cat.weighted_sum(&w).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[0.0, 0.0]);
        assert_eq!(b.grad().unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn channel_broadcast_mul() {
        let tape = Tape::new();
        let full = leaf(&tape, vec![1, 2, 2, 2], (1..=8).map(f64::from).collect());
        let map = leaf(&tape, vec![1, 1, 2, 2], vec![1.0, 0.0, 2.0, 0.5]);
        let y = full.mul(&map).unwrap();
        assert_eq!(y.value().data(), &[1.0, 0.0, 6.0, 2.0, 5.0, 0.0, 14.0, 4.0]);
        y.sum().backward().unwrap();
        // map gradient sums contributions over channels
        assert_eq!(map.grad().unwrap().data(), &[6.0, 8.0, 10.0, 12.0]);
        assert_eq!(
            full.grad().unwrap().data(),
            &[1.0, 0.0, 2.0, 0.5, 1.0, 0.0, 2.0, 0.5]
        );
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = leaf(&tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(x.backward(), Err(TensorError::Argument(_))));
    }

    #[test]
    fn repeated_backward_resets_grads() {
        let tape = Tape::new();
        let x = leaf(&tape, vec![], vec![3.0]);
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn detach_stops_gradient() {
        let tape = Tape::new();
        let x = leaf(&tape, vec![], vec![2.0]);
        let d = x.detach();
        let y = x.mul(&d).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0]);
        assert!(d.grad().is_none());
    }

    #[test]
    fn gather_scatters_gradient() {
        let tape = Tape::new();
        let x = leaf(&tape, vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let g = x.gather(&[2, 2, 0]).unwrap();
        assert_eq!(g.value().data(), &[3.0, 3.0, 1.0]);
        g.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 2.0, 0.0]);
        assert!(x.gather(&[4]).is_err());
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let tape = Tape::new();
            let x = leaf(&tape, vec![1, 1, 4, 4], (0..16).map(|i| i as f64 * 0.37).collect());
            let w = leaf(&tape, vec![1, 1, 3, 3], (0..9).map(|i| 0.1 * i as f64 - 0.4).collect());
            let b = leaf(&tape, vec![1], vec![0.05]);
            let y = x.conv2d(&w, &b, 1, 1, 1).unwrap().sigmoid().sum();
            y.backward().unwrap();
            (
                y.scalar_value().unwrap().to_bits(),
                x.grad().unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
