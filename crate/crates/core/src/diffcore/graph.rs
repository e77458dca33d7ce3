//! Computation graph with reverse-mode differentiation.
//!
//! Every backward rule is expressed with graph operations, so a gradient
//! computed with `create_graph = true` is an ordinary differentiable node.
//! The operations come in closed adjoint families (convolution and its two
//! adjoints, pool/scatter/gather, bias add/sum/broadcast, ...) which is what
//! makes arbitrary-order differentiation possible.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + alpha·y`
    Axpy {
        x: Var,
        y: Var,
        alpha: T,
    },
    /// `scale·x + shift`
    ScaleShift {
        x: Var,
        scale: T,
    },
    AddConst(Var),
    Sigmoid(Var),
    Relu(Var),
    MaskMul {
        x: Var,
        mask: Arc<Vec<T>>,
    },
    BceWithLogits {
        logits: Var,
        labels: Arc<Vec<T>>,
    },
    /// Weighted sum to a scalar.
    Dot {
        x: Var,
        weights: Arc<Vec<T>>,
    },
    /// Scalar times a fixed vector; the adjoint of `Dot`.
    ScaleVec {
        s: Var,
        weights: Arc<Vec<T>>,
    },
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
        outer: usize,
        inner: usize,
    },
    SumToBias {
        g: Var,
        outer: usize,
        inner: usize,
    },
    BroadcastBias {
        bias: Var,
        outer: usize,
        inner: usize,
    },
    Conv {
        x: Var,
        kernel: Var,
    },
    ConvInputGrad {
        g: Var,
        kernel: Var,
    },
    ConvKernelGrad {
        g: Var,
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Arc<Vec<usize>>,
    },
    PoolScatter {
        g: Var,
        argmax: Arc<Vec<usize>>,
    },
    PoolGather {
        g: Var,
        argmax: Arc<Vec<usize>>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Axpy { x, y, .. } => vec![*x, *y],
            ScaleShift { x, .. }
            | AddConst(x)
            | Sigmoid(x)
            | Relu(x)
            | MaskMul { x, .. }
            | Dot { x, .. }
            | Reshape(x)
            | MaxPool { x, .. } => vec![*x],
            BceWithLogits { logits, .. } => vec![*logits],
            ScaleVec { s, .. } => vec![*s],
            MatMul { a, b, .. } => vec![*a, *b],
            AddBias { x, bias, .. } => vec![*x, *bias],
            SumToBias { g, .. } | PoolScatter { g, .. } | PoolGather { g, .. } => vec![*g],
            BroadcastBias { bias, .. } => vec![*bias],
            Conv { x, kernel } => vec![*x, *kernel],
            ConvInputGrad { g, kernel, .. } => vec![*g, *kernel],
            ConvKernelGrad { g, x, .. } => vec![*g, *x],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Arena of nodes in creation (hence topological) order.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Batch-first view of a rank-3 `[C,H,W]` or rank-4 `[B,C,H,W]` tensor.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(op, "rank", 4, shape.len())),
    }
}

fn with_spatial(template: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    if template.len() == 3 {
        vec![c, h, w]
    } else {
        vec![template[0], c, h, w]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created at or after `len`. Handles to those nodes
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// A differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// A non-differentiable input (data, labels, detached values).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = self.recording && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::dim(op, "rank", sa.len(), sb.len()));
        }
        if let Some(ax) = (0..sa.len()).find(|&i| sa[i] != sb[i]) {
            return Err(Error::dim(op, AXIS_NAMES[ax.min(4)], sa[ax], sb[ax]));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// `x + alpha·y`.
    pub fn axpy(&mut self, x: Var, y: Var, alpha: T) -> Result<Var> {
        self.same_shape("axpy", x, y)?;
        let v = self.value(x).zip_map(self.value(y), |p, q| p + alpha * q);
        Ok(self.push(Op::Axpy { x, y, alpha }, v))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.scale_shift(x, factor, T::zero())
    }

    /// `scale·x + shift`.
    pub fn scale_shift(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).map(|p| scale * p + shift);
        self.push(Op::ScaleShift { x, scale }, v)
    }

    /// Adds a fixed tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim(
                "add_const",
                "element count",
                self.value(x).numel(),
                c.numel(),
            ));
        }
        let v = self.value(x).zip_map(c, |p, q| p + q);
        Ok(self.push(Op::AddConst(x), v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    /// `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| if p > T::zero() { p } else { T::zero() });
        self.push(Op::Relu(x), v)
    }

    fn mask_mul(&mut self, x: Var, mask: Arc<Vec<T>>) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&p, &m)| p * m)
            .collect();
        let v = Tensor::new(self.shape(x).to_vec(), data).expect("mask length");
        self.push(Op::MaskMul { x, mask }, v)
    }

    // ---- losses and reductions ---------------------------------------------

    /// Per-element binary cross-entropy of logits against labels in {0, 1}.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != labels.len() {
            return Err(Error::dim("bce_with_logits", "element count", z.numel(), labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::Parameter(format!("label must be 0 or 1, got {bad}")));
        }
        let data = z
            .data()
            .iter()
            .zip(labels)
            .map(|(&zi, &yi)| T::from_f64_lossy(kernels::bce_with_logit(zi.as_f64(), yi.as_f64())))
            .collect();
        let v = Tensor::new(z.shape().to_vec(), data)?;
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                labels: Arc::new(labels.to_vec()),
            },
            v,
        ))
    }

    /// `Σ wᵢ xᵢ` accumulated in f64, returned as a one-element tensor.
    pub fn dot_const(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        self.dot_arc(x, Arc::new(weights.to_vec()))
    }

    fn dot_arc(&mut self, x: Var, weights: Arc<Vec<T>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != weights.len() {
            return Err(Error::dim("dot", "element count", xv.numel(), weights.len()));
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights.iter())
            .map(|(&a, &w)| a.as_f64() * w.as_f64())
            .sum();
        Ok(self.push(Op::Dot { x, weights }, Tensor::scalar(T::from_f64_lossy(s))))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        self.dot_arc(x, Arc::new(vec![T::one(); n])).expect("matching length")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let w = T::one() / T::from_usize(n).expect("count");
        self.dot_arc(x, Arc::new(vec![w; n])).expect("matching length")
    }

    fn scale_vec(&mut self, s: Var, weights: Arc<Vec<T>>, shape: Vec<usize>) -> Var {
        let sv = self.value(s).item();
        let v = Tensor::new(shape.clone(), weights.iter().map(|&w| sv * w).collect()).expect("weights match shape");
        self.push(Op::ScaleVec { s, weights }, v)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `op(a)·op(b)` for rank-2 operands, `op` being an optional transpose.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 {
            return Err(Error::dim("matmul", "lhs rank", 2, sa.len()));
        }
        if sb.len() != 2 {
            return Err(Error::dim("matmul", "rhs rank", 2, sb.len()));
        }
        let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::dim("matmul", "inner dimension", k, k2));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, trans_a, trans_b);
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MatMul { a, b, trans_a, trans_b }, v))
    }

    /// Adds `bias[c]` to every element of channel `c`, the channel axis being
    /// axis 1 (or axis 0 for rank-1/ rank-3 unbatched inputs).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (outer, ch, inner) = channel_layout(self.shape(x));
        let bshape = self.shape(bias);
        if bshape.len() != 1 || bshape[0] != ch {
            return Err(Error::dim("add_bias", "channel", ch, bshape.iter().product()));
        }
        let data = kernels::add_bias(self.value(x).data(), self.value(bias).data(), outer, inner);
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::AddBias { x, bias, outer, inner }, v))
    }

    fn sum_to_bias(&mut self, g: Var, outer: usize, inner: usize) -> Var {
        let n = self.value(g).numel();
        let ch = n / (outer * inner);
        let data = kernels::sum_to_bias(self.value(g).data(), outer, ch, inner);
        self.push(Op::SumToBias { g, outer, inner }, Tensor::from_vec(data))
    }

    fn broadcast_bias(&mut self, bias: Var, outer: usize, inner: usize, shape: Vec<usize>) -> Var {
        let data = kernels::broadcast_bias(self.value(bias).data(), outer, inner);
        let v = Tensor::new(shape, data).expect("broadcast shape");
        self.push(Op::BroadcastBias { bias, outer, inner }, v)
    }

    /// Dense layer `weight·x + bias` for `x` of shape `[N]` or `[B,N]`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 {
            return Err(Error::dim("affine", "weight rank", 2, ws.len()));
        }
        let x2 = match xs.len() {
            1 => self.reshape(x, &[1, xs[0]])?,
            2 => x,
            r => return Err(Error::dim("affine", "input rank", 2, r)),
        };
        if self.shape(x2)[1] != ws[1] {
            return Err(Error::dim("affine", "input features", ws[1], self.shape(x2)[1]));
        }
        let bs = self.shape(bias);
        if bs.len() != 1 || bs[0] != ws[0] {
            return Err(Error::dim("affine", "bias", ws[0], bs.iter().product()));
        }
        let y = self.matmul(x2, weight, false, true)?;
        let y = self.add_bias(y, bias)?;
        if xs.len() == 1 {
            self.reshape(y, &[ws[0]])
        } else {
            Ok(y)
        }
    }

    // ---- convolution and pooling ------------------------------------------

    fn conv_geom(&self, op: &'static str, x: &[usize], kernel: &[usize]) -> Result<ConvGeom> {
        let (batch, c_in, h, w) = image_dims(op, x)?;
        if kernel.len() != 4 {
            return Err(Error::dim(op, "kernel rank", 4, kernel.len()));
        }
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(Error::dim(op, "input channels", kc, c_in));
        }
        if kh > h {
            return Err(Error::dim(op, "height", kh, h));
        }
        if kw > w {
            return Err(Error::dim(op, "width", kw, w));
        }
        Ok(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
        })
    }

    /// Valid, stride-1 cross-correlation without bias.
    pub fn conv2d_nobias(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let g = self.conv_geom("conv2d", self.shape(x), self.shape(kernel))?;
        let data = kernels::conv_forward(self.value(x).data(), self.value(kernel).data(), &g);
        let shape = with_spatial(self.shape(x), g.c_out, g.ho(), g.wo());
        let v = Tensor::new(shape, data)?;
        Ok(self.push(Op::Conv { x, kernel }, v))
    }

    /// Valid, stride-1 cross-correlation plus per-output-channel bias.
    /// `x` is `[C_in,H,W]` or `[B,C_in,H,W]`, `kernel` is `[C_out,C_in,kH,kW]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let c_out = self.shape(kernel).first().copied().unwrap_or(0);
        let bs = self.shape(bias);
        if bs.len() != 1 || bs[0] != c_out {
            return Err(Error::dim("conv2d", "bias", c_out, bs.iter().product()));
        }
        let y = self.conv2d_nobias(x, kernel)?;
        self.add_bias(y, bias)
    }

    fn conv_input_grad(&mut self, g: Var, kernel: Var, in_shape: Vec<usize>) -> Var {
        let geom = self
            .conv_geom("conv2d", &in_shape, self.shape(kernel))
            .expect("geometry checked in forward");
        let data = kernels::conv_input_grad(self.value(g).data(), self.value(kernel).data(), &geom);
        let v = Tensor::new(in_shape.clone(), data).expect("input shape");
        self.push(Op::ConvInputGrad { g, kernel }, v)
    }

    fn conv_kernel_grad(&mut self, g: Var, x: Var, kernel_shape: Vec<usize>) -> Var {
        let geom = self
            .conv_geom("conv2d", self.shape(x), &kernel_shape)
            .expect("geometry checked in forward");
        let data = kernels::conv_kernel_grad(self.value(g).data(), self.value(x).data(), &geom);
        let v = Tensor::new(kernel_shape.clone(), data).expect("kernel shape");
        self.push(Op::ConvKernelGrad { g, x }, v)
    }

    /// Max pooling with a square `k×k` window over `[C,H,W]` or `[B,C,H,W]`.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(Error::Parameter(format!(
                "max_pool2d: kernel ({k}) and stride ({stride}) must be positive"
            )));
        }
        let (b, c, h, w) = image_dims("max_pool2d", self.shape(x))?;
        if k > h {
            return Err(Error::dim("max_pool2d", "height", k, h));
        }
        if k > w {
            return Err(Error::dim("max_pool2d", "width", k, w));
        }
        let (data, argmax) = kernels::max_pool(self.value(x).data(), b * c, h, w, k, stride);
        let shape = with_spatial(self.shape(x), c, (h - k) / stride + 1, (w - k) / stride + 1);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::MaxPool {
                x,
                argmax: Arc::new(argmax),
            },
            v,
        ))
    }

    fn pool_scatter(&mut self, g: Var, argmax: Arc<Vec<usize>>, in_shape: Vec<usize>) -> Var {
        let len = in_shape.iter().product();
        let data = kernels::scatter_add(self.value(g).data(), &argmax, len);
        let v = Tensor::new(in_shape.clone(), data).expect("pool input shape");
        self.push(Op::PoolScatter { g, argmax }, v)
    }

    fn pool_gather(&mut self, g: Var, argmax: Arc<Vec<usize>>, out_shape: &[usize]) -> Var {
        let data = kernels::gather(self.value(g).data(), &argmax);
        let v = Tensor::new(out_shape.to_vec(), data).expect("pool output shape");
        self.push(Op::PoolGather { g, argmax }, v)
    }

    // ---- optimisation helpers ---------------------------------------------

    /// `θᵢ − α·gᵢ` for each aligned pair, as new nodes so later losses can be
    /// differentiated back through the update.
    pub fn sgd_step(&mut self, params: &[Var], grads: &[Var], alpha: T) -> Result<Vec<Var>> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "sgd_step: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        params
            .iter()
            .zip(grads)
            .map(|(&p, &g)| self.axpy(p, g, -alpha))
            .collect()
    }

    // ---- differentiation --------------------------------------------------

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned nodes are differentiable functions of
    /// the graph inputs. Without it they are constants and all intermediate
    /// backward nodes are freed. A `wrt` node that `loss` does not depend on
    /// receives a zero gradient.
    pub fn grad(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if create_graph {
            return self.backward(loss, wrt);
        }
        let mark = self.nodes.len();
        let prev = std::mem::replace(&mut self.recording, false);
        let result = self.backward(loss, wrt);
        self.recording = prev;
        let grads = result?;
        let values: Vec<Tensor<T>> = grads.iter().map(|&g| self.value(g).clone()).collect();
        self.truncate(mark);
        Ok(values.into_iter().map(|t| self.constant(t)).collect())
    }

    /// Like [`grad`](Self::grad) without graph creation, returning plain
    /// tensors and leaving the graph as it was.
    pub fn grad_tensors(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        let mark = self.nodes.len();
        let vars = self.grad(loss, wrt, false)?;
        let out = vars.iter().map(|&v| self.value(v).clone()).collect();
        self.truncate(mark);
        Ok(out)
    }

    fn backward(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let end = loss.0 + 1;
        // Nodes that depend on some `wrt` through differentiable edges.
        let mut relevant = vec![false; end];
        for w in wrt {
            if w.0 < end {
                relevant[w.0] = true;
            }
        }
        for id in 0..end {
            if !relevant[id] && self.nodes[id].requires_grad {
                relevant[id] = self.nodes[id].op.inputs().iter().any(|i| relevant[i.0]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if relevant[loss.0] {
            let seed = Tensor::full(self.shape(loss), T::one());
            adjoint[loss.0] = Some(self.constant(seed));
        }
        for id in (0..end).rev() {
            let Some(gy) = adjoint[id] else { continue };
            if !relevant[id] {
                continue;
            }
            let op = self.nodes[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            for (input, contrib) in self.backward_op(Var(id), &op, gy, &relevant)? {
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    self.constant(z)
                }
            })
            .collect())
    }

    /// Contributions of node `out = op(...)` with adjoint `gy` to the
    /// adjoints of its relevant inputs.
    fn backward_op(&mut self, out: Var, op: &Op<T>, gy: Var, relevant: &[bool]) -> Result<Vec<(Var, Var)>> {
        let need = |v: &Var| relevant[v.0];
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) {
                    res.push((*a, gy));
                }
                if need(b) {
                    res.push((*b, gy));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    res.push((*a, gy));
                }
                if need(b) {
                    res.push((*b, self.scale(gy, -T::one())));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    res.push((*a, self.mul(gy, *b)?));
                }
                if need(b) {
                    res.push((*b, self.mul(gy, *a)?));
                }
            }
            Op::Axpy { x, y, alpha } => {
                if need(x) {
                    res.push((*x, gy));
                }
                if need(y) {
                    res.push((*y, self.scale(gy, *alpha)));
                }
            }
            Op::ScaleShift { x, scale } => res.push((*x, self.scale(gy, *scale))),
            Op::AddConst(x) => res.push((*x, gy)),
            Op::Sigmoid(x) => {
                // σ' = σ(1 − σ), built from the output node itself.
                let one_minus = self.scale_shift(out, -T::one(), T::one());
                let d = self.mul(out, one_minus)?;
                res.push((*x, self.mul(gy, d)?));
            }
            Op::Relu(x) => {
                let mask = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|&v| if v > T::zero() { T::one() } else { T::zero() })
                    .collect();
                res.push((*x, self.mask_mul(gy, Arc::new(mask))));
            }
            Op::MaskMul { x, mask } => res.push((*x, self.mask_mul(gy, mask.clone()))),
            Op::BceWithLogits { logits, labels } => {
                // d/dz = σ(z) − y
                let s = self.sigmoid(*logits);
                let neg_y = Tensor::new(self.shape(*logits).to_vec(), labels.iter().map(|&y| -y).collect())?;
                let d = self.add_const(s, &neg_y)?;
                res.push((*logits, self.mul(gy, d)?));
            }
            Op::Dot { x, weights } => {
                let shape = self.shape(*x).to_vec();
                res.push((*x, self.scale_vec(gy, weights.clone(), shape)));
            }
            Op::ScaleVec { s, weights, .. } => res.push((*s, self.dot_arc(gy, weights.clone())?)),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                res.push((*x, self.reshape(gy, &shape)?));
            }
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (ta, tb) = (*trans_a, *trans_b);
                if need(a) {
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul(gy, *b, false, true)?,
                        (false, true) => self.matmul(gy, *b, false, false)?,
                        (true, false) => self.matmul(*b, gy, false, true)?,
                        (true, true) => self.matmul(*b, gy, true, true)?,
                    };
                    res.push((*a, ga));
                }
                if need(b) {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul(*a, gy, true, false)?,
                        (false, true) => self.matmul(gy, *a, true, false)?,
                        (true, false) => self.matmul(*a, gy, false, false)?,
                        (true, true) => self.matmul(gy, *a, true, true)?,
                    };
                    res.push((*b, gb));
                }
            }
            Op::AddBias { x, bias, outer, inner } => {
                if need(x) {
                    res.push((*x, gy));
                }
                if need(bias) {
                    res.push((*bias, self.sum_to_bias(gy, *outer, *inner)));
                }
            }
            Op::SumToBias { g, outer, inner } => {
                let shape = self.shape(*g).to_vec();
                res.push((*g, self.broadcast_bias(gy, *outer, *inner, shape)));
            }
            Op::BroadcastBias { bias, outer, inner, .. } => {
                res.push((*bias, self.sum_to_bias(gy, *outer, *inner)));
            }
            Op::Conv { x, kernel } => {
                if need(x) {
                    let s = self.shape(*x).to_vec();
                    res.push((*x, self.conv_input_grad(gy, *kernel, s)));
                }
                if need(kernel) {
                    let s = self.shape(*kernel).to_vec();
                    res.push((*kernel, self.conv_kernel_grad(gy, *x, s)));
                }
            }
            Op::ConvInputGrad { g, kernel, .. } => {
                if need(g) {
                    res.push((*g, self.conv2d_nobias(gy, *kernel)?));
                }
                if need(kernel) {
                    let s = self.shape(*kernel).to_vec();
                    res.push((*kernel, self.conv_kernel_grad(*g, gy, s)));
                }
            }
            Op::ConvKernelGrad { g, x, .. } => {
                if need(g) {
                    res.push((*g, self.conv2d_nobias(*x, gy)?));
                }
                if need(x) {
                    let s = self.shape(*x).to_vec();
                    res.push((*x, self.conv_input_grad(*g, gy, s)));
                }
            }
            Op::MaxPool { x, argmax } => {
                let s = self.shape(*x).to_vec();
                res.push((*x, self.pool_scatter(gy, argmax.clone(), s)));
            }
            Op::PoolScatter { g, argmax, .. } => {
                let s = self.shape(*g).to_vec();
                res.push((*g, self.pool_gather(gy, argmax.clone(), &s)));
            }
            Op::PoolGather { g, argmax } => {
                let s = self.shape(*g).to_vec();
                res.push((*g, self.pool_scatter(gy, argmax.clone(), s)));
            }
        }
        Ok(res)
    }
}

const AXIS_NAMES: [&str; 5] = ["axis 0", "axis 1", "axis 2", "axis 3", "axis 4+"];

/// `(outer, channels, inner)` decomposition used by the bias operations.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        1 => (1, shape[0], 1),
        3 => (1, shape[0], shape[1] * shape[2]),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}
