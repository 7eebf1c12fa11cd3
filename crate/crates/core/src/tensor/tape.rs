//! Wengert-list reverse-mode differentiation.
//!
//! Operations append nodes to the tape in execution order; `backward` replays
//! adjoints in exact reverse order. Gradients of leaf tensors created with
//! `requires_grad` survive the sweep and can be read back; intermediate
//! gradients are freed as soon as they have been propagated.

use crate::error::{FinoError, Result};
use crate::tensor::ops;
use crate::tensor::{scalar, PaddingMode, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

enum Op {
    Leaf,
    Conv2d {
        x: VarId,
        k: VarId,
        b: VarId,
        pad: PaddingMode,
    },
    Relu {
        x: VarId,
    },
    Sigmoid {
        x: VarId,
    },
    Exp {
        x: VarId,
    },
    AvgPool {
        x: VarId,
        fh: usize,
        fw: usize,
    },
    Upsample {
        x: VarId,
        fh: usize,
        fw: usize,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        c: f64,
    },
    MulScalar {
        x: VarId,
        s: VarId,
    },
    ConcatChannels {
        parts: Vec<VarId>,
    },
    SliceChannels {
        x: VarId,
        from: usize,
        to: usize,
    },
    SumAll {
        x: VarId,
    },
}

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations, replayable in reverse for adjoints.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record an input tensor; differentiability follows `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> VarId {
        let ng = tensor.requires_grad;
        self.push(tensor, Op::Leaf, ng)
    }

    /// Record a trainable parameter (gradient always tracked).
    pub fn param(&mut self, tensor: Tensor<E>) -> VarId {
        self.push(tensor, Op::Leaf, true)
    }

    /// Record a constant (gradient never tracked).
    pub fn constant(&mut self, mut tensor: Tensor<E>) -> VarId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: VarId) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Clone a recorded value without any gradient linkage.
    pub fn detached(&self, v: VarId) -> Tensor<E> {
        let mut t = self.nodes[v.0].value.clone();
        t.requires_grad = false;
        t
    }

    /// Gradient of a leaf after `backward`; `None` if untracked or unreached.
    pub fn grad(&self, v: VarId) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        kernel: VarId,
        bias: VarId,
        pad: PaddingMode,
    ) -> Result<VarId> {
        let value = ops::conv2d_forward(
            self.value(x),
            self.value(kernel),
            self.value(bias),
            pad,
        )?;
        let ng = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                k: kernel,
                b: bias,
                pad,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = ops::relu_forward(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::Relu { x }, ng)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let value = ops::sigmoid_forward(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid { x }, ng)
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let value = ops::exp_forward(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::Exp { x }, ng)
    }

    /// Mean pooling with per-axis factors in {1, 2}.
    pub fn avg_pool(&mut self, x: VarId, fh: usize, fw: usize) -> Result<VarId> {
        let value = ops::avg_pool_forward(self.value(x), fh, fw)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::AvgPool { x, fh, fw }, ng))
    }

    /// 2x2 mean pooling over both spatial axes.
    pub fn avg_pool2(&mut self, x: VarId) -> Result<VarId> {
        self.avg_pool(x, 2, 2)
    }

    /// Nearest-neighbor upsampling with per-axis factors in {1, 2}.
    pub fn upsample(&mut self, x: VarId, fh: usize, fw: usize) -> Result<VarId> {
        let value = ops::upsample_forward(self.value(x), fh, fw)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Upsample { x, fh, fw }, ng))
    }

    /// 2x nearest-neighbor upsampling over both spatial axes.
    pub fn upsample_nearest2(&mut self, x: VarId) -> Result<VarId> {
        self.upsample(x, 2, 2)
    }

    fn binary_shape_check(&self, a: VarId, b: VarId, context: &'static str) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            for (axis, (x, y)) in sa.iter().zip(sb.iter()).enumerate() {
                if x != y {
                    return Err(FinoError::ShapeMismatch {
                        context,
                        axis,
                        expected: *x,
                        got: *y,
                    });
                }
            }
            return Err(FinoError::ShapeMismatch {
                context,
                axis: sa.len().min(sb.len()),
                expected: sa.len(),
                got: sb.len(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_shape_check(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.requires_grad = false;
        value.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_shape_check(a, b, "sub")?;
        let mut value = self.value(a).clone();
        value.requires_grad = false;
        for (v, r) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *v -= *r;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_shape_check(a, b, "mul")?;
        let mut value = self.value(a).clone();
        value.requires_grad = false;
        for (v, r) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *v *= *r;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, ng))
    }

    /// Multiply by a compile-time-constant factor.
    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let mut value = self.value(x).clone();
        value.requires_grad = false;
        let cf = scalar::<E>(c);
        for v in value.data_mut() {
            *v *= cf;
        }
        let ng = self.needs(x);
        self.push(value, Op::Scale { x, c }, ng)
    }

    /// Broadcast-multiply a tensor by a recorded scalar (shape `[1]`).
    pub fn mul_scalar(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if self.value(s).numel() != 1 {
            return Err(FinoError::InvalidArgument(format!(
                "mul_scalar: scale must hold one element, got {}",
                self.value(s).numel()
            )));
        }
        let sv = self.value(s).data()[0];
        let mut value = self.value(x).clone();
        value.requires_grad = false;
        for v in value.data_mut() {
            *v *= sv;
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(value, Op::MulScalar { x, s }, ng))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(FinoError::InvalidArgument(
                "concat_channels needs at least one part".into(),
            ));
        }
        let (b0, _, h0, w0) = self.value(parts[0]).dims4("concat_channels")?;
        let mut channels = 0usize;
        for &p in parts {
            let (b, c, h, w) = self.value(p).dims4("concat_channels")?;
            if b != b0 {
                return Err(FinoError::ShapeMismatch {
                    context: "concat_channels",
                    axis: 0,
                    expected: b0,
                    got: b,
                });
            }
            if h != h0 || w != w0 {
                return Err(FinoError::ShapeMismatch {
                    context: "concat_channels",
                    axis: if h != h0 { 2 } else { 3 },
                    expected: if h != h0 { h0 } else { w0 },
                    got: if h != h0 { h } else { w },
                });
            }
            channels += c;
        }
        let hw = h0 * w0;
        let mut value = Tensor::<E>::zeros(&[b0, channels, h0, w0]);
        for bi in 0..b0 {
            let mut at = 0usize;
            for &p in parts {
                let src = &self.nodes[p.0].value;
                let c = src.shape()[1];
                let dst_off = (bi * channels + at) * hw;
                let src_off = bi * c * hw;
                value.data_mut()[dst_off..dst_off + c * hw]
                    .copy_from_slice(&src.data()[src_off..src_off + c * hw]);
                at += c;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Channel slice `[from, to)` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: VarId, from: usize, to: usize) -> Result<VarId> {
        let (b, c, h, w) = self.value(x).dims4("slice_channels")?;
        if from >= to || to > c {
            return Err(FinoError::InvalidArgument(format!(
                "slice_channels: invalid range {from}..{to} for {c} channels"
            )));
        }
        let hw = h * w;
        let nc = to - from;
        let mut value = Tensor::<E>::zeros(&[b, nc, h, w]);
        for bi in 0..b {
            let src = &self.nodes[x.0].value;
            let src_off = (bi * c + from) * hw;
            let dst_off = bi * nc * hw;
            value.data_mut()[dst_off..dst_off + nc * hw]
                .copy_from_slice(&src.data()[src_off..src_off + nc * hw]);
        }
        let ng = self.needs(x);
        Ok(self.push(value, Op::SliceChannels { x, from, to }, ng))
    }

    /// Reduce to the scalar sum of all elements (shape `[1]`).
    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let mut acc = E::zero();
        for v in self.value(x).data() {
            acc += *v;
        }
        let value = Tensor::new(vec![1], vec![acc]).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::SumAll { x }, ng)
    }

    /// Sum of squared differences, `sum((a - b)^2)`, as a recorded scalar.
    pub fn sum_squared_diff(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum_all(sq))
    }

    /// Chain-rule sweep from a scalar loss back to every tracked leaf.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.consumed {
            return Err(FinoError::BackwardConsumed);
        }
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(FinoError::NonScalarLoss { numel });
        }
        self.consumed = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::full(&[1], 1.0));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let g = node.grad.take().expect("grad present");
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, k, b, pad } => {
                    let needs = (
                        before[x.0].needs_grad,
                        before[k.0].needs_grad,
                        before[b.0].needs_grad,
                    );
                    let (gx, gk, gb) = ops::conv2d_backward(
                        &before[x.0].value,
                        &before[k.0].value,
                        &g,
                        *pad,
                        needs,
                    )?;
                    if let Some(gx) = gx {
                        accumulate(&mut before[x.0].grad, gx);
                    }
                    if let Some(gk) = gk {
                        accumulate(&mut before[k.0].grad, gk);
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut before[b.0].grad, gb);
                    }
                }
                Op::Relu { x } => {
                    if before[x.0].needs_grad {
                        let gx = ops::relu_backward(&before[x.0].value, &g);
                        accumulate(&mut before[x.0].grad, gx);
                    }
                }
                Op::Sigmoid { x } => {
                    if before[x.0].needs_grad {
                        let gx = ops::sigmoid_backward(&node.value, &g);
                        accumulate(&mut before[x.0].grad, gx);
                    }
                }
                Op::Exp { x } => {
                    if before[x.0].needs_grad {
                        let gx = ops::exp_backward(&node.value, &g);
                        accumulate(&mut before[x.0].grad, gx);
                    }
                }
                Op::AvgPool { x, fh, fw } => {
                    if before[x.0].needs_grad {
                        let gx = ops::avg_pool_backward(&g, before[x.0].value.shape(), *fh, *fw);
                        accumulate(&mut before[x.0].grad, gx);
                    }
                }
                Op::Upsample { x, fh, fw } => {
                    if before[x.0].needs_grad {
                        let gx = ops::upsample_backward(&g, before[x.0].value.shape(), *fh, *fw);
                        accumulate(&mut before[x.0].grad, gx);
                    }
                }
                Op::Add { a, b } => {
                    if before[a.0].needs_grad {
                        accumulate(&mut before[a.0].grad, g.clone());
                    }
                    if before[b.0].needs_grad {
                        accumulate(&mut before[b.0].grad, g.clone());
                    }
                }
                Op::Sub { a, b } => {
                    if before[a.0].needs_grad {
                        accumulate(&mut before[a.0].grad, g.clone());
                    }
                    if before[b.0].needs_grad {
                        let mut neg = g.clone();
                        for v in neg.data_mut() {
                            *v = -*v;
                        }
                        accumulate(&mut before[b.0].grad, neg);
                    }
                }
                Op::Mul { a, b } => {
                    let (ai, bi) = (a.0, b.0);
                    if before[ai].needs_grad {
                        let mut ga = g.clone();
                        for (v, r) in ga.data_mut().iter_mut().zip(before[bi].value.data()) {
                            *v *= *r;
                        }
                        accumulate(&mut before[ai].grad, ga);
                    }
                    if before[bi].needs_grad {
                        let mut gb = g.clone();
                        for (v, r) in gb.data_mut().iter_mut().zip(before[ai].value.data()) {
                            *v *= *r;
                        }
                        accumulate(&mut before[bi].grad, gb);
                    }
                }
                Op::Scale { x, c } => {
                    if before[x.0].needs_grad {
                        let mut gx = g.clone();
                        let cf = scalar::<E>(*c);
                        for v in gx.data_mut() {
                            *v *= cf;
                        }
                        accumulate(&mut before[x.0].grad, gx);
                    }
                }
                Op::MulScalar { x, s } => {
                    let sv = before[s.0].value.data()[0];
                    if before[x.0].needs_grad {
                        let mut gx = g.clone();
                        for v in gx.data_mut() {
                            *v *= sv;
                        }
                        accumulate(&mut before[x.0].grad, gx);
                    }
                    if before[s.0].needs_grad {
                        let mut acc = E::zero();
                        for (gv, xv) in g.data().iter().zip(before[x.0].value.data()) {
                            acc += *gv * *xv;
                        }
                        let gs = Tensor::new(vec![1], vec![acc]).unwrap();
                        accumulate(&mut before[s.0].grad, gs);
                    }
                }
                Op::ConcatChannels { parts } => {
                    let (b0, total_c, h, w) = (
                        node.value.shape()[0],
                        node.value.shape()[1],
                        node.value.shape()[2],
                        node.value.shape()[3],
                    );
                    let hw = h * w;
                    let mut at = 0usize;
                    for &p in parts {
                        let c = before[p.0].value.shape()[1];
                        if before[p.0].needs_grad {
                            let mut gp = Tensor::<E>::zeros(&[b0, c, h, w]);
                            for bi in 0..b0 {
                                let src_off = (bi * total_c + at) * hw;
                                let dst_off = bi * c * hw;
                                gp.data_mut()[dst_off..dst_off + c * hw]
                                    .copy_from_slice(&g.data()[src_off..src_off + c * hw]);
                            }
                            accumulate(&mut before[p.0].grad, gp);
                        }
                        at += c;
                    }
                }
                Op::SliceChannels { x, from, to } => {
                    if before[x.0].needs_grad {
                        let (b0, c, h, w) = (
                            before[x.0].value.shape()[0],
                            before[x.0].value.shape()[1],
                            before[x.0].value.shape()[2],
                            before[x.0].value.shape()[3],
                        );
                        let hw = h * w;
                        let nc = to - from;
                        let mut gx = Tensor::<E>::zeros(&[b0, c, h, w]);
                        for bi in 0..b0 {
                            let dst_off = (bi * c + from) * hw;
                            let src_off = bi * nc * hw;
                            gx.data_mut()[dst_off..dst_off + nc * hw]
                                .copy_from_slice(&g.data()[src_off..src_off + nc * hw]);
                        }
                        accumulate(&mut before[x.0].grad, gx);
                    }
                }
                Op::SumAll { x } => {
                    if before[x.0].needs_grad {
                        let gv = g.data()[0];
                        let gx = Tensor::full(before[x.0].value.shape(), gv.to_f64().unwrap());
                        accumulate(&mut before[x.0].grad, gx);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<E: Scalar>(slot: &mut Option<Tensor<E>>, delta: Tensor<E>) {
    match slot {
        Some(existing) => existing.add_assign(&delta),
        None => *slot = Some(delta),
    }
}
