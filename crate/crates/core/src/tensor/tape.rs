use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, bias: Option<Var> },
    Depthwise { x: Var, k: Var },
    Matmul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, bias: Var },
    Softmax { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    Exp { x: Var },
    Gap { x: Var },
    Concat { xs: Vec<Var> },
    Narrow { x: Var, start: usize },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    MulChannelwise { x: Var, w: Var },
    BroadcastChannels { v: Var },
    HeadsToTokens { x: Var, heads: usize },
    TokensToHeads { x: Var, heads: usize },
    SpaceToDepth { x: Var, patch: usize },
    DepthToSpace { x: Var, patch: usize },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so node ids are already a
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` was not reached.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(k), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        Ok(self.push(y, Op::Conv2d { x, k, bias }, &inputs))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let y = kernels::depthwise_conv2d(self.value(x), self.value(k))?;
        Ok(self.push(y, Op::Depthwise { x, k }, &[x, k]))
    }

    /// Depthwise 3×3 followed by a pointwise 1×1 convolution.
    pub fn depthwise_separable_conv2d(
        &mut self,
        x: Var,
        depthwise: Var,
        pointwise: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let d = self.depthwise_conv2d(x, depthwise)?;
        self.conv2d(d, pointwise, bias)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    /// `a·bᵀ` when `trans_b`, batched over a leading group axis for 3-d operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b), trans_b)?;
        Ok(self.push(y, Op::Matmul { a, b, trans_b }, &[a, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), self.value(bias))?;
        Ok(self.push(y, Op::Linear { x, w, bias }, &[x, w, bias]))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let y = kernels::softmax_lastdim(self.value(x));
        self.push(y, Op::Softmax { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::sigmoid);
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::exp);
        self.push(y, Op::Exp { x }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::Gap { x }, &[x]))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }, xs))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::narrow_channels(self.value(x), start, len)?;
        Ok(self.push(y, Op::Narrow { x, start }, &[x]))
    }

    /// Split the channel axis into `n` equal parts.
    pub fn split_channels(&mut self, x: Var, n: usize) -> Result<Vec<Var>> {
        let shape = self.value(x).shape();
        if shape.len() < 2 || n == 0 || shape[1] % n != 0 {
            return Err(Error::shape(format!(
                "split: {shape:?} channels not divisible into {n} parts"
            )));
        }
        let len = shape[1] / n;
        (0..n)
            .map(|i| self.narrow_channels(x, i * len, len))
            .collect()
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(y, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale { x, s }, &[x])
    }

    pub fn mul_channelwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = kernels::mul_channelwise(self.value(x), self.value(w))?;
        Ok(self.push(y, Op::MulChannelwise { x, w }, &[x, w]))
    }

    pub fn broadcast_channels(&mut self, v: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let y = kernels::broadcast_channels(self.value(v), batch, h, w)?;
        Ok(self.push(y, Op::BroadcastChannels { v }, &[v]))
    }

    pub fn heads_to_tokens(&mut self, x: Var, heads: usize) -> Result<Var> {
        let y = kernels::heads_to_tokens(self.value(x), heads)?;
        Ok(self.push(y, Op::HeadsToTokens { x, heads }, &[x]))
    }

    pub fn tokens_to_heads(&mut self, x: Var, heads: usize, h: usize, w: usize) -> Result<Var> {
        let y = kernels::tokens_to_heads(self.value(x), heads, h, w)?;
        Ok(self.push(y, Op::TokensToHeads { x, heads }, &[x]))
    }

    pub fn space_to_depth(&mut self, x: Var, patch: usize) -> Result<Var> {
        let y = kernels::space_to_depth(self.value(x), patch)?;
        Ok(self.push(y, Op::SpaceToDepth { x, patch }, &[x]))
    }

    pub fn depth_to_space(&mut self, x: Var, patch: usize) -> Result<Var> {
        let y = kernels::depth_to_space(self.value(x), patch)?;
        Ok(self.push(y, Op::DepthToSpace { x, patch }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, k, bias } => {
                let r = kernels::conv2d_backward(
                    self.value(x),
                    self.value(k),
                    g,
                    (needs(x), needs(k), bias.is_some_and(needs)),
                )?;
                if let Some(dx) = r.dx {
                    send(x, dx);
                }
                if let Some(dk) = r.dk {
                    send(k, dk);
                }
                if let (Some(b), Some(db)) = (bias, r.dbias) {
                    send(b, db);
                }
            }
            &Op::Depthwise { x, k } => {
                let (dx, dk) = kernels::depthwise_conv2d_backward(self.value(x), self.value(k), g)?;
                send(x, dx);
                send(k, dk);
            }
            &Op::Matmul { a, b, trans_b } => {
                let (da, db) = kernels::matmul_backward(
                    self.value(a),
                    self.value(b),
                    trans_b,
                    g,
                    (needs(a), needs(b)),
                )?;
                if let Some(da) = da {
                    send(a, da);
                }
                if let Some(db) = db {
                    send(b, db);
                }
            }
            &Op::Linear { x, w, bias } => {
                let (dx, dw) = kernels::matmul_backward(
                    self.value(x),
                    self.value(w),
                    true,
                    g,
                    (needs(x), needs(w)),
                )?;
                if let Some(dx) = dx {
                    send(x, dx);
                }
                if let Some(dw) = dw {
                    send(w, dw);
                }
                if needs(bias) {
                    let dout = self.value(bias).numel();
                    let mut db = vec![0.0; dout];
                    for row in g.data().chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    send(bias, Tensor::new(&[dout], db)?);
                }
            }
            &Op::Softmax { x } => send(x, kernels::softmax_lastdim_backward(&node.value, g)),
            &Op::Sigmoid { x } => send(x, zip_map(&node.value, g, |y, g| g * y * (1.0 - y))),
            &Op::Tanh { x } => send(x, zip_map(&node.value, g, |y, g| g * (1.0 - y * y))),
            &Op::Relu { x } => send(
                x,
                zip_map(self.value(x), g, |v, g| if v > 0.0 { g } else { 0.0 }),
            ),
            &Op::Exp { x } => send(x, zip_map(&node.value, g, |y, g| g * y)),
            &Op::Gap { x } => {
                let shape = self.value(x).shape();
                let hw = shape[2] * shape[3];
                let inv = 1.0 / hw as f64;
                let mut dx = Tensor::zeros(shape);
                for (chunk, gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                    chunk.fill(gv * inv);
                }
                send(x, dx);
            }
            Op::Concat { xs } => {
                let mut start = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    if needs(x) {
                        send(x, kernels::narrow_channels(g, start, c)?);
                    }
                    start += c;
                }
            }
            &Op::Narrow { x, start } => send(
                x,
                kernels::narrow_channels_backward(g, self.value(x).shape(), start),
            ),
            &Op::Reshape { x } => send(x, g.reshape(self.value(x).shape())?),
            &Op::Add { a, b } => {
                send(a, g.clone());
                send(b, g.clone());
            }
            &Op::Sub { a, b } => {
                send(a, g.clone());
                send(b, g.map(|v| -v));
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    send(a, zip_map(g, self.value(b), |g, y| g * y));
                }
                if needs(b) {
                    send(b, zip_map(g, self.value(a), |g, y| g * y));
                }
            }
            &Op::Scale { x, s } => send(x, g.map(|v| v * s)),
            &Op::MulChannelwise { x, w } => {
                let xv = self.value(x);
                let wv = self.value(w);
                if needs(x) {
                    send(x, kernels::mul_channelwise(g, wv)?);
                }
                if needs(w) {
                    let rest = xv.numel() / wv.numel();
                    let dw = g
                        .data()
                        .chunks(rest)
                        .zip(xv.data().chunks(rest))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    send(w, Tensor::new(wv.shape(), dw)?);
                }
            }
            &Op::BroadcastChannels { v } => {
                let c = self.value(v).numel();
                let shape = g.shape();
                let hw = shape[2] * shape[3];
                let mut dv = vec![0.0; c];
                for (i, chunk) in g.data().chunks(hw).enumerate() {
                    dv[i % c] += chunk.iter().sum::<f64>();
                }
                send(v, Tensor::new(&[c], dv)?);
            }
            &Op::HeadsToTokens { x, heads } => {
                let s = self.value(x).shape();
                send(x, kernels::tokens_to_heads(g, heads, s[2], s[3])?);
            }
            &Op::TokensToHeads { x, heads } => send(x, kernels::heads_to_tokens(g, heads)?),
            &Op::SpaceToDepth { x, patch } => send(x, kernels::depth_to_space(g, patch)?),
            &Op::DepthToSpace { x, patch } => send(x, kernels::space_to_depth(g, patch)?),
            &Op::Sum { x } => send(x, Tensor::full(self.value(x).shape(), g.item())),
        }
        Ok(())
    }
}
