//! Reverse-mode tape over dense f64 tensors.
//!
//! A `Graph` records every operation as it runs (define-by-run). `backward`
//! walks the tape in reverse and accumulates gradients into every node that
//! can reach a trainable leaf. Kernels parallelize over disjoint output
//! slices only, so forward values and gradients are bit-identical across
//! thread counts; see the `exec` module.

use crate::exec;
use crate::tensor::Tensor;

pub type NodeId = usize;

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C1: f64 = 0.044_715;

#[derive(Clone)]
#[allow(dead_code)] // scalar fields are consumed at construction time only
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        pad: usize,
    },
    GaussianBlur {
        input: NodeId,
        kernel: Vec<f64>,
    },
    LayerNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Bmm {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    SoftmaxLast(NodeId),
    RelPosBias {
        attn: NodeId,
        table: NodeId,
        window: usize,
        heads: usize,
    },
    WindowPartition {
        input: NodeId,
        window: usize,
    },
    WindowMerge {
        input: NodeId,
        window: usize,
        height: usize,
        width: usize,
    },
    SplitHeads {
        input: NodeId,
        heads: usize,
    },
    MergeHeads {
        input: NodeId,
        heads: usize,
    },
    Reformat {
        input: NodeId,
        scale: usize,
    },
    ReformatInv {
        input: NodeId,
        scale: usize,
    },
    ConcatChannels(Vec<NodeId>),
    ChannelMean(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` scalar with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Differentiable input: gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input: targets, weight maps, fixed data.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Constant)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "add shape mismatch"
        );
        let v = zip_elementwise(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "sub shape mismatch"
        );
        let v = zip_elementwise(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "mul shape mismatch"
        );
        let v = zip_elementwise(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "div shape mismatch"
        );
        let v = zip_elementwise(&self.nodes[a].value, &self.nodes[b].value, |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = map_elementwise(&self.nodes[a].value, |x| x * k);
        let ng = self.needs(a);
        self.push(v, ng, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = map_elementwise(&self.nodes[a].value, |x| x + k);
        let ng = self.needs(a);
        self.push(v, ng, Op::AddScalar(a, k))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = map_elementwise(&self.nodes[a].value, |x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, ng, Op::Relu(a))
    }

    /// GELU, tanh form. The backward pass differentiates this exact form.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = map_elementwise(&self.nodes[a].value, gelu_scalar);
        let ng = self.needs(a);
        self.push(v, ng, Op::Gelu(a))
    }

    /// 2D convolution, stride 1, zero padding `pad`, weight (Cout, Cin, k, k).
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        pad: usize,
    ) -> NodeId {
        let v = conv2d_forward(
            &self.nodes[input].value,
            &self.nodes[weight].value,
            bias.map(|b| &self.nodes[b].value),
            pad,
        );
        let ng = self.needs(input)
            || self.needs(weight)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            v,
            ng,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
        )
    }

    /// Depthwise separable Gaussian filter with symmetric (edge-mirroring)
    /// padding; `kernel` is the normalized 1D window.
    pub fn gaussian_blur(&mut self, input: NodeId, kernel: Vec<f64>) -> NodeId {
        assert!(kernel.len() % 2 == 1, "blur kernel length must be odd");
        let v = blur_forward(&self.nodes[input].value, &kernel);
        let ng = self.needs(input);
        self.push(v, ng, Op::GaussianBlur { input, kernel })
    }

    /// Layer normalization over the channel axis of a (C, H, W) tensor.
    pub fn layer_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let v = layer_norm_forward(
            &self.nodes[input].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            eps,
        );
        let ng = self.needs(input) || self.needs(gamma) || self.needs(beta);
        self.push(
            v,
            ng,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            },
        )
    }

    /// Affine map over the last axis: input (..., Cin), weight (Cout, Cin).
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let v = linear_forward(
            &self.nodes[input].value,
            &self.nodes[weight].value,
            &self.nodes[bias].value,
        );
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            v,
            ng,
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    /// Batched matrix multiply: a (B, T, K) x b (B, K, U), or b (B, U, K)
    /// when `transpose_b` is set. Output (B, T, U).
    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let v = bmm_forward(&self.nodes[a].value, &self.nodes[b].value, transpose_b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Bmm { a, b, transpose_b })
    }

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let v = softmax_forward(&self.nodes[a].value);
        let ng = self.needs(a);
        self.push(v, ng, Op::SoftmaxLast(a))
    }

    /// Add a learned relative-position bias to window attention logits.
    /// attn (nw * heads, T, T) with T = window^2; table ((2w-1)^2, heads).
    pub fn relpos_bias(
        &mut self,
        attn: NodeId,
        table: NodeId,
        window: usize,
        heads: usize,
    ) -> NodeId {
        let v = relpos_forward(
            &self.nodes[attn].value,
            &self.nodes[table].value,
            window,
            heads,
        );
        let ng = self.needs(attn) || self.needs(table);
        self.push(
            v,
            ng,
            Op::RelPosBias {
                attn,
                table,
                window,
                heads,
            },
        )
    }

    /// (C, H, W) -> (nw, window^2, C) tiles of non-overlapping windows.
    pub fn window_partition(&mut self, input: NodeId, window: usize) -> NodeId {
        let v = window_partition_forward(&self.nodes[input].value, window);
        let ng = self.needs(input);
        self.push(v, ng, Op::WindowPartition { input, window })
    }

    /// Inverse of `window_partition`; needs the original spatial size.
    pub fn window_merge(
        &mut self,
        input: NodeId,
        window: usize,
        height: usize,
        width: usize,
    ) -> NodeId {
        let v = window_merge_forward(&self.nodes[input].value, window, height, width);
        let ng = self.needs(input);
        self.push(
            v,
            ng,
            Op::WindowMerge {
                input,
                window,
                height,
                width,
            },
        )
    }

    /// (nw, T, C) -> (nw * heads, T, C / heads).
    pub fn split_heads(&mut self, input: NodeId, heads: usize) -> NodeId {
        let v = split_heads_forward(&self.nodes[input].value, heads);
        let ng = self.needs(input);
        self.push(v, ng, Op::SplitHeads { input, heads })
    }

    /// Inverse of `split_heads`.
    pub fn merge_heads(&mut self, input: NodeId, heads: usize) -> NodeId {
        let v = merge_heads_forward(&self.nodes[input].value, heads);
        let ng = self.needs(input);
        self.push(v, ng, Op::MergeHeads { input, heads })
    }

    /// Space-to-depth: (C, H, W) -> (C * s^2, H/s, W/s), phase-major channel
    /// groups, offsets in row-major order.
    pub fn reformat(&mut self, input: NodeId, scale: usize) -> NodeId {
        let v = reformat_forward(&self.nodes[input].value, scale);
        let ng = self.needs(input);
        self.push(v, ng, Op::Reformat { input, scale })
    }

    /// Depth-to-space, exact inverse of `reformat`.
    pub fn reformat_inv(&mut self, input: NodeId, scale: usize) -> NodeId {
        let v = reformat_inv_forward(&self.nodes[input].value, scale);
        let ng = self.needs(input);
        self.push(v, ng, Op::ReformatInv { input, scale })
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let v = concat_forward(&tensors);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, ng, Op::ConcatChannels(parts.to_vec()))
    }

    /// Mean over the channel axis: (C, H, W) -> (1, H, W).
    pub fn channel_mean(&mut self, input: NodeId) -> NodeId {
        let v = channel_mean_forward(&self.nodes[input].value);
        let ng = self.needs(input);
        self.push(v, ng, Op::ChannelMean(input))
    }

    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let n = self.nodes[input].value.elems() as f64;
        let v = Tensor::scalar(self.nodes[input].value.sum() / n);
        let ng = self.needs(input);
        self.push(v, ng, Op::MeanAll(input))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[input].value.sum());
        let ng = self.needs(input);
        self.push(v, ng, Op::SumAll(input))
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        match &mut self.nodes[id].grad {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Backpropagate from a scalar output node.
    pub fn backward(&mut self, out: NodeId) {
        assert_eq!(
            self.nodes[out].value.elems(),
            1,
            "backward requires a scalar output"
        );
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[out].grad = Some(Tensor::scalar(1.0));

        for id in (0..=out).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let g = self.nodes[id].grad.clone().unwrap();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    if self.needs(a) {
                        self.accumulate(a, g.clone());
                    }
                    if self.needs(b) {
                        self.accumulate(b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        self.accumulate(a, g.clone());
                    }
                    if self.needs(b) {
                        let mut neg = g;
                        neg.scale_assign(-1.0);
                        self.accumulate(b, neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let da = zip_elementwise(&g, &self.nodes[b].value, |x, y| x * y);
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let db = zip_elementwise(&g, &self.nodes[a].value, |x, y| x * y);
                        self.accumulate(b, db);
                    }
                }
                Op::Div(a, b) => {
                    if self.needs(a) {
                        let da = zip_elementwise(&g, &self.nodes[b].value, |x, y| x / y);
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let bv = &self.nodes[b].value;
                        let av = &self.nodes[a].value;
                        let mut db = Tensor::zeros(bv.shape());
                        for i in 0..db.elems() {
                            let bb = bv.data()[i];
                            db.data_mut()[i] = -g.data()[i] * av.data()[i] / (bb * bb);
                        }
                        self.accumulate(b, db);
                    }
                }
                Op::Scale(a, k) => {
                    if self.needs(a) {
                        let mut da = g;
                        da.scale_assign(k);
                        self.accumulate(a, da);
                    }
                }
                Op::AddScalar(a, _) => {
                    if self.needs(a) {
                        self.accumulate(a, g);
                    }
                }
                Op::Relu(a) => {
                    if self.needs(a) {
                        let da =
                            zip_elementwise(&g, &self.nodes[a].value, |gv, x| {
                                if x > 0.0 {
                                    gv
                                } else {
                                    0.0
                                }
                            });
                        self.accumulate(a, da);
                    }
                }
                Op::Gelu(a) => {
                    if self.needs(a) {
                        let da = zip_elementwise(&g, &self.nodes[a].value, |gv, x| {
                            gv * gelu_derivative(x)
                        });
                        self.accumulate(a, da);
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                } => {
                    let (gin, gw, gb) = conv2d_backward(
                        &g,
                        &self.nodes[input].value,
                        &self.nodes[weight].value,
                        pad,
                        self.needs(input),
                        self.needs(weight),
                        bias.map(|b| self.needs(b)).unwrap_or(false),
                    );
                    if let Some(gin) = gin {
                        self.accumulate(input, gin);
                    }
                    if let Some(gw) = gw {
                        self.accumulate(weight, gw);
                    }
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        self.accumulate(b, gb);
                    }
                }
                Op::GaussianBlur { input, kernel } => {
                    if self.needs(input) {
                        let gin = blur_backward(&g, &kernel);
                        self.accumulate(input, gin);
                    }
                }
                Op::LayerNorm {
                    input,
                    gamma,
                    beta,
                    eps,
                } => {
                    let (gin, ggamma, gbeta) = layer_norm_backward(
                        &g,
                        &self.nodes[input].value,
                        &self.nodes[gamma].value,
                        eps,
                        self.needs(input),
                        self.needs(gamma),
                        self.needs(beta),
                    );
                    if let Some(gin) = gin {
                        self.accumulate(input, gin);
                    }
                    if let Some(gg) = ggamma {
                        self.accumulate(gamma, gg);
                    }
                    if let Some(gb) = gbeta {
                        self.accumulate(beta, gb);
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (gin, gw, gb) = linear_backward(
                        &g,
                        &self.nodes[input].value,
                        &self.nodes[weight].value,
                        self.needs(input),
                        self.needs(weight),
                        self.needs(bias),
                    );
                    if let Some(gin) = gin {
                        self.accumulate(input, gin);
                    }
                    if let Some(gw) = gw {
                        self.accumulate(weight, gw);
                    }
                    if let Some(gb) = gb {
                        self.accumulate(bias, gb);
                    }
                }
                Op::Bmm { a, b, transpose_b } => {
                    let (ga, gb) = bmm_backward(
                        &g,
                        &self.nodes[a].value,
                        &self.nodes[b].value,
                        transpose_b,
                        self.needs(a),
                        self.needs(b),
                    );
                    if let Some(ga) = ga {
                        self.accumulate(a, ga);
                    }
                    if let Some(gb) = gb {
                        self.accumulate(b, gb);
                    }
                }
                Op::SoftmaxLast(a) => {
                    if self.needs(a) {
                        let gin = softmax_backward(&g, &self.nodes[id].value);
                        self.accumulate(a, gin);
                    }
                }
                Op::RelPosBias {
                    attn,
                    table,
                    window,
                    heads,
                } => {
                    if self.needs(attn) {
                        self.accumulate(attn, g.clone());
                    }
                    if self.needs(table) {
                        let gt = relpos_backward(&g, &self.nodes[table].value, window, heads);
                        self.accumulate(table, gt);
                    }
                }
                Op::WindowPartition { input, window } => {
                    if self.needs(input) {
                        let shape = self.nodes[input].value.shape().to_vec();
                        let gin = window_merge_forward(&g, window, shape[1], shape[2]);
                        self.accumulate(input, gin);
                    }
                }
                Op::WindowMerge { input, window, .. } => {
                    if self.needs(input) {
                        let gin = window_partition_forward(&g, window);
                        self.accumulate(input, gin);
                    }
                }
                Op::SplitHeads { input, heads } => {
                    if self.needs(input) {
                        let gin = merge_heads_forward(&g, heads);
                        self.accumulate(input, gin);
                    }
                }
                Op::MergeHeads { input, heads } => {
                    if self.needs(input) {
                        let gin = split_heads_forward(&g, heads);
                        self.accumulate(input, gin);
                    }
                }
                Op::Reformat { input, scale } => {
                    if self.needs(input) {
                        let gin = reformat_inv_forward(&g, scale);
                        self.accumulate(input, gin);
                    }
                }
                Op::ReformatInv { input, scale } => {
                    if self.needs(input) {
                        let gin = reformat_forward(&g, scale);
                        self.accumulate(input, gin);
                    }
                }
                Op::ConcatChannels(parts) => {
                    let (_, h, w) = self.nodes[id].value.chw().expect("concat output is 3D");
                    let plane = h * w;
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.nodes[p].value.dim(0);
                        if self.needs(p) {
                            let mut gp = Tensor::zeros(self.nodes[p].value.shape());
                            gp.data_mut()
                                .copy_from_slice(&g.data()[offset..offset + pc * plane]);
                            self.accumulate(p, gp);
                        }
                        offset += pc * plane;
                    }
                }
                Op::ChannelMean(input) => {
                    if self.needs(input) {
                        let shape = self.nodes[input].value.shape().to_vec();
                        let c = shape[0] as f64;
                        let plane = shape[1] * shape[2];
                        let mut gin = Tensor::zeros(&shape);
                        exec::for_each_chunk(gin.data_mut(), plane, |_, chunk| {
                            for (i, v) in chunk.iter_mut().enumerate() {
                                *v = g.data()[i] / c;
                            }
                        });
                        self.accumulate(input, gin);
                    }
                }
                Op::MeanAll(input) => {
                    if self.needs(input) {
                        let shape = self.nodes[input].value.shape().to_vec();
                        let n = self.nodes[input].value.elems() as f64;
                        let gin = Tensor::filled(&shape, g.item() / n);
                        self.accumulate(input, gin);
                    }
                }
                Op::SumAll(input) => {
                    if self.needs(input) {
                        let shape = self.nodes[input].value.shape().to_vec();
                        let gin = Tensor::filled(&shape, g.item());
                        self.accumulate(input, gin);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scalar helpers
// ---------------------------------------------------------------------------

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

fn map_elementwise(a: &Tensor, f: impl Fn(f64) -> f64 + Sync + Send) -> Tensor {
    let mut out = Tensor::zeros(a.shape());
    let n = a.elems();
    let chunk = ((n + 63) / 64).max(1);
    let src = a.data();
    exec::for_each_chunk(out.data_mut(), chunk, |i, c| {
        let base = i * chunk;
        for (j, v) in c.iter_mut().enumerate() {
            *v = f(src[base + j]);
        }
    });
    out
}

fn zip_elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64 + Sync + Send) -> Tensor {
    assert_eq!(a.elems(), b.elems(), "zip length mismatch");
    let mut out = Tensor::zeros(a.shape());
    let n = a.elems();
    let chunk = ((n + 63) / 64).max(1);
    let (sa, sb) = (a.data(), b.data());
    exec::for_each_chunk(out.data_mut(), chunk, |i, c| {
        let base = i * chunk;
        for (j, v) in c.iter_mut().enumerate() {
            *v = f(sa[base + j], sb[base + j]);
        }
    });
    out
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, pad: usize) -> Tensor {
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    assert_eq!(weight.rank(), 4, "conv weight must be 4D");
    let (cout, wc, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    assert_eq!(cin, wc, "conv channel mismatch: input {cin}, weight {wc}");
    assert_eq!(kh, kw, "conv kernels are square");
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    if let Some(b) = bias {
        assert_eq!(b.elems(), cout, "conv bias length");
    }

    let mut out = Tensor::zeros(&[cout, oh, ow]);
    let src = input.data();
    let wd = weight.data();
    exec::for_each_chunk(out.data_mut(), oh * ow, |oc, plane| {
        let b = bias.map(|b| b.data()[oc]).unwrap_or(0.0);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ic in 0..cin {
                    let wbase = ((oc * cin + ic) * kh) * kw;
                    let ibase = ic * h * w;
                    for ky in 0..kh {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for kx in 0..kw {
                            let ix = ox + kx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            let ix = ix - pad;
                            acc += wd[wbase + ky * kw + kx] * src[ibase + iy * w + ix];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    gout: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    pad: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (cout, _, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    let (oh, ow) = (gout.dim(1), gout.dim(2));
    let gd = gout.data();
    let wd = weight.data();
    let src = input.data();

    let gin = need_input.then(|| {
        let mut gin = Tensor::zeros(&[cin, h, w]);
        exec::for_each_chunk(gin.data_mut(), h * w, |ic, plane| {
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = 0.0;
                    for oc in 0..cout {
                        let wbase = ((oc * cin + ic) * kh) * kw;
                        let obase = oc * oh * ow;
                        for ky in 0..kh {
                            let oy = iy + pad;
                            if oy < ky || oy - ky >= oh {
                                continue;
                            }
                            let oy = oy - ky;
                            for kx in 0..kw {
                                let ox = ix + pad;
                                if ox < kx || ox - kx >= ow {
                                    continue;
                                }
                                let ox = ox - kx;
                                acc += wd[wbase + ky * kw + kx] * gd[obase + oy * ow + ox];
                            }
                        }
                    }
                    plane[iy * w + ix] = acc;
                }
            }
        });
        gin
    });

    let gw = need_weight.then(|| {
        let mut gw = Tensor::zeros(weight.shape());
        exec::for_each_chunk(gw.data_mut(), cin * kh * kw, |oc, chunk| {
            let obase = oc * oh * ow;
            for ic in 0..cin {
                let ibase = ic * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for ox in 0..ow {
                                let ix = ox + kx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let ix = ix - pad;
                                acc += gd[obase + oy * ow + ox] * src[ibase + iy * w + ix];
                            }
                        }
                        chunk[(ic * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });
        gw
    });

    let gb = need_bias.then(|| {
        let mut gb = Tensor::zeros(&[cout]);
        exec::for_each_chunk(gb.data_mut(), 1, |oc, slot| {
            slot[0] = gd[oc * oh * ow..(oc + 1) * oh * ow].iter().sum();
        });
        gb
    });

    (gin, gw, gb)
}

// ---------------------------------------------------------------------------
// Gaussian blur (depthwise separable, symmetric padding)
// ---------------------------------------------------------------------------

/// Mirror an out-of-range index back into [0, n), edge inclusive.
fn sym_fold(mut i: isize, n: isize) -> usize {
    debug_assert!(n > 0);
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn blur_forward(input: &Tensor, kernel: &[f64]) -> Tensor {
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let r = kernel.len() / 2;
    let src = input.data();

    // Horizontal pass.
    let mut tmp = Tensor::zeros(&[c, h, w]);
    exec::for_each_chunk(tmp.data_mut(), h * w, |ch, plane| {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let sx = sym_fold(x as isize + t as isize - r as isize, w as isize);
                    acc += k * src[base + y * w + sx];
                }
                plane[y * w + x] = acc;
            }
        }
    });

    // Vertical pass.
    let td = tmp.data().to_vec();
    let mut out = Tensor::zeros(&[c, h, w]);
    exec::for_each_chunk(out.data_mut(), h * w, |ch, plane| {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let sy = sym_fold(y as isize + t as isize - r as isize, h as isize);
                    acc += k * td[base + sy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    });
    out
}

/// Adjoint of `blur_forward`: scatter through the vertical then horizontal
/// pass. Each channel is processed sequentially so accumulation order is
/// fixed; channels run in parallel.
fn blur_backward(gout: &Tensor, kernel: &[f64]) -> Tensor {
    let (c, h, w) = (gout.dim(0), gout.dim(1), gout.dim(2));
    let r = kernel.len() / 2;
    let gd = gout.data();

    // Adjoint of the vertical pass.
    let mut gtmp = Tensor::zeros(&[c, h, w]);
    exec::for_each_chunk(gtmp.data_mut(), h * w, |ch, plane| {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let g = gd[base + y * w + x];
                for (t, &k) in kernel.iter().enumerate() {
                    let sy = sym_fold(y as isize + t as isize - r as isize, h as isize);
                    plane[sy * w + x] += k * g;
                }
            }
        }
    });

    // Adjoint of the horizontal pass.
    let gt = gtmp.data().to_vec();
    let mut gin = Tensor::zeros(&[c, h, w]);
    exec::for_each_chunk(gin.data_mut(), h * w, |ch, plane| {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let g = gt[base + y * w + x];
                for (t, &k) in kernel.iter().enumerate() {
                    let sx = sym_fold(x as isize + t as isize - r as isize, w as isize);
                    plane[y * w + sx] += k * g;
                }
            }
        }
    });
    gin
}

/// Normalized 1D Gaussian window.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    assert!(size % 2 == 1, "gaussian window must be odd");
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= total;
    }
    k
}

// ---------------------------------------------------------------------------
// Layer norm over channels of (C, H, W)
// ---------------------------------------------------------------------------

fn layer_norm_stats(input: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let plane = h * w;
    let src = input.data();
    let mut mu = vec![0.0; plane];
    let mut istd = vec![0.0; plane];
    // Two flat buffers written by disjoint rows.
    {
        let mut joined = vec![0.0; 2 * plane];
        exec::for_each_chunk(&mut joined, 2, |p, pair| {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += src[ch * plane + p];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = src[ch * plane + p] - mean;
                var += d * d;
            }
            var /= c as f64;
            pair[0] = mean;
            pair[1] = 1.0 / (var + eps).sqrt();
        });
        for p in 0..plane {
            mu[p] = joined[2 * p];
            istd[p] = joined[2 * p + 1];
        }
    }
    (mu, istd)
}

fn layer_norm_forward(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    assert_eq!(gamma.elems(), c, "layer_norm gamma length");
    assert_eq!(beta.elems(), c, "layer_norm beta length");
    let plane = h * w;
    let (mu, istd) = layer_norm_stats(input, eps);
    let src = input.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = Tensor::zeros(&[c, h, w]);
    exec::for_each_chunk(out.data_mut(), plane, |ch, chunk| {
        for p in 0..plane {
            let xhat = (src[ch * plane + p] - mu[p]) * istd[p];
            chunk[p] = gd[ch] * xhat + bd[ch];
        }
    });
    out
}

fn layer_norm_backward(
    gout: &Tensor,
    input: &Tensor,
    gamma: &Tensor,
    eps: f64,
    need_input: bool,
    need_gamma: bool,
    need_beta: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let plane = h * w;
    let (mu, istd) = layer_norm_stats(input, eps);
    let src = input.data();
    let gd = gout.data();
    let gm = gamma.data();

    let gin = need_input.then(|| {
        // Per-position reductions: s1 = sum_c ghat, s2 = sum_c ghat * xhat.
        let mut sums = vec![0.0; 2 * plane];
        exec::for_each_chunk(&mut sums, 2, |p, pair| {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for ch in 0..c {
                let ghat = gd[ch * plane + p] * gm[ch];
                let xhat = (src[ch * plane + p] - mu[p]) * istd[p];
                s1 += ghat;
                s2 += ghat * xhat;
            }
            pair[0] = s1;
            pair[1] = s2;
        });
        let cn = c as f64;
        let mut gin = Tensor::zeros(&[c, h, w]);
        exec::for_each_chunk(gin.data_mut(), plane, |ch, chunk| {
            for p in 0..plane {
                let ghat = gd[ch * plane + p] * gm[ch];
                let xhat = (src[ch * plane + p] - mu[p]) * istd[p];
                let s1 = sums[2 * p];
                let s2 = sums[2 * p + 1];
                chunk[p] = istd[p] * (ghat - s1 / cn - xhat * s2 / cn);
            }
        });
        gin
    });

    let ggamma = need_gamma.then(|| {
        let mut gg = Tensor::zeros(&[c]);
        exec::for_each_chunk(gg.data_mut(), 1, |ch, slot| {
            let mut acc = 0.0;
            for p in 0..plane {
                let xhat = (src[ch * plane + p] - mu[p]) * istd[p];
                acc += gd[ch * plane + p] * xhat;
            }
            slot[0] = acc;
        });
        gg
    });

    let gbeta = need_beta.then(|| {
        let mut gb = Tensor::zeros(&[c]);
        exec::for_each_chunk(gb.data_mut(), 1, |ch, slot| {
            slot[0] = gd[ch * plane..(ch + 1) * plane].iter().sum();
        });
        gb
    });

    (gin, ggamma, gbeta)
}

// ---------------------------------------------------------------------------
// Linear over the last axis
// ---------------------------------------------------------------------------

fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let cin = *input.shape().last().expect("linear input rank");
    let (cout, wcin) = (weight.dim(0), weight.dim(1));
    assert_eq!(cin, wcin, "linear channel mismatch");
    assert_eq!(bias.elems(), cout, "linear bias length");
    let rows = input.elems() / cin;
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    let src = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = Tensor::zeros(&shape);
    exec::for_each_chunk(out.data_mut(), cout, |r, row| {
        let ibase = r * cin;
        for o in 0..cout {
            let mut acc = bd[o];
            let wbase = o * cin;
            for i in 0..cin {
                acc += wd[wbase + i] * src[ibase + i];
            }
            row[o] = acc;
        }
    });
    debug_assert_eq!(out.elems(), rows * cout);
    out
}

fn linear_backward(
    gout: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let cin = *input.shape().last().unwrap();
    let cout = weight.dim(0);
    let rows = input.elems() / cin;
    let gd = gout.data();
    let src = input.data();
    let wd = weight.data();

    let gin = need_input.then(|| {
        let mut gin = Tensor::zeros(input.shape());
        exec::for_each_chunk(gin.data_mut(), cin, |r, row| {
            let gbase = r * cout;
            for i in 0..cin {
                let mut acc = 0.0;
                for o in 0..cout {
                    acc += gd[gbase + o] * wd[o * cin + i];
                }
                row[i] = acc;
            }
        });
        gin
    });

    let gw = need_weight.then(|| {
        let mut gw = Tensor::zeros(weight.shape());
        exec::for_each_chunk(gw.data_mut(), cin, |o, row| {
            for i in 0..cin {
                let mut acc = 0.0;
                for r in 0..rows {
                    acc += gd[r * cout + o] * src[r * cin + i];
                }
                row[i] = acc;
            }
        });
        gw
    });

    let gb = need_bias.then(|| {
        let mut gb = Tensor::zeros(&[cout]);
        exec::for_each_chunk(gb.data_mut(), 1, |o, slot| {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += gd[r * cout + o];
            }
            slot[0] = acc;
        });
        gb
    });

    (gin, gw, gb)
}

// ---------------------------------------------------------------------------
// Batched matmul
// ---------------------------------------------------------------------------

fn bmm_forward(a: &Tensor, b: &Tensor, transpose_b: bool) -> Tensor {
    let (ba, t, k) = (a.dim(0), a.dim(1), a.dim(2));
    let (bb, d1, d2) = (b.dim(0), b.dim(1), b.dim(2));
    assert_eq!(ba, bb, "bmm batch mismatch");
    let u = if transpose_b {
        assert_eq!(d2, k, "bmm inner dim mismatch (transposed)");
        d1
    } else {
        assert_eq!(d1, k, "bmm inner dim mismatch");
        d2
    };
    let ad = a.data();
    let bd = b.data();
    let mut out = Tensor::zeros(&[ba, t, u]);
    exec::for_each_chunk(out.data_mut(), t * u, |batch, plane| {
        let abase = batch * t * k;
        let bbase = batch * d1 * d2;
        for ti in 0..t {
            for ui in 0..u {
                let mut acc = 0.0;
                for ki in 0..k {
                    let bv = if transpose_b {
                        bd[bbase + ui * k + ki]
                    } else {
                        bd[bbase + ki * u + ui]
                    };
                    acc += ad[abase + ti * k + ki] * bv;
                }
                plane[ti * u + ui] = acc;
            }
        }
    });
    out
}

fn bmm_backward(
    gout: &Tensor,
    a: &Tensor,
    b: &Tensor,
    transpose_b: bool,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (_, t, k) = (a.dim(0), a.dim(1), a.dim(2));
    let u = gout.dim(2);
    let gd = gout.data();
    let ad = a.data();
    let bd = b.data();
    let bstride = b.dim(1) * b.dim(2);

    let ga = need_a.then(|| {
        let mut ga = Tensor::zeros(a.shape());
        exec::for_each_chunk(ga.data_mut(), t * k, |batch, plane| {
            let gbase = batch * t * u;
            let bbase = batch * bstride;
            for ti in 0..t {
                for ki in 0..k {
                    let mut acc = 0.0;
                    for ui in 0..u {
                        let bv = if transpose_b {
                            bd[bbase + ui * k + ki]
                        } else {
                            bd[bbase + ki * u + ui]
                        };
                        acc += gd[gbase + ti * u + ui] * bv;
                    }
                    plane[ti * k + ki] = acc;
                }
            }
        });
        ga
    });

    let gb = need_b.then(|| {
        let mut gb = Tensor::zeros(b.shape());
        exec::for_each_chunk(gb.data_mut(), bstride, |batch, plane| {
            let gbase = batch * t * u;
            let abase = batch * t * k;
            if transpose_b {
                // b is (B, U, K): gb[u, k] = sum_t g[t, u] * a[t, k]
                for ui in 0..u {
                    for ki in 0..k {
                        let mut acc = 0.0;
                        for ti in 0..t {
                            acc += gd[gbase + ti * u + ui] * ad[abase + ti * k + ki];
                        }
                        plane[ui * k + ki] = acc;
                    }
                }
            } else {
                // b is (B, K, U): gb[k, u] = sum_t a[t, k] * g[t, u]
                for ki in 0..k {
                    for ui in 0..u {
                        let mut acc = 0.0;
                        for ti in 0..t {
                            acc += ad[abase + ti * k + ki] * gd[gbase + ti * u + ui];
                        }
                        plane[ki * u + ui] = acc;
                    }
                }
            }
        });
        gb
    });

    (ga, gb)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

fn softmax_forward(input: &Tensor) -> Tensor {
    let l = *input.shape().last().expect("softmax input rank");
    let src = input.data();
    let mut out = Tensor::zeros(input.shape());
    exec::for_each_chunk(out.data_mut(), l, |r, row| {
        let base = r * l;
        let mut max = f64::NEG_INFINITY;
        for i in 0..l {
            max = max.max(src[base + i]);
        }
        let mut total = 0.0;
        for i in 0..l {
            let e = (src[base + i] - max).exp();
            row[i] = e;
            total += e;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    });
    out
}

fn softmax_backward(gout: &Tensor, output: &Tensor) -> Tensor {
    let l = *output.shape().last().unwrap();
    let gd = gout.data();
    let od = output.data();
    let mut gin = Tensor::zeros(output.shape());
    exec::for_each_chunk(gin.data_mut(), l, |r, row| {
        let base = r * l;
        let mut dot = 0.0;
        for i in 0..l {
            dot += gd[base + i] * od[base + i];
        }
        for i in 0..l {
            row[i] = od[base + i] * (gd[base + i] - dot);
        }
    });
    gin
}

// ---------------------------------------------------------------------------
// Relative position bias
// ---------------------------------------------------------------------------

fn relpos_index(i: usize, j: usize, window: usize) -> usize {
    let (yi, xi) = (i / window, i % window);
    let (yj, xj) = (j / window, j % window);
    let dy = yi + window - 1 - yj;
    let dx = xi + window - 1 - xj;
    dy * (2 * window - 1) + dx
}

fn relpos_forward(attn: &Tensor, table: &Tensor, window: usize, heads: usize) -> Tensor {
    let (b, t, t2) = (attn.dim(0), attn.dim(1), attn.dim(2));
    assert_eq!(t, t2, "attention logits must be square");
    assert_eq!(t, window * window, "token count must equal window^2");
    assert_eq!(
        table.shape(),
        &[(2 * window - 1) * (2 * window - 1), heads],
        "relpos table shape"
    );
    assert_eq!(b % heads, 0, "batch not divisible by heads");
    let ad = attn.data();
    let td = table.data();
    let mut out = Tensor::zeros(attn.shape());
    exec::for_each_chunk(out.data_mut(), t * t, |batch, plane| {
        let head = batch % heads;
        let base = batch * t * t;
        for i in 0..t {
            for j in 0..t {
                let r = relpos_index(i, j, window);
                plane[i * t + j] = ad[base + i * t + j] + td[r * heads + head];
            }
        }
    });
    out
}

fn relpos_backward(gout: &Tensor, table: &Tensor, window: usize, heads: usize) -> Tensor {
    let (b, t, _) = (gout.dim(0), gout.dim(1), gout.dim(2));
    let gd = gout.data();
    let entries = table.dim(0);
    let mut gt = Tensor::zeros(table.shape());
    // Parallel over heads; each head scans its own batches sequentially.
    exec::for_each_chunk(gt.data_mut(), 1, |slot_idx, slot| {
        let r = slot_idx / heads;
        let head = slot_idx % heads;
        debug_assert!(r < entries);
        let mut acc = 0.0;
        for batch in (head..b).step_by(heads) {
            let base = batch * t * t;
            for i in 0..t {
                for j in 0..t {
                    if relpos_index(i, j, window) == r {
                        acc += gd[base + i * t + j];
                    }
                }
            }
        }
        slot[0] = acc;
    });
    gt
}

// ---------------------------------------------------------------------------
// Window and head reshapes, space-to-depth
// ---------------------------------------------------------------------------

fn window_partition_forward(input: &Tensor, window: usize) -> Tensor {
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    assert!(
        h % window == 0 && w % window == 0,
        "spatial dims {h}x{w} not divisible by window {window}"
    );
    let (wh, ww) = (h / window, w / window);
    let nw = wh * ww;
    let t = window * window;
    let src = input.data();
    let mut out = Tensor::zeros(&[nw, t, c]);
    exec::for_each_chunk(out.data_mut(), t * c, |win, tile| {
        let (wy, wx) = (win / ww, win % ww);
        for ty in 0..window {
            for tx in 0..window {
                let (y, x) = (wy * window + ty, wx * window + tx);
                for ch in 0..c {
                    tile[(ty * window + tx) * c + ch] = src[(ch * h + y) * w + x];
                }
            }
        }
    });
    out
}

fn window_merge_forward(input: &Tensor, window: usize, height: usize, width: usize) -> Tensor {
    let (nw, t, c) = (input.dim(0), input.dim(1), input.dim(2));
    let ww = width / window;
    assert_eq!(t, window * window, "tile token count");
    assert_eq!(nw, (height / window) * ww, "window count mismatch");
    let src = input.data();
    let mut out = Tensor::zeros(&[c, height, width]);
    exec::for_each_chunk(out.data_mut(), height * width, |ch, plane| {
        for y in 0..height {
            for x in 0..width {
                let (wy, wx) = (y / window, x / window);
                let (ty, tx) = (y % window, x % window);
                let win = wy * ww + wx;
                plane[y * width + x] = src[(win * t + ty * window + tx) * c + ch];
            }
        }
    });
    out
}

fn split_heads_forward(input: &Tensor, heads: usize) -> Tensor {
    let (nw, t, c) = (input.dim(0), input.dim(1), input.dim(2));
    assert_eq!(c % heads, 0, "channels not divisible by heads");
    let dh = c / heads;
    let src = input.data();
    let mut out = Tensor::zeros(&[nw * heads, t, dh]);
    exec::for_each_chunk(out.data_mut(), t * dh, |bh, tile| {
        let (n, head) = (bh / heads, bh % heads);
        for ti in 0..t {
            for d in 0..dh {
                tile[ti * dh + d] = src[(n * t + ti) * c + head * dh + d];
            }
        }
    });
    out
}

fn merge_heads_forward(input: &Tensor, heads: usize) -> Tensor {
    let (bh, t, dh) = (input.dim(0), input.dim(1), input.dim(2));
    assert_eq!(bh % heads, 0, "batch not divisible by heads");
    let nw = bh / heads;
    let c = dh * heads;
    let src = input.data();
    let mut out = Tensor::zeros(&[nw, t, c]);
    exec::for_each_chunk(out.data_mut(), t * c, |n, tile| {
        for ti in 0..t {
            for head in 0..heads {
                for d in 0..dh {
                    tile[ti * c + head * dh + d] = src[((n * heads + head) * t + ti) * dh + d];
                }
            }
        }
    });
    out
}

pub(crate) fn reformat_forward(input: &Tensor, scale: usize) -> Tensor {
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    assert!(
        h % scale == 0 && w % scale == 0,
        "spatial dims {h}x{w} not divisible by scale {scale}"
    );
    if scale == 1 {
        return input.clone();
    }
    let (oh, ow) = (h / scale, w / scale);
    let src = input.data();
    let mut out = Tensor::zeros(&[c * scale * scale, oh, ow]);
    exec::for_each_chunk(out.data_mut(), oh * ow, |oc, plane| {
        // Phase-major: output channel block p holds offset (p / s, p % s).
        let phase = oc / c;
        let ch = oc % c;
        let (dy, dx) = (phase / scale, phase % scale);
        for y in 0..oh {
            for x in 0..ow {
                plane[y * ow + x] = src[(ch * h + y * scale + dy) * w + x * scale + dx];
            }
        }
    });
    out
}

pub(crate) fn reformat_inv_forward(input: &Tensor, scale: usize) -> Tensor {
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    assert_eq!(
        c % (scale * scale),
        0,
        "channels {c} not divisible by scale^2 {}",
        scale * scale
    );
    if scale == 1 {
        return input.clone();
    }
    let oc = c / (scale * scale);
    let (oh, ow) = (h * scale, w * scale);
    let src = input.data();
    let mut out = Tensor::zeros(&[oc, oh, ow]);
    exec::for_each_chunk(out.data_mut(), oh * ow, |ch, plane| {
        for y in 0..oh {
            for x in 0..ow {
                let (dy, dx) = (y % scale, x % scale);
                let phase = dy * scale + dx;
                plane[y * ow + x] = src[((phase * oc + ch) * h + y / scale) * w + x / scale];
            }
        }
    });
    out
}

fn concat_forward(parts: &[&Tensor]) -> Tensor {
    let (_, h, w) = (parts[0].dim(0), parts[0].dim(1), parts[0].dim(2));
    let mut total = 0;
    for p in parts {
        assert_eq!(p.dim(1), h, "concat height mismatch");
        assert_eq!(p.dim(2), w, "concat width mismatch");
        total += p.dim(0);
    }
    let mut out = Tensor::zeros(&[total, h, w]);
    let mut offset = 0;
    for p in parts {
        let n = p.elems();
        out.data_mut()[offset..offset + n].copy_from_slice(p.data());
        offset += n;
    }
    out
}

fn channel_mean_forward(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let plane = h * w;
    let src = input.data();
    let mut out = Tensor::zeros(&[1, h, w]);
    exec::for_each_chunk(out.data_mut(), w, |y, row| {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += src[ch * plane + y * w + x];
            }
            row[x] = acc / c as f64;
        }
    });
    out
}
