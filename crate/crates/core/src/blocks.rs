//! Differentiable building blocks with shape validation, plus a
//! finite-difference gradient check harness.
//!
//! Each builder records ops on an `autodiff::Graph` and returns the output
//! node. Shape violations surface as `Error::Shape` here; the tape itself
//! panics on malformed calls because the builders validate first.

use crate::autodiff::{self, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Reformat (space-to-depth) and its inverse, pure tensor form
// ---------------------------------------------------------------------------

/// Space-to-depth: (C, H, W) -> (C * s^2, H/s, W/s). Output channel groups
/// are phase-major: group p holds spatial offset (p / s, p % s), offsets in
/// row-major order.
pub fn reformat(f: &Tensor, s: usize) -> Result<Tensor> {
    let (_, h, w) = f.chw()?;
    if s == 0 {
        return Err(Error::Shape("reformat scale must be positive".into()));
    }
    if h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!(
            "reformat: spatial dims {h}x{w} not divisible by scale {s}"
        )));
    }
    Ok(autodiff::reformat_forward(f, s))
}

/// Depth-to-space, the exact inverse of [`reformat`].
pub fn reformat_inv(f: &Tensor, s: usize) -> Result<Tensor> {
    let (c, _, _) = f.chw()?;
    if s == 0 {
        return Err(Error::Shape("reformat scale must be positive".into()));
    }
    if c % (s * s) != 0 {
        return Err(Error::Shape(format!(
            "reformat_inv: channels {c} not divisible by {}",
            s * s
        )));
    }
    Ok(autodiff::reformat_inv_forward(f, s))
}

/// Graph-recorded reformat.
pub fn reformat_node(g: &mut Graph, f: NodeId, s: usize) -> Result<NodeId> {
    let (_, h, w) = g.value(f).chw()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!(
            "reformat: spatial dims {h}x{w} not divisible by scale {s}"
        )));
    }
    Ok(g.reformat(f, s))
}

/// Graph-recorded inverse reformat.
pub fn reformat_inv_node(g: &mut Graph, f: NodeId, s: usize) -> Result<NodeId> {
    let (c, _, _) = g.value(f).chw()?;
    if s == 0 || c % (s * s) != 0 {
        return Err(Error::Shape(format!(
            "reformat_inv: channels {c} not divisible by {}",
            s * s
        )));
    }
    Ok(g.reformat_inv(f, s))
}

// ---------------------------------------------------------------------------
// Convolution, layer norm, MLP
// ---------------------------------------------------------------------------

/// Stride-1 convolution with 1x1 (no padding) or 3x3 (same padding) kernels.
pub fn conv2d(g: &mut Graph, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
    let (cin, _, _) = g.value(input).chw()?;
    let wshape = g.value(weight).shape().to_vec();
    if wshape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d: weight must be 4D, got {wshape:?}"
        )));
    }
    let (cout, wcin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if kh != kw || (kh != 1 && kh != 3) {
        return Err(Error::Shape(format!(
            "conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}"
        )));
    }
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if let Some(b) = bias {
        if g.value(b).elems() != cout {
            return Err(Error::Shape(format!(
                "conv2d: bias length {} != out channels {cout}",
                g.value(b).elems()
            )));
        }
    }
    let pad = kh / 2;
    Ok(g.conv2d(input, weight, bias, pad))
}

/// Layer normalization over the channel axis of a (C, H, W) feature map.
pub fn layer_norm(g: &mut Graph, input: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    let (c, _, _) = g.value(input).chw()?;
    if g.value(gamma).elems() != c || g.value(beta).elems() != c {
        return Err(Error::Shape(format!(
            "layer_norm: scale/shift length must be {c}"
        )));
    }
    Ok(g.layer_norm(input, gamma, beta, LAYER_NORM_EPS))
}

/// Position-wise two-layer MLP with GELU, realized as 1x1 convolutions.
pub fn mlp_gelu(
    g: &mut Graph,
    input: NodeId,
    fc1_w: NodeId,
    fc1_b: NodeId,
    fc2_w: NodeId,
    fc2_b: NodeId,
) -> Result<NodeId> {
    let hidden = conv2d(g, input, fc1_w, Some(fc1_b))?;
    let act = g.gelu(hidden);
    conv2d(g, act, fc2_w, Some(fc2_b))
}

// ---------------------------------------------------------------------------
// Window multi-head self-attention
// ---------------------------------------------------------------------------

/// Node ids of one attention block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    /// Relative-position bias table, ((2w-1)^2, heads).
    pub relpos: NodeId,
}

/// Multi-head self-attention inside non-overlapping `window`x`window` tiles,
/// scaled by 1/sqrt(C/heads), with a learned relative-position bias per head.
/// No mixing happens across windows.
pub fn w_msa(
    g: &mut Graph,
    input: NodeId,
    p: &AttnParams,
    window: usize,
    heads: usize,
) -> Result<NodeId> {
    w_msa_with_probs(g, input, p, window, heads).map(|(out, _)| out)
}

/// Same as [`w_msa`] but also returns the attention probability node so tests
/// can assert convexity of the per-window weights.
pub(crate) fn w_msa_with_probs(
    g: &mut Graph,
    input: NodeId,
    p: &AttnParams,
    window: usize,
    heads: usize,
) -> Result<(NodeId, NodeId)> {
    let (c, h, w) = g.value(input).chw()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!(
            "w_msa: spatial dims {h}x{w} not divisible by window {window}"
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Shape(format!(
            "w_msa: channels {c} not divisible by heads {heads}"
        )));
    }
    for (name, id) in [("wq", p.wq), ("wk", p.wk), ("wv", p.wv), ("wo", p.wo)] {
        if g.value(id).shape() != [c, c] {
            return Err(Error::Shape(format!(
                "w_msa: {name} must be ({c}, {c}), got {:?}",
                g.value(id).shape()
            )));
        }
    }
    let span = 2 * window - 1;
    if g.value(p.relpos).shape() != [span * span, heads] {
        return Err(Error::Shape(format!(
            "w_msa: relpos table must be ({}, {heads}), got {:?}",
            span * span,
            g.value(p.relpos).shape()
        )));
    }

    let head_dim = c / heads;
    let tiles = g.window_partition(input, window);
    let q = g.linear(tiles, p.wq, p.bq);
    let k = g.linear(tiles, p.wk, p.bk);
    let v = g.linear(tiles, p.wv, p.bv);
    let qh = g.split_heads(q, heads);
    let kh = g.split_heads(k, heads);
    let vh = g.split_heads(v, heads);
    let logits = g.bmm(qh, kh, true);
    let scaled = g.scale(logits, 1.0 / (head_dim as f64).sqrt());
    let biased = g.relpos_bias(scaled, p.relpos, window, heads);
    let probs = g.softmax_last(biased);
    let ctx = g.bmm(probs, vh, false);
    let merged = g.merge_heads(ctx, heads);
    let out = g.linear(merged, p.wo, p.bo);
    Ok((g.window_merge(out, window, h, w), probs))
}

/// Fresh attention parameters as graph leaves (test and harness helper).
pub fn attn_leaves(g: &mut Graph, channels: usize, window: usize, heads: usize, seed: u64) -> AttnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (channels as f64).sqrt();
    let mut mat = |g: &mut Graph| {
        let data: Vec<f64> = (0..channels * channels)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        g.leaf(Tensor::from_vec(&[channels, channels], data))
    };
    let wq = mat(g);
    let wk = mat(g);
    let wv = mat(g);
    let wo = mat(g);
    let bq = g.leaf(Tensor::zeros(&[channels]));
    let bk = g.leaf(Tensor::zeros(&[channels]));
    let bv = g.leaf(Tensor::zeros(&[channels]));
    let bo = g.leaf(Tensor::zeros(&[channels]));
    let span = 2 * window - 1;
    let relpos = g.leaf(Tensor::zeros(&[span * span, heads]));
    AttnParams {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
        relpos,
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compare tape gradients against central finite differences.
///
/// `build` receives a fresh graph and one leaf per entry of `leaves`, and
/// returns the output node; the harness reduces it to a scalar with a sum.
/// At most `max_coords` coordinates per leaf are probed (all of them when the
/// leaf is small enough), chosen deterministically from `seed`.
///
/// Returns the maximum relative error across probed coordinates, with
/// `|a - n| / max(|a| + |n|, 1e-8)` as the relative error of analytic `a`
/// against numeric `n`.
pub fn grad_check<F>(
    build: F,
    leaves: &[Tensor],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let forward = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        let s = g.sum_all(out);
        Ok(g.value(s).item())
    };

    // Analytic gradients from one taped pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let scalar = g.sum_all(out);
    g.backward(scalar);
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(leaves.iter())
        .map(|(&id, t)| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut values: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.elems();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < max_coords {
                picked.insert(rng.gen_range(0..n));
            }
            picked.into_iter().collect()
        };
        for ci in coords {
            let original = values[li].data()[ci];
            values[li].data_mut()[ci] = original + eps;
            let plus = forward(&values)?;
            values[li].data_mut()[ci] = original - eps;
            let minus = forward(&values)?;
            values[li].data_mut()[ci] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[li].data()[ci];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// [`grad_check`] with retry: if the error exceeds `tol` (a kink such as the
/// ReLU corner was probably hit), jitter the leaves and try again, keeping
/// the best result.
pub fn grad_check_with_retry<F>(
    build: F,
    leaves: &[Tensor],
    eps: f64,
    max_coords: usize,
    seed: u64,
    tol: f64,
    attempts: usize,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut best = grad_check(&build, leaves, eps, max_coords, seed)?;
    let mut attempt = 0;
    let mut jittered: Vec<Tensor> = leaves.to_vec();
    while best > tol && attempt < attempts {
        attempt += 1;
        log::warn!(
            "grad_check hit rel err {best:.3e} (> {tol:.1e}); retrying with jitter (attempt {attempt})"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
        for t in jittered.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-1.0..1.0) * eps * 100.0;
            }
        }
        best = best.min(grad_check(&build, &jittered, eps, max_coords, seed)?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn reformat_shape_algebra() {
        let f = Tensor::zeros(&[13, 256, 256]);
        let r = reformat(&f, 2).unwrap();
        assert_eq!(r.shape(), &[52, 128, 128]);
        let back = reformat_inv(&r, 2).unwrap();
        assert_eq!(back.shape(), &[13, 256, 256]);
    }

    #[test]
    fn reformat_round_trips_exactly() {
        for &s in &[1usize, 2, 4] {
            let f = rand_tensor(&[3, 16, 16], s as u64);
            let r = reformat(&f, s).unwrap();
            assert_eq!(r.shape(), &[3 * s * s, 16 / s, 16 / s]);
            assert_eq!(reformat_inv(&r, s).unwrap(), f);
            // And the opposite composition.
            let f2 = rand_tensor(&[4 * s * s, 8, 8], 100 + s as u64);
            let up = reformat_inv(&f2, s).unwrap();
            assert_eq!(reformat(&up, s).unwrap(), f2);
        }
    }

    #[test]
    fn reformat_rejects_indivisible_dims() {
        let f = Tensor::zeros(&[3, 15, 16]);
        assert!(matches!(reformat(&f, 2), Err(Error::Shape(_))));
        let f = Tensor::zeros(&[3, 8, 8]);
        assert!(matches!(reformat_inv(&f, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&[3, 4, 4], 5));
        // 1x1 identity: weight[o][i] = 1 if o == i.
        let mut wdata = vec![0.0; 9];
        for i in 0..3 {
            wdata[i * 3 + i] = 1.0;
        }
        let w = g.leaf(Tensor::from_vec(&[3, 3, 1, 1], wdata));
        let b = g.leaf(Tensor::zeros(&[3]));
        let y = conv2d(&mut g, x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_zero_kernel_broadcasts_bias() {
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&[2, 3, 3], 6));
        let w = g.leaf(Tensor::zeros(&[4, 2, 3, 3]));
        let b = g.leaf(Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]));
        let y = conv2d(&mut g, x, w, Some(b)).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[4, 3, 3]);
        for oc in 0..4 {
            for p in 0..9 {
                assert_eq!(v.data()[oc * 9 + p], [0.5, -1.0, 2.0, 0.0][oc]);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(matches!(
            conv2d(&mut g, x, w, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mlp_with_zero_weights_broadcasts_bias() {
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&[2, 2, 2], 7));
        let w1 = g.leaf(Tensor::zeros(&[4, 2, 1, 1]));
        let b1 = g.leaf(Tensor::zeros(&[4]));
        let w2 = g.leaf(Tensor::zeros(&[2, 4, 1, 1]));
        let b2 = g.leaf(Tensor::from_vec(&[2], vec![0.25, -0.5]));
        let y = mlp_gelu(&mut g, x, w1, b1, w2, b2).unwrap();
        let v = g.value(y);
        for p in 0..4 {
            assert_eq!(v.data()[p], 0.25);
            assert_eq!(v.data()[4 + p], -0.5);
        }
    }

    #[test]
    fn layer_norm_constant_channels_map_to_shift() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[6, 2, 2], 2.5));
        let gamma = g.leaf(Tensor::filled(&[6], 1.0));
        let beta = g.leaf(Tensor::zeros(&[6]));
        let y = layer_norm(&mut g, x, gamma, beta).unwrap();
        for v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    /// With every token in a window identical, attention weights are uniform
    /// and the output is the value/output projection of that token.
    #[test]
    fn w_msa_constant_window_reduces_to_projections() {
        let (c, heads, window) = (4usize, 2usize, 2usize);
        let mut g = Graph::new();
        // One window (2x2 spatial), constant feature vector at each position.
        let feat = vec![0.3, -0.7, 0.2, 0.9];
        let mut data = vec![0.0; c * 4];
        for ch in 0..c {
            for p in 0..4 {
                data[ch * 4 + p] = feat[ch];
            }
        }
        let x = g.leaf(Tensor::from_vec(&[c, 2, 2], data));
        let p = attn_leaves(&mut g, c, window, heads, 42);
        let out = w_msa(&mut g, x, &p, window, heads).unwrap();

        // Closed form: out = Wo (Wv feat + bv) + bo, identical per position.
        let wv = g.value(p.wv).clone();
        let wo = g.value(p.wo).clone();
        let mut v = vec![0.0; c];
        for o in 0..c {
            for i in 0..c {
                v[o] += wv.data()[o * c + i] * feat[i];
            }
        }
        let mut expect = vec![0.0; c];
        for o in 0..c {
            for i in 0..c {
                expect[o] += wo.data()[o * c + i] * v[i];
            }
        }
        let got = g.value(out);
        for ch in 0..c {
            for pos in 0..4 {
                assert!(
                    (got.data()[ch * 4 + pos] - expect[ch]).abs() < 1e-10,
                    "channel {ch} pos {pos}"
                );
            }
        }
    }

    /// A 1x1 window attends only to itself: softmax over one logit is 1.
    #[test]
    fn w_msa_single_token_window_is_projection_chain() {
        let (c, heads, window) = (4usize, 1usize, 1usize);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&[c, 2, 2], 9));
        let p = attn_leaves(&mut g, c, window, heads, 43);
        let out = w_msa(&mut g, x, &p, window, heads).unwrap();

        let xin = g.value(x).clone();
        let wv = g.value(p.wv).clone();
        let wo = g.value(p.wo).clone();
        for pos in 0..4 {
            let feat: Vec<f64> = (0..c).map(|ch| xin.data()[ch * 4 + pos]).collect();
            let mut v = vec![0.0; c];
            for o in 0..c {
                for i in 0..c {
                    v[o] += wv.data()[o * c + i] * feat[i];
                }
            }
            let mut expect = vec![0.0; c];
            for o in 0..c {
                for i in 0..c {
                    expect[o] += wo.data()[o * c + i] * v[i];
                }
            }
            for ch in 0..c {
                assert!((g.value(out).data()[ch * 4 + pos] - expect[ch]).abs() < 1e-10);
            }
        }
    }

    /// 2x2 window, one head, against a brute-force softmax attention oracle.
    #[test]
    fn w_msa_matches_brute_force_oracle() {
        let (c, heads, window) = (4usize, 1usize, 2usize);
        let mut g = Graph::new();
        let x0 = rand_tensor(&[c, 2, 2], 11);
        let x = g.leaf(x0.clone());
        let p = attn_leaves(&mut g, c, window, heads, 44);
        // Give the bias table distinct values so it participates.
        let span = 2 * window - 1;
        let table = rand_tensor(&[span * span, heads], 45);
        let pt = g.leaf(table.clone());
        let p = AttnParams { relpos: pt, ..p };
        let out = w_msa(&mut g, x, &p, window, heads).unwrap();

        // Oracle: explicit loops over the single window of 4 tokens.
        let mat = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..c)
                .map(|o| (0..c).map(|i| m.data()[o * c + i] * v[i]).sum())
                .collect()
        };
        let tokens: Vec<Vec<f64>> = (0..4)
            .map(|pos| (0..c).map(|ch| x0.data()[ch * 4 + pos]).collect())
            .collect();
        let wq = g.value(p.wq).clone();
        let wk = g.value(p.wk).clone();
        let wv = g.value(p.wv).clone();
        let wo = g.value(p.wo).clone();
        let q: Vec<Vec<f64>> = tokens.iter().map(|t| mat(&wq, t)).collect();
        let k: Vec<Vec<f64>> = tokens.iter().map(|t| mat(&wk, t)).collect();
        let v: Vec<Vec<f64>> = tokens.iter().map(|t| mat(&wv, t)).collect();
        let scale = 1.0 / (c as f64).sqrt();
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| {
                    let dot: f64 = (0..c).map(|d| q[i][d] * k[j][d]).sum();
                    let (yi, xi) = (i / 2, i % 2);
                    let (yj, xj) = (j / 2, j % 2);
                    let r = (yi + 1 - yj) * 3 + (xi + 1 - xj);
                    dot * scale + table.data()[r * heads]
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; c];
            for j in 0..4 {
                for d in 0..c {
                    ctx[d] += exps[j] / total * v[j][d];
                }
            }
            let expect = mat(&wo, &ctx);
            for ch in 0..c {
                let got = g.value(out).data()[ch * 4 + i];
                assert!(
                    (got - expect[ch]).abs() < 1e-6,
                    "token {i} channel {ch}: {got} vs {}",
                    expect[ch]
                );
            }
        }
    }

    #[test]
    fn w_msa_attention_weights_are_convex() {
        let (c, heads, window) = (8usize, 2usize, 4usize);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&[c, 8, 8], 12));
        let p = attn_leaves(&mut g, c, window, heads, 46);
        let (_, probs) = w_msa_with_probs(&mut g, x, &p, window, heads).unwrap();
        let pv = g.value(probs);
        let t = window * window;
        for row in 0..pv.elems() / t {
            let s: f64 = pv.data()[row * t..(row + 1) * t].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {row} sums to {s}");
            assert!(pv.data()[row * t..(row + 1) * t].iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn w_msa_rejects_divisibility_violations() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[4, 6, 6]));
        let p = attn_leaves(&mut g, 4, 4, 2, 47);
        assert!(matches!(
            w_msa(&mut g, x, &p, 4, 2),
            Err(Error::Shape(_))
        ));
        let x = g.leaf(Tensor::zeros(&[5, 8, 8]));
        assert!(matches!(
            w_msa(&mut g, x, &p, 4, 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grad_check_conv3x3() {
        let input = rand_tensor(&[1, 8, 8], 20);
        let weight = rand_tensor(&[2, 1, 3, 3], 21);
        let bias = rand_tensor(&[2], 22);
        let err = grad_check(
            |g, ids| conv2d(g, ids[0], ids[1], Some(ids[2])),
            &[input, weight, bias],
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn grad_check_linear_conv_is_tight() {
        // A 1x1 conv is linear, so analytic and FD agree to near roundoff.
        let input = rand_tensor(&[3, 4, 4], 23);
        let weight = rand_tensor(&[2, 3, 1, 1], 24);
        let err = grad_check(
            |g, ids| conv2d(g, ids[0], ids[1], None),
            &[input, weight],
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn grad_check_w_msa() {
        let input = rand_tensor(&[8, 8, 8], 25);
        let err = grad_check(
            |g, ids| {
                let p = attn_leaves(g, 8, 4, 2, 48);
                // Check input gradients; parameters are separate leaves inside.
                w_msa(g, ids[0], &p, 4, 2)
            },
            &[input],
            1e-5,
            128,
            1,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn grad_check_mlp_and_layer_norm() {
        let input = rand_tensor(&[4, 4, 4], 26);
        let gamma = rand_tensor(&[4], 27);
        let beta = rand_tensor(&[4], 28);
        let w1 = rand_tensor(&[8, 4, 1, 1], 29);
        let b1 = rand_tensor(&[8], 30);
        let w2 = rand_tensor(&[4, 8, 1, 1], 31);
        let b2 = rand_tensor(&[4], 32);
        let err = grad_check(
            |g, ids| {
                let ln = layer_norm(g, ids[0], ids[1], ids[2])?;
                mlp_gelu(g, ln, ids[3], ids[4], ids[5], ids[6])
            },
            &[input, gamma, beta, w1, b1, w2, b2],
            1e-5,
            64,
            2,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
