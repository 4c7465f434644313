//! Multi-stage attention-driven SAR/optical feature fusion.
//!
//! Each modality is reformatted (space-to-depth), encoded by a two-layer
//! convolutional feature encoder, then refined by an alternating chain of
//! residual dense blocks and window-attention blocks. Per stage the chain
//! members are aggregated by a 1x1 convolution and the two modalities are
//! merged into a refined optical feature map; the SAR stream carries across
//! stages unmerged.

use crate::autodiff::{Graph, NodeId};
use crate::blocks::{self, AttnParams};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamNodes, ParamStore};
use crate::raster::{OpticalPatch, SarPatch, OPTICAL_BANDS, SAR_CHANNELS};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters for the fusion network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Space-to-depth factor applied to both modalities.
    #[serde(default = "default_reformat_scale")]
    pub reformat_scale: usize,
    /// Base feature width after the low-level encoders.
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Residual dense blocks per stage (the chain holds one fewer attention block).
    #[serde(default = "default_rdb_count")]
    pub rdb_count: usize,
    /// Fusion stages; the reconstruction head consumes one feature map per stage.
    #[serde(default = "default_stage_count")]
    pub stage_count: usize,
    /// Dense convolutions inside each residual dense block.
    #[serde(default = "default_rdb_layers")]
    pub rdb_layers: usize,
    /// Channels added by each dense convolution.
    #[serde(default = "default_rdb_growth")]
    pub rdb_growth: usize,
    /// Attention window edge length, in feature pixels.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Attention heads.
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Hidden width multiplier of the attention MLP.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_reformat_scale() -> usize {
    2
}
fn default_channels() -> usize {
    64
}
fn default_rdb_count() -> usize {
    4
}
fn default_stage_count() -> usize {
    3
}
fn default_rdb_layers() -> usize {
    5
}
fn default_rdb_growth() -> usize {
    32
}
fn default_window() -> usize {
    8
}
fn default_heads() -> usize {
    4
}
fn default_mlp_ratio() -> usize {
    2
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            reformat_scale: default_reformat_scale(),
            channels: default_channels(),
            rdb_count: default_rdb_count(),
            stage_count: default_stage_count(),
            rdb_layers: default_rdb_layers(),
            rdb_growth: default_rdb_growth(),
            window: default_window(),
            heads: default_heads(),
            mlp_ratio: default_mlp_ratio(),
        }
    }
}

impl FusionConfig {
    /// Small configuration for desk-scale training and gradient checks.
    pub fn micro() -> Self {
        FusionConfig {
            reformat_scale: 2,
            channels: 8,
            rdb_count: 2,
            stage_count: 1,
            rdb_layers: 2,
            rdb_growth: 8,
            window: 4,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reformat_scale == 0 {
            return Err(Error::Validation("reformat_scale must be positive".into()));
        }
        if self.rdb_count < 2 {
            return Err(Error::Validation(
                "rdb_count must be at least 2 (the chain interleaves one fewer attention block)"
                    .into(),
            ));
        }
        if self.stage_count == 0 {
            return Err(Error::Validation("stage_count must be at least 1".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Validation(format!(
                "channels {} must be divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.rdb_layers == 0 || self.rdb_growth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Validation(
                "rdb_layers, rdb_growth, and mlp_ratio must be positive".into(),
            ));
        }
        if self.window == 0 {
            return Err(Error::Validation("window must be positive".into()));
        }
        Ok(())
    }

    /// Patch sizes must be divisible by this tile (scale x window).
    pub fn tile(&self) -> usize {
        self.reformat_scale * self.window
    }

    pub fn validate_patch_size(&self, height: usize, width: usize) -> Result<()> {
        let t = self.tile();
        if height % t != 0 || width % t != 0 {
            return Err(Error::Shape(format!(
                "patch {height}x{width} not divisible by scale*window = {t}"
            )));
        }
        Ok(())
    }

    /// Input channels of the optical low-level encoder after reformatting.
    pub fn optical_in_channels(&self) -> usize {
        OPTICAL_BANDS * self.reformat_scale * self.reformat_scale
    }

    /// Input channels of the SAR low-level encoder after reformatting.
    pub fn sar_in_channels(&self) -> usize {
        SAR_CHANNELS * self.reformat_scale * self.reformat_scale
    }
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
) {
    let fan_in = in_ch * k * k;
    store.insert(
        format!("{prefix}.weight"),
        fan_in_uniform(rng, &[out_ch, in_ch, k, k], fan_in),
    );
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]));
}

fn init_swin(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &FusionConfig) {
    let c = cfg.channels;
    store.insert(format!("{prefix}.ln1.gamma"), Tensor::filled(&[c], 1.0));
    store.insert(format!("{prefix}.ln1.beta"), Tensor::zeros(&[c]));
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(
            format!("{prefix}.attn.{name}"),
            fan_in_uniform(rng, &[c, c], c),
        );
    }
    for name in ["bq", "bk", "bv", "bo"] {
        store.insert(format!("{prefix}.attn.{name}"), Tensor::zeros(&[c]));
    }
    let span = 2 * cfg.window - 1;
    store.insert(
        format!("{prefix}.attn.relpos"),
        Tensor::zeros(&[span * span, cfg.heads]),
    );
    store.insert(format!("{prefix}.ln2.gamma"), Tensor::filled(&[c], 1.0));
    store.insert(format!("{prefix}.ln2.beta"), Tensor::zeros(&[c]));
    init_conv(store, rng, &format!("{prefix}.mlp.fc1"), c * cfg.mlp_ratio, c, 1);
    init_conv(store, rng, &format!("{prefix}.mlp.fc2"), c, c * cfg.mlp_ratio, 1);
}

/// Add every fusion-network parameter to the store, drawing from `rng` in a
/// fixed traversal order.
pub fn add_fusion_params(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut ChaCha8Rng) {
    let c = cfg.channels;
    for (modality, in_ch) in [
        ("opt", cfg.optical_in_channels()),
        ("sar", cfg.sar_in_channels()),
    ] {
        init_conv(store, rng, &format!("lfe.{modality}.conv1"), c, in_ch, 3);
        init_conv(store, rng, &format!("lfe.{modality}.conv2"), c, c, 3);
    }
    for stage in 1..=cfg.stage_count {
        for modality in ["opt", "sar"] {
            for j in 1..=cfg.rdb_count {
                let prefix = format!("stage{stage}.{modality}.rdb{j}");
                for l in 1..=cfg.rdb_layers {
                    let in_ch = c + (l - 1) * cfg.rdb_growth;
                    init_conv(store, rng, &format!("{prefix}.conv{l}"), cfg.rdb_growth, in_ch, 3);
                }
                let lff_in = c + cfg.rdb_layers * cfg.rdb_growth;
                init_conv(store, rng, &format!("{prefix}.lff"), c, lff_in, 1);
            }
            for j in 1..cfg.rdb_count {
                init_swin(
                    store,
                    rng,
                    &format!("stage{stage}.{modality}.swin{j}"),
                    cfg,
                );
            }
            init_conv(
                store,
                rng,
                &format!("stage{stage}.{modality}.agg"),
                c,
                cfg.rdb_count * c,
                1,
            );
        }
        init_conv(store, rng, &format!("stage{stage}.merge"), c, 2 * c, 1);
    }
}

// ---------------------------------------------------------------------------
// Forward builders
// ---------------------------------------------------------------------------

fn conv_ids(pn: &ParamNodes, prefix: &str) -> (NodeId, NodeId) {
    (
        pn.id(&format!("{prefix}.weight")),
        pn.id(&format!("{prefix}.bias")),
    )
}

fn attn_ids(pn: &ParamNodes, prefix: &str) -> AttnParams {
    AttnParams {
        wq: pn.id(&format!("{prefix}.wq")),
        bq: pn.id(&format!("{prefix}.bq")),
        wk: pn.id(&format!("{prefix}.wk")),
        bk: pn.id(&format!("{prefix}.bk")),
        wv: pn.id(&format!("{prefix}.wv")),
        bv: pn.id(&format!("{prefix}.bv")),
        wo: pn.id(&format!("{prefix}.wo")),
        bo: pn.id(&format!("{prefix}.bo")),
        relpos: pn.id(&format!("{prefix}.relpos")),
    }
}

/// Two 3x3 convolutions, each followed by ReLU.
pub fn lfe_forward(
    g: &mut Graph,
    pn: &ParamNodes,
    prefix: &str,
    input: NodeId,
) -> Result<NodeId> {
    let (w1, b1) = conv_ids(pn, &format!("{prefix}.conv1"));
    let c1 = blocks::conv2d(g, input, w1, Some(b1))?;
    let a1 = g.relu(c1);
    let (w2, b2) = conv_ids(pn, &format!("{prefix}.conv2"));
    let c2 = blocks::conv2d(g, a1, w2, Some(b2))?;
    Ok(g.relu(c2))
}

/// Residual dense block: dense 3x3 convolutions with ReLU, 1x1 local fusion,
/// and a local residual connection back to the block input.
pub fn rdb_forward(
    g: &mut Graph,
    pn: &ParamNodes,
    prefix: &str,
    input: NodeId,
    cfg: &FusionConfig,
) -> Result<NodeId> {
    let (c, _, _) = g.value(input).chw()?;
    if c != cfg.channels {
        return Err(Error::Shape(format!(
            "rdb {prefix}: input width {c}, expected {}",
            cfg.channels
        )));
    }
    let mut feats = vec![input];
    for l in 1..=cfg.rdb_layers {
        let cat = if feats.len() == 1 {
            feats[0]
        } else {
            g.concat_channels(&feats)
        };
        let (w, b) = conv_ids(pn, &format!("{prefix}.conv{l}"));
        let conv = blocks::conv2d(g, cat, w, Some(b))?;
        feats.push(g.relu(conv));
    }
    let cat = g.concat_channels(&feats);
    let (w, b) = conv_ids(pn, &format!("{prefix}.lff"));
    let fused = blocks::conv2d(g, cat, w, Some(b))?;
    Ok(g.add(input, fused))
}

/// Window-attention block: the output adds the block input to the MLP branch,
/// and the MLP consumes the normalized sum of the input and its attention.
pub fn swin_block_forward(
    g: &mut Graph,
    pn: &ParamNodes,
    prefix: &str,
    input: NodeId,
    cfg: &FusionConfig,
) -> Result<NodeId> {
    let ln1 = blocks::layer_norm(
        g,
        input,
        pn.id(&format!("{prefix}.ln1.gamma")),
        pn.id(&format!("{prefix}.ln1.beta")),
    )?;
    let attn = blocks::w_msa(g, ln1, &attn_ids(pn, &format!("{prefix}.attn")), cfg.window, cfg.heads)?;
    let inner = g.add(input, attn);
    let ln2 = blocks::layer_norm(
        g,
        inner,
        pn.id(&format!("{prefix}.ln2.gamma")),
        pn.id(&format!("{prefix}.ln2.beta")),
    )?;
    let mlp = blocks::mlp_gelu(
        g,
        ln2,
        pn.id(&format!("{prefix}.mlp.fc1.weight")),
        pn.id(&format!("{prefix}.mlp.fc1.bias")),
        pn.id(&format!("{prefix}.mlp.fc2.weight")),
        pn.id(&format!("{prefix}.mlp.fc2.bias")),
    )?;
    Ok(g.add(input, mlp))
}

fn modality_chain(
    g: &mut Graph,
    pn: &ParamNodes,
    stage: usize,
    modality: &str,
    input: NodeId,
    cfg: &FusionConfig,
) -> Result<NodeId> {
    // J dense blocks with J-1 attention blocks between consecutive pairs;
    // the aggregation sees every attention output plus the last dense output.
    let mut members = Vec::with_capacity(cfg.rdb_count);
    let mut cur = input;
    for j in 1..=cfg.rdb_count {
        let r = rdb_forward(g, pn, &format!("stage{stage}.{modality}.rdb{j}"), cur, cfg)?;
        if j < cfg.rdb_count {
            let s = swin_block_forward(
                g,
                pn,
                &format!("stage{stage}.{modality}.swin{j}"),
                r,
                cfg,
            )?;
            members.push(s);
            cur = s;
        } else {
            members.push(r);
        }
    }
    let cat = g.concat_channels(&members);
    let (w, b) = conv_ids(pn, &format!("stage{stage}.{modality}.agg"));
    blocks::conv2d(g, cat, w, Some(b))
}

/// One fusion stage: run the dense/attention chain per modality and compress
/// each with a 1x1 convolution. Returns (optical final, SAR final).
pub fn stage_forward(
    g: &mut Graph,
    pn: &ParamNodes,
    stage: usize,
    f_opt: NodeId,
    f_sar: NodeId,
    cfg: &FusionConfig,
) -> Result<(NodeId, NodeId)> {
    let opt = modality_chain(g, pn, stage, "opt", f_opt, cfg)?;
    let sar = modality_chain(g, pn, stage, "sar", f_sar, cfg)?;
    Ok((opt, sar))
}

/// Merge the two modality finals: concatenate, 1x1 convolution, and a
/// residual connection from the optical final.
pub fn cross_modal_merge(
    g: &mut Graph,
    pn: &ParamNodes,
    stage: usize,
    f_opt_final: NodeId,
    f_sar_final: NodeId,
) -> Result<NodeId> {
    if g.value(f_opt_final).shape() != g.value(f_sar_final).shape() {
        return Err(Error::Shape(format!(
            "cross_modal_merge: modality shapes differ ({:?} vs {:?})",
            g.value(f_opt_final).shape(),
            g.value(f_sar_final).shape()
        )));
    }
    let cat = g.concat_channels(&[f_opt_final, f_sar_final]);
    let (w, b) = conv_ids(pn, &format!("stage{stage}.merge"));
    let merged = blocks::conv2d(g, cat, w, Some(b))?;
    Ok(g.add(merged, f_opt_final))
}

/// Outputs of the full fusion pipeline.
#[derive(Debug)]
pub struct FusionOutputs {
    /// Refined optical features, one per stage.
    pub stage_outputs: Vec<NodeId>,
    /// Initial optical features feeding the reconstruction skip connection.
    pub initial_opt: NodeId,
    /// The raw optical input as a constant node (13, H, W).
    pub opt_input: NodeId,
}

/// Reformat both inputs, encode them, and run every fusion stage. Each
/// stage's merged optical output feeds the next stage; the SAR stream carries
/// its own stage output forward.
pub fn fusion_forward(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &FusionConfig,
    opt: &OpticalPatch,
    sar: &SarPatch,
) -> Result<FusionOutputs> {
    cfg.validate()?;
    if opt.height != sar.height || opt.width != sar.width {
        return Err(Error::Shape(format!(
            "optical {}x{} and sar {}x{} footprints differ",
            opt.height, opt.width, sar.height, sar.width
        )));
    }
    cfg.validate_patch_size(opt.height, opt.width)?;

    let opt_input = g.constant(opt.to_tensor());
    let sar_input = g.constant(sar.to_tensor());
    let opt_re = blocks::reformat_node(g, opt_input, cfg.reformat_scale)?;
    let sar_re = blocks::reformat_node(g, sar_input, cfg.reformat_scale)?;
    let initial_opt = lfe_forward(g, pn, "lfe.opt", opt_re)?;
    let initial_sar = lfe_forward(g, pn, "lfe.sar", sar_re)?;

    let mut stage_outputs = Vec::with_capacity(cfg.stage_count);
    let mut opt_cur = initial_opt;
    let mut sar_cur = initial_sar;
    for stage in 1..=cfg.stage_count {
        let (opt_fin, sar_fin) = stage_forward(g, pn, stage, opt_cur, sar_cur, cfg)?;
        let merged = cross_modal_merge(g, pn, stage, opt_fin, sar_fin)?;
        stage_outputs.push(merged);
        opt_cur = merged;
        sar_cur = sar_fin;
    }
    Ok(FusionOutputs {
        stage_outputs,
        initial_opt,
        opt_input,
    })
}
