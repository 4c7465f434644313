//! Global feature fusion, the image reconstruction head, and the final
//! residual prediction.
//!
//! The reconstruction head's last convolution initializes to zero, so a fresh
//! model is the identity on its cloudy input: training starts from "change
//! nothing" and learns the residual.

use crate::autodiff::{Graph, NodeId};
use crate::blocks;
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::params::{fan_in_uniform, ParamNodes, ParamStore};
use crate::raster::{OpticalPatch, SarPatch, OPTICAL_BANDS};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Add the reconstruction-head parameters (global fusion convolutions and
/// the reconstruction network) to the store.
pub fn add_reconstruction_params(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut ChaCha8Rng) {
    let c = cfg.channels;
    let s = cfg.reformat_scale;
    let concat_in = cfg.stage_count * c;
    store.insert(
        "gff.conv1.weight",
        fan_in_uniform(rng, &[c, concat_in, 1, 1], concat_in),
    );
    store.insert("gff.conv1.bias", Tensor::zeros(&[c]));
    store.insert(
        "gff.conv2.weight",
        fan_in_uniform(rng, &[c, c, 3, 3], c * 9),
    );
    store.insert("gff.conv2.bias", Tensor::zeros(&[c]));
    let up_ch = OPTICAL_BANDS * s * s;
    store.insert(
        "irn.pre.weight",
        fan_in_uniform(rng, &[up_ch, c, 3, 3], c * 9),
    );
    store.insert("irn.pre.bias", Tensor::zeros(&[up_ch]));
    // Zero start: the whole network begins as the identity on the cloudy input.
    store.insert(
        "irn.post.weight",
        Tensor::zeros(&[OPTICAL_BANDS, OPTICAL_BANDS, 3, 3]),
    );
    store.insert("irn.post.bias", Tensor::zeros(&[OPTICAL_BANDS]));
}

/// Every learnable parameter of the full model, deterministically seeded.
pub fn model_params(cfg: &FusionConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fusion::add_fusion_params(&mut store, cfg, &mut rng);
    add_reconstruction_params(&mut store, cfg, &mut rng);
    Ok(store)
}

/// Global feature fusion: concatenate the per-stage feature maps, compress
/// with a 1x1 convolution, refine with a 3x3 convolution, and add the skip
/// from the initial optical features.
pub fn gff(
    g: &mut Graph,
    pn: &ParamNodes,
    features: &[NodeId],
    initial_opt: NodeId,
) -> Result<NodeId> {
    if features.is_empty() {
        return Err(Error::Shape("gff: no stage features".into()));
    }
    let first = g.value(features[0]).shape().to_vec();
    for &f in features {
        if g.value(f).shape() != first {
            return Err(Error::Shape(format!(
                "gff: stage feature shapes differ ({:?} vs {:?})",
                g.value(f).shape(),
                first
            )));
        }
    }
    if g.value(initial_opt).shape() != first {
        return Err(Error::Shape(
            "gff: skip connection shape differs from stage features".into(),
        ));
    }
    let cat = if features.len() == 1 {
        features[0]
    } else {
        g.concat_channels(features)
    };
    let c1 = blocks::conv2d(g, cat, pn.id("gff.conv1.weight"), Some(pn.id("gff.conv1.bias")))?;
    let c2 = blocks::conv2d(g, c1, pn.id("gff.conv2.weight"), Some(pn.id("gff.conv2.bias")))?;
    Ok(g.add(c2, initial_opt))
}

/// Image reconstruction: widen to 13 * s^2 channels, undo the reformat, and
/// refine the 13-band output at full resolution.
pub fn irn(g: &mut Graph, pn: &ParamNodes, fused: NodeId, scale: usize) -> Result<NodeId> {
    let pre = blocks::conv2d(g, fused, pn.id("irn.pre.weight"), Some(pn.id("irn.pre.bias")))?;
    let (c, _, _) = g.value(pre).chw()?;
    if c != OPTICAL_BANDS * scale * scale {
        return Err(Error::Shape(format!(
            "irn: pre-convolution must emit {} channels, got {c}",
            OPTICAL_BANDS * scale * scale
        )));
    }
    let up = blocks::reformat_inv_node(g, pre, scale)?;
    blocks::conv2d(g, up, pn.id("irn.post.weight"), Some(pn.id("irn.post.bias")))
}

/// Residual prediction: add the cloudy input back onto the reconstruction.
/// The result is intentionally unclipped; clipping happens only at export so
/// saturated cloud regions keep their gradients.
pub fn predict(g: &mut Graph, reconstruction: NodeId, opt_input: NodeId) -> Result<NodeId> {
    if g.value(reconstruction).shape() != g.value(opt_input).shape() {
        return Err(Error::Shape(format!(
            "predict: reconstruction {:?} and input {:?} shapes differ",
            g.value(reconstruction).shape(),
            g.value(opt_input).shape()
        )));
    }
    Ok(g.add(reconstruction, opt_input))
}

/// Full forward pass: fusion stages, global fusion, reconstruction, residual.
/// Returns the unclipped (13, H, W) prediction node.
pub fn forward_predict(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &FusionConfig,
    cloudy: &OpticalPatch,
    sar: &SarPatch,
) -> Result<NodeId> {
    let out = fusion::fusion_forward(g, pn, cfg, cloudy, sar)?;
    let fused = gff(g, pn, &out.stage_outputs, out.initial_opt)?;
    let rec = irn(g, pn, fused, cfg.reformat_scale)?;
    predict(g, rec, out.opt_input)
}

/// Finite-difference check of the full pipeline against tape gradients.
///
/// Sums the prediction to a scalar, backpropagates, then probes up to
/// `max_coords_per_param` coordinates of every parameter with central
/// differences. Each coordinate is probed at every step in `eps_list` and
/// scored by its best agreement: through a graph this deep, small steps are
/// roundoff-limited and large steps truncation-limited, and the crossover
/// varies per coordinate. Returns the worst per-coordinate relative error.
pub fn pipeline_grad_check(
    cfg: &FusionConfig,
    store: &ParamStore,
    cloudy: &OpticalPatch,
    sar: &SarPatch,
    eps_list: &[f64],
    max_coords_per_param: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;

    let grads = {
        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, store);
        let pred = forward_predict(&mut g, &pn, cfg, cloudy, sar)?;
        let scalar = g.sum_all(pred);
        g.backward(scalar);
        pn.collect_grads(&g, store)
    };

    let forward = |st: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, st);
        let pred = forward_predict(&mut g, &pn, cfg, cloudy, sar)?;
        let s = g.sum_all(pred);
        Ok(g.value(s).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    let paths: Vec<String> = store.paths().cloned().collect();
    for path in &paths {
        let n = store.get(path)?.elems();
        let coords: Vec<usize> = if n <= max_coords_per_param {
            (0..n).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < max_coords_per_param {
                picked.insert(rng.gen_range(0..n));
            }
            picked.into_iter().collect()
        };
        for ci in coords {
            let analytic = grads[path].data()[ci];
            let mut best = f64::INFINITY;
            for &eps in eps_list {
                let original = probe.get(path)?.data()[ci];
                probe.get_mut(path)?.data_mut()[ci] = original + eps;
                let plus = forward(&probe)?;
                probe.get_mut(path)?.data_mut()[ci] = original - eps;
                let minus = forward(&probe)?;
                probe.get_mut(path)?.data_mut()[ci] = original;
                let numeric = (plus - minus) / (2.0 * eps);
                let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
                best = best.min(rel);
            }
            worst = worst.max(best);
        }
    }
    Ok(worst)
}

/// [`pipeline_grad_check`] with kink handling: when the error exceeds `tol`
/// (a finite-difference secant straddled a ReLU corner), jitter the
/// parameters slightly and re-check, keeping the best result.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_grad_check_with_retry(
    cfg: &FusionConfig,
    store: &ParamStore,
    cloudy: &OpticalPatch,
    sar: &SarPatch,
    eps_list: &[f64],
    max_coords_per_param: usize,
    seed: u64,
    tol: f64,
    attempts: usize,
) -> Result<f64> {
    use rand::Rng;

    let mut best =
        pipeline_grad_check(cfg, store, cloudy, sar, eps_list, max_coords_per_param, seed)?;
    let mut jittered = store.clone();
    let mut attempt = 0;
    while best > tol && attempt < attempts {
        attempt += 1;
        log::warn!(
            "pipeline grad check hit rel err {best:.3e} (> {tol:.1e}); retrying with jitter"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + attempt as u64));
        for (_, t) in jittered.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-3e-3..3e-3);
            }
        }
        best = best.min(pipeline_grad_check(
            cfg,
            &jittered,
            cloudy,
            sar,
            eps_list,
            max_coords_per_param,
            seed,
        )?);
    }
    Ok(best)
}

/// Clip a raw prediction into [0, 1] reflectance and quantize to the patch
/// format's f32 storage.
pub fn to_export_patch(prediction: &Tensor) -> Result<OpticalPatch> {
    let (c, h, w) = prediction.chw()?;
    if c != OPTICAL_BANDS {
        return Err(Error::Shape(format!(
            "export: expected {OPTICAL_BANDS} bands, got {c}"
        )));
    }
    Ok(OpticalPatch {
        bands: prediction
            .data()
            .iter()
            .map(|&v| v.clamp(0.0, 1.0) as f32)
            .collect(),
        height: h,
        width: w,
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn micro_model(seed: u64) -> (FusionConfig, ParamStore) {
        let cfg = FusionConfig::micro();
        let store = model_params(&cfg, seed).unwrap();
        (cfg, store)
    }

    fn random_patches(h: usize, w: usize, seed: u64) -> (OpticalPatch, SarPatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = OpticalPatch::zeros(h, w);
        for v in opt.bands.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let mut sar = SarPatch::zeros(h, w);
        for v in sar.channels.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        (opt, sar)
    }

    fn rand_feature(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[c, h, w],
            (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn gff_zero_convs_return_skip_exactly() {
        let (cfg, mut store) = micro_model(1);
        store.zero("gff.conv1.weight").unwrap();
        store.zero("gff.conv1.bias").unwrap();
        store.zero("gff.conv2.weight").unwrap();
        store.zero("gff.conv2.bias").unwrap();
        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, &store);
        let skip_t = rand_feature(cfg.channels, 8, 8, 2);
        let f = g.constant(rand_feature(cfg.channels, 8, 8, 3));
        let skip = g.constant(skip_t.clone());
        let out = gff(&mut g, &pn, &[f], skip).unwrap();
        assert_eq!(g.value(out), &skip_t);
    }

    #[test]
    fn gff_single_stage_width_contract() {
        let (cfg, store) = micro_model(4);
        // stage_count = 1, so the 1x1 weight accepts `channels` inputs.
        let w = store.get("gff.conv1.weight").unwrap();
        assert_eq!(w.shape(), &[cfg.channels, cfg.channels, 1, 1]);
    }

    #[test]
    fn gff_two_stage_matches_manual_composition() {
        let cfg = FusionConfig {
            stage_count: 2,
            ..FusionConfig::micro()
        };
        let store = model_params(&cfg, 5).unwrap();
        let f1t = rand_feature(cfg.channels, 8, 8, 6);
        let f2t = rand_feature(cfg.channels, 8, 8, 7);
        let skipt = rand_feature(cfg.channels, 8, 8, 8);

        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, &store);
        let f1 = g.constant(f1t.clone());
        let f2 = g.constant(f2t.clone());
        let skip = g.constant(skipt.clone());
        let out = gff(&mut g, &pn, &[f1, f2], skip).unwrap();

        let mut g2 = Graph::new();
        let pn2 = ParamNodes::register(&mut g2, &store);
        let f1 = g2.constant(f1t);
        let f2 = g2.constant(f2t);
        let skip = g2.constant(skipt);
        let cat = g2.concat_channels(&[f1, f2]);
        let c1 = blocks::conv2d(
            &mut g2,
            cat,
            pn2.id("gff.conv1.weight"),
            Some(pn2.id("gff.conv1.bias")),
        )
        .unwrap();
        let c2 = blocks::conv2d(
            &mut g2,
            c1,
            pn2.id("gff.conv2.weight"),
            Some(pn2.id("gff.conv2.bias")),
        )
        .unwrap();
        let expect = g2.add(c2, skip);
        assert!(g.value(out).max_abs_diff(g2.value(expect)) < 1e-9);
    }

    #[test]
    fn irn_restores_full_resolution_and_band_count() {
        let (cfg, store) = micro_model(9);
        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, &store);
        let fused = g.constant(rand_feature(cfg.channels, 8, 8, 10));
        let out = irn(&mut g, &pn, fused, cfg.reformat_scale).unwrap();
        assert_eq!(g.value(out).shape(), &[13, 16, 16]);
    }

    #[test]
    fn irn_zero_post_conv_gives_zero_map() {
        let (cfg, store) = micro_model(11);
        // irn.post starts at zero by construction.
        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, &store);
        let fused = g.constant(rand_feature(cfg.channels, 8, 8, 12));
        let out = irn(&mut g, &pn, fused, cfg.reformat_scale).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn irn_matches_manual_composition() {
        let (cfg, mut store) = micro_model(13);
        // Give the post convolution real values so the oracle is nontrivial.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        *store.get_mut("irn.post.weight").unwrap() =
            fan_in_uniform(&mut rng, &[13, 13, 3, 3], 13 * 9);
        let fused_t = rand_feature(cfg.channels, 8, 8, 15);

        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, &store);
        let fused = g.constant(fused_t.clone());
        let out = irn(&mut g, &pn, fused, cfg.reformat_scale).unwrap();

        let mut g2 = Graph::new();
        let pn2 = ParamNodes::register(&mut g2, &store);
        let fused = g2.constant(fused_t);
        let pre = blocks::conv2d(
            &mut g2,
            fused,
            pn2.id("irn.pre.weight"),
            Some(pn2.id("irn.pre.bias")),
        )
        .unwrap();
        let up = blocks::reformat_inv_node(&mut g2, pre, cfg.reformat_scale).unwrap();
        let expect = blocks::conv2d(
            &mut g2,
            up,
            pn2.id("irn.post.weight"),
            Some(pn2.id("irn.post.bias")),
        )
        .unwrap();
        assert!(g.value(out).max_abs_diff(g2.value(expect)) < 1e-9);
    }

    #[test]
    fn zero_reconstruction_predicts_the_input() {
        let mut g = Graph::new();
        let input_t = rand_feature(13, 4, 4, 16);
        let rec = g.constant(Tensor::zeros(&[13, 4, 4]));
        let input = g.constant(input_t.clone());
        let out = predict(&mut g, rec, input).unwrap();
        assert_eq!(g.value(out), &input_t);
    }

    #[test]
    fn reconstruction_equal_to_residual_recovers_target() {
        let mut g = Graph::new();
        let input_t = rand_feature(13, 4, 4, 17);
        let target_t = rand_feature(13, 4, 4, 18);
        let residual = {
            let mut r = target_t.clone();
            for (rv, iv) in r.data_mut().iter_mut().zip(input_t.data().iter()) {
                *rv -= iv;
            }
            r
        };
        let rec = g.constant(residual);
        let input = g.constant(input_t);
        let out = predict(&mut g, rec, input).unwrap();
        assert!(g.value(out).max_abs_diff(&target_t) < 1e-12);
    }

    #[test]
    fn export_clips_into_unit_range() {
        let t = Tensor::from_vec(
            &[13, 1, 1],
            (0..13)
                .map(|i| match i {
                    0 => 1.3,
                    1 => -0.2,
                    _ => 0.5,
                })
                .collect(),
        );
        let p = to_export_patch(&t).unwrap();
        assert_eq!(p.at(0, 0, 0), 1.0);
        assert_eq!(p.at(1, 0, 0), 0.0);
        assert_eq!(p.at(2, 0, 0), 0.5);
    }

    #[test]
    fn fresh_model_is_identity_on_cloudy_input() {
        let (cfg, store) = micro_model(19);
        let (opt, sar) = random_patches(16, 16, 20);
        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, &store);
        let pred = forward_predict(&mut g, &pn, &cfg, &opt, &sar).unwrap();
        let expect = opt.to_tensor();
        let got = g.value(pred);
        assert_eq!(got.shape(), expect.shape());
        for (a, b) in got.data().iter().zip(expect.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn end_to_end_output_matches_input_shape() {
        let cfg = FusionConfig {
            stage_count: 2,
            ..FusionConfig::micro()
        };
        let store = model_params(&cfg, 21).unwrap();
        let (opt, sar) = random_patches(32, 16, 22);
        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, &store);
        let pred = forward_predict(&mut g, &pn, &cfg, &opt, &sar).unwrap();
        assert_eq!(g.value(pred).shape(), &[13, 32, 16]);
    }

    #[test]
    fn micro_pipeline_gradient_check_on_sampled_parameters() {
        // Fast spot check (few coordinates per parameter); the acceptance
        // suite runs the full-budget version.
        let cfg = FusionConfig::micro();
        let mut store = model_params(&cfg, 23).unwrap();
        // The zero-initialized output convolution blocks every upstream
        // gradient; randomize it so the check exercises the whole network.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        *store.get_mut("irn.post.weight").unwrap() =
            fan_in_uniform(&mut rng, &[13, 13, 3, 3], 13 * 9);
        let (opt, sar) = random_patches(16, 16, 24);
        let err = pipeline_grad_check_with_retry(
            &cfg,
            &store,
            &opt,
            &sar,
            &[1e-4, 1e-5],
            2,
            25,
            1e-4,
            2,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
