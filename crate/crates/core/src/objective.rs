//! Per-pixel MSE and SSIM maps and the cloud-weighted training objective.
//!
//! The objective is a per-pixel weighted sum: `W * (l1 * MSE + l2 * (1 - SSIM))`,
//! averaged over pixels. SSIM uses the local Gaussian-window form computed per
//! band and averaged across bands, so the weight map can act pixel-wise; the
//! SSIM term enters as `1 - SSIM` to keep the objective a minimization.

use crate::autodiff::{gaussian_kernel, Graph, NodeId};
use crate::error::{Error, Result};
use crate::mask::WeightMap;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the per-pixel MSE term.
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    /// Weight of the per-pixel (1 - SSIM) term.
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    /// Gaussian window size for local SSIM statistics.
    #[serde(default = "default_ssim_window")]
    pub ssim_window: usize,
    /// Gaussian window sigma.
    #[serde(default = "default_ssim_sigma")]
    pub ssim_sigma: f64,
    /// Dynamic range of the imagery; reflectance in [0, 1] uses 1.0.
    #[serde(default = "default_dynamic_range")]
    pub dynamic_range: f64,
}

fn default_lambda() -> f64 {
    0.5
}
fn default_ssim_window() -> usize {
    11
}
fn default_ssim_sigma() -> f64 {
    1.5
}
fn default_dynamic_range() -> f64 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: default_lambda(),
            lambda2: default_lambda(),
            ssim_window: default_ssim_window(),
            ssim_sigma: default_ssim_sigma(),
            dynamic_range: default_dynamic_range(),
        }
    }
}

impl LossConfig {
    pub fn c1(&self) -> f64 {
        (0.01 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (0.03 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Validation("loss weights must be nonnegative".into()));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(Error::Validation(
                "at least one of lambda1, lambda2 must be positive".into(),
            ));
        }
        if self.ssim_window % 2 == 0 || self.ssim_window == 0 {
            return Err(Error::Validation(format!(
                "ssim_window must be odd and positive, got {}",
                self.ssim_window
            )));
        }
        if self.ssim_sigma <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(Error::Validation(
                "ssim_sigma and dynamic_range must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Per-pixel squared error, averaged over bands: (C, H, W) -> (1, H, W).
pub fn mse_map_node(g: &mut Graph, pred: NodeId, gt: NodeId) -> Result<NodeId> {
    check_same_shape(g.value(pred), g.value(gt), "mse_map")?;
    g.value(pred).chw()?;
    let d = g.sub(pred, gt);
    let sq = g.mul(d, d);
    Ok(g.channel_mean(sq))
}

/// Per-pixel local SSIM, computed per band with a Gaussian window and
/// averaged over bands: (C, H, W) -> (1, H, W). Symmetric padding keeps the
/// output the same size as the input.
pub fn ssim_map_node(g: &mut Graph, x: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    check_same_shape(g.value(x), g.value(y), "ssim_map")?;
    g.value(x).chw()?;
    let kernel = gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma);
    let (c1, c2) = (cfg.c1(), cfg.c2());

    let mu_x = g.gaussian_blur(x, kernel.clone());
    let mu_y = g.gaussian_blur(y, kernel.clone());
    let mu_x2 = g.mul(mu_x, mu_x);
    let mu_y2 = g.mul(mu_y, mu_y);
    let mu_xy = g.mul(mu_x, mu_y);

    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let exx = g.gaussian_blur(xx, kernel.clone());
    let eyy = g.gaussian_blur(yy, kernel.clone());
    let exy = g.gaussian_blur(xy, kernel);
    let sigma_x = g.sub(exx, mu_x2);
    let sigma_y = g.sub(eyy, mu_y2);
    let sigma_xy = g.sub(exy, mu_xy);

    let lum = {
        let t = g.scale(mu_xy, 2.0);
        g.add_scalar(t, c1)
    };
    let con = {
        let t = g.scale(sigma_xy, 2.0);
        g.add_scalar(t, c2)
    };
    let num = g.mul(lum, con);
    let den_l = {
        let t = g.add(mu_x2, mu_y2);
        g.add_scalar(t, c1)
    };
    let den_c = {
        let t = g.add(sigma_x, sigma_y);
        g.add_scalar(t, c2)
    };
    let den = g.mul(den_l, den_c);
    let ssim = g.div(num, den);
    Ok(g.channel_mean(ssim))
}

/// The training objective: mean over pixels of
/// `W * (lambda1 * MSE + lambda2 * (1 - SSIM))`.
pub fn loss_node(
    g: &mut Graph,
    pred: NodeId,
    gt: NodeId,
    weights: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let (_, h, w) = g.value(pred).chw()?;
    if g.value(weights).shape() != [1, h, w] {
        return Err(Error::Shape(format!(
            "loss: weight map must be (1, {h}, {w}), got {:?}",
            g.value(weights).shape()
        )));
    }
    if g.value(weights).data().iter().all(|&v| v == 0.0) {
        log::warn!("loss: weight map is identically zero; the objective is degenerate");
    }
    let m = mse_map_node(g, pred, gt)?;
    let s = ssim_map_node(g, pred, gt, cfg)?;
    let neg_s = g.scale(s, -1.0);
    let one_minus_s = g.add_scalar(neg_s, 1.0);
    let m_term = g.scale(m, cfg.lambda1);
    let s_term = g.scale(one_minus_s, cfg.lambda2);
    let combined = g.add(m_term, s_term);
    let weighted = g.mul(combined, weights);
    Ok(g.mean_all(weighted))
}

// ---------------------------------------------------------------------------
// Pure wrappers
// ---------------------------------------------------------------------------

/// Per-pixel MSE map of two (C, H, W) tensors.
pub fn mse_map(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let m = mse_map_node(&mut g, p, t)?;
    Ok(g.value(m).clone())
}

/// Per-pixel SSIM map of two (C, H, W) tensors.
pub fn ssim_map(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let m = ssim_map_node(&mut g, p, t, cfg)?;
    Ok(g.value(m).clone())
}

/// Scalar cloud-weighted loss of a prediction against ground truth.
pub fn cloud_aware_loss(
    pred: &Tensor,
    gt: &Tensor,
    weights: &WeightMap,
    cfg: &LossConfig,
) -> Result<f64> {
    let (_, h, w) = pred.chw()?;
    if weights.height != h || weights.width != w {
        return Err(Error::Shape(format!(
            "loss: weight map is {}x{}, prediction is {h}x{w}",
            weights.height, weights.width
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let wt = g.constant(weights.to_tensor());
    let l = loss_node(&mut g, p, t, wt, cfg)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::CloudMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    fn uniform_weights(h: usize, w: usize) -> WeightMap {
        WeightMap::uniform(h, w)
    }

    #[test]
    fn mse_map_identities() {
        let gt = rand_tensor(&[13, 4, 4], 1, 0.0, 1.0);
        let m = mse_map(&gt, &gt).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));

        // Uniform offset of 0.1 on every band: 0.01 per pixel.
        let mut pred = gt.clone();
        for v in pred.data_mut() {
            *v += 0.1;
        }
        let m = mse_map(&pred, &gt).unwrap();
        for &v in m.data() {
            assert!((v - 0.01).abs() < 1e-12, "{v}");
        }

        // A single-band error of e at one pixel contributes e^2 / 13 there.
        let mut pred = gt.clone();
        let e = 0.37;
        pred.set3(5, 2, 1, gt.at3(5, 2, 1) + e);
        let m = mse_map(&pred, &gt).unwrap();
        assert!((m.at3(0, 2, 1) - e * e / 13.0).abs() < 1e-12);
        assert_eq!(m.at3(0, 0, 0), 0.0);
    }

    #[test]
    fn ssim_map_identity_is_one() {
        let gt = rand_tensor(&[3, 8, 8], 2, 0.0, 1.0);
        let cfg = LossConfig::default();
        let s = ssim_map(&gt, &gt, &cfg).unwrap();
        for &v in s.data() {
            assert!((v - 1.0).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn ssim_map_is_symmetric() {
        let a = rand_tensor(&[3, 8, 8], 3, 0.0, 1.0);
        let b = rand_tensor(&[3, 8, 8], 4, 0.0, 1.0);
        let cfg = LossConfig::default();
        let sab = ssim_map(&a, &b, &cfg).unwrap();
        let sba = ssim_map(&b, &a, &cfg).unwrap();
        for (x, y) in sab.data().iter().zip(sba.data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn ssim_drops_toward_zero_under_heavy_noise() {
        let gt = Tensor::filled(&[13, 16, 16], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pred = gt.clone();
        for v in pred.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
        let cfg = LossConfig::default();
        let s = ssim_map(&pred, &gt, &cfg).unwrap();
        let mean = s.sum() / s.elems() as f64;
        assert!(mean < 0.2, "mean ssim {mean}");
    }

    #[test]
    fn loss_is_zero_for_perfect_prediction() {
        let gt = rand_tensor(&[13, 8, 8], 6, 0.0, 1.0);
        let w = uniform_weights(8, 8);
        let cfg = LossConfig::default();
        let l = cloud_aware_loss(&gt, &gt, &w, &cfg).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn loss_reduces_to_plain_mse() {
        let gt = rand_tensor(&[13, 8, 8], 7, 0.0, 1.0);
        let pred = rand_tensor(&[13, 8, 8], 8, 0.0, 1.0);
        let w = uniform_weights(8, 8);
        let cfg = LossConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let l = cloud_aware_loss(&pred, &gt, &w, &cfg).unwrap();
        let direct: f64 = pred
            .data()
            .iter()
            .zip(gt.data().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / pred.elems() as f64;
        assert!((l - direct).abs() < 1e-12, "{l} vs {direct}");
    }

    #[test]
    fn loss_matches_brute_force_oracle() {
        // Fully independent reimplementation: direct 2D Gaussian windows with
        // symmetric padding, explicit per-pixel loops.
        let h = 16;
        let w = 16;
        let c = 13;
        let gt = rand_tensor(&[c, h, w], 9, 0.0, 1.0);
        let pred = rand_tensor(&[c, h, w], 10, 0.0, 1.0);
        let mut wm = uniform_weights(h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in wm.values.iter_mut() {
            *v = rng.gen_range(0.1..1.0);
        }
        let cfg = LossConfig::default();
        let got = cloud_aware_loss(&pred, &gt, &wm, &cfg).unwrap();

        let fold = |i: i64, n: i64| -> usize {
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i - 1;
                } else if i >= n {
                    i = 2 * n - i - 1;
                } else {
                    return i as usize;
                }
            }
        };
        let win = cfg.ssim_window;
        let r = (win / 2) as i64;
        let k1: Vec<f64> = {
            let mut k: Vec<f64> = (0..win)
                .map(|i| {
                    let d = i as f64 - (win / 2) as f64;
                    (-d * d / (2.0 * cfg.ssim_sigma * cfg.ssim_sigma)).exp()
                })
                .collect();
            let t: f64 = k.iter().sum();
            k.iter_mut().for_each(|v| *v /= t);
            k
        };
        let (c1, c2) = (cfg.c1(), cfg.c2());
        let at = |t: &Tensor, ch: usize, y: i64, x: i64| -> f64 {
            t.at3(ch, fold(y, h as i64), fold(x, w as i64))
        };

        let mut total = 0.0;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut mse_px = 0.0;
                let mut ssim_px = 0.0;
                for ch in 0..c {
                    let d = pred.at3(ch, y as usize, x as usize) - gt.at3(ch, y as usize, x as usize);
                    mse_px += d * d;

                    let (mut mx, mut my, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..win as i64 {
                        for j in 0..win as i64 {
                            let wgt = k1[i as usize] * k1[j as usize];
                            let xv = at(&pred, ch, y + i - r, x + j - r);
                            let yv = at(&gt, ch, y + i - r, x + j - r);
                            mx += wgt * xv;
                            my += wgt * yv;
                            exx += wgt * xv * xv;
                            eyy += wgt * yv * yv;
                            exy += wgt * xv * yv;
                        }
                    }
                    let sx = exx - mx * mx;
                    let sy = eyy - my * my;
                    let sxy = exy - mx * my;
                    let num = (2.0 * mx * my + c1) * (2.0 * sxy + c2);
                    let den = (mx * mx + my * my + c1) * (sx + sy + c2);
                    ssim_px += num / den;
                }
                mse_px /= c as f64;
                ssim_px /= c as f64;
                let wgt = wm.values[y as usize * w + x as usize];
                total += wgt * (cfg.lambda1 * mse_px + cfg.lambda2 * (1.0 - ssim_px));
            }
        }
        total /= (h * w) as f64;
        assert!((got - total).abs() < 1e-6, "{got} vs {total}");
    }

    #[test]
    fn loss_scales_linearly_with_weights() {
        let gt = rand_tensor(&[13, 8, 8], 12, 0.0, 1.0);
        let pred = rand_tensor(&[13, 8, 8], 13, 0.0, 1.0);
        let cfg = LossConfig::default();
        let w1 = uniform_weights(8, 8);
        let mut w3 = uniform_weights(8, 8);
        for v in w3.values.iter_mut() {
            *v = 3.0;
        }
        let l1 = cloud_aware_loss(&pred, &gt, &w1, &cfg).unwrap();
        let l3 = cloud_aware_loss(&pred, &gt, &w3, &cfg).unwrap();
        assert!((l3 - 3.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn raising_alpha_increases_masked_loss_share() {
        let gt = Tensor::filled(&[13, 8, 8], 0.4);
        let mut pred = gt.clone();
        // Error only inside the masked half.
        for y in 0..8 {
            for x in 0..4 {
                for ch in 0..13 {
                    pred.set3(ch, y, x, 0.8);
                }
            }
        }
        let mask = CloudMask {
            values: (0..64).map(|i| u8::from(i % 8 < 4)).collect(),
            height: 8,
            width: 8,
            refined: true,
        };
        let cfg = LossConfig::default();
        let w_low = crate::mask::weight_map(&mask, 0.6).unwrap();
        let w_high = crate::mask::weight_map(&mask, 0.9).unwrap();
        let l_low = cloud_aware_loss(&pred, &gt, &w_low, &cfg).unwrap();
        let l_high = cloud_aware_loss(&pred, &gt, &w_high, &cfg).unwrap();
        assert!(l_high > l_low);
    }

    #[test]
    fn loss_rejects_bad_configs_and_shapes() {
        let t = Tensor::zeros(&[13, 8, 8]);
        let w = uniform_weights(8, 8);
        let bad = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        assert!(cloud_aware_loss(&t, &t, &w, &bad).is_err());
        let w_bad = uniform_weights(4, 4);
        assert!(matches!(
            cloud_aware_loss(&t, &t, &w_bad, &LossConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let gt = rand_tensor(&[3, 8, 8], 14, 0.0, 1.0);
        let pred0 = rand_tensor(&[3, 8, 8], 15, 0.0, 1.0);
        let wm = uniform_weights(8, 8);
        let cfg = LossConfig {
            ssim_window: 5,
            ..Default::default()
        };
        let err = crate::blocks::grad_check(
            |g, ids| {
                let t = g.constant(gt.clone());
                let w = g.constant(wm.to_tensor());
                loss_node(g, ids[0], t, w, &cfg)
            },
            &[pred0],
            1e-5,
            96,
            16,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn loss_is_nonnegative_on_random_pairs() {
        for seed in 0..10 {
            let gt = rand_tensor(&[13, 8, 8], 100 + seed, 0.0, 1.0);
            let pred = rand_tensor(&[13, 8, 8], 200 + seed, 0.0, 1.0);
            let w = uniform_weights(8, 8);
            let l = cloud_aware_loss(&pred, &gt, &w, &LossConfig::default()).unwrap();
            assert!(l >= -1e-12, "loss {l}");
            assert!(l > 0.0, "distinct tensors must have positive loss");
        }
    }
}
