//! Cloud probability scoring, binary masking, snow rejection, and loss weights.
//!
//! The score is the minimum of four band ratios, each clamped to [0, 1]
//! before the minimum so the result stays a probability. The binary mask uses
//! a strict `>` threshold; snow rejection keeps mask pixels whose NDSI is at
//! most 0.6 (inclusive).

use crate::error::{Error, Result};
use crate::exec;
use crate::raster::{band, OpticalPatch};
use crate::tensor::Tensor;

/// Default binarization threshold for the cloud score.
pub const CLOUD_THRESHOLD: f64 = 0.2;
/// NDSI cutoff above which a mask pixel is treated as snow and cleared.
pub const NDSI_CUTOFF: f64 = 0.6;
/// Default weight assigned to cloud pixels.
pub const DEFAULT_ALPHA: f64 = 0.8;

/// Per-pixel cloud probability score in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct CloudScoreMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

/// Binary cloud mask; `refined` marks that snow rejection ran.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudMask {
    pub values: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub refined: bool,
}

impl CloudMask {
    /// Fraction of pixels flagged as cloud.
    pub fn fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.values.len() as f64
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

/// Per-pixel training weights taking the value `alpha` on cloud pixels and
/// `1 - alpha` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub alpha: f64,
}

impl WeightMap {
    /// Uniform weights of 1.0, used by the ablation arm.
    pub fn uniform(height: usize, width: usize) -> Self {
        WeightMap {
            values: vec![1.0; height * width],
            height,
            width,
            alpha: f64::NAN,
        }
    }

    /// View as a (1, H, W) tensor for the loss.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.height, self.width], self.values.clone())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

fn require_normalized(opt: &OpticalPatch, op: &str) -> Result<()> {
    if !opt.normalized {
        return Err(Error::Validation(format!(
            "{op}: optical patch is not normalized"
        )));
    }
    if !opt.values_in_unit_range() {
        return Err(Error::Validation(format!(
            "{op}: optical values outside [0, 1]"
        )));
    }
    Ok(())
}

/// Score a single pixel from its B1, B2, B3, B4, B10 reflectances.
#[inline]
pub fn score_pixel(b1: f64, b2: f64, b3: f64, b4: f64, b10: f64) -> f64 {
    let r1 = ((b2 - 0.1) / 0.4).clamp(0.0, 1.0);
    let r2 = ((b1 - 0.1) / 0.2).clamp(0.0, 1.0);
    let r3 = ((b10 + b1 - 0.15) / 0.05).clamp(0.0, 1.0);
    let r4 = ((b4 + b3 + b2 - 0.2) / 0.6).clamp(0.0, 1.0);
    r1.min(r2).min(r3).min(r4)
}

/// Per-pixel cloud probability: the minimum of four clamped band ratios.
pub fn cloud_score(opt: &OpticalPatch) -> Result<CloudScoreMap> {
    require_normalized(opt, "cloud_score")?;
    let (h, w) = (opt.height, opt.width);
    let b1 = opt.band(band::B1);
    let b2 = opt.band(band::B2);
    let b3 = opt.band(band::B3);
    let b4 = opt.band(band::B4);
    let b10 = opt.band(band::B10);
    let values = exec::build_chunks(h, w, |y, row| {
        for x in 0..w {
            let i = y * w + x;
            row[x] = score_pixel(
                b1[i] as f64,
                b2[i] as f64,
                b3[i] as f64,
                b4[i] as f64,
                b10[i] as f64,
            );
        }
    });
    Ok(CloudScoreMap {
        values,
        height: h,
        width: w,
    })
}

/// Threshold the score map: mask is 1 where the score strictly exceeds
/// `threshold`, 0 otherwise.
pub fn binarize(score: &CloudScoreMap, threshold: f64) -> Result<CloudMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Validation(format!(
            "binarize: threshold {threshold} outside [0, 1]"
        )));
    }
    let values = score
        .values
        .iter()
        .map(|&s| u8::from(s > threshold))
        .collect();
    Ok(CloudMask {
        values,
        height: score.height,
        width: score.width,
        refined: false,
    })
}

/// NDSI of a single pixel from its B3 and B11 reflectances; the
/// zero-denominator pixel is defined as 0 (not snow).
#[inline]
pub fn ndsi_pixel(b3: f64, b11: f64) -> f64 {
    let denom = b3 + b11;
    if denom == 0.0 {
        0.0
    } else {
        (b3 - b11) / denom
    }
}

/// Normalized difference snow index, `(B3 - B11) / (B3 + B11)`, with the
/// zero-denominator pixel defined as 0 (not snow).
pub fn ndsi(opt: &OpticalPatch) -> Result<Vec<f64>> {
    require_normalized(opt, "ndsi")?;
    let b3 = opt.band(band::B3);
    let b11 = opt.band(band::B11);
    Ok(b3
        .iter()
        .zip(b11.iter())
        .map(|(&g, &s)| ndsi_pixel(g as f64, s as f64))
        .collect())
}

/// Clear mask pixels whose NDSI exceeds the snow cutoff (strictly above 0.6).
pub fn refine_mask(mask: &CloudMask, ndsi_map: &[f64]) -> Result<CloudMask> {
    if ndsi_map.len() != mask.values.len() {
        return Err(Error::Validation(format!(
            "refine_mask: mask has {} pixels, ndsi map has {}",
            mask.values.len(),
            ndsi_map.len()
        )));
    }
    let values = mask
        .values
        .iter()
        .zip(ndsi_map.iter())
        .map(|(&m, &n)| if n <= NDSI_CUTOFF { m } else { 0 })
        .collect();
    Ok(CloudMask {
        values,
        height: mask.height,
        width: mask.width,
        refined: true,
    })
}

/// Adaptive loss weights: `alpha` on mask pixels, `1 - alpha` elsewhere.
pub fn weight_map(mask: &CloudMask, alpha: f64) -> Result<WeightMap> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!(
            "weight_map: alpha {alpha} outside [0, 1]"
        )));
    }
    let values = mask
        .values
        .iter()
        .map(|&m| if m == 1 { alpha } else { 1.0 - alpha })
        .collect();
    Ok(WeightMap {
        values,
        height: mask.height,
        width: mask.width,
        alpha,
    })
}

/// Full detection chain: score, threshold, snow rejection.
pub fn refined_mask(opt: &OpticalPatch, threshold: f64) -> Result<CloudMask> {
    let score = cloud_score(opt)?;
    let mask = binarize(&score, threshold)?;
    let ndsi_map = ndsi(opt)?;
    refine_mask(&mask, &ndsi_map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One-pixel patch with the named bands set explicitly.
    fn pixel_patch(assign: &[(usize, f32)]) -> OpticalPatch {
        let mut p = OpticalPatch::zeros(1, 1);
        for &(b, v) in assign {
            p.set(b, 0, 0, v);
        }
        p
    }

    fn random_patch(seed: u64, h: usize, w: usize) -> OpticalPatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = OpticalPatch::zeros(h, w);
        for v in p.bands.iter_mut() {
            *v = rng.gen_range(0.0..=1.0);
        }
        p
    }

    #[test]
    fn score_saturates_at_one() {
        // All four ratios at or above 1 before clamping.
        let s = score_pixel(0.3, 0.5, 0.4, 0.4, 0.2);
        assert!((s - 1.0).abs() < 1e-12, "score {s}");
        // The patch path agrees with the scalar path up to f32 quantization.
        let p = pixel_patch(&[
            (band::B1, 0.3),
            (band::B2, 0.5),
            (band::B3, 0.4),
            (band::B4, 0.4),
            (band::B10, 0.2),
        ]);
        let m = cloud_score(&p).unwrap();
        assert!((m.values[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn score_zero_when_all_bands_at_point_one() {
        // (0.1 - 0.1) / 0.4 is exactly zero, and the min preserves it.
        assert_eq!(score_pixel(0.1, 0.1, 0.1, 0.1, 0.1), 0.0);
    }

    #[test]
    fn score_min_dominated_by_blue_ratio() {
        assert_eq!(score_pixel(0.4, 0.1, 0.5, 0.5, 0.3), 0.0);
    }

    #[test]
    fn cloud_score_rejects_unnormalized_values() {
        let mut p = OpticalPatch::zeros(1, 1);
        p.set(band::B2, 0, 0, 1.5);
        assert!(matches!(cloud_score(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn binarize_is_strict() {
        let score = CloudScoreMap {
            values: vec![0.25, 0.2, 0.0],
            height: 1,
            width: 3,
        };
        let m = binarize(&score, CLOUD_THRESHOLD).unwrap();
        assert_eq!(m.values, vec![1, 0, 0]);
    }

    #[test]
    fn binarize_rejects_bad_threshold() {
        let score = CloudScoreMap {
            values: vec![0.5],
            height: 1,
            width: 1,
        };
        assert!(matches!(binarize(&score, 1.5), Err(Error::Validation(_))));
        assert!(matches!(binarize(&score, -0.1), Err(Error::Validation(_))));
    }

    #[test]
    fn ndsi_symmetry_and_degenerate_cases() {
        // Equal bands cancel exactly; the zero denominator is defined as 0.
        assert_eq!(ndsi_pixel(0.4, 0.4), 0.0);
        assert_eq!(ndsi_pixel(0.0, 0.0), 0.0);
        assert!((ndsi_pixel(0.9, 0.1) - 0.8).abs() < 1e-12);

        // Patch path agrees up to f32 quantization.
        let p = pixel_patch(&[(band::B3, 0.9), (band::B11, 0.1)]);
        assert!((ndsi(&p).unwrap()[0] - 0.8).abs() < 1e-6);
        let p = pixel_patch(&[(band::B3, 0.4), (band::B11, 0.4)]);
        assert_eq!(ndsi(&p).unwrap()[0], 0.0);
    }

    #[test]
    fn refine_cutoff_is_inclusive() {
        let mask = CloudMask {
            values: vec![1, 1, 0],
            height: 1,
            width: 3,
            refined: false,
        };
        let refined = refine_mask(&mask, &[0.8, 0.6, 0.9]).unwrap();
        assert_eq!(refined.values, vec![0, 1, 0]);
        assert!(refined.refined);
    }

    #[test]
    fn weight_map_values() {
        let mask = CloudMask {
            values: vec![1, 0],
            height: 1,
            width: 2,
            refined: true,
        };
        let w = weight_map(&mask, 0.8).unwrap();
        assert_eq!(w.values, vec![0.8, 0.19999999999999996]);
        assert_eq!(w.values[1], 1.0 - 0.8);

        let w = weight_map(&mask, 0.5).unwrap();
        assert!(w.values.iter().all(|&v| v == 0.5));

        assert!(matches!(weight_map(&mask, 1.2), Err(Error::Validation(_))));
    }

    #[test]
    fn score_matches_scalar_loop_oracle_exactly() {
        for seed in 0..5 {
            let p = random_patch(seed, 32, 32);
            let s = cloud_score(&p).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let b1 = p.at(band::B1, y, x) as f64;
                    let b2 = p.at(band::B2, y, x) as f64;
                    let b3 = p.at(band::B3, y, x) as f64;
                    let b4 = p.at(band::B4, y, x) as f64;
                    let b10 = p.at(band::B10, y, x) as f64;
                    let r1 = ((b2 - 0.1) / 0.4).clamp(0.0, 1.0);
                    let r2 = ((b1 - 0.1) / 0.2).clamp(0.0, 1.0);
                    let r3 = ((b10 + b1 - 0.15) / 0.05).clamp(0.0, 1.0);
                    let r4 = ((b4 + b3 + b2 - 0.2) / 0.6).clamp(0.0, 1.0);
                    let expect = r1.min(r2).min(r3).min(r4);
                    assert_eq!(s.values[y * 32 + x], expect);
                }
            }
        }
    }

    proptest! {
        /// Raising any of the five driving bands never lowers the score.
        #[test]
        fn score_is_monotone_in_driving_bands(
            base in proptest::collection::vec(0.0f32..0.9, 5),
            bump in 0.0f32..0.1,
            which in 0usize..5,
        ) {
            let bands = [band::B1, band::B2, band::B3, band::B4, band::B10];
            let assigns: Vec<(usize, f32)> =
                bands.iter().zip(base.iter()).map(|(&b, &v)| (b, v)).collect();
            let p = pixel_patch(&assigns);
            let lo = cloud_score(&p).unwrap().values[0];
            let mut bumped = assigns.clone();
            bumped[which].1 += bump;
            let p = pixel_patch(&bumped);
            let hi = cloud_score(&p).unwrap().values[0];
            prop_assert!(hi >= lo);
        }

        /// The mask is binary and refinement never sets a zero pixel.
        #[test]
        fn refinement_never_adds_pixels(seed in 0u64..50) {
            let p = random_patch(seed, 8, 8);
            let m = binarize(&cloud_score(&p).unwrap(), CLOUD_THRESHOLD).unwrap();
            let r = refine_mask(&m, &ndsi(&p).unwrap()).unwrap();
            for (a, b) in m.values.iter().zip(r.values.iter()) {
                prop_assert!(*a <= 1 && *b <= 1);
                prop_assert!(b <= a);
            }
        }

        /// Weights take exactly two values and their sum decomposes by count.
        #[test]
        fn weights_take_two_values(seed in 0u64..50, alpha in 0.0f64..=1.0) {
            let p = random_patch(seed, 8, 8);
            let m = refined_mask(&p, CLOUD_THRESHOLD).unwrap();
            let w = weight_map(&m, alpha).unwrap();
            for v in &w.values {
                prop_assert!(*v == alpha || *v == 1.0 - alpha);
            }
            let cloud = m.count() as f64;
            let clear = (m.values.len() - m.count()) as f64;
            let total: f64 = w.values.iter().sum();
            prop_assert!((total - (alpha * cloud + (1.0 - alpha) * clear)).abs() < 1e-9);
        }
    }
}
