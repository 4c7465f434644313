//! Synthetic cloudy/clear/SAR triplets for desk-scale training.
//!
//! The clear scene is a smooth band-correlated random field whose blue band
//! stays low enough that the cloud score never crosses the mask threshold.
//! Clouds are additive Gaussian blobs raised in B1, B2, B3, B4, and B10, the
//! bands the detector reads, and blobs are placed until the detector itself
//! reports the requested coverage; generation is tied to the detection
//! formula rather than to a separate label. The SWIR base stays high enough
//! that snow rejection never fires on blob pixels.

use crate::error::{Error, Result};
use crate::mask::{self, CLOUD_THRESHOLD};
use crate::raster::{band, OpticalPatch, PatchTriplet, SarPatch, OPTICAL_BANDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Patch sizes must divide by this tile so every architecture default
/// (reformat scale 2, attention window 8) applies without padding.
pub const SIZE_TILE: usize = 16;

/// Per-band construction of the clear field: `base + amp_a * A + amp_b * B`
/// for two shared smooth fields A and B in [0, 1].
const BAND_MODEL: [(f64, f64, f64); OPTICAL_BANDS] = [
    (0.04, 0.05, 0.02), // B1 coastal aerosol
    (0.05, 0.07, 0.03), // B2 blue; capped low so the clear score stays under threshold
    (0.06, 0.08, 0.03), // B3 green
    (0.06, 0.10, 0.04), // B4 red
    (0.10, 0.10, 0.03), // B5
    (0.11, 0.11, 0.04), // B6
    (0.12, 0.12, 0.04), // B7
    (0.15, 0.05, 0.20), // B8 NIR
    (0.15, 0.05, 0.18), // B8A
    (0.08, 0.06, 0.02), // B9 water vapour
    (0.01, 0.02, 0.00), // B10 cirrus
    (0.22, 0.02, 0.10), // B11 SWIR; high base keeps NDSI below the snow cutoff
    (0.15, 0.03, 0.10), // B12 SWIR
];

/// Additive blob gain per detector band.
const BLOB_GAIN: [(usize, f64); 5] = [
    (band::B1, 0.50),
    (band::B2, 0.60),
    (band::B3, 0.55),
    (band::B4, 0.55),
    (band::B10, 0.35),
];

/// Smooth field in [0, 1]: coarse uniform noise upsampled bilinearly.
fn smooth_field(rng: &mut ChaCha8Rng, height: usize, width: usize, cell: usize) -> Vec<f64> {
    let gh = height / cell + 2;
    let gw = width / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let fy = y as f64 / cell as f64;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = x as f64 / cell as f64;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let v00 = grid[y0 * gw + x0];
            let v01 = grid[y0 * gw + x0 + 1];
            let v10 = grid[(y0 + 1) * gw + x0];
            let v11 = grid[(y0 + 1) * gw + x0 + 1];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out[y * width + x] = top + (bot - top) * ty;
        }
    }
    out
}

fn clear_scene(rng: &mut ChaCha8Rng, height: usize, width: usize) -> OpticalPatch {
    let field_a = smooth_field(rng, height, width, 8);
    let field_b = smooth_field(rng, height, width, 16);
    let mut patch = OpticalPatch::zeros(height, width);
    for (b, &(base, amp_a, amp_b)) in BAND_MODEL.iter().enumerate() {
        for p in 0..height * width {
            let v = base + amp_a * field_a[p] + amp_b * field_b[p];
            patch.bands[b * height * width + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    patch
}

fn add_blob(
    patch: &mut OpticalPatch,
    cy: f64,
    cx: f64,
    radius: f64,
    amplitude: f64,
) {
    let (h, w) = (patch.height, patch.width);
    let sigma = radius / 2.0;
    let reach = (radius * 1.8).ceil() as i64;
    let y0 = ((cy as i64) - reach).max(0);
    let y1 = ((cy as i64) + reach).min(h as i64 - 1);
    let x0 = ((cx as i64) - reach).max(0);
    let x1 = ((cx as i64) + reach).min(w as i64 - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let e = amplitude * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            if e < 1e-4 {
                continue;
            }
            for &(b, gain) in &BLOB_GAIN {
                let idx = (b * h + y as usize) * w + x as usize;
                let v = patch.bands[idx] as f64 + gain * e;
                patch.bands[idx] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

fn sar_scene(rng: &mut ChaCha8Rng, clear: &OpticalPatch) -> SarPatch {
    let (h, w) = (clear.height, clear.width);
    let plane = h * w;
    // Luminance proxy over the visible bands.
    let lum: Vec<f64> = (0..plane)
        .map(|p| {
            (clear.bands[band::B2 * plane + p] as f64
                + clear.bands[band::B3 * plane + p] as f64
                + clear.bands[band::B4 * plane + p] as f64)
                / 3.0
        })
        .collect();
    // Structural channel: normalized gradient magnitude of the luminance.
    let mut gmag = vec![0.0; plane];
    let mut gmax = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let xm = lum[y * w + x.saturating_sub(1)];
            let xp = lum[y * w + (x + 1).min(w - 1)];
            let ym = lum[y.saturating_sub(1) * w + x];
            let yp = lum[(y + 1).min(h - 1) * w + x];
            let gx = (xp - xm) * 0.5;
            let gy = (yp - ym) * 0.5;
            let m = (gx * gx + gy * gy).sqrt();
            gmag[y * w + x] = m;
            gmax = gmax.max(m);
        }
    }
    let scale = if gmax > 0.0 { 1.0 / gmax } else { 0.0 };
    let mut sar = SarPatch::zeros(h, w);
    for p in 0..plane {
        let vv = gmag[p] * scale + rng.gen_range(-0.02..0.02);
        let vh = lum[p] * 4.0 + rng.gen_range(-0.02..0.02);
        sar.channels[p] = vv.clamp(0.0, 1.0) as f32;
        sar.channels[plane + p] = vh.clamp(0.0, 1.0) as f32;
    }
    sar
}

/// Deterministically synthesize one co-registered triplet.
///
/// `cloud_fraction` is the target share of pixels the refined cloud mask
/// should flag on the cloudy member; blobs are added until the detector
/// reports at least that coverage.
pub fn make_synthetic_triplet(
    seed: u64,
    height: usize,
    width: usize,
    cloud_fraction: f64,
) -> Result<PatchTriplet> {
    if !(0.0..=1.0).contains(&cloud_fraction) {
        return Err(Error::Validation(format!(
            "cloud_fraction {cloud_fraction} outside [0, 1]"
        )));
    }
    if height == 0 || width == 0 || height % SIZE_TILE != 0 || width % SIZE_TILE != 0 {
        return Err(Error::Validation(format!(
            "patch size {height}x{width} must be a positive multiple of {SIZE_TILE}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clear = clear_scene(&mut rng, height, width);
    let sar = sar_scene(&mut rng, &clear);

    let mut cloudy = clear.clone();
    if cloud_fraction > 0.0 {
        let pixels = (height * width) as f64;
        let max_radius = (height.min(width) as f64) / 5.0;
        // A blob's detector footprint is roughly 1.67 r^2 (the score crosses
        // the threshold at about 0.73 r from the center).
        for _ in 0..500 {
            let covered = mask::refined_mask(&cloudy, CLOUD_THRESHOLD)?.fraction();
            if covered >= cloud_fraction {
                break;
            }
            let remaining = cloud_fraction - covered;
            let radius = (remaining * pixels / 1.67).sqrt().clamp(2.5, max_radius);
            let cy = rng.gen_range(0.0..height as f64);
            let cx = rng.gen_range(0.0..width as f64);
            let amplitude = rng.gen_range(0.55..0.85);
            add_blob(&mut cloudy, cy, cx, radius, amplitude);
        }
    }

    let id = format!("s{seed:08x}f{:03}", (cloud_fraction * 100.0).round() as u32);
    Ok(PatchTriplet {
        cloudy,
        clear,
        sar,
        id,
    })
}
