//! PNG panel grids: cloudy | SAR | prediction | ground truth, side by side.

use cloudfuse_core::raster::{band, OpticalPatch, SarPatch};
use cloudfuse_core::{Error, Result};
use image::{Rgb, RgbImage};
use std::path::Path;

const GAP: u32 = 4;
/// True-color stretch gain applied to reflectance before 8-bit quantization.
const RGB_GAIN: f32 = 2.5;

pub enum Panel<'a> {
    Optical(&'a OpticalPatch),
    Sar(&'a SarPatch),
}

impl Panel<'_> {
    fn size(&self) -> (u32, u32) {
        match self {
            Panel::Optical(p) => (p.width as u32, p.height as u32),
            Panel::Sar(p) => (p.width as u32, p.height as u32),
        }
    }

    fn pixel(&self, x: u32, y: u32) -> Rgb<u8> {
        let q = |v: f32| (v * RGB_GAIN).clamp(0.0, 1.0) * 255.0;
        match self {
            Panel::Optical(p) => {
                let (x, y) = (x as usize, y as usize);
                Rgb([
                    q(p.at(band::B4, y, x)) as u8,
                    q(p.at(band::B3, y, x)) as u8,
                    q(p.at(band::B2, y, x)) as u8,
                ])
            }
            Panel::Sar(p) => {
                let v = (p.at(0, y as usize, x as usize).clamp(0.0, 1.0) * 255.0) as u8;
                Rgb([v, v, v])
            }
        }
    }
}

/// Render panels left to right with a white separator and write a PNG.
pub fn render_grid(panels: &[Panel], path: &Path) -> Result<()> {
    if panels.is_empty() {
        return Err(Error::Validation("grid: no panels to render".into()));
    }
    let (w, h) = panels[0].size();
    for p in panels {
        if p.size() != (w, h) {
            return Err(Error::Validation("grid: panel sizes differ".into()));
        }
    }
    let total_w = w * panels.len() as u32 + GAP * (panels.len() as u32 - 1);
    let mut img = RgbImage::from_pixel(total_w, h, Rgb([255, 255, 255]));
    for (i, panel) in panels.iter().enumerate() {
        let x0 = i as u32 * (w + GAP);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x0 + x, y, panel.pixel(x, y));
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Validation(format!("grid: cannot write {}: {e}", path.display())))?;
    Ok(())
}
