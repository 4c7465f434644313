//! Co-registered SAR/optical patch types, normalization, and binary patch I/O.
//!
//! On-disk format: a 16-byte magic block containing `CLFUSEv1` (zero padded),
//! then a little-endian header `{kind: u8, channels: u16, height: u32,
//! width: u32, normalized: u8}`, then `channels * height * width` f32 values,
//! little endian, row major (channel-major planes).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const OPTICAL_BANDS: usize = 13;
pub const SAR_CHANNELS: usize = 2;

pub const BAND_NAMES: [&str; OPTICAL_BANDS] = [
    "B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12",
];
pub const SAR_CHANNEL_NAMES: [&str; SAR_CHANNELS] = ["VV", "VH"];

/// Band indices into [`OpticalPatch::bands`]. B8A sits between B8 and B9.
pub mod band {
    pub const B1: usize = 0;
    pub const B2: usize = 1;
    pub const B3: usize = 2;
    pub const B4: usize = 3;
    pub const B5: usize = 4;
    pub const B6: usize = 5;
    pub const B7: usize = 6;
    pub const B8: usize = 7;
    pub const B8A: usize = 8;
    pub const B9: usize = 9;
    pub const B10: usize = 10;
    pub const B11: usize = 11;
    pub const B12: usize = 12;
}

/// Digital-number scale for top-of-atmosphere reflectance.
pub const DN_SCALE: f64 = 10000.0;
/// Backscatter clip range for the VV channel, in dB.
pub const VV_DB_MIN: f64 = -25.0;
/// Backscatter clip range for the VH channel, in dB.
pub const VH_DB_MIN: f64 = -32.5;

/// Magic block at the start of every patch file.
pub const MAGIC: [u8; 16] = *b"CLFUSEv1\0\0\0\0\0\0\0\0";

const HEADER_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchKind {
    Optical = 0,
    Sar = 1,
    /// Single-channel map (cloud mask, weight map, score map).
    Map = 2,
}

impl PatchKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(PatchKind::Optical),
            1 => Ok(PatchKind::Sar),
            2 => Ok(PatchKind::Map),
            other => Err(Error::Format(format!("unknown patch kind byte {other}"))),
        }
    }

    /// Channel count this kind requires, if fixed.
    fn expected_channels(self) -> Option<usize> {
        match self {
            PatchKind::Optical => Some(OPTICAL_BANDS),
            PatchKind::Sar => Some(SAR_CHANNELS),
            PatchKind::Map => Some(1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PatchKind::Optical => "optical",
            PatchKind::Sar => "sar",
            PatchKind::Map => "map",
        }
    }
}

/// 13-band top-of-atmosphere reflectance patch, values in [0, 1] when normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalPatch {
    /// Channel-major planes: `bands[(b * height + y) * width + x]`.
    pub bands: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub normalized: bool,
}

impl OpticalPatch {
    pub fn zeros(height: usize, width: usize) -> Self {
        OpticalPatch {
            bands: vec![0.0; OPTICAL_BANDS * height * width],
            height,
            width,
            normalized: true,
        }
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.bands[b * plane..(b + 1) * plane]
    }

    pub fn at(&self, b: usize, y: usize, x: usize) -> f32 {
        self.bands[(b * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, b: usize, y: usize, x: usize, v: f32) {
        self.bands[(b * self.height + y) * self.width + x] = v;
    }

    /// Promote to a (13, H, W) f64 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[OPTICAL_BANDS, self.height, self.width],
            self.bands.iter().map(|&v| v as f64).collect(),
        )
    }

    /// All values finite and inside [0, 1].
    pub fn values_in_unit_range(&self) -> bool {
        self.bands.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

/// 2-channel normalized SAR backscatter patch (VV, VH), values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SarPatch {
    /// Channel-major planes: `channels[(c * height + y) * width + x]`.
    pub channels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub normalized: bool,
}

impl SarPatch {
    pub fn zeros(height: usize, width: usize) -> Self {
        SarPatch {
            channels: vec![0.0; SAR_CHANNELS * height * width],
            height,
            width,
            normalized: true,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.channels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.channels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[SAR_CHANNELS, self.height, self.width],
            self.channels.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn values_in_unit_range(&self) -> bool {
        self.channels
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

/// A cloudy/clear/SAR training triple sharing one footprint.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTriplet {
    pub cloudy: OpticalPatch,
    pub clear: OpticalPatch,
    pub sar: SarPatch,
    pub id: String,
}

impl PatchTriplet {
    pub fn height(&self) -> usize {
        self.cloudy.height
    }

    pub fn width(&self) -> usize {
        self.cloudy.width
    }
}

/// Raw decoded patch file, before kind-specific validation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPatch {
    pub kind: PatchKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub normalized: bool,
    pub data: Vec<f32>,
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Scale raw digital numbers to reflectance: `dn / 10000`, clipped to [0, 1].
///
/// `raw` is channel-major, 13 * height * width values.
pub fn normalize_optical(raw: &[i64], height: usize, width: usize) -> Result<OpticalPatch> {
    let want = OPTICAL_BANDS * height * width;
    if raw.len() != want {
        return Err(Error::Validation(format!(
            "normalize_optical: expected {want} values, got {}",
            raw.len()
        )));
    }
    if let Some(v) = raw.iter().find(|&&v| v < 0) {
        return Err(Error::Validation(format!(
            "normalize_optical: negative digital number {v}"
        )));
    }
    let bands = raw
        .iter()
        .map(|&dn| ((dn as f64 / DN_SCALE).clamp(0.0, 1.0)) as f32)
        .collect();
    Ok(OpticalPatch {
        bands,
        height,
        width,
        normalized: true,
    })
}

/// Map backscatter in dB to [0, 1]: VV clipped to [-25, 0], VH to [-32.5, 0],
/// then scaled affinely.
///
/// `raw_db` is channel-major (VV plane then VH plane), 2 * height * width values.
pub fn normalize_sar(raw_db: &[f64], height: usize, width: usize) -> Result<SarPatch> {
    let plane = height * width;
    let want = SAR_CHANNELS * plane;
    if raw_db.len() != want {
        return Err(Error::Validation(format!(
            "normalize_sar: expected {want} values, got {}",
            raw_db.len()
        )));
    }
    if raw_db.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "normalize_sar: non-finite backscatter value".into(),
        ));
    }
    let mut channels = vec![0.0f32; want];
    for (i, &db) in raw_db.iter().enumerate() {
        let lo = if i < plane { VV_DB_MIN } else { VH_DB_MIN };
        let clipped = db.clamp(lo, 0.0);
        channels[i] = ((clipped - lo) / -lo) as f32;
    }
    Ok(SarPatch {
        channels,
        height,
        width,
        normalized: true,
    })
}

// ---------------------------------------------------------------------------
// Binary I/O
// ---------------------------------------------------------------------------

fn encode(patch: &RawPatch) -> Result<Vec<u8>> {
    if patch.channels > u16::MAX as usize {
        return Err(Error::Validation(format!(
            "channel count {} exceeds format limit",
            patch.channels
        )));
    }
    let payload = patch.channels * patch.height * patch.width;
    if patch.data.len() != payload {
        return Err(Error::Shape(format!(
            "patch data has {} values, header wants {payload}",
            patch.data.len()
        )));
    }
    let mut out = Vec::with_capacity(MAGIC.len() + HEADER_LEN + payload * 4);
    out.extend_from_slice(&MAGIC);
    out.push(patch.kind as u8);
    out.extend_from_slice(&(patch.channels as u16).to_le_bytes());
    out.extend_from_slice(&(patch.height as u32).to_le_bytes());
    out.extend_from_slice(&(patch.width as u32).to_le_bytes());
    out.push(u8::from(patch.normalized));
    for v in &patch.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode(bytes: &[u8], source: &str) -> Result<RawPatch> {
    if bytes.len() < MAGIC.len() + HEADER_LEN {
        return Err(Error::Format(format!("{source}: file shorter than header")));
    }
    if bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(format!("{source}: bad magic")));
    }
    let h = &bytes[MAGIC.len()..MAGIC.len() + HEADER_LEN];
    let kind = PatchKind::from_byte(h[0]).map_err(|_| {
        Error::Format(format!("{source}: unknown patch kind byte {}", h[0]))
    })?;
    let channels = u16::from_le_bytes([h[1], h[2]]) as usize;
    let height = u32::from_le_bytes([h[3], h[4], h[5], h[6]]) as usize;
    let width = u32::from_le_bytes([h[7], h[8], h[9], h[10]]) as usize;
    let normalized = match h[11] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format(format!(
                "{source}: bad normalized flag {other}"
            )))
        }
    };
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::Format(format!(
            "{source}: zero-sized patch {channels}x{height}x{width}"
        )));
    }
    if let Some(want) = kind.expected_channels() {
        if channels != want {
            return Err(Error::Corruption(format!(
                "{source}: kind {} requires {want} channels, header says {channels}",
                kind.name()
            )));
        }
    }
    let payload = channels * height * width;
    let body = &bytes[MAGIC.len() + HEADER_LEN..];
    if body.len() != payload * 4 {
        return Err(Error::Corruption(format!(
            "{source}: payload holds {} bytes, header wants {}",
            body.len(),
            payload * 4
        )));
    }
    let mut data = vec![0.0f32; payload];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    Ok(RawPatch {
        kind,
        channels,
        height,
        width,
        normalized,
        data,
    })
}

pub fn save_raw(path: &Path, patch: &RawPatch) -> Result<()> {
    let bytes = encode(patch)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<RawPatch> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes, &path.display().to_string())
}

pub fn save_optical(path: &Path, patch: &OpticalPatch) -> Result<()> {
    save_raw(
        path,
        &RawPatch {
            kind: PatchKind::Optical,
            channels: OPTICAL_BANDS,
            height: patch.height,
            width: patch.width,
            normalized: patch.normalized,
            data: patch.bands.clone(),
        },
    )
}

pub fn save_sar(path: &Path, patch: &SarPatch) -> Result<()> {
    save_raw(
        path,
        &RawPatch {
            kind: PatchKind::Sar,
            channels: SAR_CHANNELS,
            height: patch.height,
            width: patch.width,
            normalized: patch.normalized,
            data: patch.channels.clone(),
        },
    )
}

/// Save a single-channel map (mask, weights, scores) in the patch format.
pub fn save_map(path: &Path, values: &[f32], height: usize, width: usize) -> Result<()> {
    save_raw(
        path,
        &RawPatch {
            kind: PatchKind::Map,
            channels: 1,
            height,
            width,
            normalized: true,
            data: values.to_vec(),
        },
    )
}

pub fn load_optical(path: &Path) -> Result<OpticalPatch> {
    let raw = load_raw(path)?;
    if raw.kind != PatchKind::Optical {
        return Err(Error::Validation(format!(
            "{}: expected optical patch, file holds {}",
            path.display(),
            raw.kind.name()
        )));
    }
    Ok(OpticalPatch {
        bands: raw.data,
        height: raw.height,
        width: raw.width,
        normalized: raw.normalized,
    })
}

pub fn load_sar(path: &Path) -> Result<SarPatch> {
    let raw = load_raw(path)?;
    if raw.kind != PatchKind::Sar {
        return Err(Error::Validation(format!(
            "{}: expected sar patch, file holds {}",
            path.display(),
            raw.kind.name()
        )));
    }
    Ok(SarPatch {
        channels: raw.data,
        height: raw.height,
        width: raw.width,
        normalized: raw.normalized,
    })
}

// ---------------------------------------------------------------------------
// Triplet directory layout
// ---------------------------------------------------------------------------

const CLOUDY_SUFFIX: &str = ".cloudy.bin";
const CLEAR_SUFFIX: &str = ".clear.bin";
const SAR_SUFFIX: &str = ".sar.bin";

pub fn save_triplet(dir: &Path, triplet: &PatchTriplet) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_optical(&dir.join(format!("{}{CLOUDY_SUFFIX}", triplet.id)), &triplet.cloudy)?;
    save_optical(&dir.join(format!("{}{CLEAR_SUFFIX}", triplet.id)), &triplet.clear)?;
    save_sar(&dir.join(format!("{}{SAR_SUFFIX}", triplet.id)), &triplet.sar)?;
    Ok(())
}

pub fn load_triplet(dir: &Path, id: &str) -> Result<PatchTriplet> {
    let cloudy = load_optical(&dir.join(format!("{id}{CLOUDY_SUFFIX}")))?;
    let clear = load_optical(&dir.join(format!("{id}{CLEAR_SUFFIX}")))?;
    let sar = load_sar(&dir.join(format!("{id}{SAR_SUFFIX}")))?;
    if clear.height != cloudy.height
        || clear.width != cloudy.width
        || sar.height != cloudy.height
        || sar.width != cloudy.width
    {
        return Err(Error::Corruption(format!(
            "triplet {id}: members disagree on patch size"
        )));
    }
    Ok(PatchTriplet {
        cloudy,
        clear,
        sar,
        id: id.to_string(),
    })
}

/// Sorted ids of every complete triplet in `dir`.
pub fn list_triplet_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_suffix(CLOUDY_SUFFIX) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn normalize_optical_scale_and_clip() {
        let h = 1;
        let w = 3;
        let mut raw = vec![0i64; OPTICAL_BANDS * h * w];
        raw[0] = 10_000;
        raw[1] = 0;
        raw[2] = 15_000;
        let p = normalize_optical(&raw, h, w).unwrap();
        assert_eq!(p.at(0, 0, 0), 1.0);
        assert_eq!(p.at(0, 0, 1), 0.0);
        assert_eq!(p.at(0, 0, 2), 1.0);
        assert!(p.normalized);
    }

    #[test]
    fn normalize_optical_rejects_negative() {
        let raw = vec![-1i64; OPTICAL_BANDS];
        assert!(matches!(
            normalize_optical(&raw, 1, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn normalize_sar_endpoints_and_midpoint() {
        // One pixel: VV plane then VH plane.
        let p = normalize_sar(&[-25.0, 0.0], 1, 1).unwrap();
        assert_eq!(p.at(0, 0, 0), 0.0);
        assert_eq!(p.at(1, 0, 0), 1.0);

        let p = normalize_sar(&[0.0, -16.25], 1, 1).unwrap();
        assert_eq!(p.at(0, 0, 0), 1.0);
        assert_eq!(p.at(1, 0, 0), 0.5);

        // Clip above range.
        let p = normalize_sar(&[3.0, 3.0], 1, 1).unwrap();
        assert_eq!(p.at(0, 0, 0), 1.0);
        assert_eq!(p.at(1, 0, 0), 1.0);
    }

    #[test]
    fn normalize_sar_rejects_non_finite() {
        assert!(matches!(
            normalize_sar(&[f64::NAN, 0.0], 1, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let dir = tempdir().unwrap();
        let mut p = OpticalPatch::zeros(4, 4);
        for (i, v) in p.bands.iter_mut().enumerate() {
            *v = (i as f32) * 0.001 + 0.123;
        }
        p.normalized = true;
        let path = dir.path().join("p.bin");
        save_optical(&path, &p).unwrap();
        let q = load_optical(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn sar_kind_with_13_channels_is_corruption() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.push(PatchKind::Sar as u8);
        bytes.extend_from_slice(&13u16.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.push(1);
        bytes.extend(std::iter::repeat(0u8).take(13 * 2 * 2 * 4));
        assert!(matches!(
            decode(&bytes, "test"),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let p = RawPatch {
            kind: PatchKind::Map,
            channels: 1,
            height: 2,
            width: 2,
            normalized: true,
            data: vec![0.5; 4],
        };
        let mut bytes = encode(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            decode(&bytes, "test"),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let p = RawPatch {
            kind: PatchKind::Map,
            channels: 1,
            height: 1,
            width: 1,
            normalized: true,
            data: vec![0.0],
        };
        let mut bytes = encode(&p).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, "test"), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_kind_request_is_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("sar.bin");
        save_sar(&path, &SarPatch::zeros(2, 2)).unwrap();
        assert!(matches!(load_optical(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn triplet_round_trip() {
        let dir = tempdir().unwrap();
        let t = PatchTriplet {
            cloudy: OpticalPatch::zeros(4, 4),
            clear: OpticalPatch::zeros(4, 4),
            sar: SarPatch::zeros(4, 4),
            id: "t0".into(),
        };
        save_triplet(dir.path(), &t).unwrap();
        assert_eq!(list_triplet_ids(dir.path()).unwrap(), vec!["t0".to_string()]);
        let u = load_triplet(dir.path(), "t0").unwrap();
        assert_eq!(t, u);
    }

    proptest! {
        #[test]
        fn normalize_optical_is_monotone_and_bounded(a in 0i64..20000, b in 0i64..20000) {
            let mut raw = vec![0i64; OPTICAL_BANDS];
            raw[0] = a.min(b);
            let lo = normalize_optical(&raw, 1, 1).unwrap().at(0, 0, 0);
            raw[0] = a.max(b);
            let hi = normalize_optical(&raw, 1, 1).unwrap().at(0, 0, 0);
            prop_assert!(lo <= hi);
            prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        }
    }
}
