//! Reconstruction quality metrics: PSNR, global SSIM, MAE, and cloud-region
//! variants restricted to mask pixels.
//!
//! PSNR of a perfect reconstruction is reported as the +infinity sentinel,
//! never capped; reports serialize it as the JSON string `"inf"`.

use crate::error::{Error, Result};
use crate::mask::CloudMask;
use crate::objective::{self, LossConfig};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

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

/// Peak signal-to-noise ratio in dB: `10 log10(max_val^2 / MSE)` with the MSE
/// taken over every band and pixel. Identical inputs give +infinity.
pub fn psnr(gt: &Tensor, pred: &Tensor, max_val: f64) -> Result<f64> {
    check_same_shape(gt, pred, "psnr")?;
    let mse: f64 = gt
        .data()
        .iter()
        .zip(pred.data().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / gt.elems() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Mean absolute error over every band and pixel.
pub fn mae(gt: &Tensor, pred: &Tensor) -> Result<f64> {
    check_same_shape(gt, pred, "mae")?;
    Ok(gt
        .data()
        .iter()
        .zip(pred.data().iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / gt.elems() as f64)
}

/// Scalar SSIM: the mean of the objective module's per-pixel SSIM map, so the
/// evaluation metric and the loss agree on the definition.
pub fn ssim_global(gt: &Tensor, pred: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let map = objective::ssim_map(pred, gt, cfg)?;
    Ok(map.sum() / map.elems() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedMetrics {
    pub psnr_db: f64,
    pub mae: f64,
    pub mse: f64,
}

/// PSNR/MAE restricted to mask pixels (all bands at each masked pixel).
pub fn masked_metrics(
    gt: &Tensor,
    pred: &Tensor,
    mask: &CloudMask,
    max_val: f64,
) -> Result<MaskedMetrics> {
    check_same_shape(gt, pred, "masked_metrics")?;
    let (c, h, w) = gt.chw()?;
    if mask.height != h || mask.width != w {
        return Err(Error::Shape(format!(
            "masked_metrics: mask is {}x{}, tensors are {h}x{w}",
            mask.height, mask.width
        )));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::Validation(
            "masked_metrics: mask has no set pixels".into(),
        ));
    }
    let plane = h * w;
    let mut se = 0.0;
    let mut ae = 0.0;
    for p in 0..plane {
        if mask.values[p] == 1 {
            for ch in 0..c {
                let d = gt.data()[ch * plane + p] - pred.data()[ch * plane + p];
                se += d * d;
                ae += d.abs();
            }
        }
    }
    let n = (count * c) as f64;
    let mse = se / n;
    let psnr_db = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    };
    Ok(MaskedMetrics {
        psnr_db,
        mae: ae / n,
        mse,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// f64 that serializes +/-infinity as the JSON strings "inf" / "-inf".
pub mod db_serde {
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(D::Error::custom(format!("bad dB value {other:?}"))),
            },
        }
    }
}

/// `Option<f64>` variant of [`db_serde`].
pub mod opt_db_serde {
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(v) if v.is_infinite() => {
                s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
            }
            Some(v) => s.serialize_f64(*v),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(v)) => Ok(Some(v)),
            Some(Raw::Str(s)) => match s.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(D::Error::custom(format!("bad dB value {other:?}"))),
            },
        }
    }
}

/// Metrics of one evaluated patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMetrics {
    pub id: String,
    #[serde(with = "db_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
    /// Fraction of pixels the refined cloud mask flags.
    pub cloud_fraction: f64,
    /// Cloud-region PSNR; absent when the mask is empty.
    #[serde(with = "opt_db_serde", default)]
    pub cloud_psnr_db: Option<f64>,
    /// Cloud-region MAE; absent when the mask is empty.
    pub cloud_mae: Option<f64>,
    /// Cloud-region MSE; absent when the mask is empty.
    pub cloud_mse: Option<f64>,
}

/// Patch-averaged metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    #[serde(with = "db_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
    #[serde(with = "opt_db_serde", default)]
    pub cloud_psnr_db: Option<f64>,
    pub cloud_mae: Option<f64>,
    pub cloud_mse: Option<f64>,
}

/// Full evaluation report: per-patch rows plus their aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_patches: usize,
    pub aggregate: AggregateMetrics,
    pub per_patch: Vec<PatchMetrics>,
}

/// Mean of per-patch metrics. Cloud metrics average over the patches that
/// have a non-empty mask; `None` when no patch does.
pub fn aggregate(per_patch: &[PatchMetrics]) -> AggregateMetrics {
    let n = per_patch.len() as f64;
    let mean = |f: &dyn Fn(&PatchMetrics) -> f64| per_patch.iter().map(f).sum::<f64>() / n;
    let cloud: Vec<&PatchMetrics> = per_patch.iter().filter(|p| p.cloud_mae.is_some()).collect();
    let cloud_mean = |f: &dyn Fn(&PatchMetrics) -> f64| {
        if cloud.is_empty() {
            None
        } else {
            Some(cloud.iter().map(|p| f(p)).sum::<f64>() / cloud.len() as f64)
        }
    };
    AggregateMetrics {
        psnr_db: mean(&|p| p.psnr_db),
        ssim: mean(&|p| p.ssim),
        mae: mean(&|p| p.mae),
        cloud_psnr_db: cloud_mean(&|p| p.cloud_psnr_db.unwrap()),
        cloud_mae: cloud_mean(&|p| p.cloud_mae.unwrap()),
        cloud_mse: cloud_mean(&|p| p.cloud_mse.unwrap()),
    }
}
