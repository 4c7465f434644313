//! Training harness: configuration, the adaptive-moment optimizer, the
//! deterministic training loop, evaluation, and the weighting ablation.
//!
//! Determinism contract: given identical config, seed, and data, two runs
//! produce byte-identical checkpoints, and a run interrupted by save/load
//! continues on the exact trajectory of an uninterrupted one. Everything
//! stateful is keyed by sorted parameter paths, batches are drawn from a
//! counter-based RNG whose position is checkpointed, and all kernels are
//! bit-deterministic (see `exec`).

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::mask::{self, WeightMap};
use crate::metrics::{self, MetricsReport, PatchMetrics};
use crate::objective::{self, LossConfig};
use crate::params::{ParamNodes, ParamStore};
use crate::raster::{self, PatchTriplet};
use crate::reconstruct;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Offset mixed into the user seed for the batch-sampling stream, so data
/// order and parameter initialization draw from independent streams.
const TRAIN_STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Weight on cloud pixels; clear pixels get `1 - alpha`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Cloud-score threshold used to build training weight maps.
    #[serde(default = "default_cloud_threshold")]
    pub cloud_threshold: f64,
    /// Replace the weight map with uniform ones (the ablation arm).
    #[serde(default)]
    pub ablation_uniform_weight: bool,
    /// Partition data 80/10/10 by id hash; off trains on the whole directory.
    #[serde(default = "default_use_split")]
    pub use_split: bool,
    /// Steps between validation metric logs (0 disables).
    #[serde(default = "default_val_interval")]
    pub val_interval: usize,
    /// Steps between loss log lines.
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    #[serde(flatten)]
    pub fusion: FusionConfig,
    #[serde(flatten)]
    pub loss: LossConfig,
}

fn default_steps() -> usize {
    500
}
fn default_batch_size() -> usize {
    2
}
fn default_learning_rate() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_alpha() -> f64 {
    mask::DEFAULT_ALPHA
}
fn default_cloud_threshold() -> f64 {
    mask::CLOUD_THRESHOLD
}
fn default_use_split() -> bool {
    true
}
fn default_val_interval() -> usize {
    100
}
fn default_log_interval() -> usize {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Validation("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.cloud_threshold) {
            return Err(Error::Validation(format!(
                "cloud_threshold {} outside [0, 1]",
                self.cloud_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Validation("beta1/beta2 must lie in [0, 1)".into()));
        }
        self.fusion.validate()?;
        self.loss.validate()
    }

    /// Keys whose values differ between two configs, as `key: a -> b` lines.
    pub fn diff(&self, other: &TrainConfig, ignore: &[&str]) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        let mut out = Vec::new();
        for (k, av) in a {
            if ignore.contains(&k.as_str()) {
                continue;
            }
            let bv = &b[k];
            if av != bv {
                out.push(format!("{k}: {av} -> {bv}"));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer state (first/second moments per parameter).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| -> BTreeMap<String, Tensor> {
            s.iter()
                .map(|(p, t)| (p.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        AdamState {
            m: zeros(store),
            v: zeros(store),
            t: 0,
        }
    }

    /// One update over every parameter, in sorted path order.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (path, tensor) in params.iter_mut() {
            let g = &grads[path];
            let m = self.m.get_mut(path).expect("moment path");
            let v = self.v.get_mut(path).expect("moment path");
            let (td, gd) = (tensor.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..td.len() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                td[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Data handling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic 80/10/10 partition by id hash.
pub fn split_role(id: &str) -> SplitRole {
    match fnv1a(id.as_bytes()) % 10 {
        0..=7 => SplitRole::Train,
        8 => SplitRole::Val,
        _ => SplitRole::Test,
    }
}

/// Load every triplet in a directory, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<PatchTriplet>> {
    let ids = raster::list_triplet_ids(dir)?;
    ids.iter().map(|id| raster::load_triplet(dir, id)).collect()
}

fn training_weights(cfg: &TrainConfig, triplet: &PatchTriplet) -> Result<WeightMap> {
    if cfg.ablation_uniform_weight {
        Ok(WeightMap::uniform(triplet.height(), triplet.width()))
    } else {
        // Deployment conditions: the mask comes from the cloudy input itself.
        let m = mask::refined_mask(&triplet.cloudy, cfg.cloud_threshold)?;
        mask::weight_map(&m, cfg.alpha)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Batch loss at every step of this run.
    pub loss_trace: Vec<f64>,
    /// Mean loss over the training set at the starting parameters.
    pub initial_loss: f64,
    /// Mean loss over the training set at the final parameters.
    pub final_loss: f64,
}

/// Mean training loss over `items` at the given parameters (forward only).
fn full_loss(
    params: &ParamStore,
    cfg: &TrainConfig,
    items: &[&PatchTriplet],
    weights: &[WeightMap],
) -> Result<f64> {
    let mut total = 0.0;
    for (triplet, wm) in items.iter().zip(weights.iter()) {
        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, params);
        let pred = reconstruct::forward_predict(&mut g, &pn, &cfg.fusion, &triplet.cloudy, &triplet.sar)?;
        let gt = g.constant(triplet.clear.to_tensor());
        let w = g.constant(wm.to_tensor());
        let l = objective::loss_node(&mut g, pred, gt, w, &cfg.loss)?;
        total += g.value(l).item();
    }
    Ok(total / items.len() as f64)
}

/// Train a model, optionally resuming from a checkpoint. `cfg.steps` is the
/// total step count: resuming a checkpoint at step k runs `steps - k` more.
pub fn train(cfg: &TrainConfig, data_dir: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = load_dataset(data_dir)?;
    if dataset.is_empty() {
        return Err(Error::Validation(format!(
            "no triplets found in {}",
            data_dir.display()
        )));
    }
    let train_set: Vec<&PatchTriplet> = if cfg.use_split {
        dataset
            .iter()
            .filter(|t| split_role(&t.id) == SplitRole::Train)
            .collect()
    } else {
        dataset.iter().collect()
    };
    let val_set: Vec<&PatchTriplet> = if cfg.use_split {
        dataset
            .iter()
            .filter(|t| split_role(&t.id) == SplitRole::Val)
            .collect()
    } else {
        Vec::new()
    };
    if train_set.is_empty() {
        return Err(Error::Validation(
            "training split is empty; check the data directory or disable use_split".into(),
        ));
    }
    for t in &train_set {
        cfg.fusion.validate_patch_size(t.height(), t.width())?;
    }

    let weights: Vec<WeightMap> = train_set
        .iter()
        .map(|t| training_weights(cfg, t))
        .collect::<Result<_>>()?;

    let (mut params, mut adam, start_step, rng_pos) = match resume {
        Some(ckpt) => {
            let diff = ckpt.config.diff(cfg, &["steps"]);
            if !diff.is_empty() {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint config differs from the active one:\n  {}",
                    diff.join("\n  ")
                )));
            }
            if ckpt.step > cfg.steps {
                return Err(Error::Validation(format!(
                    "checkpoint is at step {}, past the requested total {}",
                    ckpt.step, cfg.steps
                )));
            }
            (ckpt.params, ckpt.adam, ckpt.step, Some(ckpt.rng_word_pos))
        }
        None => {
            let params = reconstruct::model_params(&cfg.fusion, cfg.seed)?;
            let adam = AdamState::new(&params);
            (params, adam, 0, None)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(TRAIN_STREAM_SALT));
    if let Some(pos) = rng_pos {
        rng.set_word_pos(pos);
    }

    let initial_loss = full_loss(&params, cfg, &train_set, &weights)?;
    log::info!(
        "training: {} items, {} -> {} steps, initial loss {initial_loss:.6}",
        train_set.len(),
        start_step,
        cfg.steps
    );

    let mut loss_trace = Vec::with_capacity(cfg.steps - start_step);
    for step in start_step..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..train_set.len()))
            .collect();

        let mut grad_accum: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(p, t)| (p.clone(), Tensor::zeros(t.shape())))
            .collect();
        let mut batch_loss = 0.0;
        for &idx in &batch {
            let triplet = train_set[idx];
            let mut g = Graph::new();
            let pn = ParamNodes::register(&mut g, &params);
            let pred = reconstruct::forward_predict(
                &mut g,
                &pn,
                &cfg.fusion,
                &triplet.cloudy,
                &triplet.sar,
            )?;
            let gt = g.constant(triplet.clear.to_tensor());
            let w = g.constant(weights[idx].to_tensor());
            let loss = objective::loss_node(&mut g, pred, gt, w, &cfg.loss)?;
            batch_loss += g.value(loss).item();
            g.backward(loss);
            for (path, grad) in pn.collect_grads(&g, &params) {
                grad_accum.get_mut(&path).expect("grad path").add_assign(&grad);
            }
        }
        batch_loss /= cfg.batch_size as f64;
        for grad in grad_accum.values_mut() {
            grad.scale_assign(1.0 / cfg.batch_size as f64);
        }

        if !batch_loss.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|&i| train_set[i].id.as_str()).collect();
            return Err(Error::Numerical(format!(
                "non-finite loss {batch_loss} at step {step} on batch {ids:?}; \
                 parameter norm {:.6e}",
                params.global_norm()
            )));
        }
        loss_trace.push(batch_loss);
        adam.step(&mut params, &grad_accum, cfg);

        if cfg.log_interval > 0 && (step % cfg.log_interval == 0 || step + 1 == cfg.steps) {
            log::info!("step {step}: loss {batch_loss:.6}");
        }
        if cfg.val_interval > 0 && !val_set.is_empty() && (step + 1) % cfg.val_interval == 0 {
            let report = evaluate_items(&params, cfg, &val_set)?;
            log::info!(
                "step {step}: val psnr {:.3} dB, mae {:.5}",
                report.aggregate.psnr_db,
                report.aggregate.mae
            );
        }
    }

    let final_loss = full_loss(&params, cfg, &train_set, &weights)?;
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        params,
        adam,
        step: cfg.steps,
        rng_word_pos: rng.get_word_pos(),
    };
    Ok(TrainOutcome {
        checkpoint,
        loss_trace,
        initial_loss,
        final_loss,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn evaluate_items(
    params: &ParamStore,
    cfg: &TrainConfig,
    items: &[&PatchTriplet],
) -> Result<MetricsReport> {
    let mut per_patch = Vec::with_capacity(items.len());
    for triplet in items {
        cfg.fusion
            .validate_patch_size(triplet.height(), triplet.width())
            .map_err(|e| {
                Error::ConfigMismatch(format!(
                    "triplet {} does not fit the checkpoint architecture: {e}",
                    triplet.id
                ))
            })?;
        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, params);
        let pred_node =
            reconstruct::forward_predict(&mut g, &pn, &cfg.fusion, &triplet.cloudy, &triplet.sar)?;
        // Evaluation measures the exported product: clipped reflectance.
        let mut pred = g.value(pred_node).clone();
        for v in pred.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let gt = triplet.clear.to_tensor();

        let cloud_mask = mask::refined_mask(&triplet.cloudy, cfg.cloud_threshold)?;
        let (cloud_psnr_db, cloud_mae, cloud_mse) = if cloud_mask.count() > 0 {
            let m = metrics::masked_metrics(&gt, &pred, &cloud_mask, 1.0)?;
            (Some(m.psnr_db), Some(m.mae), Some(m.mse))
        } else {
            (None, None, None)
        };
        per_patch.push(PatchMetrics {
            id: triplet.id.clone(),
            psnr_db: metrics::psnr(&gt, &pred, 1.0)?,
            ssim: metrics::ssim_global(&gt, &pred, &cfg.loss)?,
            mae: metrics::mae(&gt, &pred)?,
            cloud_fraction: cloud_mask.fraction(),
            cloud_psnr_db,
            cloud_mae,
            cloud_mse,
        });
    }
    Ok(MetricsReport {
        n_patches: per_patch.len(),
        aggregate: metrics::aggregate(&per_patch),
        per_patch,
    })
}

/// Evaluate a checkpoint over every triplet in a directory.
pub fn evaluate(ckpt: &Checkpoint, data_dir: &Path) -> Result<MetricsReport> {
    let dataset = load_dataset(data_dir)?;
    if dataset.is_empty() {
        return Err(Error::Validation(format!(
            "no triplets found in {}",
            data_dir.display()
        )));
    }
    let items: Vec<&PatchTriplet> = dataset.iter().collect();
    evaluate_items(&ckpt.params, &ckpt.config, &items)
}

/// Run inference for a single cloudy/SAR pair with a checkpoint.
pub fn predict_patch(
    ckpt: &Checkpoint,
    cloudy: &raster::OpticalPatch,
    sar: &raster::SarPatch,
) -> Result<Tensor> {
    ckpt.config
        .fusion
        .validate_patch_size(cloudy.height, cloudy.width)
        .map_err(|e| {
            Error::ConfigMismatch(format!("input does not fit the checkpoint architecture: {e}"))
        })?;
    let mut g = Graph::new();
    let pn = ParamNodes::register(&mut g, &ckpt.params);
    let pred = reconstruct::forward_predict(&mut g, &pn, &ckpt.config.fusion, cloudy, sar)?;
    Ok(g.value(pred).clone())
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub arm: String,
    /// Loss over the training set at the shared initialization, with uniform
    /// weights; identical across arms of one seed by construction.
    pub initial_base_loss: f64,
    pub final_loss: f64,
    #[serde(with = "metrics::db_serde")]
    pub psnr_db: f64,
    pub mae: f64,
    #[serde(with = "metrics::opt_db_serde", default)]
    pub cloud_psnr_db: Option<f64>,
    pub cloud_mae: Option<f64>,
    pub cloud_mse: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Config keys differing between the two arms; the weighting switch only.
    pub arm_config_diff: Vec<String>,
    pub rows: Vec<AblationRow>,
    /// Median over seeds of (weighted - uniform) cloud-region deltas.
    pub median_cloud_mae_delta: Option<f64>,
    pub median_cloud_mse_delta: Option<f64>,
    pub median_cloud_psnr_delta: Option<f64>,
    pub config: TrainConfig,
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite medians"));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Train weighted (`alpha`) and uniform arms for every seed with identical
/// everything else, then compare cloud-region reconstruction quality.
pub fn ablation_pair(cfg: &TrainConfig, data_dir: &Path, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::Validation(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let uniform_loss_at_init = |seed: u64| -> Result<f64> {
        let dataset = load_dataset(data_dir)?;
        let items: Vec<&PatchTriplet> = dataset.iter().collect();
        let params = reconstruct::model_params(&cfg.fusion, seed)?;
        let weights: Vec<WeightMap> = items
            .iter()
            .map(|t| WeightMap::uniform(t.height(), t.width()))
            .collect();
        full_loss(&params, cfg, &items, &weights)
    };

    let mut rows = Vec::new();
    let mut deltas_mae = Vec::new();
    let mut deltas_mse = Vec::new();
    let mut deltas_psnr = Vec::new();
    let mut arm_config_diff = Vec::new();
    for &seed in seeds {
        let base_loss = uniform_loss_at_init(seed)?;
        let mut arm_metrics: BTreeMap<&str, AblationRow> = BTreeMap::new();
        for (arm, uniform) in [("weighted", false), ("uniform", true)] {
            let arm_cfg = TrainConfig {
                seed,
                ablation_uniform_weight: uniform,
                ..cfg.clone()
            };
            if arm == "weighted" {
                let other = TrainConfig {
                    ablation_uniform_weight: true,
                    ..arm_cfg.clone()
                };
                arm_config_diff = arm_cfg.diff(&other, &[]);
            }
            let outcome = train(&arm_cfg, data_dir, None)?;
            let report = evaluate(&outcome.checkpoint, data_dir)?;
            rows.push(AblationRow {
                seed,
                arm: arm.to_string(),
                initial_base_loss: base_loss,
                final_loss: outcome.final_loss,
                psnr_db: report.aggregate.psnr_db,
                mae: report.aggregate.mae,
                cloud_psnr_db: report.aggregate.cloud_psnr_db,
                cloud_mae: report.aggregate.cloud_mae,
                cloud_mse: report.aggregate.cloud_mse,
            });
            arm_metrics.insert(arm, rows.last().unwrap().clone());
        }
        let (wrow, urow) = (&arm_metrics["weighted"], &arm_metrics["uniform"]);
        if let (Some(a), Some(b)) = (wrow.cloud_mae, urow.cloud_mae) {
            deltas_mae.push(a - b);
        }
        if let (Some(a), Some(b)) = (wrow.cloud_mse, urow.cloud_mse) {
            deltas_mse.push(a - b);
        }
        if let (Some(a), Some(b)) = (wrow.cloud_psnr_db, urow.cloud_psnr_db) {
            if a.is_finite() && b.is_finite() {
                deltas_psnr.push(a - b);
            }
        }
        log::info!(
            "ablation seed {seed}: weighted cloud mae {:?}, uniform cloud mae {:?}",
            wrow.cloud_mae,
            urow.cloud_mae
        );
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        steps: cfg.steps,
        arm_config_diff,
        rows,
        median_cloud_mae_delta: median(deltas_mae),
        median_cloud_mse_delta: median(deltas_mse),
        median_cloud_psnr_delta: median(deltas_psnr),
        config: cfg.clone(),
    })
}
