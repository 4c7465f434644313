//! `cloudfuse`: synthesize data, mask clouds, train, evaluate, and predict.
//!
//! Exit codes: 0 success, 2 validation/format/config errors, 3 numerical
//! aborts (non-finite loss).

mod grid;

use clap::{Parser, Subcommand};
use cloudfuse_core::checkpoint::Checkpoint;
use cloudfuse_core::mask;
use cloudfuse_core::raster;
use cloudfuse_core::reconstruct;
use cloudfuse_core::synth;
use cloudfuse_core::train::{self, TrainConfig};
use cloudfuse_core::{Error, Result};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cloudfuse",
    version,
    about = "SAR-optical fusion cloud removal: data synthesis, masking, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic cloudy/clear/SAR triplets
    Synth {
        /// Base RNG seed; triplet i uses seed + i
        #[arg(long)]
        seed: u64,
        /// Patch height and width (multiple of 16)
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Patch width, when different from --size
        #[arg(long)]
        width: Option<usize>,
        /// Target cloud coverage in [0, 1]
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        /// Output directory for the triplet files
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of triplets to generate
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Detect clouds in an optical patch and write the refined mask
    Mask {
        /// Input optical patch (13-band, normalized)
        #[arg(long = "in")]
        input: PathBuf,
        /// Output mask file (single-channel patch format)
        #[arg(long)]
        out: PathBuf,
        /// Cloud-pixel weight for --weight-out
        #[arg(long, default_value_t = 0.8)]
        alpha: f64,
        /// Cloud-score threshold
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
        /// Also write the adaptive weight map here
        #[arg(long)]
        weight_out: Option<PathBuf>,
        /// Also write the raw cloud-score map here
        #[arg(long)]
        score_out: Option<PathBuf>,
    },
    /// Train a model on a directory of triplets
    Train {
        /// Directory of triplet files
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// JSON config file (flat key-value document)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override: total training steps
        #[arg(long)]
        steps: Option<usize>,
        /// Override: RNG seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override: learning rate
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Override: batch size
        #[arg(long)]
        batch_size: Option<usize>,
        /// Replace the cloud-aware weight map with uniform ones
        #[arg(long)]
        uniform_weight: bool,
        /// Train on the whole directory instead of the 80/10/10 split
        #[arg(long)]
        no_split: bool,
    },
    /// Evaluate a checkpoint over a directory of triplets
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the JSON metrics report here
        #[arg(long)]
        report: PathBuf,
    },
    /// Reconstruct a cloud-free patch from a cloudy/SAR pair
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Cloudy optical patch
        #[arg(long)]
        opt: PathBuf,
        /// Co-registered SAR patch
        #[arg(long)]
        sar: PathBuf,
        /// Output patch (clipped reflectance)
        #[arg(long)]
        out: PathBuf,
        /// Also render a PNG panel grid (cloudy | SAR | prediction [| truth])
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Ground-truth patch for the grid's last panel
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Compare cloud-weighted and uniform training across seeds
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds, e.g. 1,2,3
        #[arg(long)]
        seeds: String,
        /// Write the JSON comparison report here
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override: steps per arm
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let cfg: TrainConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("config {}: {e}", p.display())))?;
            Ok(cfg)
        }
    }
}

fn require_normalized(patch_normalized: bool, what: &str) -> Result<()> {
    if !patch_normalized {
        return Err(Error::Validation(format!(
            "{what} is not normalized; run normalization before this command"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            seed,
            size,
            width,
            fraction,
            out_dir,
            count,
        } => {
            let w = width.unwrap_or(size);
            for i in 0..count {
                let t = synth::make_synthetic_triplet(seed + i as u64, size, w, fraction)?;
                raster::save_triplet(&out_dir, &t)?;
                println!("wrote {}", t.id);
            }
        }
        Command::Mask {
            input,
            out,
            alpha,
            threshold,
            weight_out,
            score_out,
        } => {
            let opt = raster::load_optical(&input)?;
            require_normalized(opt.normalized, "input patch")?;
            let score = mask::cloud_score(&opt)?;
            let raw = mask::binarize(&score, threshold)?;
            let refined = mask::refine_mask(&raw, &mask::ndsi(&opt)?)?;
            raster::save_map(&out, &refined.to_f32(), opt.height, opt.width)?;
            println!(
                "mask: {}/{} pixels flagged ({:.1}%)",
                refined.count(),
                opt.height * opt.width,
                100.0 * refined.fraction()
            );
            if let Some(p) = weight_out {
                let w = mask::weight_map(&refined, alpha)?;
                raster::save_map(&p, &w.to_f32(), opt.height, opt.width)?;
                println!("wrote weights to {}", p.display());
            }
            if let Some(p) = score_out {
                let s: Vec<f32> = score.values.iter().map(|&v| v as f32).collect();
                raster::save_map(&p, &s, opt.height, opt.width)?;
                println!("wrote scores to {}", p.display());
            }
        }
        Command::Train {
            data,
            out,
            config,
            resume,
            steps,
            seed,
            learning_rate,
            batch_size,
            uniform_weight,
            no_split,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(lr) = learning_rate {
                cfg.learning_rate = lr;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if uniform_weight {
                cfg.ablation_uniform_weight = true;
            }
            if no_split {
                cfg.use_split = false;
            }
            println!("config: {}", serde_json::to_string(&cfg)?);
            let resume_ckpt = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = train::train(&cfg, &data, resume_ckpt)?;
            outcome.checkpoint.save(&out)?;
            println!(
                "trained {} steps: loss {:.6} -> {:.6}; checkpoint {}",
                outcome.checkpoint.step,
                outcome.initial_loss,
                outcome.final_loss,
                out.display()
            );
        }
        Command::Eval { ckpt, data, report } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let r = train::evaluate(&checkpoint, &data)?;
            fs::write(&report, serde_json::to_string_pretty(&r)?)?;
            println!(
                "evaluated {} patches: psnr {:.3} dB, ssim {:.4}, mae {:.5}",
                r.n_patches, r.aggregate.psnr_db, r.aggregate.ssim, r.aggregate.mae
            );
            if let Some(cm) = r.aggregate.cloud_mae {
                println!("cloud regions: mae {cm:.5}");
            }
            println!("report: {}", report.display());
        }
        Command::Predict {
            ckpt,
            opt,
            sar,
            out,
            grid,
            gt,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let cloudy = raster::load_optical(&opt)?;
            require_normalized(cloudy.normalized, "optical input")?;
            let sar_patch = raster::load_sar(&sar)?;
            require_normalized(sar_patch.normalized, "sar input")?;
            if cloudy.height != sar_patch.height || cloudy.width != sar_patch.width {
                return Err(Error::Shape(format!(
                    "optical {}x{} and sar {}x{} footprints differ",
                    cloudy.height, cloudy.width, sar_patch.height, sar_patch.width
                )));
            }
            let raw = train::predict_patch(&checkpoint, &cloudy, &sar_patch)?;
            let prediction = reconstruct::to_export_patch(&raw)?;
            raster::save_optical(&out, &prediction)?;
            println!("wrote prediction to {}", out.display());
            if let Some(grid_path) = grid {
                let gt_patch = gt.map(|p| raster::load_optical(&p)).transpose()?;
                let mut panels = vec![
                    grid::Panel::Optical(&cloudy),
                    grid::Panel::Sar(&sar_patch),
                    grid::Panel::Optical(&prediction),
                ];
                if let Some(ref g) = gt_patch {
                    panels.push(grid::Panel::Optical(g));
                }
                grid::render_grid(&panels, &grid_path)?;
                println!("wrote panel grid to {}", grid_path.display());
            }
        }
        Command::Ablate {
            data,
            seeds,
            report,
            config,
            steps,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::Validation(format!("bad seed {s:?}")))
                })
                .collect::<Result<_>>()?;
            let r = train::ablation_pair(&cfg, &data, &seeds)?;
            fs::write(&report, serde_json::to_string_pretty(&r)?)?;
            println!(
                "ablation over {:?}: median cloud-mae delta (weighted - uniform) {:?}",
                r.seeds, r.median_cloud_mae_delta
            );
            println!("report: {}", report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
