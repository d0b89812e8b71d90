//! Command-line front end: `synth`, `train`, `infer`, `eval`, `stain`, `tile`.
//!
//! Configs are JSON files; any flag given on the command line wins over the
//! file value.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{aggregate, confuse_slide, RoiRow};
use crate::infer::{
    binarize, emit_heatmap, infer_canvas, post_process, thumbnail, InferParams, PostprocessParams,
};
use crate::losses::LossKind;
use crate::model::{Mode, ModelConfig, TransUnet};
use crate::morph::Mask;
use crate::stain::{
    augment_stain, estimate_stain_matrix, normalize, StainAugmentConfig, StainMatrix, DEFAULT_ALPHA,
    DEFAULT_BETA, REFERENCE_HE,
};
use crate::synth::{write_dataset, DatasetLayout, SynthConfig};
use crate::train::{load_samples, split_by_slide, two_phase_train, TrainConfig};
use crate::wsi::{read_manifest, tessellate, GroundTruth, WsiPyramid, DEFAULT_OVERLAP, DEFAULT_PATCH};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const MODEL_CONFIG_FILE: &str = "model.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Parser)]
#[command(name = "dysseg", version, about = "Dysplasia segmentation in H&E whole-slide images")]
pub struct Cli {
    /// Log verbosity; repeat for more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset: slide pyramids, ground truth and a patch manifest.
    Synth(SynthArgs),
    /// Two-phase training on a dataset written by `synth`.
    Train(TrainArgs),
    /// Sliding-window inference on one slide.
    Infer(InferArgs),
    /// ROI-level metrics of predicted masks against ground truth.
    Eval(EvalArgs),
    /// Stain matrix estimation, normalization and augmentation.
    #[command(subcommand)]
    Stain(StainCommand),
    /// Print the tiles covering a canvas, one JSON object per line.
    Tile(TileArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator config; unset fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of case slides (default 4).
    #[arg(long)]
    pub cases: Option<usize>,
    /// Number of control slides (default 1).
    #[arg(long)]
    pub controls: Option<usize>,
    /// Canvas width at 1.0 mpp (default 256).
    #[arg(long)]
    pub width: Option<usize>,
    /// Canvas height at 1.0 mpp (default 192).
    #[arg(long)]
    pub height: Option<usize>,
    /// Tissue sections per slide (default 1).
    #[arg(long)]
    pub sections: Option<usize>,
    /// Lesions per case slide (default 3).
    #[arg(long)]
    pub blobs: Option<usize>,
    /// Target dysplastic fraction of tissue (default 0.3).
    #[arg(long)]
    pub positive_frac: Option<f64>,
    /// Manifest patch size (default 64).
    #[arg(long)]
    pub patch: Option<usize>,
    /// Manifest patch overlap (default 23).
    #[arg(long)]
    pub overlap: Option<usize>,
    /// Generator seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, metrics and resolved configs.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; unset fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model: `toy`, `full` or a JSON model config file.
    #[arg(long, default_value = "toy")]
    pub model: String,
    /// Segmentation loss: dice, jaccard, ce, dice_ce, jaccard_ce (default dice_ce).
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Decoder-only epochs (default 20).
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    /// Whole-network epochs (default 30).
    #[arg(long)]
    pub phase2_epochs: Option<usize>,
    /// Learning rate before the decay epoch (default 1e-4).
    #[arg(long)]
    pub lr_hi: Option<f64>,
    /// Learning rate from the decay epoch on (default 1e-5).
    #[arg(long)]
    pub lr_lo: Option<f64>,
    /// Epoch within each phase at which the rate drops (default 10).
    #[arg(long)]
    pub decay_epoch: Option<usize>,
    /// Patches per step (default 4).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fraction of slides held out for validation (default 0.1).
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Enable weighted sampling by (scanner, label) stratum (default off).
    #[arg(long)]
    pub ws: bool,
    /// Enable stain augmentation (default off).
    #[arg(long)]
    pub sa: bool,
    /// Enable the domain-adversarial head (default off).
    #[arg(long)]
    pub da: bool,
    /// Disable geometric and colour augmentation (default on).
    #[arg(long)]
    pub no_augment: bool,
    /// Seed for initialization, splitting and augmentation (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Data-preparation threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

/// `infer --config` file layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferFile {
    pub infer: Option<InferParams>,
    pub postprocess: PostprocessParams,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Slide pyramid directory.
    #[arg(long)]
    pub slide: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Model config JSON (default: model.json next to the checkpoint).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// JSON file with `infer` and `postprocess` blocks.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tile size (default: the model input size).
    #[arg(long)]
    pub patch: Option<usize>,
    /// Tile overlap (default: 184/512 of the tile size, rounded).
    #[arg(long)]
    pub overlap: Option<usize>,
    /// Tiles whose tissue fraction is below this count as background (default 0.1).
    #[arg(long)]
    pub min_tissue_frac: Option<f64>,
    /// Tiles per forward pass (default 4).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Foreground threshold, strict (default 0.5).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Minimum object area kept by post-processing (default 1000).
    #[arg(long)]
    pub min_object_area: Option<usize>,
    /// Largest hole filled by post-processing (default 1000).
    #[arg(long)]
    pub min_hole_area: Option<usize>,
    /// Ground-truth mask PNG drawn as a contour on the heatmap.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Longest heatmap side in pixels.
    #[arg(long, default_value_t = 1024)]
    pub thumbnail_side: usize,
    /// Tile-prediction threads; outputs do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions: `<id>/pred.png` or `<id>.png` per slide; slides without one are skipped.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth: `<id>.png` and `<id>_rois.png` per slide.
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory for report.json and report.txt.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum StainCommand {
    /// Print the stain matrix of an image as JSON.
    Estimate {
        #[arg(long)]
        image: PathBuf,
        /// OD threshold for tissue pixels.
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        /// Angle percentile.
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Re-express an image with target stain vectors.
    Normalize {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file holding six numbers `[h_r,h_g,h_b,e_r,e_g,e_b]` (default: reference H&E).
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Randomly perturb stain concentrations.
    Augment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Multiplicative strength.
        #[arg(long, default_value_t = 0.2)]
        sigma1: f64,
        /// Additive strength.
        #[arg(long, default_value_t = 0.2)]
        sigma2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct TileArgs {
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub height: usize,
    #[arg(long, default_value_t = DEFAULT_PATCH)]
    pub patch: usize,
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    pub overlap: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mpp: f64,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPath(path.to_path_buf()))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require(path)?;
    serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::Config("workers must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

pub fn resolve_model(spec: &str) -> Result<ModelConfig> {
    let cfg = match spec {
        "toy" => ModelConfig::toy(),
        "full" => ModelConfig::full(),
        path => read_json(Path::new(path))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    set(&mut cfg.cases, a.cases);
    set(&mut cfg.controls, a.controls);
    set(&mut cfg.width, a.width);
    set(&mut cfg.height, a.height);
    set(&mut cfg.sections, a.sections);
    set(&mut cfg.blobs, a.blobs);
    set(&mut cfg.positive_frac, a.positive_frac);
    set(&mut cfg.patch, a.patch);
    set(&mut cfg.overlap, a.overlap);
    set(&mut cfg.seed, a.seed);
    let summary = write_dataset(&a.out, &cfg)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    set(&mut cfg.loss.kind, a.loss);
    set(&mut cfg.phase1_epochs, a.phase1_epochs);
    set(&mut cfg.phase2_epochs, a.phase2_epochs);
    set(&mut cfg.lr_hi, a.lr_hi);
    set(&mut cfg.lr_lo, a.lr_lo);
    set(&mut cfg.decay_epoch, a.decay_epoch);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.val_frac, a.val_frac);
    set(&mut cfg.seed, a.seed);
    cfg.dg.ws |= a.ws;
    cfg.dg.sa |= a.sa;
    cfg.dg.da |= a.da;
    if a.no_augment {
        cfg.augment = crate::augment::AugmentPolicy::none();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let layout = DatasetLayout::new(&a.data);
    require(&a.data)?;
    require(&layout.manifest())?;
    let cfg = resolve_train_config(a)?;
    let model_cfg = resolve_model(&a.model)?;
    let rows = read_manifest(&layout.manifest())?;
    if let Some(r) = rows.iter().find(|r| r.tile.size != model_cfg.input_size) {
        return Err(Error::Config(format!(
            "manifest patch size {} does not match model input size {}",
            r.tile.size, model_cfg.input_size
        )));
    }
    let samples = load_samples(&rows, &layout)?;
    let (train, val) = split_by_slide(samples, cfg.val_frac, cfg.seed);
    log::info!("{} training and {} validation patches", train.len(), val.len());
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("train_config.json"), &cfg)?;
    write_json(&a.out.join(MODEL_CONFIG_FILE), &model_cfg)?;
    let mut model = TransUnet::new(model_cfg, cfg.seed)?;
    let report = pool(a.workers)?.install(|| two_phase_train(&mut model, &train, &val, &cfg, Some(&a.out)))?;
    model.save(&a.out.join(CHECKPOINT_FILE))?;
    let last = report.records.last().expect("at least one epoch");
    println!(
        "{}",
        serde_json::json!({
            "loss": cfg.loss.kind.name(),
            "final_loss": last.loss,
            "val_f1": last.val_f1,
            "steps": report.steps,
            "checkpoint": a.out.join(CHECKPOINT_FILE),
        })
    );
    Ok(())
}

/// Overlap scaled from the 512/184 default to another tile size.
pub fn default_overlap(patch: usize) -> usize {
    (patch * DEFAULT_OVERLAP + DEFAULT_PATCH / 2) / DEFAULT_PATCH
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    require(&a.slide)?;
    require(&a.checkpoint)?;
    let model_cfg_path = match &a.model_config {
        Some(p) => p.clone(),
        None => a
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(MODEL_CONFIG_FILE),
    };
    let model_cfg: ModelConfig = read_json(&model_cfg_path)?;
    let mut model = TransUnet::load(model_cfg.clone(), &a.checkpoint)?;
    model.set_mode(Mode::Eval);

    let file: InferFile = match &a.config {
        Some(p) => read_json(p)?,
        None => InferFile::default(),
    };
    let mut params = file.infer.unwrap_or_else(|| {
        let patch = a.patch.unwrap_or(model_cfg.input_size);
        InferParams {
            patch,
            overlap: default_overlap(patch),
            ..InferParams::default()
        }
    });
    if let Some(p) = a.patch {
        params.patch = p;
        if a.overlap.is_none() {
            params.overlap = default_overlap(p);
        }
    }
    set(&mut params.overlap, a.overlap);
    set(&mut params.min_tissue_frac, a.min_tissue_frac);
    set(&mut params.batch_size, a.batch_size);
    params.workers = a.workers;
    let mut post = file.postprocess;
    set(&mut post.threshold, a.threshold);
    set(&mut post.min_object_area, a.min_object_area);
    set(&mut post.min_hole_area, a.min_hole_area);
    post.validate()?;

    let slide = WsiPyramid::open(&a.slide)?;
    let gt = match &a.gt {
        Some(p) => Some(Mask::load_png(p)?),
        None => None,
    };
    let canvas = infer_canvas(&slide, &model, &params)?;
    fs::create_dir_all(&a.out)?;
    canvas.save(&a.out)?;
    let pred = post_process(&binarize(&canvas, post.threshold)?, &post);
    pred.save_png(&a.out.join("pred.png"))?;
    let thumb = thumbnail(&slide, params.mpp, a.thumbnail_side)?;
    emit_heatmap(&canvas, &thumb, gt.as_ref())?.save(a.out.join("heatmap.png"))?;
    write_json(&a.out.join("infer_config.json"), &InferFile {
        infer: Some(params),
        postprocess: post,
    })?;
    println!(
        "{}",
        serde_json::json!({
            "slide": slide.id,
            "width": canvas.width,
            "height": canvas.height,
            "positive_pixels": pred.count(),
        })
    );
    Ok(())
}

/// Slide ids with a ground-truth mask in `gt`, sorted.
fn gt_slides(gt: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for e in fs::read_dir(gt)? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".png") {
            if !id.ends_with("_rois") {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    require(&a.pred)?;
    require(&a.gt)?;
    let mut pairs = Vec::new();
    for id in gt_slides(&a.gt)? {
        let nested = a.pred.join(&id).join("pred.png");
        let flat = a.pred.join(format!("{id}.png"));
        match [nested, flat].into_iter().find(|p| p.exists()) {
            Some(p) => pairs.push((id, p)),
            None => log::warn!("no prediction for {id}; skipped"),
        }
    }
    if pairs.is_empty() {
        return Err(Error::Validation(format!(
            "no predictions in {} match ground truth in {}",
            a.pred.display(),
            a.gt.display()
        )));
    }
    let per_slide: Vec<Vec<RoiRow>> = pairs
        .par_iter()
        .map(|(id, pred_path)| {
            let pred = Mask::load_png(pred_path)?;
            let gt = GroundTruth::load(&a.gt.join(format!("{id}.png")), &a.gt.join(format!("{id}_rois.png")))?;
            confuse_slide(&pred, &gt, id)?
                .into_iter()
                .map(RoiRow::new)
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut report = aggregate(per_slide.into_iter().flatten().collect())?;
    report.meta.insert("pred".into(), a.pred.display().to_string().into());
    report.meta.insert("gt".into(), a.gt.display().to_string().into());
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    let table = report.to_table();
    fs::write(a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    require(path)?;
    Ok(image::open(path)?.to_rgb8())
}

pub fn cmd_stain(c: &StainCommand) -> Result<()> {
    match c {
        StainCommand::Estimate { image, beta, alpha } => {
            let m = estimate_stain_matrix(&load_rgb(image)?, *beta, *alpha)?;
            println!(
                "{}",
                serde_json::json!({ "h": m.h, "e": m.e, "matrix": m.to_array() })
            );
        }
        StainCommand::Normalize { image, out, target } => {
            let t = match target {
                Some(p) => StainMatrix::from_array(read_json(p)?)?,
                None => StainMatrix::from_array(REFERENCE_HE)?,
            };
            normalize(&load_rgb(image)?, &t)?.save(out)?;
        }
        StainCommand::Augment {
            image,
            out,
            sigma1,
            sigma2,
            seed,
        } => {
            let cfg = StainAugmentConfig {
                sigma1: *sigma1,
                sigma2: *sigma2,
                ..StainAugmentConfig::default()
            };
            cfg.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            augment_stain(&load_rgb(image)?, &cfg, &mut rng).save(out)?;
        }
    }
    Ok(())
}

pub fn cmd_tile(a: &TileArgs) -> Result<()> {
    for t in tessellate(a.width, a.height, a.patch, a.overlap, a.mpp)? {
        println!("{}", serde_json::to_string(&t)?);
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stain(c) => cmd_stain(c),
        Command::Tile(a) => cmd_tile(a),
    }
}

/// Exit code for a finished command.
pub fn exit_code(r: &Result<()>) -> i32 {
    match r {
        Ok(()) => EXIT_OK,
        Err(e) if e.is_config() => EXIT_CONFIG,
        Err(_) => EXIT_RUNTIME,
    }
}
