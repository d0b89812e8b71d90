//! Tile-wise inference, overlap-averaged probability canvas, binarization,
//! post-processing and heatmaps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{images_to_batch, Mode, TransUnet};
use crate::morph::{self, Mask};
use crate::wsi::{self, TileSpec, WsiPyramid};

pub const CANVAS_FILE: &str = "canvas.f32";
pub const CANVAS_META_FILE: &str = "canvas.json";

/// Anything that maps RGB tiles to per-pixel foreground probabilities.
pub trait TileModel: Sync {
    fn tile_size(&self) -> usize;

    /// One row-major probability map per tile.
    fn foreground(&self, tiles: &[&RgbImage]) -> Result<Vec<Vec<f32>>>;
}

impl TileModel for TransUnet {
    fn tile_size(&self) -> usize {
        self.config().input_size
    }

    fn foreground(&self, tiles: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        if self.mode() != Mode::Eval {
            return Err(Error::State("inference needs the model in eval mode".into()));
        }
        let probs = self.predict_foreground(&images_to_batch(tiles)?)?;
        let hw = probs.shape()[1] * probs.shape()[2];
        Ok(probs.data().chunks(hw).map(|c| c.iter().map(|&v| v as f32).collect()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanvasMeta {
    pub width: usize,
    pub height: usize,
    pub mpp: f64,
}

/// Running per-pixel sum and count of tile probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityCanvas {
    pub width: usize,
    pub height: usize,
    pub mpp: f64,
    sum: Vec<f32>,
    count: Vec<u16>,
    finalized: bool,
}

impl ProbabilityCanvas {
    pub fn new(width: usize, height: usize, mpp: f64) -> Self {
        Self {
            width,
            height,
            mpp,
            sum: vec![0.0; width * height],
            count: vec![0; width * height],
            finalized: false,
        }
    }

    /// Add a `size×size` probability map at `(x, y)`; parts outside the
    /// canvas are dropped.
    pub fn add_tile(&mut self, x: usize, y: usize, size: usize, probs: &[f32]) -> Result<()> {
        if self.finalized {
            return Err(Error::State("canvas already finalized".into()));
        }
        if probs.len() != size * size {
            return Err(Error::Shape(format!(
                "{} probabilities for a {size}×{size} tile",
                probs.len()
            )));
        }
        for ty in 0..size.min(self.height.saturating_sub(y)) {
            let row = (y + ty) * self.width;
            for tx in 0..size.min(self.width.saturating_sub(x)) {
                let i = row + x + tx;
                self.sum[i] += probs[ty * size + tx];
                self.count[i] += 1;
            }
        }
        Ok(())
    }

    /// Add a constant value over a tile's footprint.
    pub fn add_constant(&mut self, x: usize, y: usize, size: usize, value: f32) -> Result<()> {
        self.add_tile(x, y, size, &vec![value; size * size])
    }

    /// Replace sums by means. Pixels no tile reached become 0.
    pub fn finalize(&mut self) {
        if self.finalized {
            return;
        }
        for (s, &c) in self.sum.iter_mut().zip(&self.count) {
            *s = if c == 0 { 0.0 } else { (*s / c as f32).clamp(0.0, 1.0) };
        }
        self.finalized = true;
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn counts(&self) -> &[u16] {
        &self.count
    }

    pub fn probabilities(&self) -> Result<&[f32]> {
        if !self.finalized {
            return Err(Error::State("canvas is not finalized".into()));
        }
        Ok(&self.sum)
    }

    pub fn meta(&self) -> CanvasMeta {
        CanvasMeta {
            width: self.width,
            height: self.height,
            mpp: self.mpp,
        }
    }

    /// Write `canvas.f32` (little-endian) and its `canvas.json` sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let probs = self.probabilities()?;
        let mut f = BufWriter::new(File::create(dir.join(CANVAS_FILE))?);
        for v in probs {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        serde_json::to_writer_pretty(File::create(dir.join(CANVAS_META_FILE))?, &self.meta())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(CANVAS_META_FILE);
        let data_path = dir.join(CANVAS_FILE);
        for p in [&meta_path, &data_path] {
            if !p.exists() {
                return Err(Error::MissingPath(p.clone()));
            }
        }
        let meta: CanvasMeta = serde_json::from_reader(BufReader::new(File::open(meta_path)?))?;
        let mut bytes = Vec::new();
        File::open(data_path)?.read_to_end(&mut bytes)?;
        if bytes.len() != meta.width * meta.height * 4 {
            return Err(Error::Validation(format!(
                "canvas file holds {} bytes, expected {}",
                bytes.len(),
                meta.width * meta.height * 4
            )));
        }
        let sum = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            width: meta.width,
            height: meta.height,
            mpp: meta.mpp,
            sum,
            count: vec![1; meta.width * meta.height],
            finalized: true,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferParams {
    pub patch: usize,
    pub overlap: usize,
    pub mpp: f64,
    /// Tiles with less tissue contribute probability 0.
    pub min_tissue_frac: f64,
    pub batch_size: usize,
    pub workers: usize,
}

impl Default for InferParams {
    fn default() -> Self {
        Self {
            patch: wsi::DEFAULT_PATCH,
            overlap: wsi::DEFAULT_OVERLAP,
            mpp: wsi::CANVAS_MPP,
            min_tissue_frac: 0.1,
            batch_size: 4,
            workers: 1,
        }
    }
}

fn tissue_fraction(tissue: &Mask, t: &TileSpec) -> f64 {
    let mut n = 0usize;
    for y in t.y..(t.y + t.size).min(tissue.height) {
        for x in t.x..(t.x + t.size).min(tissue.width) {
            n += tissue.get(x, y) as usize;
        }
    }
    n as f64 / (t.size * t.size) as f64
}

/// Run `model` over every tile of the slide and average overlapping tiles.
///
/// Tiles are computed on `params.workers` threads in fixed batches, then
/// committed to the canvas in tessellation order, so the result is bitwise
/// independent of the worker count.
pub fn infer_canvas(p: &WsiPyramid, model: &dyn TileModel, params: &InferParams) -> Result<ProbabilityCanvas> {
    if model.tile_size() != params.patch {
        return Err(Error::Config(format!(
            "model takes {} px tiles but inference uses {} px",
            model.tile_size(),
            params.patch
        )));
    }
    if params.batch_size == 0 || params.workers == 0 {
        return Err(Error::Config("batch size and worker count must be positive".into()));
    }
    let (w, h) = p.canvas_extent(params.mpp);
    let tiles = wsi::tessellate(w, h, params.patch, params.overlap, params.mpp)?;
    let tissue = wsi::tissue_mask(p, params.mpp)?;
    let keep: Vec<bool> = tiles
        .iter()
        .map(|t| tissue_fraction(&tissue, t) >= params.min_tissue_frac)
        .collect();
    let active: Vec<&TileSpec> = tiles.iter().zip(&keep).filter(|(_, &k)| k).map(|(t, _)| t).collect();
    log::info!(
        "slide {}: {} tiles, {} with tissue, {} workers",
        p.id,
        tiles.len(),
        active.len(),
        params.workers
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let batches: Vec<&[&TileSpec]> = active.chunks(params.batch_size).collect();
    let results: Vec<Result<Vec<Vec<f32>>>> = pool.install(|| {
        batches
            .par_iter()
            .map(|batch| {
                let imgs = batch.iter().map(|t| p.read_tile(t)).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&RgbImage> = imgs.iter().collect();
                model.foreground(&refs)
            })
            .collect()
    });

    let mut canvas = ProbabilityCanvas::new(w, h, params.mpp);
    let mut probs = Vec::with_capacity(active.len());
    for r in results {
        probs.extend(r?);
    }
    let mut next = probs.into_iter();
    for (t, &k) in tiles.iter().zip(&keep) {
        if k {
            let pr = next.next().expect("one result per active tile");
            canvas.add_tile(t.x, t.y, t.size, &pr)?;
        } else {
            canvas.add_constant(t.x, t.y, t.size, 0.0)?;
        }
    }
    canvas.finalize();
    Ok(canvas)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessParams {
    pub threshold: f64,
    pub close_kernel: usize,
    pub open_kernel: usize,
    pub min_object_area: usize,
    pub min_hole_area: usize,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            close_kernel: 5,
            open_kernel: 5,
            min_object_area: 1000,
            min_hole_area: 1000,
        }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("close_kernel", self.close_kernel), ("open_kernel", self.open_kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and ≥ 1, got {k}")));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// `prob > threshold`.
pub fn binarize(canvas: &ProbabilityCanvas, threshold: f64) -> Result<Mask> {
    let probs = canvas.probabilities()?;
    Ok(Mask {
        width: canvas.width,
        height: canvas.height,
        data: probs.iter().map(|&p| p as f64 > threshold).collect(),
    })
}

/// Closing, opening, small-object removal, then small-hole filling.
pub fn post_process(mask: &Mask, params: &PostprocessParams) -> Mask {
    let m = morph::close(mask, params.close_kernel);
    let m = morph::open(&m, params.open_kernel);
    let m = morph::remove_small_objects(&m, params.min_object_area);
    morph::fill_small_holes(&m, params.min_hole_area)
}

/// Linear blue-to-red ramp.
pub fn colormap(p: f32) -> Rgb<u8> {
    let p = p.clamp(0.0, 1.0) as f64;
    Rgb([(255.0 * p).round() as u8, 0, (255.0 * (1.0 - p)).round() as u8])
}

pub const HEATMAP_ALPHA: f64 = 0.5;
const CONTOUR: Rgb<u8> = Rgb([0, 255, 0]);

/// Probability heatmap blended over `thumbnail`, with the ground-truth
/// outline in green when given. Output has the thumbnail's size.
pub fn emit_heatmap(canvas: &ProbabilityCanvas, thumbnail: &RgbImage, gt: Option<&Mask>) -> Result<RgbImage> {
    let probs = canvas.probabilities()?;
    let (tw, th) = (thumbnail.width() as usize, thumbnail.height() as usize);
    // the thumbnail may round each side by up to one pixel
    let cross = (tw * canvas.height) as f64 - (th * canvas.width) as f64;
    if cross.abs() > (canvas.width.max(canvas.height)) as f64 {
        return Err(Error::Validation(format!(
            "thumbnail {tw}×{th} does not match canvas aspect {}×{}",
            canvas.width, canvas.height
        )));
    }
    if let Some(g) = gt {
        if (g.width, g.height) != (canvas.width, canvas.height) {
            return Err(Error::Validation(format!(
                "ground truth {}×{} does not match canvas {}×{}",
                g.width, g.height, canvas.width, canvas.height
            )));
        }
    }
    let contour = gt.map(|g| morph::boundary(&morph::dilate(&g.resized(tw, th), 1)));
    let sx = canvas.width as f64 / tw as f64;
    let sy = canvas.height as f64 / th as f64;
    Ok(RgbImage::from_fn(tw as u32, th as u32, |x, y| {
        if contour.as_ref().is_some_and(|c| c.get(x as usize, y as usize)) {
            return CONTOUR;
        }
        let cx = (((x as f64 + 0.5) * sx) as usize).min(canvas.width - 1);
        let cy = (((y as f64 + 0.5) * sy) as usize).min(canvas.height - 1);
        let c = colormap(probs[cy * canvas.width + cx]);
        let t = thumbnail.get_pixel(x, y);
        Rgb(std::array::from_fn(|k| {
            ((1.0 - HEATMAP_ALPHA) * t[k] as f64 + HEATMAP_ALPHA * c[k] as f64).round() as u8
        }))
    }))
}

/// Whole-slide thumbnail on the canvas grid, longest side at most `max_side`.
pub fn thumbnail(p: &WsiPyramid, canvas_mpp: f64, max_side: usize) -> Result<RgbImage> {
    let (w, h) = p.canvas_extent(canvas_mpp);
    let f = (w.max(h) as f64 / max_side as f64).max(1.0);
    let mpp = canvas_mpp * f;
    let (tw, th) = p.canvas_extent(mpp);
    p.read_region(0, 0, tw, th, mpp)
}
