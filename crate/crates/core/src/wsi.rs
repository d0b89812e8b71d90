//! Multi-resolution slide store, mpp-aware region reads, tessellation,
//! tissue detection, ground-truth masks and patch manifests.
//!
//! A slide is a directory holding `meta.json` and one PNG per pyramid
//! level. Positions are given on a *canvas*: the slide resampled to some
//! target resolution (1.0 mpp by default).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morph::{self, Mask};

pub const CANVAS_MPP: f64 = 1.0;
pub const DEFAULT_PATCH: usize = 512;
pub const DEFAULT_OVERLAP: usize = 184;
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideClass {
    Case,
    Control,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMeta {
    pub downsample: f64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub width: u32,
    pub height: u32,
    pub mpp: f64,
    pub levels: Vec<LevelMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scanner: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<SlideClass>,
}

/// `⌈v⌉` tolerant to representation error just above an integer.
fn ceil_extent(v: f64) -> usize {
    (v - 1e-9).ceil().max(1.0) as usize
}

impl SlideMeta {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.mpp > 0.0) {
            return Err(Error::Validation(format!(
                "slide needs positive extents and mpp, got {}×{} at {}",
                self.width, self.height, self.mpp
            )));
        }
        match self.levels.first() {
            Some(l) if l.downsample == 1.0 => {}
            _ => return Err(Error::Validation("level 0 must have downsample 1".into())),
        }
        if self.levels.windows(2).any(|w| w[1].downsample <= w[0].downsample) {
            return Err(Error::Validation("level downsamples must strictly increase".into()));
        }
        Ok(())
    }

    pub fn level_extent(&self, level: usize) -> (usize, usize) {
        let d = self.levels[level].downsample;
        (
            ceil_extent(self.width as f64 / d),
            ceil_extent(self.height as f64 / d),
        )
    }

    /// Canvas extents at `mpp`.
    pub fn canvas_extent(&self, mpp: f64) -> (usize, usize) {
        let s = self.mpp / mpp;
        (
            ceil_extent(self.width as f64 * s),
            ceil_extent(self.height as f64 * s),
        )
    }
}

/// A slide pyramid. Level rasters are decoded on first use.
#[derive(Debug)]
pub struct WsiPyramid {
    pub id: String,
    pub meta: SlideMeta,
    dir: Option<PathBuf>,
    levels: Vec<OnceLock<RgbImage>>,
}

impl WsiPyramid {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Err(Error::MissingPath(meta_path));
        }
        let meta: SlideMeta = serde_json::from_reader(BufReader::new(File::open(&meta_path)?))?;
        meta.validate()?;
        for l in &meta.levels {
            let p = dir.join(&l.file);
            if !p.exists() {
                return Err(Error::MissingPath(p));
            }
        }
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let levels = meta.levels.iter().map(|_| OnceLock::new()).collect();
        Ok(Self {
            id,
            meta,
            dir: Some(dir.to_path_buf()),
            levels,
        })
    }

    /// In-memory pyramid; `images[i]` is level `i`.
    pub fn from_images(id: &str, meta: SlideMeta, images: Vec<RgbImage>) -> Result<Self> {
        meta.validate()?;
        if images.len() != meta.levels.len() {
            return Err(Error::Validation(format!(
                "{} level rasters for {} declared levels",
                images.len(),
                meta.levels.len()
            )));
        }
        let p = Self {
            id: id.to_string(),
            meta,
            dir: None,
            levels: images.into_iter().map(OnceLock::from).collect(),
        };
        for i in 0..p.levels.len() {
            p.check_level(i, p.levels[i].get().unwrap())?;
        }
        Ok(p)
    }

    /// Write `base` and box-averaged integer downsamples as a slide directory.
    pub fn write(
        dir: &Path,
        base: &RgbImage,
        mpp: f64,
        downsamples: &[u32],
        scanner: Option<&str>,
        class: Option<SlideClass>,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut levels = Vec::new();
        let mut images = Vec::new();
        for (i, &d) in downsamples.iter().enumerate() {
            let img = box_downsample(base, d);
            let file = format!("level{i}.png");
            img.save(dir.join(&file))?;
            levels.push(LevelMeta {
                downsample: d as f64,
                file,
            });
            images.push(img);
        }
        let meta = SlideMeta {
            width: base.width(),
            height: base.height(),
            mpp,
            levels,
            scanner: scanner.map(str::to_string),
            class,
        };
        meta.validate()?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(META_FILE))?), &meta)?;
        let mut p = Self::from_images(&dir.file_name().unwrap_or_default().to_string_lossy(), meta, images)?;
        p.dir = Some(dir.to_path_buf());
        Ok(p)
    }

    fn check_level(&self, i: usize, img: &RgbImage) -> Result<()> {
        let want = self.meta.level_extent(i);
        let got = (img.width() as usize, img.height() as usize);
        if got != want {
            return Err(Error::Validation(format!(
                "slide {}: level {i} raster is {got:?}, expected {want:?}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn level(&self, i: usize) -> Result<&RgbImage> {
        if let Some(img) = self.levels[i].get() {
            return Ok(img);
        }
        let dir = self.dir.as_ref().expect("in-memory levels are always initialized");
        let img = image::open(dir.join(&self.meta.levels[i].file))?.to_rgb8();
        self.check_level(i, &img)?;
        // a concurrent reader may have won the race; either copy is identical
        let _ = self.levels[i].set(img);
        Ok(self.levels[i].get().unwrap())
    }

    pub fn canvas_extent(&self, mpp: f64) -> (usize, usize) {
        self.meta.canvas_extent(mpp)
    }

    /// Level with the largest downsample not exceeding `scale` (base pixels
    /// per output pixel).
    pub fn level_for(&self, scale: f64) -> usize {
        self.meta
            .levels
            .iter()
            .rposition(|l| l.downsample <= scale * (1.0 + 1e-9))
            .unwrap_or(0)
    }

    /// Read a `w×h` rectangle at `(x, y)` of the canvas at `out_mpp`.
    ///
    /// Output pixel centres are mapped into the chosen level and sampled
    /// bilinearly; centres beyond the stored raster read as white.
    pub fn read_region(&self, x: usize, y: usize, w: usize, h: usize, out_mpp: f64) -> Result<RgbImage> {
        let (cw, ch) = self.canvas_extent(out_mpp);
        if w == 0 || h == 0 || x + w > cw || y + h > ch {
            return Err(Error::Bounds(format!(
                "region {w}×{h} at ({x}, {y}) outside {cw}×{ch} canvas at {out_mpp} mpp"
            )));
        }
        let scale = out_mpp / self.meta.mpp;
        let li = self.level_for(scale);
        let level = self.level(li)?;
        let f = scale / self.meta.levels[li].downsample;
        let (lw, lh) = (level.width() as f64, level.height() as f64);
        Ok(RgbImage::from_fn(w as u32, h as u32, |i, j| {
            let px = (x as f64 + i as f64 + 0.5) * f;
            let py = (y as f64 + j as f64 + 0.5) * f;
            if px >= lw || py >= lh {
                return Rgb([255, 255, 255]);
            }
            bilinear(level, px - 0.5, py - 0.5)
        }))
    }

    /// Read a tile, padding with white where it extends past the canvas.
    pub fn read_tile(&self, t: &TileSpec) -> Result<RgbImage> {
        let (cw, ch) = self.canvas_extent(t.mpp);
        if !t.padded {
            return self.read_region(t.x, t.y, t.size, t.size, t.mpp);
        }
        let (w, h) = ((cw - t.x).min(t.size), (ch - t.y).min(t.size));
        let part = self.read_region(t.x, t.y, w, h, t.mpp)?;
        let mut out = RgbImage::from_pixel(t.size as u32, t.size as u32, Rgb([255, 255, 255]));
        image::imageops::replace(&mut out, &part, 0, 0);
        Ok(out)
    }
}

fn bilinear(img: &RgbImage, u: f64, v: f64) -> Rgb<u8> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let clamp = |a: i64, n: i64| a.clamp(0, n - 1) as u32;
    let (xa, xb) = (clamp(x0 as i64, w), clamp(x0 as i64 + 1, w));
    let (ya, yb) = (clamp(y0 as i64, h), clamp(y0 as i64 + 1, h));
    let (p00, p10, p01, p11) = (
        img.get_pixel(xa, ya),
        img.get_pixel(xb, ya),
        img.get_pixel(xa, yb),
        img.get_pixel(xb, yb),
    );
    Rgb(std::array::from_fn(|c| {
        let top = (1.0 - fx) * p00[c] as f64 + fx * p10[c] as f64;
        let bottom = (1.0 - fx) * p01[c] as f64 + fx * p11[c] as f64;
        ((1.0 - fy) * top + fy * bottom).round().clamp(0.0, 255.0) as u8
    }))
}

/// Mean over `d×d` blocks; edge blocks average the pixels they contain.
pub fn box_downsample(img: &RgbImage, d: u32) -> RgbImage {
    if d <= 1 {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    let (ow, oh) = (w.div_ceil(d), h.div_ceil(d));
    RgbImage::from_fn(ow, oh, |i, j| {
        let mut acc = [0u64; 3];
        let mut n = 0u64;
        for y in j * d..((j + 1) * d).min(h) {
            for x in i * d..((i + 1) * d).min(w) {
                let p = img.get_pixel(x, y);
                for c in 0..3 {
                    acc[c] += p[c] as u64;
                }
                n += 1;
            }
        }
        Rgb(acc.map(|a| ((a + n / 2) / n) as u8))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub mpp: f64,
    /// The canvas is smaller than the tile along some axis; missing pixels
    /// are white.
    pub padded: bool,
}

/// Tile origins along one axis: multiples of the stride, the last one
/// clamped to `extent − patch`, duplicates removed.
pub fn axis_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&p| p + patch < extent).collect();
    let last = extent - patch;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Overlapping `patch×patch` tiles covering a `w×h` canvas, row-major.
pub fn tessellate(w: usize, h: usize, patch: usize, overlap: usize, mpp: f64) -> Result<Vec<TileSpec>> {
    if patch == 0 || overlap >= patch {
        return Err(Error::Config(format!(
            "patch {patch} must exceed overlap {overlap}"
        )));
    }
    let stride = patch - overlap;
    let padded = w < patch || h < patch;
    let xs = axis_positions(w, patch, stride);
    let ys = axis_positions(h, patch, stride);
    Ok(ys
        .iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| TileSpec {
                x,
                y,
                size: patch,
                mpp,
                padded,
            })
        })
        .collect())
}

/// Threshold maximizing between-class variance; class 0 is `≤ t`.
pub fn otsu_threshold(hist: &[u64; 256]) -> u8 {
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0u64, 0.0);
    let (mut best, mut best_t) = (-1.0, 0u8);
    for t in 0..256 {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t as u8;
        }
    }
    best_t
}

pub fn gray(p: &Rgb<u8>) -> u8 {
    (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8
}

/// Grey levels closer than this are treated as one class.
const MIN_TISSUE_CONTRAST: u8 = 8;
/// Mean grey above which a contrast-free slide counts as blank.
const BLANK_GREY: f64 = 220.0;
const TISSUE_OPEN_KERNEL: usize = 5;

/// Tissue detection at `mpp`: Otsu on the grey levels of the coarsest
/// level (tissue is the darker class), then an opening of radius 2.
pub fn tissue_mask(p: &WsiPyramid, mpp: f64) -> Result<Mask> {
    let (cw, ch) = p.canvas_extent(mpp);
    let coarse = p.meta.levels.last().unwrap().downsample * p.meta.mpp;
    let low_mpp = coarse.max(mpp);
    let (lw, lh) = p.canvas_extent(low_mpp);
    let low = p.read_region(0, 0, lw, lh, low_mpp)?;
    let mut hist = [0u64; 256];
    for px in low.pixels() {
        hist[gray(px) as usize] += 1;
    }
    let lo = hist.iter().position(|&c| c > 0).unwrap_or(0);
    let hi = hist.iter().rposition(|&c| c > 0).unwrap_or(0);
    let small = if hi - lo < MIN_TISSUE_CONTRAST as usize {
        let n: u64 = hist.iter().sum();
        let mean = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / n as f64;
        let tissue = mean < BLANK_GREY;
        Mask::from_fn(lw, lh, |_, _| tissue)
    } else {
        let t = otsu_threshold(&hist);
        Mask::from_fn(lw, lh, |x, y| gray(low.get_pixel(x as u32, y as u32)) <= t)
    };
    Ok(morph::open(&small.resized(cw, ch), TISSUE_OPEN_KERNEL))
}

/// Annotation mask and ROI index map on the 1.0 mpp canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub mask: Mask,
    /// 0 outside every ROI, ids dense from 1.
    pub rois: Vec<u16>,
    pub n_rois: u16,
}

impl GroundTruth {
    pub fn new(mask: Mask, rois: Vec<u16>) -> Result<Self> {
        if rois.len() != mask.width * mask.height {
            return Err(Error::Validation(format!(
                "ROI map has {} pixels, mask is {}×{}",
                rois.len(),
                mask.width,
                mask.height
            )));
        }
        let n = rois.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; n as usize + 1];
        for &r in &rois {
            seen[r as usize] = true;
        }
        if let Some(missing) = (1..=n as usize).find(|&i| !seen[i]) {
            return Err(Error::Validation(format!(
                "ROI ids must be dense from 1; id {missing} of {n} is absent"
            )));
        }
        Ok(Self { mask, rois, n_rois: n })
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn load(mask_png: &Path, rois_png: &Path) -> Result<Self> {
        let mask = Mask::load_png(mask_png)?;
        if !rois_png.exists() {
            return Err(Error::MissingPath(rois_png.to_path_buf()));
        }
        let rois_img = image::open(rois_png)?.to_luma16();
        if (rois_img.width() as usize, rois_img.height() as usize) != (mask.width, mask.height) {
            return Err(Error::Validation(format!(
                "ROI map {}×{} does not match mask {}×{}",
                rois_img.width(),
                rois_img.height(),
                mask.width,
                mask.height
            )));
        }
        Self::new(mask, rois_img.into_raw())
    }

    pub fn save_rois(&self, path: &Path) -> Result<()> {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width() as u32, self.height() as u32, self.rois.clone())
                .expect("ROI buffer matches extents");
        img.save(path)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileLabel {
    Normal,
    Dysplastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub slide: String,
    pub scanner: String,
    pub tile: TileSpec,
    pub label: TileLabel,
    pub tissue_frac: f64,
    pub positive_frac: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub patch: usize,
    pub overlap: usize,
    pub min_tissue_frac: f64,
    /// A tile is dysplastic when its annotated fraction exceeds this.
    pub positive_frac: f64,
    pub mpp: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            patch: DEFAULT_PATCH,
            overlap: DEFAULT_OVERLAP,
            min_tissue_frac: 0.1,
            positive_frac: 0.5,
            mpp: CANVAS_MPP,
        }
    }
}

pub struct DatasetSlide<'a> {
    pub id: &'a str,
    pub scanner: &'a str,
    pub tissue: &'a Mask,
    pub annotation: &'a Mask,
}

/// Summed-area table with a zero first row and column.
struct Integral {
    w: usize,
    s: Vec<u64>,
}

impl Integral {
    fn new(m: &Mask) -> Self {
        let w = m.width + 1;
        let mut s = vec![0u64; w * (m.height + 1)];
        for y in 0..m.height {
            for x in 0..m.width {
                s[(y + 1) * w + x + 1] =
                    m.get(x, y) as u64 + s[y * w + x + 1] + s[(y + 1) * w + x] - s[y * w + x];
            }
        }
        Self { w, s }
    }

    fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u64 {
        let w = self.w;
        self.s[y1 * w + x1] + self.s[y0 * w + x0] - self.s[y0 * w + x1] - self.s[y1 * w + x0]
    }
}

/// Tessellate each slide and keep tiles with enough tissue, labelled by
/// their annotated fraction. Fractions are relative to the full tile area.
pub fn build_patch_dataset(slides: &[DatasetSlide], params: &DatasetParams) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for s in slides {
        if !s.tissue.same_size(s.annotation) {
            return Err(Error::Validation(format!(
                "slide {}: tissue mask {}×{} and annotation {}×{} are misaligned",
                s.id, s.tissue.width, s.tissue.height, s.annotation.width, s.annotation.height
            )));
        }
        let (w, h) = (s.tissue.width, s.tissue.height);
        let tissue = Integral::new(s.tissue);
        let positive = Integral::new(s.annotation);
        let area = (params.patch * params.patch) as f64;
        for tile in tessellate(w, h, params.patch, params.overlap, params.mpp)? {
            let (x1, y1) = ((tile.x + tile.size).min(w), (tile.y + tile.size).min(h));
            let tissue_frac = tissue.sum(tile.x, tile.y, x1, y1) as f64 / area;
            if tissue_frac < params.min_tissue_frac {
                continue;
            }
            let positive_frac = positive.sum(tile.x, tile.y, x1, y1) as f64 / area;
            rows.push(ManifestRow {
                slide: s.id.to_string(),
                scanner: s.scanner.to_string(),
                tile,
                label: if positive_frac > params.positive_frac {
                    TileLabel::Dysplastic
                } else {
                    TileLabel::Normal
                },
                tissue_frac,
                positive_frac,
            });
        }
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let mut rows = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

/// Draw `n` row indices with replacement, each row weighted by the inverse
/// size of its (scanner, label) stratum so every stratum is equally likely.
pub fn weighted_sample(rows: &[ManifestRow], rng: &mut impl Rng, n: usize) -> Result<Vec<usize>> {
    if rows.is_empty() {
        return Err(Error::Validation("cannot sample from an empty manifest".into()));
    }
    let mut counts: HashMap<(&str, TileLabel), usize> = HashMap::new();
    for r in rows {
        *counts.entry((r.scanner.as_str(), r.label)).or_default() += 1;
    }
    let weights: Vec<f64> = rows
        .iter()
        .map(|r| 1.0 / counts[&(r.scanner.as_str(), r.label)] as f64)
        .collect();
    let dist = WeightedIndex::new(&weights).expect("weights are positive");
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}
