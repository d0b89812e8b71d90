//! Synthetic H&E-like slides with known dysplasia masks.
//!
//! Tissue sections are wobbly ellipses; dysplastic regions are discs whose
//! pixels use a haematoxylin-heavy, eosin-poor stain mixture, so a small
//! model can learn them from colour and texture alone.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morph::{label_components, Connectivity, Mask};
use crate::stain::{od_to_u8, StainMatrix, REFERENCE_HE};
use crate::wsi::{
    self, build_patch_dataset, tissue_mask, DatasetParams, DatasetSlide, GroundTruth, ManifestRow,
    SlideClass, WsiPyramid,
};

/// Stain vectors and illumination of one simulated scanner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScannerProfile {
    pub name: String,
    /// `[h_r, h_g, h_b, e_r, e_g, e_b]`.
    pub stain: [f64; 6],
    /// Multiplier on all optical densities.
    pub gain: f64,
}

pub fn default_scanners() -> Vec<ScannerProfile> {
    vec![
        ScannerProfile {
            name: "scanner_a".into(),
            stain: REFERENCE_HE,
            gain: 1.0,
        },
        ScannerProfile {
            name: "scanner_b".into(),
            stain: [0.60, 0.75, 0.35, 0.10, 0.95, 0.25],
            gain: 0.9,
        },
        ScannerProfile {
            name: "scanner_c".into(),
            stain: [0.70, 0.62, 0.36, 0.12, 0.98, 0.16],
            gain: 1.1,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideSpec {
    pub id: String,
    /// Canvas extents at 1.0 mpp.
    pub width: usize,
    pub height: usize,
    /// Base resolution; `1/base_mpp` must be an integer.
    pub base_mpp: f64,
    pub sections: usize,
    pub blobs: usize,
    /// Target dysplastic fraction of tissue pixels.
    pub positive_frac: f64,
    pub scanner: ScannerProfile,
    pub seed: u64,
}

impl SlideSpec {
    pub fn class(&self) -> SlideClass {
        if self.blobs == 0 {
            SlideClass::Control
        } else {
            SlideClass::Case
        }
    }

    fn upscale(&self) -> Result<usize> {
        let f = 1.0 / self.base_mpp;
        if !(f >= 1.0) || (f - f.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "base mpp {} must be 1/k for an integer k ≥ 1",
                self.base_mpp
            )));
        }
        Ok(f.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.upscale()?;
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!("canvas {}×{} is too small", self.width, self.height)));
        }
        if self.sections == 0 {
            return Err(Error::Config("at least one tissue section is needed".into()));
        }
        if self.blobs > 0 && !(self.positive_frac > 0.0 && self.positive_frac < 0.9) {
            return Err(Error::Config(format!(
                "positive fraction {} outside (0, 0.9)",
                self.positive_frac
            )));
        }
        StainMatrix::from_array(self.scanner.stain)?;
        Ok(())
    }
}

struct Section {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    phase: [f64; 2],
}

impl Section {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        let t = dy.atan2(dx);
        let wobble = 1.0 + 0.06 * (3.0 * t + self.phase[0]).sin() + 0.04 * (5.0 * t + self.phase[1]).sin();
        dx * dx + dy * dy < wobble * wobble
    }
}

struct Disc {
    cx: f64,
    cy: f64,
    /// Radius relative to the common scale.
    rel: f64,
}

/// Rendered slide and its canvas-resolution annotations.
pub struct SynthSlide {
    pub spec: SlideSpec,
    pub base: RgbImage,
    pub ground_truth: GroundTruth,
    pub tissue: Mask,
}

impl SynthSlide {
    pub fn positive_fraction(&self) -> f64 {
        let t = self.tissue.count();
        if t == 0 {
            0.0
        } else {
            self.ground_truth.mask.count() as f64 / t as f64
        }
    }
}

fn sections(spec: &SlideSpec, rng: &mut ChaCha8Rng) -> Vec<Section> {
    let n = spec.sections;
    let slot = spec.width as f64 / n as f64;
    (0..n)
        .map(|i| Section {
            cx: slot * (i as f64 + 0.5) + rng.gen_range(-0.03..0.03) * slot,
            cy: spec.height as f64 * rng.gen_range(0.47..0.53),
            rx: slot * rng.gen_range(0.36..0.42),
            ry: spec.height as f64 * rng.gen_range(0.34..0.40),
            phase: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
        })
        .collect()
}

fn disc_mask(w: usize, h: usize, discs: &[Disc], scale: f64, tissue: &Mask) -> Mask {
    Mask::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        tissue.get(x, y)
            && discs
                .iter()
                .any(|d| (px - d.cx).powi(2) + (py - d.cy).powi(2) < (d.rel * scale).powi(2))
    })
}

/// Disc radius scale whose union covers `target` of the tissue, by bisection
/// on the rasterized area.
fn fit_scale(w: usize, h: usize, discs: &[Disc], tissue: &Mask, target: f64) -> f64 {
    let total = tissue.count() as f64;
    let (mut lo, mut hi) = (0.0, (w.max(h)) as f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if disc_mask(w, h, discs, mid, tissue).count() as f64 / total < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

pub fn generate(spec: &SlideSpec) -> Result<SynthSlide> {
    spec.validate()?;
    let k = spec.upscale()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let secs = sections(spec, &mut rng);
    let tissue = Mask::from_fn(w, h, |x, y| {
        secs.iter().any(|s| s.contains(x as f64 + 0.5, y as f64 + 0.5))
    });
    if tissue.count() == 0 {
        return Err(Error::Config("canvas too small for any tissue".into()));
    }

    let discs: Vec<Disc> = (0..spec.blobs)
        .map(|_| loop {
            let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
            if tissue.get(x, y) {
                break Disc {
                    cx: x as f64 + 0.5,
                    cy: y as f64 + 0.5,
                    rel: rng.gen_range(0.8..1.2),
                };
            }
        })
        .collect();
    let scale = if discs.is_empty() {
        0.0
    } else {
        fit_scale(w, h, &discs, &tissue, spec.positive_frac)
    };
    let mask = disc_mask(w, h, &discs, scale, &tissue);

    let (labels, _) = label_components(&tissue, true, Connectivity::Eight);
    let rois: Vec<u16> = labels.iter().map(|&l| l as u16).collect();
    let ground_truth = GroundTruth::new(mask, rois)?;

    let sm = StainMatrix::from_array(spec.scanner.stain)?;
    let gain = spec.scanner.gain;
    let (bw, bh) = (w * k, h * k);
    let mut base = RgbImage::new(bw as u32, bh as u32);
    // nuclei: dark haematoxylin dots, denser in dysplastic regions
    let mut nuclei = vec![0.0f64; bw * bh];
    let n_nuclei = bw * bh / (40 * k * k);
    for _ in 0..n_nuclei {
        let (x, y) = (rng.gen_range(0..bw), rng.gen_range(0..bh));
        let (cx, cy) = (x / k, y / k);
        let dysplastic = ground_truth.mask.get(cx, cy);
        if !dysplastic && rng.gen_bool(0.5) {
            continue;
        }
        let r = (k as f64 * if dysplastic { 1.6 } else { 1.0 }).ceil() as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < bw && (ny as usize) < bh && dx * dx + dy * dy <= r * r {
                    nuclei[ny as usize * bw + nx as usize] = 1.0;
                }
            }
        }
    }
    for (i, px) in base.pixels_mut().enumerate() {
        let (x, y) = (i % bw, i / bw);
        let (cx, cy) = (x / k, y / k);
        if !tissue.get(cx, cy) {
            let v = 255 - rng.gen_range(0..6u8);
            *px = Rgb([v, v, v]);
            continue;
        }
        let dysplastic = ground_truth.mask.get(cx, cy);
        let (mut ch, mut ce): (f64, f64) = if dysplastic { (0.95, 0.30) } else { (0.35, 0.80) };
        ch += rng.gen_range(-0.08..0.08) + 0.6 * nuclei[i];
        ce += rng.gen_range(-0.08..0.08);
        let d = sm.compose([ch.max(0.0) * gain, ce.max(0.0) * gain]);
        *px = Rgb(d.map(od_to_u8));
    }
    Ok(SynthSlide {
        spec: spec.clone(),
        base,
        ground_truth,
        tissue,
    })
}

/// A synthetic cohort: cases and controls spread over scanners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub cases: usize,
    pub controls: usize,
    pub width: usize,
    pub height: usize,
    pub base_mpp: f64,
    pub sections: usize,
    pub blobs: usize,
    pub positive_frac: f64,
    pub scanners: Vec<ScannerProfile>,
    /// Pyramid level downsamples.
    pub downsamples: Vec<u32>,
    pub patch: usize,
    pub overlap: usize,
    pub min_tissue_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cases: 4,
            controls: 1,
            width: 256,
            height: 192,
            base_mpp: 0.5,
            sections: 1,
            blobs: 3,
            positive_frac: 0.3,
            scanners: default_scanners(),
            downsamples: vec![1, 4],
            patch: 64,
            overlap: 23,
            min_tissue_frac: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn slide_specs(&self) -> Result<Vec<SlideSpec>> {
        if self.scanners.is_empty() {
            return Err(Error::Config("at least one scanner profile is needed".into()));
        }
        let specs: Vec<SlideSpec> = (0..self.cases + self.controls)
            .map(|i| {
                let case = i < self.cases;
                SlideSpec {
                    id: if case {
                        format!("case_{i:03}")
                    } else {
                        format!("control_{:03}", i - self.cases)
                    },
                    width: self.width,
                    height: self.height,
                    base_mpp: self.base_mpp,
                    sections: self.sections,
                    blobs: if case { self.blobs } else { 0 },
                    positive_frac: self.positive_frac,
                    scanner: self.scanners[i % self.scanners.len()].clone(),
                    seed: self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                }
            })
            .collect();
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }
}

/// Paths inside a synthetic dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn slides(&self) -> PathBuf {
        self.root.join("slides")
    }

    pub fn slide(&self, id: &str) -> PathBuf {
        self.slides().join(id)
    }

    pub fn gt(&self) -> PathBuf {
        self.root.join("gt")
    }

    pub fn gt_mask(&self, id: &str) -> PathBuf {
        self.gt().join(format!("{id}.png"))
    }

    pub fn gt_rois(&self, id: &str) -> PathBuf {
        self.gt().join(format!("{id}_rois.png"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("synth.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub slides: Vec<String>,
    pub manifest_rows: usize,
    /// Achieved dysplastic fraction of tissue, per slide.
    pub positive_frac: Vec<f64>,
}

/// Render every slide, write pyramids, masks, ROI maps and the manifest.
pub fn write_dataset(out: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    let specs = cfg.slide_specs()?;
    let layout = DatasetLayout::new(out);
    fs::create_dir_all(layout.slides())?;
    fs::create_dir_all(layout.gt())?;
    let params = DatasetParams {
        patch: cfg.patch,
        overlap: cfg.overlap,
        min_tissue_frac: cfg.min_tissue_frac,
        positive_frac: 0.5,
        mpp: wsi::CANVAS_MPP,
    };
    let mut rows: Vec<ManifestRow> = Vec::new();
    let mut summary = SynthSummary {
        slides: Vec::new(),
        manifest_rows: 0,
        positive_frac: Vec::new(),
    };
    for spec in &specs {
        let s = generate(spec)?;
        let p = WsiPyramid::write(
            &layout.slide(&spec.id),
            &s.base,
            spec.base_mpp,
            &cfg.downsamples,
            Some(&spec.scanner.name),
            Some(spec.class()),
        )?;
        s.ground_truth.mask.save_png(&layout.gt_mask(&spec.id))?;
        s.ground_truth.save_rois(&layout.gt_rois(&spec.id))?;
        let tissue = tissue_mask(&p, wsi::CANVAS_MPP)?;
        rows.extend(build_patch_dataset(
            &[DatasetSlide {
                id: &spec.id,
                scanner: &spec.scanner.name,
                tissue: &tissue,
                annotation: &s.ground_truth.mask,
            }],
            &params,
        )?);
        log::info!("synth {}: {:.3} positive", spec.id, s.positive_fraction());
        summary.slides.push(spec.id.clone());
        summary.positive_frac.push(s.positive_fraction());
    }
    wsi::write_manifest(&layout.manifest(), &rows)?;
    serde_json::to_writer_pretty(fs::File::create(layout.config())?, cfg)?;
    summary.manifest_rows = rows.len();
    Ok(summary)
}
