//! Macenko stain-matrix estimation, colour deconvolution, stain
//! normalization and stain augmentation for H&E images.

use image::{Rgb, RgbImage};
use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 0.15;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const MIN_TISSUE_PIXELS: usize = 100;

/// Reference H&E optical densities (columns H, E, Ruifrok & Johnston), the
/// default normalization target.
pub const REFERENCE_HE: [f64; 6] = [0.65, 0.70, 0.29, 0.07, 0.99, 0.11];

/// Optical density of one 8-bit channel value.
pub fn od(v: u8) -> f64 {
    -((v as f64 + 1.0) / 255.0).log10()
}

/// Inverse of [`od`], rounded and clamped to u8.
pub fn od_to_u8(d: f64) -> u8 {
    (255.0 * 10f64.powf(-d) - 1.0).round().clamp(0.0, 255.0) as u8
}

pub fn rgb_to_od(img: &RgbImage) -> Vec<[f64; 3]> {
    img.pixels().map(|p| [od(p[0]), od(p[1]), od(p[2])]).collect()
}

pub fn od_to_rgb(field: &[[f64; 3]], width: u32, height: u32) -> Result<RgbImage> {
    if field.len() != (width as usize) * (height as usize) {
        return Err(Error::Shape(format!(
            "OD field of {} pixels does not fit {width}×{height}",
            field.len()
        )));
    }
    let mut img = RgbImage::new(width, height);
    for (px, d) in img.pixels_mut().zip(field) {
        *px = Rgb([od_to_u8(d[0]), od_to_u8(d[1]), od_to_u8(d[2])]);
    }
    Ok(img)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Angle between two vectors in degrees.
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainMatrix {
    /// Haematoxylin OD unit vector (R, G, B).
    pub h: [f64; 3],
    /// Eosin OD unit vector.
    pub e: [f64; 3],
    pub beta: f64,
    pub alpha: f64,
}

impl StainMatrix {
    /// Build from `[h_r, h_g, h_b, e_r, e_g, e_b]`, normalizing each column.
    pub fn from_array(v: [f64; 6]) -> Result<Self> {
        let h = [v[0], v[1], v[2]];
        let e = [v[3], v[4], v[5]];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) || norm(h) == 0.0 || norm(e) == 0.0 {
            return Err(Error::Validation(format!(
                "stain matrix needs six finite nonnegative numbers with nonzero columns, got {v:?}"
            )));
        }
        Ok(Self {
            h: unit(h),
            e: unit(e),
            beta: DEFAULT_BETA,
            alpha: DEFAULT_ALPHA,
        })
    }

    pub fn reference() -> Self {
        Self::from_array(REFERENCE_HE).expect("reference matrix is valid")
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.h[0], self.h[1], self.h[2], self.e[0], self.e[1], self.e[2]]
    }

    pub fn compose(&self, c: [f64; 2]) -> [f64; 3] {
        std::array::from_fn(|k| self.h[k] * c[0] + self.e[k] * c[1])
    }

    /// Nonnegative least squares `min ‖d − [h e]·c‖, c ≥ 0`.
    ///
    /// Solves the 2×2 normal equations; if that leaves the feasible set the
    /// optimum lies on an axis, where each candidate is a clamped projection.
    pub fn concentrations_of(&self, d: [f64; 3]) -> [f64; 2] {
        let (hh, ee, he) = (dot(self.h, self.h), dot(self.e, self.e), dot(self.h, self.e));
        let (hd, ed) = (dot(self.h, d), dot(self.e, d));
        let det = hh * ee - he * he;
        if det > 1e-15 {
            let ch = (ee * hd - he * ed) / det;
            let ce = (hh * ed - he * hd) / det;
            if ch >= 0.0 && ce >= 0.0 {
                return [ch, ce];
            }
        }
        let only_h = [(hd / hh).max(0.0), 0.0];
        let only_e = [0.0, (ed / ee).max(0.0)];
        let r = |c: [f64; 2]| {
            let m = self.compose(c);
            norm([d[0] - m[0], d[1] - m[1], d[2] - m[2]])
        };
        if r(only_h) <= r(only_e) {
            only_h
        } else {
            only_e
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 2]>,
}

/// Eigenvalues (descending) and unit eigenvectors of a symmetric 3×3 matrix,
/// by the trigonometric closed form.
pub fn symmetric_eigen3(a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let mut vals = if p1 == 0.0 {
        [a[0][0], a[1][1], a[2][2]]
    } else {
        let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b: [[f64; 3]; 3] = std::array::from_fn(|i| {
            std::array::from_fn(|j| (a[i][j] - if i == j { q } else { 0.0 }) / p)
        });
        let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
            - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
        let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
        let l1 = q + 2.0 * p * phi.cos();
        let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        [l1, 3.0 * q - l1 - l3, l3]
    };
    vals.sort_by(|x, y| y.total_cmp(x));

    let vector_for = |lambda: f64| -> [f64; 3] {
        let m: [[f64; 3]; 3] = std::array::from_fn(|i| {
            std::array::from_fn(|j| a[i][j] - if i == j { lambda } else { 0.0 })
        });
        let cands = [cross(m[0], m[1]), cross(m[0], m[2]), cross(m[1], m[2])];
        let best = cands
            .into_iter()
            .max_by(|x, y| norm(*x).total_cmp(&norm(*y)))
            .unwrap();
        if norm(best) < 1e-300 {
            // (A − λI) has rank ≤ 1: any vector orthogonal to its row space
            let r = m.into_iter().max_by(|x, y| norm(*x).total_cmp(&norm(*y))).unwrap();
            let axis = if r[0].abs() < 0.9 * norm(r).max(1e-300) { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let v = if norm(r) < 1e-300 { axis } else { cross(r, axis) };
            return unit(v);
        }
        unit(best)
    };
    let v1 = vector_for(vals[0]);
    let v3 = vector_for(vals[2]);
    let v3 = unit({
        let k = dot(v3, v1);
        [v3[0] - k * v1[0], v3[1] - k * v1[1], v3[2] - k * v1[2]]
    });
    let v2 = cross(v3, v1);
    (vals, [v1, v2, v3])
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Smallest eigenvalue ratio λ₂/λ₁ accepted as a genuine two-stain plane.
const MIN_PLANE_RATIO: f64 = 1e-3;
/// Smallest angle between recovered stain vectors.
const MIN_STAIN_ANGLE_DEG: f64 = 1.0;

/// Macenko estimation from the tissue pixels (OD norm above `beta`).
pub fn estimate_stain_matrix(img: &RgbImage, beta: f64, alpha: f64) -> Result<StainMatrix> {
    if !(0.0..50.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha {alpha} must lie in [0, 50)")));
    }
    let tissue: Vec<[f64; 3]> = rgb_to_od(img).into_iter().filter(|d| norm(*d) > beta).collect();
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(Error::Estimation(format!(
            "{} tissue pixels above OD {beta}, need at least {MIN_TISSUE_PIXELS}",
            tissue.len()
        )));
    }
    let n = tissue.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|k| tissue.iter().map(|d| d[k]).sum::<f64>() / n);
    let mut cov = [[0.0; 3]; 3];
    for d in &tissue {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += (d[i] - mean[i]) * (d[j] - mean[j]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n - 1.0;
        }
    }
    let (vals, vecs) = symmetric_eigen3(cov);
    if vals[0] <= 0.0 || vals[1] / vals[0] < MIN_PLANE_RATIO {
        return Err(Error::Estimation(format!(
            "OD covariance is rank-deficient (eigenvalues {:.3e}, {:.3e}); image looks single-stain",
            vals[0], vals[1]
        )));
    }
    let flip = |v: [f64; 3]| if v.iter().sum::<f64>() < 0.0 { v.map(|x| -x) } else { v };
    let (v1, v2) = (flip(vecs[0]), flip(vecs[1]));

    let mut phi: Vec<f64> = tissue.iter().map(|d| dot(*d, v2).atan2(dot(*d, v1))).collect();
    phi.sort_by(f64::total_cmp);
    let from_angle = |a: f64| -> [f64; 3] {
        let v: [f64; 3] = std::array::from_fn(|k| v1[k] * a.cos() + v2[k] * a.sin());
        let v = v.map(|x| x.max(0.0));
        if norm(v) == 0.0 {
            v
        } else {
            unit(v)
        }
    };
    let a = from_angle(percentile(&phi, alpha));
    let b = from_angle(percentile(&phi, 100.0 - alpha));
    if norm(a) == 0.0 || norm(b) == 0.0 || angle_deg(a, b) < MIN_STAIN_ANGLE_DEG {
        return Err(Error::Estimation(
            "recovered stain vectors coincide; image looks single-stain".into(),
        ));
    }
    let (h, e) = if a[2] >= b[2] { (a, b) } else { (b, a) };
    Ok(StainMatrix { h, e, beta, alpha })
}

pub fn get_concentrations(img: &RgbImage, sm: &StainMatrix) -> ConcentrationMap {
    ConcentrationMap {
        width: img.width(),
        height: img.height(),
        data: rgb_to_od(img).into_iter().map(|d| sm.concentrations_of(d)).collect(),
    }
}

/// Re-compose tissue pixels from `src` concentrations (after `f`) using `dst`;
/// background pixels (OD norm ≤ beta) keep their original value.
fn recompose_with(
    img: &RgbImage,
    src: &StainMatrix,
    dst: &StainMatrix,
    beta: f64,
    f: impl Fn([f64; 2]) -> [f64; 2],
) -> RgbImage {
    let mut out = img.clone();
    for px in out.pixels_mut() {
        let d = [od(px[0]), od(px[1]), od(px[2])];
        if norm(d) <= beta {
            continue;
        }
        let c = f(src.concentrations_of(d));
        *px = Rgb(dst.compose(c).map(od_to_u8));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StainAugmentConfig {
    pub sigma1: f64,
    pub sigma2: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl Default for StainAugmentConfig {
    fn default() -> Self {
        Self {
            sigma1: 0.2,
            sigma2: 0.2,
            beta: DEFAULT_BETA,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl StainAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma1) || !(self.sigma2 >= 0.0) {
            return Err(Error::Config(format!(
                "stain augmentation needs sigma1 in [0, 1] and sigma2 ≥ 0, got {} and {}",
                self.sigma1, self.sigma2
            )));
        }
        if !(self.beta > 0.0) || !(0.0..50.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "stain estimation needs beta > 0 and alpha in [0, 50), got {} and {}",
                self.beta, self.alpha
            )));
        }
        Ok(())
    }
}

/// `U(−s, s)`, or exactly 0 when `s` is 0.
fn symmetric(rng: &mut impl Rng, s: f64) -> f64 {
    if s > 0.0 {
        rng.gen_range(-s..s)
    } else {
        0.0
    }
}

/// Perturb stain concentrations `c' = α·c + β`, `α ~ U(1−σ₁, 1+σ₁)`,
/// `β ~ U(−σ₂, σ₂)` per stain, clamped at zero.
///
/// If the stain matrix cannot be estimated the input is returned unchanged.
pub fn augment_stain(img: &RgbImage, cfg: &StainAugmentConfig, rng: &mut impl Rng) -> RgbImage {
    let sm = match estimate_stain_matrix(img, cfg.beta, cfg.alpha) {
        Ok(sm) => sm,
        Err(e) => {
            warn!("stain augmentation skipped: {e}");
            return img.clone();
        }
    };
    let scale = [1.0 + symmetric(rng, cfg.sigma1), 1.0 + symmetric(rng, cfg.sigma1)];
    let shift = [symmetric(rng, cfg.sigma2), symmetric(rng, cfg.sigma2)];
    recompose_with(img, &sm, &sm, cfg.beta, |c| {
        [
            (scale[0] * c[0] + shift[0]).max(0.0),
            (scale[1] * c[1] + shift[1]).max(0.0),
        ]
    })
}

/// Re-express the image's stain concentrations with the `target` stain
/// vectors. Background pixels are left untouched.
pub fn normalize(img: &RgbImage, target: &StainMatrix) -> Result<RgbImage> {
    let src = estimate_stain_matrix(img, target.beta, target.alpha)?;
    Ok(recompose_with(img, &src, target, target.beta, |c| c))
}
