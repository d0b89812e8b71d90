//! Geometric and photometric training augmentations.
//!
//! Geometric transforms (flips, quarter-turn rotations) move patch and mask
//! together; photometric ones touch the patch only. Every random draw comes
//! from the caller's rng, so a seed fixes the output bit for bit.

use image::{imageops, GrayImage, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toggle {
    pub enabled: bool,
    pub p: f64,
}

impl Toggle {
    pub const fn on(p: f64) -> Self {
        Self { enabled: true, p }
    }

    pub const OFF: Toggle = Toggle { enabled: false, p: 0.0 };

    fn fires(&self, rng: &mut impl Rng) -> bool {
        // always consume a draw so enabling one transform does not shift the
        // random stream seen by the others
        let u: f64 = rng.gen();
        self.enabled && u < self.p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColourStrengths {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Fraction of a full hue turn.
    pub hue: f64,
}

impl Default for ColourStrengths {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
            hue: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub hflip: Toggle,
    pub vflip: Toggle,
    pub rotate90: Toggle,
    pub gaussian_blur: Toggle,
    pub median_blur: Toggle,
    pub colour: Toggle,
    pub blur_sigma: [f64; 2],
    pub median_kernels: Vec<usize>,
    pub colour_strengths: ColourStrengths,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip: Toggle::on(0.5),
            vflip: Toggle::on(0.5),
            rotate90: Toggle::on(0.5),
            gaussian_blur: Toggle::on(0.5),
            median_blur: Toggle::on(0.5),
            colour: Toggle::on(0.5),
            blur_sigma: [0.25, 1.5],
            median_kernels: vec![3, 5],
            colour_strengths: ColourStrengths::default(),
        }
    }
}

impl AugmentPolicy {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            hflip: Toggle::OFF,
            vflip: Toggle::OFF,
            rotate90: Toggle::OFF,
            gaussian_blur: Toggle::OFF,
            median_blur: Toggle::OFF,
            colour: Toggle::OFF,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let toggles = [
            ("hflip", self.hflip),
            ("vflip", self.vflip),
            ("rotate90", self.rotate90),
            ("gaussian_blur", self.gaussian_blur),
            ("median_blur", self.median_blur),
            ("colour", self.colour),
        ];
        for (name, t) in toggles {
            if !(0.0..=1.0).contains(&t.p) {
                return Err(Error::Config(format!("{name} probability {} outside [0, 1]", t.p)));
            }
        }
        let [lo, hi] = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("blur sigma range [{lo}, {hi}] must be positive and ordered")));
        }
        if self.median_kernels.is_empty() || self.median_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "median kernels {:?} must be a non-empty list of odd sizes",
                self.median_kernels
            )));
        }
        let c = self.colour_strengths;
        if [c.brightness, c.contrast, c.saturation, c.hue].iter().any(|s| !(0.0..1.0).contains(s)) {
            return Err(Error::Config(format!("colour strengths {c:?} must lie in [0, 1)")));
        }
        Ok(())
    }
}

/// Augment a patch and its label mask.
pub fn apply(
    policy: &AugmentPolicy,
    patch: &RgbImage,
    mask: &GrayImage,
    rng: &mut impl Rng,
) -> Result<(RgbImage, GrayImage)> {
    if patch.dimensions() != mask.dimensions() {
        return Err(Error::Validation(format!(
            "patch {:?} and mask {:?} differ in size",
            patch.dimensions(),
            mask.dimensions()
        )));
    }
    let (mut p, mut m) = (patch.clone(), mask.clone());
    if policy.hflip.fires(rng) {
        imageops::flip_horizontal_in_place(&mut p);
        imageops::flip_horizontal_in_place(&mut m);
    }
    if policy.vflip.fires(rng) {
        imageops::flip_vertical_in_place(&mut p);
        imageops::flip_vertical_in_place(&mut m);
    }
    let quarter_turns = rng.gen_range(1..4);
    if policy.rotate90.fires(rng) {
        (p, m) = match quarter_turns {
            1 => (imageops::rotate90(&p), imageops::rotate90(&m)),
            2 => (imageops::rotate180(&p), imageops::rotate180(&m)),
            _ => (imageops::rotate270(&p), imageops::rotate270(&m)),
        };
    }
    let sigma = rng.gen_range(policy.blur_sigma[0]..=policy.blur_sigma[1]);
    if policy.gaussian_blur.fires(rng) {
        p = gaussian_blur(&p, sigma);
    }
    let k = policy.median_kernels[rng.gen_range(0..policy.median_kernels.len())];
    if policy.median_blur.fires(rng) {
        p = median_blur(&p, k)?;
    }
    let factors = ColourFactors::sample(&policy.colour_strengths, rng);
    if policy.colour.fires(rng) {
        p = colour_perturb(&p, &factors);
    }
    Ok((p, m))
}

/// Index into `0..n` with half-sample symmetric reflection (`… b a | a b …`).
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Normalized Gaussian taps for offsets `−r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur of one `w×h` plane with reflected edges.
pub fn gaussian_blur_plane(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * plane[y * w + reflect(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[reflect(y as isize + t as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn planes(img: &RgbImage) -> [Vec<f64>; 3] {
    std::array::from_fn(|c| img.pixels().map(|p| p[c] as f64).collect())
}

fn from_planes(w: u32, h: u32, planes: &[Vec<f64>; 3]) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        Rgb(std::array::from_fn(|c| planes[c][i].round().clamp(0.0, 255.0) as u8))
    })
}

pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let blurred = planes(img).map(|p| gaussian_blur_plane(&p, w as usize, h as usize, sigma));
    from_planes(w, h, &blurred)
}

/// Per-channel `k×k` median with reflected edges.
pub fn median_blur(img: &RgbImage, k: usize) -> Result<RgbImage> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::Validation(format!("median kernel {k} must be odd")));
    }
    let (w, h) = img.dimensions();
    let r = (k / 2) as isize;
    let mut window = Vec::with_capacity(k * k);
    let mut out = RgbImage::new(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sx, sy) = (reflect(x + dx, w as usize), reflect(y + dy, h as usize));
                        window.push(img.get_pixel(sx as u32, sy as u32)[c]);
                    }
                }
                let mid = window.len() / 2;
                *v = *window.select_nth_unstable(mid).1;
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(out)
}

/// Concrete colour-jitter factors; the identity is `(1, 1, 1, 0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColourFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
}

impl ColourFactors {
    pub const IDENTITY: ColourFactors = ColourFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue_shift: 0.0,
    };

    pub fn sample(s: &ColourStrengths, rng: &mut impl Rng) -> Self {
        let mut around = |centre: f64, s: f64| if s > 0.0 { centre + rng.gen_range(-s..s) } else { centre };
        Self {
            brightness: around(1.0, s.brightness),
            contrast: around(1.0, s.contrast),
            saturation: around(1.0, s.saturation),
            hue_shift: around(0.0, s.hue),
        }
    }
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Brightness and contrast as affine maps on intensity (contrast about the
/// mean grey level), then saturation scale and hue shift through HSV.
pub fn colour_perturb(img: &RgbImage, f: &ColourFactors) -> RgbImage {
    if *f == ColourFactors::IDENTITY {
        return img.clone();
    }
    let n = (img.width() * img.height()).max(1) as f64;
    let mean = img
        .pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .sum::<f64>()
        / n
        * f.brightness;
    let hsv_needed = f.saturation != 1.0 || f.hue_shift != 0.0;
    let mut out = img.clone();
    for px in out.pixels_mut() {
        let mut v: [f64; 3] = std::array::from_fn(|c| {
            let b = px[c] as f64 * f.brightness;
            ((b - mean) * f.contrast + mean).clamp(0.0, 255.0)
        });
        if hsv_needed {
            let [h, s, val] = rgb_to_hsv(v.map(|c| c / 255.0));
            v = hsv_to_rgb([h + f.hue_shift, (s * f.saturation).clamp(0.0, 1.0), val]).map(|c| c * 255.0);
        }
        *px = Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8));
    }
    out
}
