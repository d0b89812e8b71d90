//! Binary masks and the morphology used for post-processing.

use std::collections::VecDeque;
use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..width * height).map(|i| f(i % width, i / width)).collect();
        Self { width, height, data }
    }

    fn with_data(&self, data: Vec<bool>) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Nonzero pixels are foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p[0] != 0).collect(),
        }
    }

    /// 0 / 255 raster.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Ok(Self::from_gray(&image::open(path)?.to_luma8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path)?;
        Ok(())
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }
}

/// Running OR (`grow`) or AND (`!grow`) over a centred 1-D window of odd
/// length `k`. Out-of-range samples read as `border`.
fn line_filter(line: &[bool], k: usize, grow: bool, border: bool) -> Vec<bool> {
    let r = (k / 2) as isize;
    let n = line.len() as isize;
    (0..n)
        .map(|i| {
            let mut any = false;
            let mut all = true;
            for j in i - r..=i + r {
                let v = if j < 0 || j >= n { border } else { line[j as usize] };
                any |= v;
                all &= v;
            }
            if grow {
                any
            } else {
                all
            }
        })
        .collect()
}

fn separable(m: &Mask, k: usize, grow: bool, border: bool) -> Mask {
    if k <= 1 {
        return m.clone();
    }
    let (w, h) = (m.width, m.height);
    let mut rows = Vec::with_capacity(w * h);
    for y in 0..h {
        rows.extend(line_filter(&m.data[y * w..(y + 1) * w], k, grow, border));
    }
    let mut out = Mask::new(w, h);
    let mut col = vec![false; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        for (y, v) in line_filter(&col, k, grow, border).into_iter().enumerate() {
            out.data[y * w + x] = v;
        }
    }
    out
}

/// Dilation by a `k×k` square; pixels outside the mask count as background.
pub fn dilate(m: &Mask, k: usize) -> Mask {
    separable(m, k, true, false)
}

/// Erosion by a `k×k` square; pixels outside count as foreground, which makes
/// erosion the exact adjoint of [`dilate`] so that opening and closing are
/// idempotent.
pub fn erode(m: &Mask, k: usize) -> Mask {
    separable(m, k, false, true)
}

pub fn close(m: &Mask, k: usize) -> Mask {
    erode(&dilate(m, k), k)
}

pub fn open(m: &Mask, k: usize) -> Mask {
    dilate(&erode(m, k), k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

/// Components of pixels equal to `value`, labelled 1.. in raster order of
/// their first pixel; other pixels get 0.
pub fn label_components(m: &Mask, value: bool, conn: Connectivity) -> (Vec<u32>, u32) {
    let (w, h) = (m.width, m.height);
    let mut labels = vec![0u32; w * h];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if m.data[start] != value || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for &(dx, dy) in conn.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if m.data[j] == value && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, next)
}

/// Drop 8-connected foreground components smaller than `min_area`.
pub fn remove_small_objects(m: &Mask, min_area: usize) -> Mask {
    if min_area == 0 {
        return m.clone();
    }
    let (labels, n) = label_components(m, true, Connectivity::Eight);
    let mut area = vec![0usize; n as usize + 1];
    for &l in &labels {
        area[l as usize] += 1;
    }
    let data = labels.iter().map(|&l| l != 0 && area[l as usize] >= min_area).collect();
    m.with_data(data)
}

/// Fill 4-connected background components smaller than `min_area` that do
/// not touch the mask border.
pub fn fill_small_holes(m: &Mask, min_area: usize) -> Mask {
    if min_area == 0 {
        return m.clone();
    }
    let (w, h) = (m.width, m.height);
    let (labels, n) = label_components(m, false, Connectivity::Four);
    let mut area = vec![0usize; n as usize + 1];
    let mut touches = vec![false; n as usize + 1];
    for (i, &l) in labels.iter().enumerate() {
        area[l as usize] += 1;
        let (x, y) = (i % w, i / w);
        if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
            touches[l as usize] = true;
        }
    }
    let data = m
        .data
        .iter()
        .zip(&labels)
        .map(|(&v, &l)| v || (l != 0 && !touches[l as usize] && area[l as usize] < min_area))
        .collect();
    m.with_data(data)
}

/// Foreground pixels with at least one 4-neighbour in the background (or on
/// the mask border).
pub fn boundary(m: &Mask) -> Mask {
    let (w, h) = (m.width, m.height);
    let data = (0..w * h)
        .map(|i| {
            if !m.data[i] {
                return false;
            }
            let (x, y) = (i % w, i / w);
            x == 0 || y == 0 || x + 1 == w || y + 1 == h
                || !m.data[i - 1]
                || !m.data[i + 1]
                || !m.data[i - w]
                || !m.data[i + w]
        })
        .collect();
    m.with_data(data)
}
