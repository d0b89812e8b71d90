mod common;

use std::collections::HashMap;

use common::rng;
use dysseg::morph::Mask;
use dysseg::wsi::{
    axis_positions, box_downsample, build_patch_dataset, read_manifest, tessellate, tissue_mask,
    weighted_sample, write_manifest, DatasetParams, DatasetSlide, GroundTruth, LevelMeta,
    ManifestRow, SlideClass, SlideMeta, TileLabel, TileSpec, WsiPyramid,
};
use dysseg::Error;
use image::{Rgb, RgbImage};
use rand::Rng;

fn meta(w: u32, h: u32, mpp: f64, downsamples: &[u32]) -> SlideMeta {
    SlideMeta {
        width: w,
        height: h,
        mpp,
        levels: downsamples
            .iter()
            .enumerate()
            .map(|(i, &d)| LevelMeta {
                downsample: d as f64,
                file: format!("level{i}.png"),
            })
            .collect(),
        scanner: None,
        class: None,
    }
}

fn pyramid(base: RgbImage, mpp: f64, downsamples: &[u32]) -> WsiPyramid {
    let m = meta(base.width(), base.height(), mpp, downsamples);
    let levels = downsamples.iter().map(|&d| box_downsample(&base, d)).collect();
    WsiPyramid::from_images("s", m, levels).unwrap()
}

fn noise(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut r = rng(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([r.gen(), r.gen(), r.gen()]))
}

#[test]
fn aligned_read_at_base_mpp_is_bitwise() {
    let base = noise(1, 97, 61);
    let p = pyramid(base.clone(), 0.5, &[1, 4]);
    let got = p.read_region(13, 7, 40, 30, 0.5).unwrap();
    let want = image::imageops::crop_imm(&base, 13, 7, 40, 30).to_image();
    assert_eq!(got, want);
}

#[test]
fn quarter_micron_slide_reads_at_one_micron() {
    let base = RgbImage::from_pixel(4096, 4096, Rgb([200, 120, 180]));
    let p = pyramid(base, 0.25, &[1, 4, 16]);
    assert_eq!(p.canvas_extent(1.0), (1024, 1024));
    assert_eq!(p.level_for(4.0), 1);
    let img = p.read_region(0, 0, 1024, 1024, 1.0).unwrap();
    assert_eq!(img.dimensions(), (1024, 1024));
    assert!(img.pixels().all(|&px| px == Rgb([200, 120, 180])));
}

#[test]
fn downscaling_constant_stays_constant() {
    let base = RgbImage::from_pixel(301, 203, Rgb([17, 250, 90]));
    let p = pyramid(base, 0.5, &[1, 2, 8]);
    for mpp in [0.5, 0.7, 1.0, 3.3, 9.0] {
        let (w, h) = p.canvas_extent(mpp);
        let img = p.read_region(0, 0, w, h, mpp).unwrap();
        assert!(img.pixels().all(|&px| px == Rgb([17, 250, 90])), "mpp {mpp}");
    }
}

#[test]
fn region_outside_canvas_is_a_bounds_error() {
    let p = pyramid(noise(2, 64, 64), 1.0, &[1]);
    assert!(matches!(p.read_region(60, 0, 5, 5, 1.0), Err(Error::Bounds(_))));
    assert!(matches!(p.read_region(0, 0, 33, 1, 2.0), Err(Error::Bounds(_))));
}

#[test]
fn pyramid_round_trips_through_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let slide = dir.path().join("slide7");
    let base = noise(3, 50, 34);
    WsiPyramid::write(&slide, &base, 0.5, &[1, 2, 4], Some("scannerA"), Some(SlideClass::Case)).unwrap();
    let p = WsiPyramid::open(&slide).unwrap();
    assert_eq!(p.id, "slide7");
    assert_eq!(p.meta.scanner.as_deref(), Some("scannerA"));
    assert_eq!(p.meta.class, Some(SlideClass::Case));
    assert_eq!(p.level(0).unwrap(), &base);
    assert_eq!(p.level(2).unwrap().dimensions(), (13, 9));

    std::fs::remove_file(slide.join("level1.png")).unwrap();
    assert!(matches!(WsiPyramid::open(&slide), Err(Error::MissingPath(_))));
}

#[test]
fn mismatched_level_raster_is_rejected() {
    let m = meta(40, 40, 1.0, &[1, 4]);
    let err = WsiPyramid::from_images("s", m, vec![RgbImage::new(40, 40), RgbImage::new(11, 10)]);
    assert!(matches!(err, Err(Error::Validation(_))));
}

#[test]
fn default_geometry_on_1024_gives_nine_tiles() {
    let tiles = tessellate(1024, 1024, 512, 184, 1.0).unwrap();
    assert_eq!(tiles.len(), 9);
    let mut xs: Vec<usize> = tiles.iter().map(|t| t.x).collect();
    xs.sort();
    xs.dedup();
    assert_eq!(xs, vec![0, 328, 512]);
    assert!(tiles.iter().all(|t| !t.padded && t.size == 512));

    let one = tessellate(512, 512, 512, 184, 1.0).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!((one[0].x, one[0].y, one[0].padded), (0, 0, false));
}

#[test]
fn small_canvas_gets_one_padded_tile() {
    let t = tessellate(300, 900, 512, 184, 1.0).unwrap();
    assert!(t.iter().all(|t| t.padded && t.x == 0));
    let p = pyramid(RgbImage::from_pixel(30, 20, Rgb([0, 0, 0])), 1.0, &[1]);
    let tiles = tessellate(30, 20, 32, 8, 1.0).unwrap();
    assert_eq!(tiles.len(), 1);
    let img = p.read_tile(&tiles[0]).unwrap();
    assert_eq!(img.dimensions(), (32, 32));
    assert_eq!(*img.get_pixel(29, 19), Rgb([0, 0, 0]));
    assert_eq!(*img.get_pixel(30, 5), Rgb([255, 255, 255]));
    assert_eq!(*img.get_pixel(5, 20), Rgb([255, 255, 255]));
}

/// Per-axis coverage counts by direct enumeration of the stride grid.
fn axis_cover(extent: usize, patch: usize, stride: usize) -> (Vec<usize>, Vec<u32>) {
    let mut starts: Vec<usize> = Vec::new();
    let mut p = 0;
    loop {
        let s = p.min(extent.saturating_sub(patch));
        if !starts.contains(&s) {
            starts.push(s);
        }
        if p + patch >= extent {
            break;
        }
        p += stride;
    }
    let mut cover = vec![0u32; extent];
    for &s in &starts {
        for c in cover.iter_mut().skip(s).take(patch) {
            *c += 1;
        }
    }
    (starts, cover)
}

#[test]
fn axis_positions_match_enumeration_for_every_extent() {
    for extent in 1..=2048 {
        let pos = axis_positions(extent, 512, 328);
        let (want, cover) = axis_cover(extent, 512, 328);
        assert_eq!(pos, want, "extent {extent}");
        // pixels before the last (possibly clamped) tile start
        let clamped_from = *want.last().unwrap();
        assert!(cover.iter().all(|&c| c >= 1), "extent {extent}");
        // away from the clamped edge tile at most two grid tiles overlap
        assert!(cover[..clamped_from.min(extent)].iter().all(|&c| c <= 2), "extent {extent}");
    }
}

fn mark_and_count(w: usize, h: usize, tiles: &[TileSpec]) -> Vec<u32> {
    let mut n = vec![0u32; w * h];
    for t in tiles {
        assert!(t.padded || (t.x + t.size <= w && t.y + t.size <= h));
        for y in t.y..(t.y + t.size).min(h) {
            for x in t.x..(t.x + t.size).min(w) {
                n[y * w + x] += 1;
            }
        }
    }
    n
}

#[test]
fn tiles_cover_canvases_exactly() {
    for (w, h) in [(2048, 2048), (1024, 1024), (1000, 1500), (513, 2047), (300, 700), (840, 512)] {
        let tiles = tessellate(w, h, 512, 184, 1.0).unwrap();
        let n = mark_and_count(w, h, &tiles);
        assert!(n.iter().all(|&c| c >= 1), "{w}×{h}");
        let lx = tiles.iter().map(|t| t.x).max().unwrap();
        let ly = tiles.iter().map(|t| t.y).max().unwrap();
        for y in 0..h {
            for x in 0..w {
                if (x < lx || lx == 0) && (y < ly || ly == 0) {
                    assert!(n[y * w + x] <= 4, "{w}×{h} at ({x},{y})");
                }
            }
        }
    }
}

#[test]
fn zero_overlap_tiles_reassemble_the_level() {
    let base = noise(4, 96, 64);
    let p = pyramid(base.clone(), 0.5, &[1, 2]);
    let tiles = tessellate(96, 64, 32, 0, 0.5).unwrap();
    assert_eq!(tiles.len(), 6);
    let mut out = RgbImage::new(96, 64);
    for t in &tiles {
        image::imageops::replace(&mut out, &p.read_tile(t).unwrap(), t.x as i64, t.y as i64);
    }
    assert_eq!(out, base);
}

#[test]
fn blank_slide_has_no_tissue() {
    let p = pyramid(RgbImage::from_pixel(256, 192, Rgb([255, 255, 255])), 0.5, &[1, 4]);
    let m = tissue_mask(&p, 1.0).unwrap();
    assert_eq!((m.width, m.height), (128, 96));
    assert!(m.is_empty());
}

#[test]
fn half_grey_slide_masks_the_grey_half() {
    let base = RgbImage::from_fn(512, 256, |x, _| {
        if x < 256 {
            Rgb([255, 255, 255])
        } else {
            Rgb([128, 128, 128])
        }
    });
    let p = pyramid(base, 1.0, &[1, 4]);
    let m = tissue_mask(&p, 1.0).unwrap();
    assert_eq!((m.width, m.height), (512, 256));
    let grey = 256 * 256;
    let err = (0..512 * 256)
        .filter(|&i| m.data[i] != (i % 512 >= 256))
        .count() as f64;
    assert!(err / grey as f64 <= 0.01, "area error {}", err / grey as f64);
}

#[test]
fn fully_annotated_slide_yields_nine_dysplastic_rows() {
    let full = Mask::from_fn(1024, 1024, |_, _| true);
    let slide = DatasetSlide {
        id: "a",
        scanner: "s1",
        tissue: &full,
        annotation: &full,
    };
    let rows = build_patch_dataset(&[slide], &DatasetParams::default()).unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.label == TileLabel::Dysplastic));

    let empty = Mask::new(1024, 1024);
    let blank = DatasetSlide {
        id: "b",
        scanner: "s1",
        tissue: &empty,
        annotation: &empty,
    };
    assert!(build_patch_dataset(&[blank], &DatasetParams::default()).unwrap().is_empty());
}

#[test]
fn misaligned_masks_are_rejected() {
    let a = Mask::new(100, 100);
    let b = Mask::new(100, 99);
    let s = DatasetSlide {
        id: "a",
        scanner: "s",
        tissue: &a,
        annotation: &b,
    };
    assert!(matches!(build_patch_dataset(&[s], &DatasetParams::default()), Err(Error::Validation(_))));
}

fn blobs(seed: u64, w: usize, h: usize, n: usize) -> Mask {
    let mut r = rng(seed);
    let centres: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| (r.gen_range(0.0..w as f64), r.gen_range(0.0..h as f64), r.gen_range(20.0..120.0)))
        .collect();
    Mask::from_fn(w, h, |x, y| {
        centres.iter().any(|&(cx, cy, rad)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) < rad * rad)
    })
}

#[test]
fn manifest_matches_brute_force_recount() {
    let params = DatasetParams {
        patch: 128,
        overlap: 46,
        min_tissue_frac: 0.1,
        positive_frac: 0.5,
        mpp: 1.0,
    };
    let tissue = blobs(5, 700, 450, 6);
    let ann = blobs(6, 700, 450, 4);
    let slide = DatasetSlide {
        id: "x",
        scanner: "s",
        tissue: &tissue,
        annotation: &ann,
    };
    let rows = build_patch_dataset(&[slide], &params).unwrap();

    let mut want = Vec::new();
    for y in axis_positions(450, 128, 82) {
        for x in axis_positions(700, 128, 82) {
            let (mut t, mut a) = (0usize, 0usize);
            for yy in y..y + 128 {
                for xx in x..x + 128 {
                    t += tissue.get(xx, yy) as usize;
                    a += ann.get(xx, yy) as usize;
                }
            }
            if t as f64 / (128.0 * 128.0) >= 0.1 {
                want.push((x, y, a as f64 / (128.0 * 128.0) > 0.5));
            }
        }
    }
    let got: Vec<(usize, usize, bool)> = rows
        .iter()
        .map(|r| (r.tile.x, r.tile.y, r.label == TileLabel::Dysplastic))
        .collect();
    assert!(!want.is_empty());
    assert_eq!(got, want);
}

#[test]
fn tile_labels_do_not_depend_on_slide_order() {
    let params = DatasetParams {
        patch: 64,
        overlap: 16,
        ..DatasetParams::default()
    };
    let masks: Vec<(Mask, Mask)> = (0..3)
        .map(|i| (blobs(10 + i, 300, 200, 5), blobs(20 + i, 300, 200, 3)))
        .collect();
    let ids = ["a", "b", "c"];
    let slides = |order: &[usize]| -> Vec<ManifestRow> {
        let s: Vec<DatasetSlide> = order
            .iter()
            .map(|&i| DatasetSlide {
                id: ids[i],
                scanner: "s",
                tissue: &masks[i].0,
                annotation: &masks[i].1,
            })
            .collect();
        build_patch_dataset(&s, &params).unwrap()
    };
    let key = |rows: Vec<ManifestRow>| -> HashMap<(String, usize, usize), TileLabel> {
        rows.into_iter().map(|r| ((r.slide, r.tile.x, r.tile.y), r.label)).collect()
    };
    assert_eq!(key(slides(&[0, 1, 2])), key(slides(&[2, 0, 1])));
}

#[test]
fn manifest_round_trips_as_json_lines() {
    let full = Mask::from_fn(1024, 1024, |x, _| x < 600);
    let s = DatasetSlide {
        id: "a",
        scanner: "s1",
        tissue: &full,
        annotation: &full,
    };
    let rows = build_patch_dataset(&[s], &DatasetParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.jsonl");
    write_manifest(&p, &rows).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), rows.len());
    assert_eq!(read_manifest(&p).unwrap(), rows);
}

fn row(scanner: &str, label: TileLabel, i: usize) -> ManifestRow {
    ManifestRow {
        slide: format!("s{i}"),
        scanner: scanner.into(),
        tile: TileSpec {
            x: i,
            y: 0,
            size: 512,
            mpp: 1.0,
            padded: false,
        },
        label,
        tissue_frac: 1.0,
        positive_frac: 0.0,
    }
}

#[test]
fn weighted_sampling_balances_strata() {
    let mut rows: Vec<ManifestRow> = (0..90).map(|i| row("a", TileLabel::Normal, i)).collect();
    rows.extend((0..10).map(|i| row("b", TileLabel::Normal, i)));
    let n = 10_000;
    let draws = weighted_sample(&rows, &mut rng(7), n).unwrap();
    let small = draws.iter().filter(|&&i| i >= 90).count() as f64;
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((small - 5000.0).abs() <= 3.0 * sigma, "minority stratum drew {small}");

    assert_eq!(draws, weighted_sample(&rows, &mut rng(7), n).unwrap());
}

#[test]
fn single_stratum_is_uniform() {
    let rows: Vec<ManifestRow> = (0..4).map(|i| row("a", TileLabel::Dysplastic, i)).collect();
    let n = 8000;
    let draws = weighted_sample(&rows, &mut rng(8), n).unwrap();
    let sigma = (n as f64 * 0.25 * 0.75).sqrt();
    for k in 0..4 {
        let c = draws.iter().filter(|&&i| i == k).count() as f64;
        assert!((c - 2000.0).abs() <= 3.0 * sigma);
    }
}

#[test]
fn empty_manifest_cannot_be_sampled() {
    assert!(matches!(weighted_sample(&[], &mut rng(0), 3), Err(Error::Validation(_))));
}

#[test]
fn ground_truth_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mask = Mask::from_fn(20, 10, |x, _| x > 12);
    let rois: Vec<u16> = (0..200).map(|i| if i % 20 < 10 { 1 } else { 2 }).collect();
    let gt = GroundTruth::new(mask.clone(), rois).unwrap();
    mask.save_png(&dir.path().join("gt.png")).unwrap();
    gt.save_rois(&dir.path().join("rois.png")).unwrap();
    let back = GroundTruth::load(&dir.path().join("gt.png"), &dir.path().join("rois.png")).unwrap();
    assert_eq!(back, gt);
}
