mod common;

use common::{rng, tiny_config};
use dysseg::infer::{
    binarize, colormap, emit_heatmap, infer_canvas, post_process, InferParams, PostprocessParams,
    ProbabilityCanvas, TileModel,
};
use dysseg::model::{Mode, TransUnet};
use dysseg::morph::{label_components, Connectivity, Mask};
use dysseg::wsi::{box_downsample, LevelMeta, SlideMeta, WsiPyramid};
use dysseg::{Error, Result};
use image::{Rgb, RgbImage};
use rand::Rng;

fn slide(base: RgbImage) -> WsiPyramid {
    let meta = SlideMeta {
        width: base.width(),
        height: base.height(),
        mpp: 1.0,
        levels: vec![
            LevelMeta {
                downsample: 1.0,
                file: "level0.png".into(),
            },
            LevelMeta {
                downsample: 2.0,
                file: "level1.png".into(),
            },
        ],
        scanner: None,
        class: None,
    };
    let l1 = box_downsample(&base, 2);
    WsiPyramid::from_images("t", meta, vec![base, l1]).unwrap()
}

/// Emits one constant per tile, chosen by the tile's top-left pixel.
struct ByCorner {
    size: usize,
    value: fn(Rgb<u8>) -> f32,
}

impl TileModel for ByCorner {
    fn tile_size(&self) -> usize {
        self.size
    }

    fn foreground(&self, tiles: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        Ok(tiles
            .iter()
            .map(|t| vec![(self.value)(*t.get_pixel(0, 0)); self.size * self.size])
            .collect())
    }
}

fn all_tissue(patch: usize, overlap: usize, workers: usize) -> InferParams {
    InferParams {
        patch,
        overlap,
        mpp: 1.0,
        min_tissue_frac: 0.0,
        batch_size: 2,
        workers,
    }
}

#[test]
fn overlap_is_the_mean_of_contributing_tiles() {
    // columns 0..16 mark the first tile, 16..48 the second
    let base = RgbImage::from_fn(48, 32, |x, _| if x < 16 { Rgb([10, 10, 10]) } else { Rgb([90, 90, 90]) });
    let model = ByCorner {
        size: 32,
        value: |p| if p[0] == 10 { 0.2 } else { 0.8 },
    };
    let c = infer_canvas(&slide(base), &model, &all_tissue(32, 16, 1)).unwrap();
    let probs = c.probabilities().unwrap();
    for y in 0..32 {
        for x in 0..48 {
            let want = match x {
                0..=15 => 0.2f32,
                16..=31 => 0.5,
                _ => 0.8,
            };
            assert_eq!(probs[y * 48 + x], want, "({x},{y})");
        }
    }
}

fn tiny_model(seed: u64) -> TransUnet {
    let mut m = TransUnet::new(tiny_config(), seed).unwrap();
    m.set_mode(Mode::Eval);
    m
}

#[test]
fn equal_logits_give_one_half_everywhere() {
    let mut m = tiny_model(1);
    let names: Vec<String> = m.params().keys().filter(|k| k.starts_with("heads.seg")).cloned().collect();
    for n in names {
        m.param_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let mut r = rng(2);
    let base = RgbImage::from_fn(70, 45, |_, _| Rgb([r.gen_range(0..200), r.gen(), r.gen()]));
    let c = infer_canvas(&slide(base), &m, &all_tissue(32, 8, 1)).unwrap();
    assert_eq!((c.width, c.height), (70, 45));
    assert!(c.probabilities().unwrap().iter().all(|&p| p == 0.5));
}

#[test]
fn canvas_is_bitwise_identical_across_worker_counts() {
    let m = tiny_model(3);
    let mut r = rng(4);
    let base = RgbImage::from_fn(100, 76, |_, _| Rgb([r.gen(), r.gen(), r.gen()]));
    let s = slide(base);
    let reference = infer_canvas(&s, &m, &all_tissue(32, 12, 1)).unwrap();
    for workers in [2, 4, 8] {
        let c = infer_canvas(&s, &m, &all_tissue(32, 12, workers)).unwrap();
        let a: Vec<u32> = reference.probabilities().unwrap().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = c.probabilities().unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "workers {workers}");
    }
}

#[test]
fn background_tiles_count_as_zero() {
    let base = RgbImage::from_pixel(64, 64, Rgb([255, 255, 255]));
    let model = ByCorner {
        size: 32,
        value: |_| 1.0,
    };
    let params = InferParams {
        min_tissue_frac: 0.1,
        ..all_tissue(32, 0, 1)
    };
    let c = infer_canvas(&slide(base), &model, &params).unwrap();
    assert!(c.counts().iter().all(|&n| n == 1));
    assert!(c.probabilities().unwrap().iter().all(|&p| p == 0.0));
}

#[test]
fn wrong_tile_size_is_a_config_error() {
    let m = tiny_model(5);
    let s = slide(RgbImage::new(64, 64));
    assert!(matches!(infer_canvas(&s, &m, &all_tissue(64, 8, 1)), Err(Error::Config(_))));
}

#[test]
fn training_mode_model_is_refused() {
    let mut m = tiny_model(5);
    m.set_mode(Mode::Train);
    let s = slide(RgbImage::new(32, 32));
    assert!(matches!(infer_canvas(&s, &m, &all_tissue(32, 8, 1)), Err(Error::State(_))));
}

fn canvas_from(w: usize, h: usize, values: &[f32]) -> ProbabilityCanvas {
    let mut c = ProbabilityCanvas::new(w, h, 1.0);
    let size = w.max(h);
    let mut tile = vec![0.0; size * size];
    for y in 0..h {
        for x in 0..w {
            tile[y * size + x] = values[y * w + x];
        }
    }
    c.add_tile(0, 0, size, &tile).unwrap();
    c.finalize();
    c
}

#[test]
fn binarization_is_strict_and_monotone() {
    let half = canvas_from(5, 4, &[0.5; 20]);
    assert!(binarize(&half, 0.5).unwrap().is_empty());

    let mut r = rng(6);
    let values: Vec<f32> = (0..30 * 20)
        .map(|i| if i % 7 == 0 { 0.0 } else { r.gen_range(0.0..=1.0) })
        .collect();
    let c = canvas_from(30, 20, &values);
    let zero = binarize(&c, 0.0).unwrap();
    for (b, &v) in zero.data.iter().zip(&values) {
        assert_eq!(*b, v > 0.0);
    }
    let mut prev = zero;
    for k in 1..=100 {
        let m = binarize(&c, k as f64 / 100.0).unwrap();
        assert!(m.data.iter().zip(&prev.data).all(|(&now, &before)| !now || before));
        prev = m;
    }
}

#[test]
fn canvas_values_stay_in_unit_interval() {
    let mut c = ProbabilityCanvas::new(20, 20, 1.0);
    let mut r = rng(7);
    for (x, y) in [(0, 0), (5, 3), (12, 12)] {
        let t: Vec<f32> = (0..100).map(|_| r.gen_range(0.0..=1.0)).collect();
        c.add_tile(x, y, 10, &t).unwrap();
    }
    c.finalize();
    assert!(c.probabilities().unwrap().iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn canvas_round_trips_through_disk() {
    let mut r = rng(8);
    let values: Vec<f32> = (0..12 * 9).map(|_| r.gen()).collect();
    let c = canvas_from(12, 9, &values);
    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path()).unwrap();
    let back = ProbabilityCanvas::load(dir.path()).unwrap();
    assert_eq!(back.probabilities().unwrap(), c.probabilities().unwrap());
    assert_eq!(std::fs::metadata(dir.path().join("canvas.f32")).unwrap().len(), 12 * 9 * 4);
}

fn rect(w: usize, h: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> Mask {
    Mask::from_fn(w, h, |x, y| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh)
}

fn fixtures() -> Vec<Mask> {
    let two = Mask::from_fn(80, 60, |x, y| {
        (10..30).contains(&y) && ((5..25).contains(&x) || (27..47).contains(&x))
    });
    let blob = rect(80, 60, 40, 40, 2, 5);
    let mut holed = rect(80, 60, 10, 10, 50, 40);
    for y in 20..24 {
        for x in 20..25 {
            holed.set(x, y, false);
        }
    }
    vec![two, blob, holed, Mask::new(80, 60), rect(80, 60, 0, 0, 80, 60)]
}

#[test]
fn two_squares_merge_across_a_small_gap() {
    let params = PostprocessParams {
        min_object_area: 0,
        min_hole_area: 0,
        ..Default::default()
    };
    let m = &fixtures()[0];
    assert_eq!(label_components(m, true, Connectivity::Eight).1, 2);
    let out = post_process(m, &params);
    assert_eq!(label_components(&out, true, Connectivity::Eight).1, 1);
}

#[test]
fn isolated_blob_is_removed_and_empty_stays_empty() {
    let p = PostprocessParams::default();
    let f = fixtures();
    assert_eq!(f[1].count(), 10);
    assert!(post_process(&f[1], &p).is_empty());
    assert!(post_process(&f[3], &p).is_empty());
}

#[test]
fn post_processing_is_idempotent_on_fixtures() {
    let mut r = rng(9);
    let mut cases = fixtures();
    for _ in 0..6 {
        let data = (0..80 * 60).map(|_| r.gen_bool(0.3)).collect();
        cases.push(Mask {
            width: 80,
            height: 60,
            data,
        });
    }
    for params in [
        PostprocessParams::default(),
        PostprocessParams {
            min_object_area: 30,
            min_hole_area: 30,
            ..Default::default()
        },
        PostprocessParams {
            close_kernel: 3,
            open_kernel: 3,
            min_object_area: 5,
            min_hole_area: 5,
            ..Default::default()
        },
    ] {
        for (i, m) in cases.iter().enumerate() {
            let once = post_process(m, &params);
            assert_eq!(post_process(&once, &params), once, "fixture {i} with {params:?}");
        }
    }
}

#[test]
fn zero_probability_heatmap_is_a_blue_tint() {
    let c = canvas_from(40, 20, &[0.0; 800]);
    let mut r = rng(10);
    let thumb = RgbImage::from_fn(20, 10, |_, _| Rgb([r.gen(), r.gen(), r.gen()]));
    let h = emit_heatmap(&c, &thumb, None).unwrap();
    assert_eq!(h.dimensions(), thumb.dimensions());
    for (o, t) in h.pixels().zip(thumb.pixels()) {
        let want = [0u8, 0, 255].map(|c| c as f64);
        for k in 0..3 {
            assert_eq!(o[k], (0.5 * t[k] as f64 + 0.5 * want[k]).round() as u8);
        }
    }
    assert_eq!(colormap(0.0), Rgb([0, 0, 255]));
}

#[test]
fn heatmap_checks_aspect_and_draws_contour() {
    let c = canvas_from(40, 20, &[1.0; 800]);
    assert!(matches!(emit_heatmap(&c, &RgbImage::new(20, 20), None), Err(Error::Validation(_))));
    let gt = rect(40, 20, 10, 5, 20, 10);
    let h = emit_heatmap(&c, &RgbImage::new(40, 20), Some(&gt)).unwrap();
    assert_eq!(*h.get_pixel(10, 10), Rgb([0, 255, 0]));
    assert_eq!(*h.get_pixel(20, 10), Rgb([128, 0, 0]));
    assert_eq!(*h.get_pixel(0, 0), Rgb([128, 0, 0]));
}
