use dysseg::morph::Mask;
use dysseg::synth::{default_scanners, generate, write_dataset, DatasetLayout, SlideSpec, SynthConfig};
use dysseg::wsi::{read_manifest, GroundTruth, SlideClass, TileLabel, WsiPyramid};

fn spec(seed: u64, blobs: usize, frac: f64, sections: usize) -> SlideSpec {
    SlideSpec {
        id: format!("s{seed}"),
        width: 256,
        height: 192,
        base_mpp: 0.5,
        sections,
        blobs,
        positive_frac: frac,
        scanner: default_scanners()[seed as usize % 3].clone(),
        seed,
    }
}

/// Dysplastic share of tissue pixels, counted directly from the rasters.
fn counted_fraction(gt: &Mask, tissue: &Mask) -> f64 {
    let pos = gt.data.iter().zip(&tissue.data).filter(|(&g, &t)| g && t).count();
    pos as f64 / tissue.count() as f64
}

#[test]
fn positive_fraction_hits_the_target() {
    for seed in 0..12 {
        for (frac, blobs, sections) in [(0.1, 1, 1), (0.3, 3, 1), (0.5, 2, 2)] {
            let s = generate(&spec(seed, blobs, frac, sections)).unwrap();
            let got = counted_fraction(&s.ground_truth.mask, &s.tissue);
            assert!((got - frac).abs() <= 0.1 * frac, "seed {seed} target {frac} got {got}");
            assert_eq!(got, s.positive_fraction());
            // lesions lie inside tissue
            assert!(s.ground_truth.mask.data.iter().zip(&s.tissue.data).all(|(&g, &t)| !g || t));
        }
    }
}

#[test]
fn regeneration_is_bitwise_identical() {
    let a = generate(&spec(4, 3, 0.3, 2)).unwrap();
    let b = generate(&spec(4, 3, 0.3, 2)).unwrap();
    assert_eq!(a.base.as_raw(), b.base.as_raw());
    assert_eq!(a.ground_truth, b.ground_truth);
    let c = generate(&spec(5, 3, 0.3, 2)).unwrap();
    assert_ne!(a.base.as_raw(), c.base.as_raw());
}

#[test]
fn zero_blobs_make_a_control() {
    let s = generate(&spec(1, 0, 0.3, 2)).unwrap();
    assert_eq!(s.spec.class(), SlideClass::Control);
    assert!(s.ground_truth.mask.is_empty());
}

#[test]
fn dataset_layout_is_complete_and_reloadable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        cases: 2,
        controls: 1,
        ..SynthConfig::default()
    };
    let summary = write_dataset(dir.path(), &cfg).unwrap();
    assert_eq!(summary.slides.len(), 3);
    let layout = DatasetLayout::new(dir.path());
    for id in &summary.slides {
        let p = WsiPyramid::open(&layout.slide(id)).unwrap();
        assert_eq!(p.canvas_extent(1.0), (cfg.width, cfg.height));
        let gt = GroundTruth::load(&layout.gt_mask(id), &layout.gt_rois(id)).unwrap();
        assert_eq!((gt.width(), gt.height()), (cfg.width, cfg.height));
        assert!(gt.n_rois >= 1);
    }
    let rows = read_manifest(&layout.manifest()).unwrap();
    assert_eq!(rows.len(), summary.manifest_rows);
    assert!(rows.iter().any(|r| r.label == TileLabel::Dysplastic));
    assert!(rows.iter().filter(|r| r.slide.starts_with("control")).all(|r| r.label == TileLabel::Normal));

    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &cfg).unwrap();
    for id in &summary.slides {
        let a = std::fs::read(layout.gt_mask(id)).unwrap();
        let b = std::fs::read(DatasetLayout::new(again.path()).gt_mask(id)).unwrap();
        assert_eq!(a, b);
    }
}
