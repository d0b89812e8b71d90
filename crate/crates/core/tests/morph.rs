use dysseg::morph::{
    boundary, close, dilate, erode, fill_small_holes, label_components, open, remove_small_objects,
    Connectivity, Mask,
};
use proptest::prelude::*;

fn rect(w: usize, h: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> Mask {
    Mask::from_fn(w, h, |x, y| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh)
}

fn union(a: &Mask, b: &Mask) -> Mask {
    Mask::from_fn(a.width, a.height, |x, y| a.get(x, y) || b.get(x, y))
}

/// Window max/min over the raw 2-D neighbourhood.
fn brute(m: &Mask, k: usize, grow: bool) -> Mask {
    let r = (k / 2) as isize;
    Mask::from_fn(m.width, m.height, |x, y| {
        let mut vals = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                let inside = nx >= 0 && ny >= 0 && nx < m.width as isize && ny < m.height as isize;
                vals.push(if inside { m.get(nx as usize, ny as usize) } else { !grow });
            }
        }
        if grow {
            vals.iter().any(|&v| v)
        } else {
            vals.iter().all(|&v| v)
        }
    })
}

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (3usize..20, 3usize..20).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<bool>(), w * h).prop_map(move |data| Mask {
            width: w,
            height: h,
            data,
        })
    })
}

#[test]
fn gap_of_two_pixels_closes() {
    let a = rect(60, 40, 5, 10, 20, 20);
    let b = rect(60, 40, 27, 10, 20, 20);
    let m = union(&a, &b);
    assert_eq!(label_components(&m, true, Connectivity::Eight).1, 2);
    let c = close(&m, 5);
    assert_eq!(label_components(&c, true, Connectivity::Eight).1, 1);
    // the gap is filled and nothing outside the hull appears
    assert!(c.get(25, 20) && c.get(26, 20));
    assert_eq!(c.count(), 42 * 20);
}

#[test]
fn small_objects_go_and_large_stay() {
    let big = rect(80, 80, 10, 10, 40, 40);
    let blob = rect(80, 80, 70, 70, 2, 5);
    let m = union(&big, &blob);
    assert_eq!(remove_small_objects(&m, 1000), big);
    assert_eq!(remove_small_objects(&m, 10), m);
    assert!(remove_small_objects(&Mask::new(9, 9), 5).is_empty());
}

#[test]
fn diagonal_pixels_form_one_object() {
    let m = Mask::from_fn(10, 10, |x, y| x == y);
    assert_eq!(remove_small_objects(&m, 10), m);
    assert!(remove_small_objects(&m, 11).is_empty());
}

#[test]
fn interior_hole_is_filled_by_area() {
    let mut m = rect(30, 30, 5, 5, 20, 20);
    for y in 10..14 {
        for x in 10..13 {
            m.set(x, y, false);
        }
    }
    assert_eq!(fill_small_holes(&m, 13), rect(30, 30, 5, 5, 20, 20));
    assert_eq!(fill_small_holes(&m, 12), m);
}

#[test]
fn boundary_of_rectangle() {
    let m = rect(10, 10, 2, 2, 5, 4);
    let b = boundary(&m);
    assert_eq!(b.count(), 2 * 5 + 2 * 2);
    assert!(!b.get(4, 3) && b.get(2, 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn separable_filters_match_brute_force(m in mask_strategy(), k in prop::sample::select(vec![1usize, 3, 5, 7])) {
        prop_assert_eq!(dilate(&m, k), brute(&m, k, true));
        prop_assert_eq!(erode(&m, k), brute(&m, k, false));
    }

    #[test]
    fn opening_and_closing_are_idempotent(m in mask_strategy(), k in prop::sample::select(vec![3usize, 5])) {
        let o = open(&m, k);
        prop_assert_eq!(open(&o, k), o);
        let c = close(&m, k);
        prop_assert_eq!(close(&c, k), c);
    }

    #[test]
    fn opening_shrinks_and_closing_grows(m in mask_strategy()) {
        let o = open(&m, 3);
        let c = close(&m, 3);
        for i in 0..m.data.len() {
            prop_assert!(!o.data[i] || m.data[i]);
            prop_assert!(!m.data[i] || c.data[i]);
        }
    }

    #[test]
    fn component_labels_partition_the_foreground(m in mask_strategy()) {
        let (labels, n) = label_components(&m, true, Connectivity::Four);
        let mut seen = vec![false; n as usize + 1];
        for (i, &l) in labels.iter().enumerate() {
            prop_assert_eq!(l != 0, m.data[i]);
            seen[l as usize] = true;
        }
        prop_assert!(seen[1..].iter().all(|&s| s));
    }
}
