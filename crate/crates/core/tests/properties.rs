use e2net::imageops::{resize_nearest, threshold};
use e2net::ingest::{enforce_nesting, extract_slices, restack, window_and_normalize, CtVolume, LabelVolume};
use e2net::losses::{bce_loss, iou_loss, Reduction};
use e2net::metrics::{dice, dice_per_case, global_dice, overlap, Overlap};
use e2net::supervision::{distance_transform, edge_distance_map, mask_edge, Object};
use e2net::trainer::CropSpec;
use ndarray::{concatenate, Array2, Array3, Axis};
use proptest::prelude::*;

fn mask2(h: usize, w: usize) -> impl Strategy<Value = Array2<u8>> {
    prop::collection::vec(prop::bool::weighted(0.4), h * w)
        .prop_map(move |v| Array2::from_shape_vec((h, w), v.into_iter().map(u8::from).collect()).unwrap())
}

fn mask3(d: usize, h: usize, w: usize) -> impl Strategy<Value = Array3<u8>> {
    prop::collection::vec(prop::bool::weighted(0.3), d * h * w)
        .prop_map(move |v| Array3::from_shape_vec((d, h, w), v.into_iter().map(u8::from).collect()).unwrap())
}

fn brute_force(edge: &Array2<u8>) -> Array2<f64> {
    let pts: Vec<(usize, usize)> = edge.indexed_iter().filter(|(_, &v)| v != 0).map(|(p, _)| p).collect();
    Array2::from_shape_fn(edge.dim(), |(y, x)| {
        pts.iter()
            .map(|&(py, px)| ((y as f64 - py as f64).powi(2) + (x as f64 - px as f64).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_transform_matches_brute_force(m in mask2(13, 17)) {
        let edge = mask_edge(m.view());
        prop_assume!(edge.iter().any(|&v| v != 0));
        let fast = distance_transform(edge.view()).unwrap();
        let slow = brute_force(&edge);
        for (a, b) in fast.iter().zip(slow.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn edge_map_is_bounded_and_zero_outside(m in mask2(12, 12)) {
        let map = edge_distance_map(m.view(), Object::Tumor);
        for (&v, &k) in map.values.iter().zip(m.iter()) {
            prop_assert!((0.0..=1.0).contains(&v));
            if k == 0 {
                prop_assert_eq!(v, 0.0);
            }
        }
        let edge = mask_edge(m.view());
        for (&v, &e) in map.values.iter().zip(edge.iter()) {
            if e != 0 {
                prop_assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn edge_pixels_lie_inside_the_mask(m in mask2(10, 14)) {
        let edge = mask_edge(m.view());
        prop_assert!(edge.iter().zip(m.iter()).all(|(&e, &k)| e == 0 || k != 0));
    }

    #[test]
    fn slices_restack_to_the_original(labels in prop::collection::vec(0u8..=2, 3 * 6 * 5)) {
        let l = LabelVolume::new(Array3::from_shape_vec((3, 6, 5), labels).unwrap(), "c").unwrap();
        let ct = CtVolume::new(Array3::zeros((3, 6, 5)), [1.0, 1.0, 1.0], "c").unwrap();
        let slices = extract_slices(&window_and_normalize(&ct), &l).unwrap();
        prop_assert_eq!(slices.len(), 3);
        for s in &slices {
            prop_assert!(s.tumor_mask.iter().zip(s.liver_mask.iter()).all(|(&t, &v)| t <= v));
        }
        prop_assert_eq!(restack(&slices).unwrap(), l);
    }

    #[test]
    fn nesting_holds_after_enforcement(mut liver in mask2(8, 8), tumor in mask2(8, 8)) {
        enforce_nesting(&mut liver, tumor.view());
        prop_assert!(tumor.iter().zip(liver.iter()).all(|(&t, &l)| t == 0 || l != 0));
    }

    #[test]
    fn normalization_is_monotone_and_bounded(hu in prop::collection::vec(-3000.0f32..3000.0, 2..40)) {
        let n = hu.len();
        let ct = CtVolume::new(Array3::from_shape_vec((1, 1, n), hu.clone()).unwrap(), [1.0; 3], "c").unwrap();
        let w = window_and_normalize(&ct);
        for (i, &a) in w.voxels.iter().enumerate() {
            prop_assert!((-1.0..=1.0).contains(&a));
            for (j, &b) in w.voxels.iter().enumerate() {
                if hu[i] <= hu[j] {
                    prop_assert!(a <= b);
                }
            }
        }
    }

    #[test]
    fn dice_is_symmetric(a in mask3(2, 5, 5), b in mask3(2, 5, 5)) {
        prop_assert_eq!(dice(a.view(), b.view()).unwrap(), dice(b.view(), a.view()).unwrap());
    }

    #[test]
    fn global_dice_equals_dice_of_concatenation(
        cases in prop::collection::vec((mask3(2, 4, 4), mask3(2, 4, 4)), 1..5)
    ) {
        let ovs: Vec<Overlap> = cases.iter().map(|(p, t)| overlap(p.view(), t.view()).unwrap()).collect();
        let preds: Vec<_> = cases.iter().map(|(p, _)| p.view()).collect();
        let truths: Vec<_> = cases.iter().map(|(_, t)| t.view()).collect();
        let p = concatenate(Axis(0), &preds).unwrap();
        let t = concatenate(Axis(0), &truths).unwrap();
        prop_assert!((global_dice(&ovs).unwrap() - dice(p.view(), t.view()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_case_order(
        cases in prop::collection::vec((0u64..50, 0u64..50, 0u64..50), 1..6)
    ) {
        let ovs: Vec<Overlap> = cases
            .iter()
            .map(|&(i, p, t)| Overlap { intersection: i.min(p).min(t), pred: p, truth: t })
            .collect();
        let mut rev = ovs.clone();
        rev.reverse();
        prop_assert!((dice_per_case(&ovs).unwrap() - dice_per_case(&rev).unwrap()).abs() < 1e-12);
        prop_assert_eq!(global_dice(&ovs).unwrap(), global_dice(&rev).unwrap());
    }

    #[test]
    fn losses_are_nonnegative_and_iou_bounded(
        pairs in prop::collection::vec((0u8..=1, 0.01f64..0.99), 1..64)
    ) {
        let g: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let p: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let iou = iou_loss(&g, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert!(bce_loss(&g, &p, Reduction::Mean).unwrap() >= 0.0);
    }

    #[test]
    fn crop_box_covers_the_mask_within_bounds(
        (h, w, y0, x0, dy, dx, pad) in (20usize..60, 20usize..60)
            .prop_flat_map(|(h, w)| (Just(h), Just(w), 0..h - 4, 0..w - 4, 1usize..5, 1usize..5, 0usize..40))
    ) {
        let mut m = Array2::<u8>::zeros((h, w));
        m.slice_mut(ndarray::s![y0..y0 + dy, x0..x0 + dx]).fill(1);
        let spec = CropSpec::around(m.view(), pad, 32).unwrap();
        let (by0, bx0, by1, bx1) = spec.bbox;
        prop_assert!(by1 <= h && bx1 <= w);
        prop_assert!(by0 <= y0 && bx0 <= x0 && by1 >= y0 + dy && bx1 >= x0 + dx);
        prop_assert_eq!(by0, y0.saturating_sub(pad));
        prop_assert_eq!(bx1, (x0 + dx + pad).min(w));
    }

    #[test]
    fn uncrop_restores_shape_and_clears_outside(
        (h, w, y0, x0, pad) in (24usize..64, 24usize..64)
            .prop_flat_map(|(h, w)| (Just(h), Just(w), 0..h - 8, 0..w - 8, 0usize..10))
    ) {
        let mut m = Array2::<u8>::zeros((h, w));
        m.slice_mut(ndarray::s![y0..y0 + 8, x0..x0 + 8]).fill(1);
        let spec = CropSpec::around(m.view(), pad, 32).unwrap();
        let crop = spec.crop_mask(m.view()).unwrap();
        prop_assert_eq!(crop.dim(), (32, 32));
        let back = spec.uncrop_mask(crop.view()).unwrap();
        prop_assert_eq!(back.dim(), (h, w));
        let (by0, bx0, by1, bx1) = spec.bbox;
        for ((y, x), &v) in back.indexed_iter() {
            if y < by0 || y >= by1 || x < bx0 || x >= bx1 {
                prop_assert_eq!(v, 0);
            }
        }
    }
}

#[test]
fn crop_is_exactly_invertible_when_the_box_matches_the_target_size() {
    let mut m = Array2::<u8>::zeros((96, 96));
    m.slice_mut(ndarray::s![40..50, 40..56]).fill(1);
    let spec = CropSpec { bbox: (29, 32, 61, 64), pad: 11, original_size: (96, 96), resized_to: (32, 32) };
    let back = spec.uncrop_mask(spec.crop_mask(m.view()).unwrap().view()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn nearest_resize_round_trip_at_integer_scale() {
    let m = Array2::from_shape_fn((8, 8), |(y, x)| u8::from((y * 3 + x) % 5 == 0));
    let up = resize_nearest(m.view(), 24, 24);
    assert_eq!(resize_nearest(up.view(), 8, 8), m);
    let p = up.mapv(f32::from);
    assert_eq!(threshold(p.view(), 0.5), up);
}
