mod common;

use polyforge_core::spatial::{
    boxes_to_mask, center_crop_resize, dihedral_augment, downscale_mask, extract_boxes,
    extract_boxes_plane, BBox, Dihedral, LabeledSample, LatentCodec, MASK_OFF, MASK_ON,
};
use polyforge_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Boxes separated by at least one clear pixel in every direction, so their
/// masks never merge under 8-connectivity.
fn separated_boxes(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<BBox> {
    let mut out: Vec<BBox> = Vec::new();
    for _ in 0..50 * count {
        if out.len() == count {
            break;
        }
        let b = common::random_box(rng, n / 2);
        let b = BBox::new(
            b.x + rng.gen_range(0..=n / 2),
            b.y + rng.gen_range(0..=n / 2),
            b.w,
            b.h,
        );
        if b.right() > n || b.bottom() > n {
            continue;
        }
        let clear = out
            .iter()
            .all(|o| b.x > o.right() || o.x > b.right() || b.y > o.bottom() || o.y > b.bottom());
        if clear {
            out.push(b);
        }
    }
    out.sort();
    out
}

fn rotate_tensor(t: &Tensor, n: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let mut out = Tensor::zeros(t.shape());
    for y in 0..n {
        for x in 0..n {
            let (a, b) = f(y, x);
            out.set3(0, a, b, t.at3(0, y, x));
        }
    }
    out
}

proptest! {
    #[test]
    fn single_box_round_trip(seed in any::<u64>(), n in 4usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = common::random_box(&mut rng, n);
        let m = boxes_to_mask(&[b], n, n).unwrap();
        prop_assert_eq!(extract_boxes(&m, 0.0, 0.0).unwrap(), vec![b]);
    }

    #[test]
    fn separated_masks_are_round_trip_fixed_points(seed in any::<u64>(), n in 8usize..32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes = separated_boxes(&mut rng, n, 3);
        let m = boxes_to_mask(&boxes, n, n).unwrap();
        let back = extract_boxes(&m, 0.0, 0.0).unwrap();
        prop_assert_eq!(&back, &boxes);
        prop_assert_eq!(boxes_to_mask(&back, n, n).unwrap(), m);
    }

    #[test]
    fn dihedral_ops_commute_with_extraction(seed in any::<u64>(), n in 4usize..24, op in 0u8..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = Dihedral::new(op).unwrap();
        let boxes = separated_boxes(&mut rng, n, 3);
        let m = boxes_to_mask(&boxes, n, n).unwrap();
        let mut moved: Vec<BBox> = boxes.iter().map(|b| op.apply_box(n, b)).collect();
        moved.sort();
        prop_assert_eq!(extract_boxes(&op.apply_tensor(&m).unwrap(), 0.0, 0.0).unwrap(), moved);
    }

    #[test]
    fn joint_augmentation_keeps_mask_and_boxes_aligned(seed in any::<u64>(), op in 0u8..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 16;
        let boxes = separated_boxes(&mut rng, n, 2);
        let img = Tensor::from_fn(&[3, n, n], |_| rng.gen_range(-1.0..1.0));
        let s = LabeledSample::new(img, boxes).unwrap();
        let a = dihedral_augment(&s, Dihedral::new(op).unwrap()).unwrap();
        prop_assert_eq!(&a.mask, &boxes_to_mask(&a.boxes, n, n).unwrap());
        prop_assert_eq!(extract_boxes(&a.mask, 0.0, 0.0).unwrap(), a.boxes.clone());
    }

    #[test]
    fn extraction_matches_flood_fill(seed in any::<u64>(), h in 1usize..14, w in 1usize..14, density in 0.1f64..0.7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane: Vec<f64> = (0..h * w).map(|_| if rng.gen_bool(density) { MASK_ON } else { MASK_OFF }).collect();
        prop_assert_eq!(extract_boxes_plane(&plane, h, w, 0.0, 0.0), common::flood_fill_boxes(&plane, h, w, 0.0));
    }

    #[test]
    fn downscale_is_block_max(seed in any::<u64>(), f in 1usize..5, cells in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = f * cells;
        let m = Tensor::from_fn(&[1, n, n], |_| if rng.gen_bool(0.1) { MASK_ON } else { MASK_OFF });
        let d = downscale_mask(&m, f).unwrap();
        for y in 0..cells {
            for x in 0..cells {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..f {
                    for dx in 0..f {
                        best = best.max(m.at3(0, y * f + dy, x * f + dx));
                    }
                }
                prop_assert_eq!(d.at3(0, y, x), best);
            }
        }
    }
}

#[test]
fn dihedral_group_is_closed_with_inverses() {
    let n = 5;
    let probe = Tensor::from_fn(&[1, n, n], |i| i as f64);
    let images: Vec<Tensor> = Dihedral::all()
        .map(|op| op.apply_tensor(&probe).unwrap())
        .collect();
    for a in Dihedral::all() {
        let mut has_inverse = false;
        for b in Dihedral::all() {
            let ab = b.apply_tensor(&a.apply_tensor(&probe).unwrap()).unwrap();
            assert!(images.contains(&ab), "{a:?} then {b:?} leaves the group");
            has_inverse |= ab == probe;
        }
        assert!(has_inverse, "{a:?} has no inverse");
    }
    // All eight images are distinct.
    for i in 0..8 {
        for j in 0..i {
            assert_ne!(images[i], images[j]);
        }
    }
}

#[test]
fn named_ops_by_hand() {
    let n = 4;
    let probe = Tensor::from_fn(&[1, n, n], |i| i as f64);
    let m = n - 1;
    let expect = [
        (Dihedral::ROT90, rotate_tensor(&probe, n, |y, x| (x, m - y))),
        (Dihedral::HFLIP, rotate_tensor(&probe, n, |y, x| (y, m - x))),
        (Dihedral::TRANSPOSE, rotate_tensor(&probe, n, |y, x| (x, y))),
    ];
    for (op, t) in expect {
        assert_eq!(op.apply_tensor(&probe).unwrap(), t);
    }
    // Rotating a corner box by 90 degrees moves it to the top-right corner.
    assert_eq!(
        Dihedral::ROT90.apply_box(8, &BBox::new(0, 0, 3, 2)),
        BBox::new(6, 0, 2, 3)
    );
    assert!(Dihedral::new(8).is_err());
}

#[test]
fn center_crop_examples() {
    // 30 x 40 image: the crop keeps columns 5..35.
    let img = Tensor::from_fn(&[3, 30, 40], |i| ((i % 40) as f64 / 20.0) - 1.0);
    let s = center_crop_resize(&img, &[BBox::new(5, 0, 30, 30)], 30).unwrap();
    assert_eq!(s.boxes, vec![BBox::new(0, 0, 30, 30)]);
    assert_eq!(s.image.at3(0, 0, 0), img.at3(0, 0, 5));

    let s = center_crop_resize(
        &img,
        &[BBox::new(15, 10, 10, 10), BBox::new(0, 0, 5, 5)],
        15,
    )
    .unwrap();
    assert_eq!(s.image.shape(), &[3, 15, 15]);
    assert_eq!(s.boxes, vec![BBox::new(5, 5, 5, 5)]);
    assert_eq!(s.mask, boxes_to_mask(&s.boxes, 15, 15).unwrap());

    // A box straddling the crop edge is clipped to it.
    let s = center_crop_resize(&img, &[BBox::new(0, 0, 10, 10)], 30).unwrap();
    assert_eq!(s.boxes, vec![BBox::new(0, 0, 5, 10)]);
}

#[test]
fn pool_codec_examples() {
    let c = LatentCodec::Pool { factor: 2 };
    let img = Tensor::new(
        vec![1, 2, 4],
        vec![1.0, 0.0, 0.5, 0.5, -1.0, 0.0, 0.5, -0.5],
    )
    .unwrap();
    let z = c.encode(&img).unwrap();
    assert_eq!(z.shape(), &[1, 1, 2]);
    assert_eq!(z.data(), &[0.0, 0.25]);
    let flat = Tensor::full(&[3, 4, 4], 0.3);
    let back = c.decode(&c.encode(&flat).unwrap()).unwrap();
    assert!(back.max_abs_diff(&flat) < 1e-15);
    assert!(c.encode(&Tensor::zeros(&[1, 3, 4])).is_err());
    let id = LatentCodec::Identity;
    assert_eq!(id.decode(&id.encode(&img).unwrap()).unwrap(), img);
}

#[test]
fn min_area_filter() {
    let m = boxes_to_mask(&[BBox::new(0, 0, 1, 1), BBox::new(4, 4, 4, 4)], 10, 10).unwrap();
    assert_eq!(extract_boxes(&m, 0.0, 0.0).unwrap().len(), 2);
    // 1 pixel is below 5% of 100 pixels; 16 pixels are not.
    assert_eq!(
        extract_boxes(&m, 0.0, 0.05).unwrap(),
        vec![BBox::new(4, 4, 4, 4)]
    );
}
