use gitseg::grid::{BinaryMask, FlipAxis, Grid};
use gitseg::losses::iou_hard;
use gitseg::preprocess::{
    flip, make_patches, normalize, pad_to_min, stitch_patches, trim_and_pad, ImageWithMasks,
};
use gitseg::rle::{decode_rle, decode_rle_lenient, encode_rle, RleString};
use gitseg::trainer::{cosine_lr, split_by_case, TrainConfig};
use proptest::prelude::*;

/// An image whose nonzero pixels all sit inside a random sub-rectangle.
fn boxed_image() -> impl Strategy<Value = Grid<u16>> {
    (1usize..70, 1usize..70)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), 0..h, 0..w, 1..=h, 1..=w, any::<u64>()))
        .prop_map(|(h, w, r0, c0, bh, bw, seed)| {
            let (bh, bw) = (bh.min(h - r0), bw.min(w - c0));
            Grid::from_fn(h, w, |r, c| {
                let inside = (r0..r0 + bh).contains(&r) && (c0..c0 + bw).contains(&c);
                let hash = (seed ^ (r as u64 * 7919 + c as u64 * 104729)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                if inside && hash % 5 != 0 {
                    1 + (hash >> 40) as u16 % 60000
                } else {
                    0
                }
            })
        })
}

fn nonzero_bbox(img: &Grid<u16>) -> Option<(usize, usize)> {
    let (h, w) = img.dims();
    let rows: Vec<usize> = (0..h).filter(|&r| img.row(r).iter().any(|&v| v != 0)).collect();
    let cols: Vec<usize> = (0..w).filter(|&c| (0..h).any(|r| img[(r, c)] != 0)).collect();
    Some((rows.last()? - rows[0] + 1, cols.last()? - cols[0] + 1))
}

fn mask(h: usize, w: usize, bits: &[bool]) -> BinaryMask {
    BinaryMask::from_vec(h, w, bits[..h * w].to_vec()).unwrap()
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..24, 1usize..24, prop::collection::vec(any::<bool>(), 576), prop::collection::vec(any::<bool>(), 576))
        .prop_map(|(h, w, a, b)| (mask(h, w, &a), mask(h, w, &b)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn trim_and_pad_hits_the_target(img in boxed_image(), target in 1usize..48) {
        let (out, record) = trim_and_pad(&img, target);
        prop_assert_eq!(out.dims(), (target, target));
        prop_assert_eq!(record.output_dims(), (target, target));
        prop_assert_eq!(record.source_dims(), img.dims());
    }

    #[test]
    fn fitting_content_survives_and_inverts(img in boxed_image(), target in 1usize..48) {
        let fits = nonzero_bbox(&img).is_none_or(|(bh, bw)| bh <= target && bw <= target);
        prop_assume!(fits);
        let (out, record) = trim_and_pad(&img, target);
        let sum = |g: &Grid<u16>| g.data().iter().map(|&v| v as u64).sum::<u64>();
        let nonzero = |g: &Grid<u16>| g.data().iter().filter(|&&v| v != 0).count();
        prop_assert_eq!(sum(&out), sum(&img));
        prop_assert_eq!(nonzero(&out), nonzero(&img));
        prop_assert_eq!(record.invert(&out, 0).unwrap(), img);
    }

    #[test]
    fn retained_window_round_trips(img in boxed_image(), target in 1usize..48) {
        let (out, record) = trim_and_pad(&img, target);
        let back = record.invert(&out, u16::MAX).unwrap();
        for r in 0..img.height() {
            for c in 0..img.width() {
                if back[(r, c)] != u16::MAX {
                    prop_assert_eq!(back[(r, c)], img[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn pad_to_min_only_grows(img in boxed_image(), min in 1usize..48) {
        let (out, record) = pad_to_min(&img, min);
        prop_assert_eq!(out.dims(), (img.height().max(min), img.width().max(min)));
        prop_assert_eq!(record.invert(&out, 0).unwrap(), img);
    }

    #[test]
    fn stitching_patches_is_identity(h in 8usize..90, w in 8usize..90, size in 1usize..9, seed in any::<u32>()) {
        let g = Grid::from_fn(h, w, |r, c| ((r * 31 + c * 17) as u32 ^ seed) as f32 * 1e-3);
        let (patches, layout) = make_patches(&g, size).unwrap();
        prop_assert!(layout.coverage().data().iter().all(|&n| n >= 1));
        prop_assert_eq!(stitch_patches(&patches, &layout).unwrap(), g);
    }

    #[test]
    fn flips_are_involutions(img in boxed_image(), bits in prop::collection::vec(any::<bool>(), 4900)) {
        let (h, w) = img.dims();
        let m = mask(h, w, &bits);
        let sample = ImageWithMasks { image: img, masks: [m.clone(), m.clone(), m] };
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            let once = flip(&sample, axis);
            prop_assert_eq!(&flip(&once, axis), &sample);
            // Masks move with the image.
            for r in 0..h {
                for c in 0..w {
                    let (r2, c2) = match axis {
                        FlipAxis::Horizontal => (r, w - 1 - c),
                        FlipAxis::Vertical => (h - 1 - r, c),
                    };
                    prop_assert_eq!(once.image[(r2, c2)], sample.image[(r, c)]);
                    prop_assert_eq!(once.masks[0][(r2, c2)], sample.masks[0][(r, c)]);
                }
            }
        }
    }

    #[test]
    fn normalize_spans_unit_interval(img in boxed_image()) {
        let n = normalize(&img);
        prop_assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let min = *img.data().iter().min().unwrap();
        let max = *img.data().iter().max().unwrap();
        if min != max {
            prop_assert!(n.data().contains(&0.0));
            prop_assert!(n.data().contains(&1.0));
        }
    }

    #[test]
    fn rle_is_canonical(bits in prop::collection::vec(any::<bool>(), 1..400), width in 1usize..20) {
        let h = bits.len() / width;
        prop_assume!(h > 0);
        let m = mask(h, width, &bits);
        let s = encode_rle(&m);
        prop_assert_eq!(&decode_rle(&s, h, width).unwrap(), &m);
        prop_assert_eq!(&decode_rle_lenient(&s, h, width).unwrap(), &m);
        let runs = s.validate((h * width) as u64).unwrap();
        let rising = (0..m.data().len()).filter(|&i| m.data()[i] && (i == 0 || !m.data()[i - 1])).count();
        prop_assert_eq!(runs.len(), rising);
        prop_assert!(runs.windows(2).all(|p| p[1].start > p[0].end() + 1));
        prop_assert_eq!(encode_rle(&decode_rle(&s, h, width).unwrap()), s);
    }

    #[test]
    fn lenient_decode_unions_overlaps(a in 1u64..50, la in 1u64..20, b in 1u64..50, lb in 1u64..20) {
        let text = RleString::from(format!("{a} {la} {b} {lb}"));
        let m = decode_rle_lenient(&text, 5, 10).unwrap();
        for i in 1..=50u64 {
            let expect = (a..a + la).contains(&i) || (b..b + lb).contains(&i);
            prop_assert_eq!(m.data()[(i - 1) as usize], expect);
        }
    }

    #[test]
    fn hard_iou_is_a_similarity((a, b) in mask_pair()) {
        let ab = iou_hard(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, iou_hard(&b, &a).unwrap());
        prop_assert_eq!(iou_hard(&a, &a).unwrap(), 1.0);
        let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
        let union = a.data().iter().zip(b.data()).filter(|(x, y)| **x || **y).count();
        let expected = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        prop_assert_eq!(ab, expected);
    }

    #[test]
    fn cosine_schedule_is_bounded_and_monotone(epochs in 1usize..200, lr_init in 1e-5f64..1.0, frac in 0.0f64..1.0) {
        let cfg = TrainConfig { epochs, lr_init, lr_min: lr_init * frac, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..=epochs).map(|t| cosine_lr(t, &cfg).unwrap()).collect();
        prop_assert!((lrs[0] - lr_init).abs() <= 1e-15 * lr_init.max(1.0));
        prop_assert!((lrs[epochs] - cfg.lr_min).abs() <= 1e-12);
        prop_assert!(lrs.windows(2).all(|p| p[1] <= p[0] + 1e-15));
        prop_assert!(lrs.iter().all(|&l| l >= cfg.lr_min - 1e-15 && l <= lr_init + 1e-15));
        prop_assert!(cosine_lr(epochs + 1, &cfg).is_err());
    }

    #[test]
    fn case_split_never_leaks(cases in 2usize..12, per_case in 1usize..5, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let items: Vec<(String, usize)> = (0..cases)
            .flat_map(|c| (0..per_case).map(move |k| (format!("case{c}"), k)))
            .collect();
        let (train, val) = split_by_case(&items, |it| it.0.as_str(), frac, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), items.len());
        prop_assert!(!train.is_empty() && !val.is_empty());
        for t in &train {
            prop_assert!(val.iter().all(|v| v.0 != t.0));
        }
        let again = split_by_case(&items, |it| it.0.as_str(), frac, seed).unwrap();
        prop_assert_eq!(again, (train, val));
    }
}
