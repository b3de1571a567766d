use corncount::agronomy::{ear_estimate_both_sides, estimate_yield, YieldInput};
use corncount::augment::{apply_ops, build_pyramid, crop_patches, AugmentConfig, NoiseOp, Sample};
use corncount::dataio::{
    decode_density_map, encode_density_map, parse_annotations, write_annotations, PointAnnotationSet,
};
use corncount::densitymap::{adaptive_sigma, generate_density_map, segment, DensityMap, SigmaPolicy};
use corncount::evaluate::{compute_metrics, CountRecord, EstimateMode};
use corncount::raster::Image;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn points(max: usize, w: f64, h: f64) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..w, 0.0..h), 0..max)
}

fn records() -> impl Strategy<Value = Vec<CountRecord>> {
    prop::collection::vec((1.0f64..1000.0, 0.0f64..1200.0), 1..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (gt, pred))| CountRecord {
                ear_id: format!("ear{i}"),
                ground_truth: gt,
                predicted: pred,
                mode: EstimateMode::Frontside,
            })
            .collect()
    })
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn annotation_roundtrip(pts in points(30, 500.0, 400.0), id in "[a-z0-9_]{1,12}") {
        let set = PointAnnotationSet { image_id: id, image_width: 500, image_height: 400, points: pts };
        let mut buf = Vec::new();
        write_annotations(&mut buf, std::slice::from_ref(&set)).unwrap();
        let back = parse_annotations(buf.as_slice(), "mem").unwrap();
        prop_assert_eq!(back, vec![set]);
    }

    #[test]
    fn dmap_roundtrip(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..h * w).map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0)).collect();
        let map = DensityMap::from_values(h, w, vals).unwrap();
        prop_assert_eq!(decode_density_map(&encode_density_map(&map)).unwrap(), map);
    }

    #[test]
    fn density_mass_equals_point_count(pts in points(60, 80.0, 60.0)) {
        let map = generate_density_map(80, 60, &pts, &SigmaPolicy::default()).unwrap();
        prop_assert!((map.sum() - pts.len() as f64).abs() <= 1e-4);
        prop_assert!(map.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn density_translation_equivariant(
        pts in prop::collection::vec((20.0f64..40.0, 20.0f64..40.0), 1..12),
        dx in 0usize..8,
        dy in 0usize..8,
    ) {
        let policy = SigmaPolicy { fallback_sigma: 3.0, max_sigma: 3.0, ..SigmaPolicy::default() };
        let a = generate_density_map(72, 72, &pts, &policy).unwrap();
        let moved: Vec<_> = pts.iter().map(|&(x, y)| (x + dx as f64, y + dy as f64)).collect();
        let b = generate_density_map(72, 72, &moved, &policy).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                prop_assert!((a.get(y, x) - b.get(y + dy, x + dx)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sigma_permutation_invariant(pts in points(25, 100.0, 100.0), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<_> = order.iter().map(|&i| pts[i]).collect();
        let policy = SigmaPolicy::default();
        for (j, &i) in order.iter().enumerate() {
            let a = adaptive_sigma(&pts, i, &policy).unwrap();
            let b = adaptive_sigma(&shuffled, j, &policy).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn thresholding_is_monotone(pts in points(20, 40.0, 30.0), t1 in 0.0f32..0.05, t2 in 0.0f32..0.05) {
        let map = generate_density_map(40, 30, &pts, &SigmaPolicy::default()).unwrap();
        let img = Image::new(40, 30, 3);
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let (m_lo, _) = segment(&map, &img, lo).unwrap();
        let (m_hi, _) = segment(&map, &img, hi).unwrap();
        prop_assert!(m_hi.is_subset_of(&m_lo));
    }

    #[test]
    fn rmse_dominates_mae(rs in records()) {
        let r = compute_metrics(&rs).unwrap().overall;
        prop_assert!(r.rmse >= r.mae - 1e-12 && r.mae >= 0.0);
        prop_assert!((r.miss_counted + r.correctly_counted - r.total_gt).abs() < 1e-6);
    }

    #[test]
    fn metrics_permutation_invariant(rs in records()) {
        let a = compute_metrics(&rs).unwrap().overall;
        let mut rev = rs.clone();
        rev.reverse();
        let b = compute_metrics(&rev).unwrap().overall;
        prop_assert!(close(a.mae, b.mae, 1e-12) && close(a.rmse, b.rmse, 1e-12) && close(a.mape, b.mape, 1e-12));
    }

    #[test]
    fn metrics_scale(rs in records(), c in 0.1f64..10.0) {
        let a = compute_metrics(&rs).unwrap().overall;
        let scaled: Vec<_> = rs
            .iter()
            .map(|r| CountRecord { ground_truth: r.ground_truth * c, predicted: r.predicted * c, ..r.clone() })
            .collect();
        let b = compute_metrics(&scaled).unwrap().overall;
        prop_assert!(close(b.mae, c * a.mae, 1e-9));
        prop_assert!(close(b.rmse, c * a.rmse, 1e-9));
        prop_assert!(close(b.mape, a.mape, 1e-9));
    }

    #[test]
    fn yield_is_linear(stand in 1000.0f64..60000.0, kernels in 10.0f64..1000.0, c in 0.5f64..4.0) {
        let base = YieldInput::new(stand, kernels);
        let y = estimate_yield(&base).unwrap();
        // each reported value carries at most 0.005 of rounding
        let tol = 0.005 * (1.0 + c) + 1e-9;
        let ys = estimate_yield(&YieldInput { stand_count: stand * c, ..base.clone() }).unwrap();
        prop_assert!((ys - c * y).abs() <= tol);
        let yk = estimate_yield(&YieldInput { avg_kernels_per_ear: kernels * c, ..base.clone() }).unwrap();
        prop_assert!((yk - c * y).abs() <= tol);
        let yb = estimate_yield(&YieldInput { kernels_per_bushel: base.kernels_per_bushel * c, ..base.clone() }).unwrap();
        prop_assert!((yb - y / c).abs() <= 0.005 * (1.0 + 1.0 / c) + 1e-9);
    }

    #[test]
    fn both_sides_symmetric(a in 0.0f64..1000.0, b in 0.0f64..1000.0) {
        prop_assert_eq!(ear_estimate_both_sides(a, b).unwrap(), ear_estimate_both_sides(b, a).unwrap());
    }
}

fn sample(w: usize, h: usize, pts: &[(f64, f64)]) -> Sample {
    let mut img = Image::new(w, h, 3);
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v = ((i * 7919) % 251) as f32 / 251.0;
    }
    let map = generate_density_map(w, h, pts, &SigmaPolicy::default()).unwrap();
    Sample::new(img, map).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn augmentation_is_deterministic(pts in points(20, 48.0, 40.0), seed in any::<u64>()) {
        let s = sample(48, 40, &pts);
        let cfg = AugmentConfig { patch_size: 16, patches_per_scale_image: 3, seed, ..AugmentConfig::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::new();
            for scaled in build_pyramid(&s.image, &s.density, &cfg).unwrap() {
                out.extend(crop_patches(&scaled.image, &scaled.density, &cfg, &mut rng).unwrap());
            }
            out
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.image, &y.image);
            prop_assert_eq!(&x.density, &y.density);
        }
    }

    #[test]
    fn geometric_ops_preserve_mass(pts in points(20, 30.0, 20.0), turns in 1u32..4, flip in any::<bool>()) {
        let s = sample(30, 20, &pts);
        let mut ops = vec![NoiseOp::Rotate(90.0 * turns as f64)];
        ops.push(if flip { NoiseOp::FlipHorizontal } else { NoiseOp::FlipVertical });
        let out = apply_ops(&s, &ops, &mut ChaCha8Rng::seed_from_u64(0));
        prop_assert!((out.count() - s.count()).abs() < 1e-9);
    }
}
