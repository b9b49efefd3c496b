use patchlab_core::grid::patch_count_for;
use patchlab_core::{
    apply_permutation, invert_permutation, make_grid, mix_labels, patch_drop, patch_mix, patch_mix_attack,
    patch_permute, patch_selectivity, inverse_patch_selectivity, sample_patch_mask, softmax_normalize, unpermute,
    AttackKind, AttackSpec, CategoryDistribution, DropFill, GridSpec, ImageTensor, PatchMask, SaliencyMap, SeededRng,
};
use proptest::prelude::*;

fn image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
    let mut rng = SeededRng::new(seed);
    ImageTensor::from_fn(h, w, c, |_, _, _| rng.unit_f64()).unwrap()
}

/// Grid dimensions with a patch size, so the image is `rows*ph x cols*pw`.
fn grid_dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..8, 1usize..8, 1usize..6, 1usize..6)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn patch_mix_takes_each_pixel_from_one_source(
        (rows, cols, ph, pw) in grid_dims(), r in 0.0f64..=1.0, seed in any::<u64>(), c in prop::sample::select(vec![1usize, 3, 4])
    ) {
        let (h, w) = (rows * ph, cols * pw);
        let (a, b) = (image(h, w, c, seed), image(h, w, c, seed ^ 1));
        let grid = make_grid(h, w, rows, cols).unwrap();
        let mask = sample_patch_mask(&grid, r, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(mask.popcount(), patch_count_for(r, rows * cols));
        let out = patch_mix(&a, &b, &mask).unwrap();
        for y in 0..h {
            for x in 0..w {
                let src = if mask.covers_pixel(y, x) { &b } else { &a };
                prop_assert_eq!(out.pixel(y, x), src.pixel(y, x));
            }
        }
    }

    #[test]
    fn mixed_labels_are_distributions(
        k in 2usize..50, la in 0usize..50, lb in 0usize..50, r in 0.0f64..=1.0, eps in 0.0f64..0.99
    ) {
        let (la, lb) = (la % k, lb % k);
        let y = mix_labels(
            &CategoryDistribution::one_hot(k, la).unwrap(),
            &CategoryDistribution::one_hot(k, lb).unwrap(),
            r,
            eps,
        ).unwrap();
        let p = y.probs();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= eps / k as f64 - 1e-12));
        let mut want = vec![eps / k as f64; k];
        want[la] += (1.0 - eps) * (1.0 - r);
        want[lb] += (1.0 - eps) * r;
        for (g, e) in p.iter().zip(&want) {
            prop_assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_round_trips((rows, cols, ph, pw) in grid_dims(), seed in any::<u64>()) {
        let (h, w) = (rows * ph, cols * pw);
        let x = image(h, w, 3, seed);
        let spec = GridSpec::new(rows, cols);
        let (out, perm) = patch_permute(&x, spec, &mut SeededRng::new(seed)).unwrap();
        let grid = spec.for_image(h, w).unwrap();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..rows * cols).collect::<Vec<_>>());
        prop_assert_eq!(unpermute(&out, &grid, &perm).unwrap(), x.clone());
        let inv = invert_permutation(&perm).unwrap();
        prop_assert_eq!(apply_permutation(&out, &grid, &inv).unwrap(), x);
    }

    #[test]
    fn drop_touches_only_masked_patches(
        (rows, cols, ph, pw) in grid_dims(), loss in 0.0f64..=0.8, fill in 0.0f64..=1.0, seed in any::<u64>()
    ) {
        let (h, w) = (rows * ph, cols * pw);
        let x = image(h, w, 3, seed);
        let spec = AttackSpec::new(AttackKind::Drop, GridSpec::new(rows, cols), loss, seed)
            .unwrap()
            .with_fill(DropFill::Constant(fill));
        let (out, mask) = patch_drop(&x, &spec, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(mask.popcount(), patch_count_for(loss, rows * cols));
        for y in 0..h {
            for xx in 0..w {
                if mask.covers_pixel(y, xx) {
                    prop_assert!(out.pixel(y, xx).iter().all(|&v| v == fill));
                } else {
                    prop_assert_eq!(out.pixel(y, xx), x.pixel(y, xx));
                }
            }
        }
    }

    #[test]
    fn mix_attack_is_patch_mix_with_its_mask(
        (rows, cols, ph, pw) in grid_dims(), loss in 0.0f64..=0.8, seed in any::<u64>()
    ) {
        let (h, w) = (rows * ph, cols * pw);
        let (x, d) = (image(h, w, 3, seed), image(h, w, 3, !seed));
        let spec = AttackSpec::new(AttackKind::Mix, GridSpec::new(rows, cols), loss, seed).unwrap();
        let (out, mask) = patch_mix_attack(&x, &d, &spec, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(out, patch_mix(&x, &d, &mask).unwrap());
    }

    #[test]
    fn masks_are_nested_across_ratios(n in 1usize..200, seed in any::<u64>(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let grid = make_grid(n, 1, n, 1).unwrap();
        let small = sample_patch_mask(&grid, lo, &mut SeededRng::derive(seed, "img")).unwrap();
        let large = sample_patch_mask(&grid, hi, &mut SeededRng::derive(seed, "img")).unwrap();
        prop_assert!(small.set_indices().all(|i| large.is_set(i)));
    }

    #[test]
    fn selectivities_partition_unit_mass(
        (rows, cols, ph, pw) in grid_dims(), r in 0.0f64..=1.0, seed in any::<u64>(), scale in 0.1f64..50.0
    ) {
        let (h, w) = (rows * ph, cols * pw);
        let mut rng = SeededRng::new(seed);
        let values = (0..h * w).map(|_| rng.uniform(-scale, scale)).collect();
        let map = softmax_normalize(&SaliencyMap::new(h, w, values).unwrap());
        prop_assert!((map.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let grid = make_grid(h, w, rows, cols).unwrap();
        let mask = sample_patch_mask(&grid, r, &mut rng).unwrap();
        let inside = patch_selectivity(&map, &mask).unwrap() * (rows * cols) as f64;
        let outside = inverse_patch_selectivity(&map, &mask).unwrap();
        prop_assert!((inside + outside - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mask_text_round_trips((rows, cols, ph, pw) in grid_dims(), r in 0.0f64..=1.0, seed in any::<u64>()) {
        let (h, w) = (rows * ph, cols * pw);
        let grid = make_grid(h, w, rows, cols).unwrap();
        let mask = sample_patch_mask(&grid, r, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(PatchMask::parse_text(&mask.to_text(), h, w).unwrap(), mask);
    }

    #[test]
    fn grid_spec_text_round_trips(rows in 1usize..100, cols in 1usize..100) {
        let g = GridSpec::new(rows, cols);
        prop_assert_eq!(g.to_string().parse::<GridSpec>().unwrap(), g);
    }

    #[test]
    fn derived_streams_are_reproducible(seed in any::<u64>(), key in "[a-z0-9_.]{1,16}") {
        let a: Vec<f64> = { let mut r = SeededRng::derive(seed, &key); (0..8).map(|_| r.unit_f64()).collect() };
        let b: Vec<f64> = { let mut r = SeededRng::derive(seed, &key); (0..8).map(|_| r.unit_f64()).collect() };
        prop_assert_eq!(a, b);
    }
}

#[test]
fn indivisible_grids_are_rejected() {
    assert!(make_grid(10, 10, 3, 3).is_err());
    let x = image(10, 10, 3, 0);
    assert!(patch_permute(&x, GridSpec::new(3, 3), &mut SeededRng::new(0)).is_err());
}

#[test]
fn loss_above_ceiling_is_rejected() {
    assert!(AttackSpec::new(AttackKind::Drop, GridSpec::new(7, 7), 0.81, 0).is_err());
    assert!(AttackSpec::new(AttackKind::Mix, GridSpec::new(7, 7), -0.01, 0).is_err());
}
