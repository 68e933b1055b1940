use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iceg_core::features::{describe_region, extract_features, match_regions, FeatureMap, Normalization, PatchDescriptor};
use iceg_core::fixture;
use iceg_core::image::{Bitmap, Image};
use iceg_core::scene::{sample_count, sample_edit_views, TrainingStage};
use iceg_core::segmentation::{consolidate_masks, segment_view, KMeansSegmenter, MaskOrigin, MaskSet, RegionMask};
use iceg_core::splat::{
    loss_gs, loss_nnfm, render, render_backward, ssim, Camera, Gaussian, GaussianSet, Objective, RenderSettings, TrainConfig,
    TrainState, TrainView, Trainer, PARAMS_PER_GAUSSIAN,
};
use iceg_core::style::{apply_color_to_region, rgb_to_hsv};

fn rect_masks(rng: &mut ChaCha8Rng, w: usize, h: usize, n: usize) -> Vec<RegionMask> {
    (0..n)
        .map(|i| {
            let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
            let (x1, y1) = (rng.random_range(x0..w) + 1, rng.random_range(y0..h) + 1);
            RegionMask::new(i as u32, Bitmap::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y)), MaskOrigin::Raw(i))
        })
        .collect()
}

fn random_f32_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image<f32> {
    Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

fn random_f64_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image<f64> {
    Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

fn random_bitmap(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Bitmap {
    Bitmap::from_bits(w, h, (0..w * h).map(|_| rng.random_bool(0.5)).collect()).unwrap()
}

struct Instance {
    target: MaskSet,
    featmap: FeatureMap,
    edit: Vec<RegionMask>,
    edit_map: FeatureMap,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols, c, stride) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..12), 4);
    let (w, h) = (cols * stride, rows * stride);
    let map = |rng: &mut ChaCha8Rng| FeatureMap::new(rows, cols, c, stride, (0..rows * cols * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let featmap = map(&mut rng);
    let edit_map = map(&mut rng);
    let nt = rng.random_range(1..8);
    let target = consolidate_masks(&rect_masks(&mut rng, w, h, nt), 8, w, h).unwrap();
    let ne = rng.random_range(1..8);
    let edit = consolidate_masks(&rect_masks(&mut rng, w, h, ne), 8, w, h).unwrap().masks;
    Instance { target, featmap, edit, edit_map }
}

fn brute_force(inst: &Instance) -> Vec<(u32, u32)> {
    let s = inst.featmap.stride;
    let means: Vec<Vec<f64>> = inst
        .edit
        .iter()
        .map(|m| {
            let mut acc = vec![0.0; inst.edit_map.channels];
            for (x, y) in m.bitmap.iter_set() {
                for (a, v) in acc.iter_mut().zip(inst.edit_map.cell(y / s, x / s)) {
                    *a += v / m.area as f64;
                }
            }
            acc
        })
        .collect();
    inst.target
        .masks
        .iter()
        .map(|p| {
            let mut best = (u32::MAX, f64::INFINITY);
            for (e, mean) in inst.edit.iter().zip(&means) {
                let d: f64 = p
                    .bitmap
                    .iter_set()
                    .map(|(x, y)| inst.featmap.cell(y / s, x / s).iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / p.area as f64;
                if d < best.1 {
                    best = (e.mask_id, d);
                }
            }
            (p.mask_id, best.0)
        })
        .collect()
}

fn assign(inst: &Instance, scale: f64) -> Vec<(u32, u32)> {
    let fm = inst.featmap.scaled(scale);
    let em = inst.edit_map.scaled(scale);
    let descs: Vec<_> = inst.edit.iter().map(|m| describe_region(&em, m).unwrap()).collect();
    let a = match_regions(&inst.target, &fm, &descs, Normalization::TargetArea).unwrap();
    a.entries.iter().map(|(&t, e)| (t, e.edit_mask_id)).collect()
}

fn camera() -> Camera {
    let pose = Camera::look_at_pose([0.0, 0.5, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 20.0, 16, 16);
    Camera::from_pose(&pose, 16, 16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampling_is_pure_sized_and_distinct(views in 2usize..40, fraction in 0.01f64..=1.0, seed: u64) {
        let ds = fixture::tiny_dataset(views, 8);
        let a = sample_edit_views(&ds, fraction, seed).unwrap();
        prop_assert_eq!(&a, &sample_edit_views(&ds, fraction, seed).unwrap());
        prop_assert_eq!(a.len(), sample_count(views, fraction));
        prop_assert_eq!(a.len(), (fraction * views as f64).ceil() as usize);
        let mut unique = a.clone();
        unique.dedup();
        prop_assert_eq!(unique.len(), a.len());
    }

    #[test]
    fn consolidation_partitions_within_budget(seed: u64, n in 0usize..12, budget in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(4..30), rng.random_range(4..30));
        let raw = rect_masks(&mut rng, w, h, n);
        let set = consolidate_masks(&raw, budget, w, h).unwrap();
        prop_assert!(set.validate_partition().is_ok());
        prop_assert_eq!(set.masks.iter().map(|m| m.area).sum::<usize>(), w * h);
        prop_assert!(set.masks.len() <= budget);
        for (i, a) in set.masks.iter().enumerate() {
            for b in &set.masks[i + 1..] {
                prop_assert!(a.bitmap.iter_set().all(|(x, y)| !b.bitmap.get(x, y)));
            }
        }
        let kept: Vec<usize> = set.masks.iter().filter_map(|m| match m.origin { MaskOrigin::Raw(i) => Some(i), _ => None }).collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[b].area.cmp(&raw[a].area).then(a.cmp(&b)));
        let top = &order[..order.len().min(budget - 1)];
        prop_assert!(kept.iter().all(|i| top.contains(i)));
    }

    #[test]
    fn fallback_segmentation_is_deterministic(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_f32_image(&mut rng, 12, 10);
        let seg = KMeansSegmenter::with_seed(seed);
        let a = segment_view(&img, &seg, 4).unwrap();
        prop_assert_eq!(&a, &segment_view(&img, &seg, 4).unwrap());
        prop_assert_eq!(a.iter().map(|m| m.area).sum::<usize>(), 120);
    }

    #[test]
    fn matching_equals_brute_force(seed: u64) {
        let inst = instance(seed);
        prop_assert_eq!(assign(&inst, 1.0), brute_force(&inst));
    }

    #[test]
    fn matching_ignores_positive_scale(seed: u64, scale in 1e-3f64..1e3) {
        let inst = instance(seed);
        prop_assert_eq!(assign(&inst, scale), assign(&inst, 1.0));
    }

    #[test]
    fn color_transfer_keeps_value_and_locality(seed: u64, hue in 0.0f64..360.0, sat in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_f32_image(&mut rng, 9, 7);
        let mask = random_bitmap(&mut rng, 9, 7);
        let out = apply_color_to_region(&img, &mask, hue, sat).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                let (a, b) = (img.get(x, y), out.get(x, y));
                prop_assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
                if mask.get(x, y) {
                    prop_assert!((rgb_to_hsv(a)[2] - rgb_to_hsv(b)[2]).abs() <= 1e-6);
                } else {
                    prop_assert_eq!(a, b);
                }
            }
        }
        prop_assert_eq!(apply_color_to_region(&out, &mask, hue, sat).unwrap(), out);
    }

    #[test]
    fn losses_are_nonnegative_and_ssim_symmetric(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_f64_image(&mut rng, 16, 16), random_f64_image(&mut rng, 16, 16));
        let p = PatchDescriptor::default();
        prop_assert!(loss_nnfm(&extract_features(&a, &p).unwrap(), &extract_features(&b, &p).unwrap()).unwrap() >= 0.0);
        prop_assert!(loss_gs(&a, &b, 0.8).unwrap() >= 0.0);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gaussians_behind_the_camera_get_no_gradient(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = fixture::blob_scene(4, seed);
        g.push(Gaussian {
            position: [rng.random_range(-0.5..0.5), 0.5, rng.random_range(4.0..8.0)],
            scale: [0.2; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: 0.9,
            color: [0.5; 3],
        });
        let img = Image::from_vec(16, 16, (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let grad = render_backward(&g.to_params(), &camera(), &RenderSettings::default(), &img).unwrap();
        let last = g.len() - 1;
        prop_assert!(grad[last * PARAMS_PER_GAUSSIAN..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_training_is_deterministic(seed: u64) {
        let g: GaussianSet = fixture::blob_scene(12, seed);
        let target = render(&fixture::blob_scene(12, seed ^ 1).to_params(), &camera(), &RenderSettings::default()).unwrap().image;
        let views = vec![TrainView { view_id: "v".into(), camera: camera(), target, nnfm: vec![] }];
        let cfg = TrainConfig::with_seed(seed);
        let run = || {
            let trainer = Trainer::new(&views, &cfg, Objective::Color).unwrap();
            let mut st = TrainState::new(g.clone(), TrainingStage::Color);
            for _ in 0..15 {
                trainer.step(&mut st).unwrap();
            }
            st.gaussians
        };
        prop_assert_eq!(run(), run());
    }
}
