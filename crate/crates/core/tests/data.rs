use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rcn::data::{
    generate_synthetic, jitter_augment, lcn, load_dataset, map_keypoints, occlude, read_pgm, save_dataset, stream_rng,
    to_gray, warp_image, Affine, AugmentConfig, Dataset, JitterSpec, LcnConfig, OcclusionSpec, Pipeline, Sample,
    StageOrder, SynthSpec, MANIFEST_FILE,
};
use rcn::{Error, EvalConfig, Keypoint, KeypointSet, Tensor4};

fn blob_sample(size: usize, kps: &[(usize, usize)]) -> Sample {
    let mut image = Tensor4::zeros((1, 1, size, size));
    for &(r, c) in kps {
        for i in r - 1..=r + 1 {
            for j in c - 1..=c + 1 {
                image.set(0, 0, i, j, 1.0);
            }
        }
    }
    Sample { id: "blob".into(), image, keypoints: KeypointSet::from_pairs(kps) }
}

#[test]
fn synthetic_generation_is_seeded() {
    let spec = SynthSpec::new(24, 5);
    let a = generate_synthetic(6, 3, &spec).unwrap();
    assert_eq!(a, generate_synthetic(6, 3, &spec).unwrap());
    assert_ne!(a, generate_synthetic(6, 4, &spec).unwrap());
    // a sample depends only on (seed, index)
    let longer = generate_synthetic(9, 3, &spec).unwrap();
    assert_eq!(&longer.samples()[..6], a.samples());
}

#[test]
fn synthetic_eye_distance_stays_in_range() {
    let spec = SynthSpec::new(40, 5);
    let data = generate_synthetic(200, 5, &spec).unwrap();
    let (lo, hi) = spec.interocular;
    for s in data.samples() {
        let p = s.keypoints.points();
        let d = p[0].distance(&p[1]);
        // both eyes are rounded to the grid
        assert!(d > lo - 1.5 && d < hi + 1.5, "{}: {d} outside {lo}..{hi}", s.id);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn sixty_eight_point_faces() {
    let spec = SynthSpec::new(48, 68);
    let data = generate_synthetic(4, 1, &spec).unwrap();
    assert_eq!(data.num_keypoints(), 68);
    assert_eq!(data.keypoint_names().len(), 68);
    assert_eq!(data.eval_config(), EvalConfig { left_eye: 36, right_eye: 45 });
    for s in data.samples() {
        s.validate().unwrap();
    }
}

#[test]
fn unsupported_keypoint_count_is_rejected() {
    assert!(matches!(generate_synthetic(2, 0, &SynthSpec::new(32, 7)), Err(Error::Config(_))));
    assert!(matches!(generate_synthetic(0, 0, &SynthSpec::new(32, 5)), Err(Error::Config(_))));
}

#[test]
fn lcn_maps_constant_images_to_zero() {
    let img = Tensor4::from_fn((1, 1, 12, 10), |_, _, _, _| 0.37);
    let out = lcn(&img, &LcnConfig::default()).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn lcn_rejects_even_window() {
    let cfg = LcnConfig { window: 4, ..Default::default() };
    assert!(lcn(&Tensor4::zeros((1, 1, 5, 5)), &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lcn_ignores_gain_and_offset(seed in any::<u64>(), a in 0.2f64..5.0, b in -2.0f64..2.0) {
        let x = Tensor4::uniform((1, 1, 11, 13), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let cfg = LcnConfig::default();
        let base = lcn(&x, &cfg).unwrap();
        let moved = lcn(&x.map(|v| a * v + b), &cfg).unwrap();
        prop_assert!(base.max_abs_diff(&moved) < 1e-9);
    }

    #[test]
    fn occlusion_is_one_rectangle_inside_bounds(seed in any::<u64>(), lo in 1usize..6, extra in 0usize..6) {
        let size = 16;
        let s = blob_sample(size, &[(4, 4), (4, 11)]);
        let s = Sample { image: s.image.map(|_| 0.5), ..s };
        let spec = OcclusionSpec { min_side: lo, max_side: lo + extra, fill: 0.0 };
        let out = occlude(&s, &spec, &mut ChaCha8Rng::seed_from_u64(seed));
        let hits: Vec<(usize, usize)> = (0..size)
            .flat_map(|i| (0..size).map(move |j| (i, j)))
            .filter(|&(i, j)| out.image.get(0, 0, i, j) == 0.0)
            .collect();
        let (r0, r1) = (hits.iter().map(|p| p.0).min().unwrap(), hits.iter().map(|p| p.0).max().unwrap());
        let (c0, c1) = (hits.iter().map(|p| p.1).min().unwrap(), hits.iter().map(|p| p.1).max().unwrap());
        let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
        prop_assert_eq!(hits.len(), h * w);
        prop_assert!((lo..=lo + extra).contains(&h) && (lo..=lo + extra).contains(&w));
        prop_assert_eq!(out.keypoints, s.keypoints);
    }

    #[test]
    fn affine_inverse_round_trips(cx in 0.0f64..30.0, cy in 0.0f64..30.0, theta in -3.0f64..3.0,
                                  scale in 0.5f64..2.0, tx in -5.0f64..5.0, ty in -5.0f64..5.0,
                                  px in -20.0f64..20.0, py in -20.0f64..20.0) {
        let m = Affine::similarity((cx, cy), theta, scale, (tx, ty));
        let back = m.inverse().unwrap().apply(m.apply((px, py)));
        prop_assert!((back.0 - px).abs() < 1e-9 && (back.1 - py).abs() < 1e-9);
        let id = m.compose(&m.inverse().unwrap());
        prop_assert!((id.apply((px, py)).0 - px).abs() < 1e-9);
    }

    #[test]
    fn jitter_keeps_blobs_under_their_keypoints(seed in any::<u64>()) {
        let s = blob_sample(32, &[(10, 10), (10, 21), (21, 16)]);
        let out = jitter_augment(&s, &JitterSpec::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        for p in out.keypoints.points() {
            prop_assert!(out.image.get(0, 0, p.row, p.col) > 0.99, "{:?}", p);
        }
    }
}

#[test]
fn integer_translation_shifts_pixels() {
    let img = Tensor4::uniform((1, 1, 9, 9), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let m = Affine::similarity((0.0, 0.0), 0.0, 1.0, (2.0, 3.0));
    let out = warp_image(&img, &m);
    for i in 0..9 {
        for j in 0..9 {
            let want = if i >= 3 && j >= 2 { img.get(0, 0, i - 3, j - 2) } else { 0.0 };
            assert!((out.get(0, 0, i, j) - want).abs() < 1e-12);
        }
    }
    let kps = KeypointSet::from_pairs(&[(1, 1), (5, 6)]);
    assert_eq!(map_keypoints(&kps, &m, 9).unwrap(), KeypointSet::from_pairs(&[(4, 3), (8, 8)]));
    assert!(map_keypoints(&KeypointSet::from_pairs(&[(7, 0)]), &m, 9).is_none());
}

#[test]
fn zero_jitter_is_identity() {
    let s = blob_sample(16, &[(4, 4), (4, 11)]);
    let out = jitter_augment(&s, &JitterSpec::none(), &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(out, s);
}

#[test]
fn to_gray_uses_luma_weights() {
    let img = Tensor4::from_vec((1, 3, 1, 2), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let g = to_gray(&img).unwrap();
    assert!((g.get(0, 0, 0, 0) - 0.299).abs() < 1e-12);
    assert!((g.get(0, 0, 0, 1) - 0.587).abs() < 1e-12);
    assert!(to_gray(&Tensor4::zeros((1, 2, 2, 2))).is_err());
}

#[test]
fn pipeline_batches_are_reproducible_per_epoch() {
    let data = generate_synthetic(6, 2, &SynthSpec::new(24, 5)).unwrap();
    let augment = AugmentConfig {
        jitter: Some(JitterSpec::default()),
        occlusion: Some(OcclusionSpec { min_side: 3, max_side: 6, fill: 0.0 }),
        order: StageOrder::OccludeFirst,
    };
    let pipe = Pipeline::new(augment);
    let idx = [0, 3, 5];
    let a = pipe.batch(&data, &idx, 9, 1).unwrap();
    assert_eq!(a, pipe.batch(&data, &idx, 9, 1).unwrap());
    assert_ne!(a.0, pipe.batch(&data, &idx, 9, 2).unwrap().0);
    assert_eq!(a.0.dims().n, 3);
    // sample i of a batch only depends on its own index
    let single = pipe.batch(&data, &[3], 9, 1).unwrap();
    assert_eq!(single.1[0], a.1[1]);
    let clean = pipe.clean(&data).unwrap();
    assert_eq!(clean.dims().n, 6);
}

#[test]
fn stream_rng_separates_streams() {
    use rand::Rng;
    let a: u64 = stream_rng(1, &[2, 3]).random();
    assert_eq!(a, stream_rng(1, &[2, 3]).random::<u64>());
    assert_ne!(a, stream_rng(1, &[3, 2]).random::<u64>());
    assert_ne!(a, stream_rng(2, &[2, 3]).random::<u64>());
}

#[test]
fn dataset_rejects_mixed_keypoint_counts() {
    let a = blob_sample(8, &[(2, 2), (2, 5)]);
    let b = blob_sample(8, &[(2, 2)]);
    let names = vec!["l".to_string(), "r".to_string()];
    assert!(Dataset::new(vec![a, b], names, EvalConfig { left_eye: 0, right_eye: 1 }).is_err());
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(3, 8, &SynthSpec::new(20, 5)).unwrap();
    save_dataset(&data, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.keypoint_names(), data.keypoint_names());
    assert_eq!(back.truth(), data.truth());
    // 8-bit quantization
    assert!(back.images().max_abs_diff(&data.images()) <= 0.5 / 255.0 + 1e-12);
    let (h, w, v) = read_pgm(&dir.path().join(format!("{}.pgm", data.samples()[0].id))).unwrap();
    assert_eq!((h, w, v.len()), (20, 20, 400));
}

#[test]
fn loader_errors_name_the_file_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(2, 8, &SynthSpec::new(16, 5)).unwrap();
    save_dataset(&data, dir.path()).unwrap();
    let manifest = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest).unwrap();
    let id = &data.samples()[1].id;

    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut fields: Vec<String> = lines[2].split(',').map(str::to_string).collect();
    fields[2] = "x".into();
    lines[2] = fields.join(",");
    std::fs::write(&manifest, lines.join("\n")).unwrap();
    let msg = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(msg.contains(MANIFEST_FILE) && msg.contains(id.as_str()), "{msg}");

    fields[2] = "99".into();
    lines[2] = fields.join(",");
    std::fs::write(&manifest, lines.join("\n")).unwrap();
    let msg = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(msg.contains(id.as_str()) && msg.contains("outside"), "{msg}");

    std::fs::write(&manifest, &text).unwrap();
    std::fs::remove_file(dir.path().join(format!("{id}.pgm"))).unwrap();
    let msg = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(msg.contains(&format!("{id}.pgm")), "{msg}");
}

#[test]
fn keypoints_past_the_edge_fail_validation() {
    let s = Sample {
        id: "edge".into(),
        image: Tensor4::zeros((1, 1, 4, 4)),
        keypoints: KeypointSet::new(vec![Keypoint::new(4, 0)]),
    };
    assert!(s.validate().unwrap_err().to_string().contains("edge"));
}
