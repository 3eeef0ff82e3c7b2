use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rcn::arch::{apply_branch_mask, keypoint_terms, UpsampleMode};
use rcn::denoiser::{build_denoiser, denoiser_terms, CorruptionRecord, DenoiserConfig};
use rcn::gradcheck::{check_network, check_primitives, grad_check, GradCheckOptions, Primitive};
use rcn::metrics::{Keypoint, KeypointSet};
use rcn::{Arch, ModelConfig, Network, NetworkConfig, Tensor4};

fn truth(n: usize, k: usize, size: usize, seed: u64) -> Vec<KeypointSet> {
    (0..n)
        .map(|i| {
            KeypointSet::new(
                (0..k)
                    .map(|j| Keypoint::new((i * 7 + j * 3 + seed as usize) % size, (i * 5 + j * 11 + 1) % size))
                    .collect(),
            )
        })
        .collect()
}

fn check(cfg: NetworkConfig, per_param: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, s) = (cfg.num_keypoints, cfg.input_size);
    let net = Network::new(ModelConfig::Keypoint(cfg)).unwrap();
    let x = Tensor4::uniform((2, 1, s, s), -1.0, 1.0, &mut rng);
    let terms = keypoint_terms(&truth(2, k, s, seed), k, s).unwrap();
    let opts = GradCheckOptions { tolerance: 1e-3, ..Default::default() };
    let r = check_network(&net, &x, &terms, 1e-3, per_param, opts, &mut rng).unwrap();
    assert!(r.checked > 0 && r.skipped * 4 < r.checked, "{} checked, {} skipped", r.checked, r.skipped);
    r.into_result().unwrap();
}

#[test]
fn primitives_pass_across_seeds() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in check_primitives(&Primitive::all(), GradCheckOptions::default(), &mut rng).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{} seed {seed}: {:.3e}", r.name, r.max_rel_error);
        }
    }
}

#[test]
fn overlap_tile_upsample_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let op = Primitive::UpsampleTile { factor: 2 };
    let inputs = vec![Tensor4::uniform((1, 2, 5, 5), -1.0, 1.0, &mut rng)];
    grad_check(&op, &inputs, GradCheckOptions::default(), &mut rng).unwrap().into_result().unwrap();
}

#[test]
fn injected_sign_error_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let opts = GradCheckOptions { inject_sign_error: true, ..Default::default() };
    for r in check_primitives(&[Primitive::WeightedSum, Primitive::SoftmaxNll], opts, &mut rng).unwrap() {
        let name = r.name.clone();
        let msg = r.into_result().unwrap_err().to_string();
        assert!(msg.contains(&name), "{msg}");
    }
}

#[test]
fn rcn_three_branches() {
    check(NetworkConfig::new(Arch::Rcn, 8, 2, 3).with_channels(3).with_seed(1), usize::MAX, 10);
}

#[test]
fn rcn_with_skip_connections() {
    check(NetworkConfig::new(Arch::Rcn, 8, 2, 3).with_channels(3).with_seed(2).with_skip(true), usize::MAX, 11);
}

#[test]
fn rcn_with_bilinear_upsampling() {
    let mut cfg = NetworkConfig::new(Arch::Rcn, 8, 2, 3).with_channels(3).with_seed(3);
    cfg.upsample = UpsampleMode::Bilinear;
    check(cfg, usize::MAX, 12);
}

#[test]
fn rcn_with_bypassed_branch() {
    let base = NetworkConfig::new(Arch::Rcn, 8, 2, 3).with_channels(3).with_seed(4);
    check(apply_branch_mask(&base, &"1,0,1".parse().unwrap()).unwrap(), usize::MAX, 13);
}

#[test]
fn rcn_on_odd_pooling_ladder() {
    // 10 -> 5 -> 2 uses the 3x3 stride-2 pool
    check(NetworkConfig::new(Arch::Rcn, 10, 2, 3).with_channels(2).with_seed(5), 40, 14);
}

#[test]
fn sumnet_full_and_masked() {
    let base = NetworkConfig::new(Arch::SumNet, 8, 2, 3).with_channels(3).with_seed(6);
    check(base.clone(), usize::MAX, 15);
    check(apply_branch_mask(&base, &"0,1,1".parse().unwrap()).unwrap(), usize::MAX, 16);
}

#[test]
fn denoiser_masked_criterion() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = DenoiserConfig { layers: 2, kernel: 3, channels: 3, ..DenoiserConfig::new(3, 6) };
    let den = build_denoiser(&cfg).unwrap();
    let sets = truth(2, 3, 6, 1);
    let records = vec![
        CorruptionRecord { indices: vec![1], original: vec![sets[0].points()[1]] },
        CorruptionRecord { indices: vec![0, 2], original: vec![sets[1].points()[0], sets[1].points()[2]] },
    ];
    let terms = denoiser_terms(&sets, &records).unwrap();
    let x = Tensor4::uniform((2, 3, 6, 6), 0.0, 1.0, &mut rng);
    let opts = GradCheckOptions { tolerance: 1e-3, ..Default::default() };
    check_network(&den, &x, &terms, 1e-4, usize::MAX, opts, &mut rng).unwrap().into_result().unwrap();
}
