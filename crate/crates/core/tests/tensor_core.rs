mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use rcn::kv::KvMap;
use rcn::ops::{self, AxisMap, ConvParams};
use rcn::{Exec, Tape, Tensor4};

fn tensor(dims: (usize, usize, usize, usize), seed: u64) -> Tensor4 {
    Tensor4::uniform(dims, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_loop_oracle(n in 1usize..3, c in 1usize..4, o in 1usize..4, h in 1usize..9, w in 1usize..9,
                                half in 0usize..3, seed in any::<u64>()) {
        let kk = 2 * half + 1;
        let x = tensor((n, c, h, w), seed);
        let k = tensor((o, c, kk, kk), seed ^ 1);
        let b: Vec<f64> = tensor((o, 1, 1, 1), seed ^ 2).into_vec();
        let got = ops::conv2d_same(&x, &ConvParams::new(k.clone(), b.clone()).unwrap()).unwrap();
        prop_assert!(max_diff(&got, &conv_oracle(&x, &k, &b)) < 1e-10);
    }

    #[test]
    fn conv_is_linear_in_its_input(seed in any::<u64>(), a in -3.0f64..3.0) {
        let x = tensor((2, 2, 6, 5), seed);
        let y = tensor((2, 2, 6, 5), seed ^ 7);
        let p = ConvParams::new(tensor((3, 2, 3, 3), seed ^ 9), vec![0.0; 3]).unwrap();
        let mut mix = x.map(|v| a * v);
        mix.add_assign(&y);
        let mut want = ops::conv2d_same(&x, &p).unwrap().map(|v| a * v);
        want.add_assign(&ops::conv2d_same(&y, &p).unwrap());
        prop_assert!(max_diff(&ops::conv2d_same(&mix, &p).unwrap(), &want) < 1e-12);
    }

    #[test]
    fn softmax_planes_are_distributions(seed in any::<u64>(), shift in -500.0f64..500.0, scale in 0.1f64..50.0) {
        let z = tensor((2, 3, 4, 5), seed).map(|v| v * scale + shift);
        let p = ops::spatial_softmax(&z);
        for n in 0..2 {
            for k in 0..3 {
                let plane = p.plane(n, k);
                prop_assert!(plane.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let q = ops::spatial_softmax(&z.map(|v| v - shift));
        prop_assert!(max_diff(&p, &q) < 1e-9);
    }

    #[test]
    fn maxpool_matches_oracle(h in 2usize..12, w in 2usize..12, big in any::<bool>(), seed in any::<u64>()) {
        let (size, stride) = if big && h >= 3 && w >= 3 { (3, 2) } else { (2, 2) };
        let x = tensor((1, 2, h, w), seed);
        prop_assert_eq!(ops::maxpool(&x, size, stride).unwrap(), maxpool_oracle(&x, size, stride));
    }

    #[test]
    fn resampling_backward_is_the_adjoint(h in 1usize..6, w in 1usize..6, oh in 1usize..13, ow in 1usize..13,
                                          linear in any::<bool>(), seed in any::<u64>()) {
        let axis = |a: usize, b: usize| if linear { AxisMap::linear(a, b) } else { AxisMap::tile(a, b) };
        let x = tensor((2, 2, h, w), seed);
        let g = tensor((2, 2, oh, ow), seed ^ 3);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let yv = tape.resize(xv, axis(h, oh), axis(w, ow)).unwrap();
        let lhs = tape.value(yv).dot(&g);
        let grads = tape.backward_with_seed(yv, g);
        let rhs = x.dot(grads.get(xv).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn tile_weights_sum_to_one(a in 1usize..12, b in 1usize..40) {
        for taps in AxisMap::tile(a, b).taps {
            prop_assert!((taps.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_bytes_round_trip(n in 1usize..3, c in 1usize..3, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let t = tensor((n, c, h, w), seed);
        let back = Tensor4::read_from(&t.to_bytes()[..]).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn kv_text_round_trips(entries in proptest::collection::btree_map("[a-z_]{1,8}", "[A-Za-z0-9.,_-]{0,12}", 0..8)) {
        let mut kv = KvMap::new();
        for (k, v) in &entries {
            kv.set(k, v);
        }
        let back = KvMap::parse(&kv.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), kv.to_text());
    }
}

#[test]
fn overlap_tile_five_from_two() {
    let x = Tensor4::from_vec((1, 1, 2, 1), vec![1.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let y = tape.resize(v, AxisMap::tile(2, 5), AxisMap::tile(1, 1)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 3.0, 3.0]);
}

#[test]
fn sequential_and_parallel_conv_agree_bitwise() {
    let x = tensor((6, 3, 11, 9), 1);
    let k = tensor((4, 3, 3, 3), 2);
    let b = tensor((4, 1, 1, 1), 3);
    let g = tensor((6, 4, 11, 9), 4);
    let run = |exec: Exec| {
        let mut tape = Tape::with_exec(exec);
        let (xv, kv, bv) = (tape.leaf(x.clone()), tape.leaf(k.clone()), tape.leaf(b.clone()));
        let y = tape.conv2d(xv, kv, bv).unwrap();
        let out = tape.value(y).clone();
        let grads = tape.backward_with_seed(y, g.clone());
        (out, grads.get(xv).unwrap().clone(), grads.get(kv).unwrap().clone(), grads.get(bv).unwrap().clone())
    };
    let (a, b) = (run(Exec::Sequential), run(Exec::Parallel));
    for (p, q) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2), (&a.3, &b.3)] {
        assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn large_kernel_conv_crosses_row_blocks() {
    // tall enough that the unfolded matrix is processed in several blocks
    let x = tensor((1, 5, 80, 80), 11);
    let k = tensor((2, 5, 9, 9), 12);
    let b = vec![0.25, -0.5];
    let got = ops::conv2d_same(&x, &ConvParams::new(k.clone(), b.clone()).unwrap()).unwrap();
    assert!(max_diff(&got, &conv_oracle(&x, &k, &b)) < 1e-10);
}

#[test]
fn concat_then_split_by_gradient() {
    let a = tensor((2, 2, 3, 3), 5);
    let b = tensor((2, 3, 3, 3), 6);
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let y = tape.concat(&[av, bv]).unwrap();
    assert_eq!(tape.value(y), &concat_oracle(&a, &b));
    let seed = tape.value(y).clone();
    let grads = tape.backward_with_seed(y, seed);
    assert_eq!(grads.get(av).unwrap(), &a);
    assert_eq!(grads.get(bv).unwrap(), &b);
}

#[test]
fn weighted_sum_with_unit_alpha_on_one_branch() {
    let maps = vec![tensor((1, 2, 4, 4), 1), tensor((1, 2, 4, 4), 2)];
    let mut alpha = Tensor4::zeros((2, 2, 4, 4));
    for v in &mut alpha.data_mut()[32..] {
        *v = 1.0;
    }
    assert_eq!(ops::weighted_sum_maps(&maps, &alpha).unwrap(), maps[1]);
}
