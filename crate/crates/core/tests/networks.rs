mod common;

use common::{householder, matmul, randn_tensor};
use proptest::prelude::*;
use sdanet::autodiff::Graph;
use sdanet::io::{load_task, task_checkpoint, Checkpoint};
use sdanet::nn::{
    adaptor_feature_apply, kaiming_std, task_forward, AdaptorSet, ImageAdaptorMode, TaskConfig, TaskWeights,
};
use sdanet::{Error, Tensor};

fn apply(w: &Tensor<f64>, f: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let wv = g.constant(w.clone());
    let fv = g.constant(f.clone());
    let out = adaptor_feature_apply(&mut g, wv, fv).unwrap();
    g.value(out).clone()
}

#[test]
fn feature_apply_identity_permutation_and_oracle() {
    let f = randn_tensor(&[2, 64, 3, 5], 1.0, 1);
    assert!(apply(&Tensor::eye(64), &f).bit_eq(&f));

    // channel c of the output takes input channel perm[c]
    let perm: Vec<usize> = (0..64).map(|c| (c * 5 + 3) % 64).collect();
    let p = Tensor::from_fn([64, 64], |k| if perm[k / 64] == k % 64 { 1.0 } else { 0.0 });
    let out = apply(&p, &f);
    let hw = 15;
    for n in 0..2 {
        for c in 0..64 {
            for px in 0..hw {
                assert_eq!(out.data()[(n * 64 + c) * hw + px], f.data()[(n * 64 + perm[c]) * hw + px]);
            }
        }
        for px in 0..hw {
            let norm = |t: &Tensor<f64>| (0..64).map(|c| t.data()[(n * 64 + c) * hw + px].powi(2)).sum::<f64>();
            assert!((norm(&out) - norm(&f)).abs() < 1e-12);
        }
    }

    let w = randn_tensor(&[64, 64], 0.2, 2);
    let out = apply(&w, &f);
    let mut worst: f64 = 0.0;
    for n in 0..2 {
        for o in 0..64 {
            for px in 0..hw {
                let oracle: f64 = (0..64).map(|i| w.data()[o * 64 + i] * f.data()[(n * 64 + i) * hw + px]).sum();
                worst = worst.max((out.data()[(n * 64 + o) * hw + px] - oracle).abs());
            }
        }
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn identity_adaptors_reproduce_the_plain_forward_bitwise() {
    let net = TaskWeights::<f32>::new(TaskConfig::segmentation(5), 3);
    let x = Tensor::from_fn([2, 1, 64, 32], |i| ((i * 37) % 101) as f32 / 101.0);
    let mut g = Graph::new();
    let p = net.bind(&mut g, false);
    let xv = g.constant(x);
    let plain = task_forward(&mut g, &net, &p, xv, None).unwrap();
    let id = AdaptorSet::<f32>::identity();
    let ap = id.bind(&mut g, false);
    let adapted = task_forward(&mut g, &net, &p, xv, Some((&id, &ap))).unwrap();
    assert!(g.value(plain.prediction).bit_eq(g.value(adapted.prediction)));
    assert!(g.value(plain.x_adapted).bit_eq(g.value(adapted.x_adapted)));
    for (a, b) in plain.taps.iter().zip(adapted.taps.iter()) {
        assert!(g.value(*a).bit_eq(g.value(*b)));
    }
}

#[test]
fn encoder_decoder_taps_pair_on_valid_sizes() {
    let net = TaskWeights::<f32>::new(TaskConfig::synthesis(), 4);
    for (h, w) in [(16, 16), (64, 32), (24, 40), (32, 64)] {
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let xv = g.constant(Tensor::from_fn([1, 1, h, w], |i| (i % 11) as f32 / 11.0));
        let b = task_forward(&mut g, &net, &p, xv, None).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(b.taps[i]).dims()[2..], g.value(b.taps[5 - i]).dims()[2..]);
            assert_eq!(g.value(b.taps[i]).dims()[2], h >> (i + 1));
        }
        assert_eq!(g.value(b.prediction).dims(), &[1, 1, h, w]);
    }
}

#[test]
fn image_adaptor_init_follows_kaiming_std() {
    let mut values = Vec::new();
    for seed in 0..3 {
        let a = AdaptorSet::<f64>::init(seed, ImageAdaptorMode::Pointwise);
        values.extend_from_slice(a.image_weight(1).unwrap().data());
    }
    assert!(values.len() >= 10_000);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let expected = (2.0 / (64.0 * (1.0 + 0.01f64.powi(2)))).sqrt();
    assert!((kaiming_std(64) - expected).abs() < 1e-15);
    assert!((sd / expected - 1.0).abs() < 0.2, "{sd} vs {expected}");
}

#[test]
fn checkpoint_round_trip_corruption_and_shape_conflict() {
    let net = TaskWeights::<f32>::new(TaskConfig::segmentation(4), 9);
    let bytes = task_checkpoint(&net).unwrap().to_bytes().unwrap();
    let back = load_task(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert!(back.store().bit_eq(net.store()));
    assert_eq!(back.config(), net.config());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. })));
    // a consistent trailer isolates the magic check
    let body = bad.len() - 4;
    let crc = crc32fast::hash(&bad[..body]).to_le_bytes();
    bad[body..].copy_from_slice(&crc);
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut five = TaskWeights::<f32>::new(TaskConfig::segmentation(5), 9);
    match ck.load_into(five.store_mut()) {
        Err(Error::ShapeConflict { name, .. }) => assert_eq!(name, "task.head.w"),
        other => panic!("expected a shape conflict, got {other:?}"),
    }
}

/// Orthogonal 64×64 matrix as a product of Householder reflections.
fn orthogonal(seed: u64) -> Tensor<f64> {
    (0..4).fold(Tensor::eye(64), |acc, k| matmul(&householder(64, seed * 10 + k), &acc))
}

fn pair_distortion(w: &Tensor<f64>, a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let f = Tensor::new([1, 64, 1, 1], d.clone()).unwrap();
    let wd = apply(w, &f);
    let before: f64 = d.iter().map(|x| x * x).sum();
    let after: f64 = wd.data().iter().map(|x| x * x).sum();
    ((after - before).abs(), before)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn orthogonal_adaptor_preserves_distances(
        a in prop::collection::vec(-3.0f64..3.0, 64),
        b in prop::collection::vec(-3.0f64..3.0, 64),
        seed in 0u64..1000,
    ) {
        let (err, base) = pair_distortion(&orthogonal(seed), &a, &b);
        prop_assert!(err <= 1e-4 * base.max(1e-12));
    }

    #[test]
    fn distortion_bounded_by_orthogonality_deviation(
        a in prop::collection::vec(-3.0f64..3.0, 64),
        b in prop::collection::vec(-3.0f64..3.0, 64),
        seed in 0u64..1000,
    ) {
        let g = randn_tensor(&[64, 64], 0.02, seed);
        let w = Tensor::from_fn([64, 64], |i| g.data()[i] + if i / 64 == i % 64 { 1.0 } else { 0.0 });
        let delta = common::dense_orth_deviation(&w);
        let (err, base) = pair_distortion(&w, &a, &b);
        prop_assert!(err <= delta * base + 1e-9);
    }
}
