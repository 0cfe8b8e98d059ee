use proptest::prelude::*;

use vov3d::analysis::{analytic_conv_cost, single_trf, tosa_trf};
use vov3d::blocks::{TOSAConfig, Variant};
use vov3d::data::{segment_indices, strided_indices};
use vov3d::gradcheck::micro_graph;
use vov3d::net::{ModelWeights, VoV3D};
use vov3d::ops::conv::{conv3d_forward, ConvLayer, ConvSpec};
use vov3d::ops::reference::{conv3d_naive, count_conv_macs};
use vov3d::train::{lr_at, TrainConfig};
use vov3d::{Rng, Shape5, Tensor5};

const VARIANTS: [Variant; 5] = [Variant::Bottleneck, Variant::R21d, Variant::DwBottleneck, Variant::D12d, Variant::D21d];

fn conv_spec() -> impl Strategy<Value = ConvSpec> {
    (1usize..4, 1usize..4, prop::sample::select(vec![1usize, 3, 5]), prop::sample::select(vec![1usize, 3]), 1usize..3, 0..3)
        .prop_map(|(ci, co, t, k, s, mode)| match mode {
            0 => ConvSpec::full(ci, co, t, k, s).unwrap(),
            1 => ConvSpec::depthwise(ci, t, k, s).unwrap(),
            _ => ConvSpec::pointwise(ci, co).unwrap(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fast_conv_matches_naive(spec in conv_spec(), t in 1usize..5, h in 3usize..8, w in 3usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let layer = ConvLayer::new(spec, &mut rng).unwrap();
        let x = Tensor5::randn((2, spec.c_in, t, h, w), 1.0, &mut rng).unwrap();
        let fast = conv3d_forward(&x, &layer).unwrap();
        let slow = conv3d_naive(&x, &spec, &layer.weight).unwrap();
        prop_assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_macs_match_enumeration(spec in conv_spec(), t in 1usize..9, h in 3usize..20, w in 3usize..20) {
        let input = Shape5::new(1, spec.c_in, t, h, w);
        let (_, macs) = analytic_conv_cost(&spec, input).unwrap();
        prop_assert_eq!(macs, count_conv_macs(input, &spec).unwrap());
    }

    #[test]
    fn segment_indices_are_sorted_and_in_range(len in 1usize..200, n in 1usize..32, jitter in any::<bool>(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let idx = segment_indices(len, n, jitter.then_some(&mut rng));
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(idx.iter().all(|&i| i < len));
    }

    #[test]
    fn strided_indices_clamp(len in 1usize..100, n in 1usize..20, stride in 1usize..6, start in 0usize..50) {
        let idx = strided_indices(len, n, stride, start);
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.iter().all(|&i| i < len));
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn tosa_concat_spreads_receptive_fields(v in 0usize..5, n in 1usize..6, t in prop::sample::select(vec![3usize, 5, 7]), base in 1usize..10) {
        let mut cfg = TOSAConfig::new(VARIANTS[v], 8, 8, 16, false);
        cfg.n = n;
        cfg.t = t;
        let (concat, out) = tosa_trf(&cfg, single_trf(8, base)).unwrap();
        let distinct: std::collections::BTreeSet<usize> = concat.iter().flat_map(|g| g.trfs.iter().copied()).collect();
        let expected: std::collections::BTreeSet<usize> = (0..=n).map(|i| base + i * (t - 1)).collect();
        prop_assert_eq!(distinct, expected);
        let widest = out.iter().flat_map(|g| g.trfs.iter().copied()).max().unwrap();
        prop_assert_eq!(widest, base + n * (t - 1));
    }

    #[test]
    fn lr_schedule_is_bounded(total in 20usize..500, warmup in 1usize..19, seed in any::<u64>()) {
        let cfg = TrainConfig { warmup_iters: warmup, ..TrainConfig::desk() };
        let mut rng = Rng::new(seed);
        let iter = rng.below(total);
        let lr = lr_at(iter, total, &cfg);
        prop_assert!(lr >= -1e-12 && lr <= cfg.base_lr + 1e-12);
        prop_assert!((lr_at(warmup, total, &cfg) - cfg.base_lr).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weights_round_trip(seed in any::<u64>(), v in 0usize..5) {
        let graph = micro_graph(VARIANTS[v], 5);
        let a = VoV3D::build(graph.clone(), &mut Rng::new(seed)).unwrap();
        let mut b = VoV3D::build(graph, &mut Rng::new(seed.wrapping_add(1))).unwrap();
        let bytes = a.weights().to_bytes();
        b.load_weights(&ModelWeights::read_from(bytes.as_slice()).unwrap()).unwrap();
        prop_assert_eq!(b.weights().to_bytes(), bytes);
        let x = Tensor5::randn((1, 3, 4, 24, 24), 1.0, &mut Rng::new(seed)).unwrap();
        let (ya, yb) = (a.infer(&x).unwrap(), b.infer(&x).unwrap());
        prop_assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn tensor_round_trip(n in 1usize..3, c in 1usize..4, t in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let x = Tensor5::randn((n, c, t, h, w), 1.0, &mut Rng::new(seed)).unwrap();
        let mut buf = Vec::new();
        x.write_to(&mut buf).unwrap();
        let y = Tensor5::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(x.shape(), y.shape());
        prop_assert_eq!(x.data(), y.data());
    }
}
