#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use nac_core::metrics::{auroc, fpr_at_tpr, spearman_rc};
use nac_core::{
    neuron_states, states_via_decomposition, ActivationDump, BinScale, CoverageConfig,
    CoverageModel, Decomposition, LogitBundle, NeuronStateMatrix, RawLayerBatch, StateSource,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SOURCE: StateSource = StateSource::ActivationState { alpha: 1.0 };

fn config(bins: usize, fill: u64, log: bool) -> CoverageConfig {
    CoverageConfig {
        bins,
        fill_threshold: fill,
        bin_scale: if log {
            BinScale::Log
        } else {
            BinScale::Uniform
        },
        ..CoverageConfig::default()
    }
}

fn states(neurons: usize, values: Vec<f64>) -> NeuronStateMatrix {
    NeuronStateMatrix::new("layer0", values.len() / neurons, neurons, values, 1.0).unwrap()
}

fn state_values(neurons: usize) -> impl Strategy<Value = Vec<f64>> {
    (0usize..60)
        .prop_flat_map(move |rows| prop::collection::vec(1e-9f64..1.0 - 1e-9, rows * neurons))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn logit_gradient_is_p_minus_u(logits in prop::collection::vec(-8.0f64..8.0, 2..10)) {
        let b = LogitBundle::from_logits(logits.clone()).unwrap();
        let g = b.kl_logit_gradient();
        for i in 0..logits.len() {
            let fd = central_diff(kl_to_uniform, &logits, i, 1e-5);
            prop_assert!(close(g[i], fd, 1e-6, 1e-9), "{} vs {}", g[i], fd);
        }
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn hidden_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_net(&mut rng);
        let layer = *net.taps().last().unwrap();
        let (x, z) = loop {
            let x = random_input(&mut rng, net.input_width());
            let z = hidden_output(&net, &x, layer);
            if forward_from(&net, layer + 1, &z).1 > 1e-3 {
                break (x, z);
            }
        };
        let (_, grad) = net.kl_gradient_f64(&x, layer).unwrap();
        let f = |v: &[f64]| kl_to_uniform(&forward_from(&net, layer + 1, v).0);
        for j in 0..z.len() {
            let fd = central_diff(f, &z, j, 1e-6);
            prop_assert!(close(grad[j], fd, 1e-4, 1e-9), "neuron {j}: {} vs {fd}", grad[j]);
        }
    }

    #[test]
    fn decomposition_matches_direct_states(seed in any::<u64>(), alpha in prop::sample::select(vec![0.1, 1.0, 100.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_net(&mut rng);
        let xs: Vec<Vec<f32>> = (0..rng.random_range(1..8)).map(|_| random_input(&mut rng, net.input_width())).collect();
        for &layer in net.taps() {
            let raw = RawLayerBatch::from_net(&net, xs.iter().map(Vec::as_slice), layer).unwrap();
            let dec = Decomposition::from_net(&net, xs.iter().map(Vec::as_slice), layer).unwrap();
            let a = neuron_states(&raw, alpha).unwrap();
            let b = states_via_decomposition(&dec, alpha).unwrap();
            for (u, v) in a.values().iter().zip(b.values()) {
                prop_assert!((u - v).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn fit_is_order_invariant(values in state_values(3), seed in any::<u64>(), log in any::<bool>()) {
        let cfg = config(20, 5, log);
        let m = CoverageModel::fit("layer0", 3, cfg.clone(), SOURCE, [&states(3, values.clone())]).unwrap();
        let mut rows: Vec<Vec<f64>> = values.chunks(3).map(<[f64]>::to_vec).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = states(3, rows.concat());
        let s = CoverageModel::fit("layer0", 3, cfg, SOURCE, [&shuffled]).unwrap();
        prop_assert_eq!(m, s);
    }

    #[test]
    fn merge_equals_concatenated_fit(a in state_values(2), b in state_values(2)) {
        let cfg = config(13, 3, false);
        let fit = |v: &[f64]| CoverageModel::fit("layer0", 2, cfg.clone(), SOURCE, [&states(2, v.to_vec())]).unwrap();
        let merged = fit(&a).merge(&fit(&b)).unwrap();
        let whole = fit(&[a.clone(), b.clone()].concat());
        prop_assert_eq!(&merged, &whole);
        prop_assert_eq!(merged, fit(&b).merge(&fit(&a)).unwrap());
    }

    #[test]
    fn coverage_scores_lie_in_unit_interval(values in state_values(4), probe in state_values(4), fill in 1u64..20) {
        let m = CoverageModel::fit("layer0", 4, config(10, fill, false), SOURCE, [&states(4, values)]).unwrap();
        let me = m.nac_me().unwrap();
        prop_assert!((0.0..=1.0).contains(&me));
        for s in m.nac_ue(&states(4, probe)).unwrap() {
            prop_assert!((0.0..=1.0).contains(&s));
        }
        for i in 0..4 {
            for s in [0.0, 0.25, 0.5, 1.0] {
                let p = m.phi(i, s).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn more_data_never_lowers_coverage(a in state_values(2), b in state_values(2), fill in 1u64..10) {
        let cfg = config(8, fill, false);
        let fit = |v: &[f64]| CoverageModel::fit("layer0", 2, cfg.clone(), SOURCE, [&states(2, v.to_vec())]).unwrap();
        let small = fit(&a);
        let big = fit(&[a, b].concat());
        prop_assert!(big.nac_me().unwrap() >= small.nac_me().unwrap());
        for i in 0..2 {
            for k in 0..8 {
                let s = (k as f64 + 0.5) / 8.0;
                prop_assert!(big.phi(i, s).unwrap() >= small.phi(i, s).unwrap());
            }
        }
    }

    #[test]
    fn higher_fill_threshold_never_raises_coverage(values in state_values(2), fill in 1u64..10) {
        let fit = |o: u64| CoverageModel::fit("layer0", 2, config(8, o, false), SOURCE, [&states(2, values.clone())]).unwrap();
        prop_assert!(fit(fill + 1).nac_me().unwrap() <= fit(fill).nac_me().unwrap());
    }

    #[test]
    fn auroc_is_antisymmetric(ind in prop::collection::vec(-5i32..5, 1..40), ood in prop::collection::vec(-5i32..5, 1..40)) {
        let ind: Vec<f64> = ind.into_iter().map(f64::from).collect();
        let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
        let a = auroc(&ind, &ood).unwrap();
        let b = auroc(&ood, &ind).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert_eq!(a, brute_auroc(&ind, &ood));
    }

    #[test]
    fn auroc_ignores_monotone_transforms(ind in prop::collection::vec(-3.0f64..3.0, 1..40), ood in prop::collection::vec(-3.0f64..3.0, 1..40)) {
        let t = |v: &[f64]| v.iter().map(|x| (2.0 * x).exp() + 7.0).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&ind, &ood).unwrap(), auroc(&t(&ind), &t(&ood)).unwrap());
    }

    #[test]
    fn full_tpr_thresholds_at_minimum(ind in prop::collection::vec(-3.0f64..3.0, 1..40), ood in prop::collection::vec(-3.0f64..3.0, 1..40)) {
        let r = fpr_at_tpr(&ind, &ood, 1.0).unwrap();
        let min = ind.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(r.threshold, min);
        let expected = ood.iter().filter(|&&o| o >= min).count() as f64 / ood.len() as f64;
        prop_assert_eq!(r.fpr, expected);
    }

    #[test]
    fn spearman_properties(x in prop::collection::vec(-3.0f64..3.0, 2..30), seed in any::<u64>()) {
        let mut y = x.clone();
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let rc = spearman_rc(&x, &y);
        if let Ok(rc) = rc {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rc));
            let tx: Vec<f64> = x.iter().map(|v| v.powi(3) - 4.0).collect();
            let ty: Vec<f64> = y.iter().map(|v| (v * 0.5).exp()).collect();
            prop_assert!((spearman_rc(&tx, &ty).unwrap() - rc).abs() < 1e-12);
            prop_assert!((spearman_rc(&y, &x).unwrap() - rc).abs() < 1e-12);
        }
    }

    #[test]
    fn nact_round_trip_is_bit_exact(
        rows in 0usize..12,
        neurons in 1usize..6,
        classes in 1usize..5,
        id in "[a-z0-9_.]{0,24}",
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arr = |n: usize| (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff)).collect::<Vec<f32>>();
        let dump = ActivationDump {
            layer_id: id,
            neurons,
            rows,
            classes,
            z: arr(rows * neurons),
            grad: arr(rows * neurons),
            labels: (0..rows as u32).map(|r| r.wrapping_mul(2_654_435_761)).collect(),
            logits: arr(rows * classes),
        };
        let bytes = dump.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), 4 + 4 + 2 + dump.layer_id.len() + 4 + 8 + 4 + rows * (2 * neurons + 1 + classes) * 4);
        let back = ActivationDump::from_bytes(&bytes).unwrap();
        let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.z), bits(&dump.z));
        prop_assert_eq!(bits(&back.grad), bits(&dump.grad));
        prop_assert_eq!(bits(&back.logits), bits(&dump.logits));
        prop_assert_eq!(&back.labels, &dump.labels);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
