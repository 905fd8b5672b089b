mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spreadflow::diffcore::Axis;
use spreadflow::flow::FlowSpec;
use spreadflow::{Array, FlowModel, Tape};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cfg(50))]

    #[test]
    fn layer_gradients_match_differences(seed in any::<u64>(), inverse in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in layer_zoo(seed) {
            let x = randn(&mut rng, 3, 8);
            let err = layer_grad_error(&layer, &x, inverse, &mut rng).unwrap();
            prop_assert!(err < 1e-5, "{}: {err}", layer_label(&layer));
        }
    }

    #[test]
    fn prior_gradient_matches_differences(seed in any::<u64>(), d in 1usize..5, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = prior_grad_error(&mut rng, d, n, 0.1).unwrap();
        prop_assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn layers_are_bijective(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for layer in layer_zoo(seed) {
            let x = randn(&mut rng, 5, 8);
            let err = roundtrip_error(&layer, &x).unwrap();
            prop_assert!(err < 1e-9, "{}: {err}", layer_label(&layer));
        }
    }

    #[test]
    fn logdet_matches_jacobian(seed in any::<u64>(), inverse in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        for layer in layer_zoo(seed) {
            let x = randn(&mut rng, 1, 8);
            let fd = fd_logdet(&layer, x.data(), inverse).unwrap();
            let reported = reported_logdet(&layer, &x, inverse).unwrap().item();
            if layer.is_volume_preserving() {
                prop_assert_eq!(reported, 0.0);
            }
            prop_assert!((fd - reported).abs() < 1e-4, "{}: fd {fd} vs {reported}", layer_label(&layer));
        }
    }

    #[test]
    fn whole_flow_roundtrip(seed in any::<u64>(), blocks in 1usize..5, split in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = FlowSpec::alternating(6, blocks, split, &[8, 8]).build(&mut rng).unwrap();
        let x = randn(&mut rng, 4, 6);
        let back = model.forward(&model.inverse(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-9);
        let (_, ld) = model.inverse_with_logdet(&x).unwrap();
        prop_assert_eq!(ld.max_abs(), 0.0);
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(&mut rng, 3, 4);
        let grad = |ca: f64, cb: f64| {
            let mut t = Tape::new();
            let x = t.param(x0.clone()).unwrap();
            let f = t.tanh(x).unwrap();
            let f = t.sum(f).unwrap();
            let s = t.square(x).unwrap();
            let g = t.sum_axis(s, Axis::Rows).unwrap();
            let g = t.exp(g).unwrap();
            let g = t.sum(g).unwrap();
            let f = t.scale(f, ca).unwrap();
            let g = t.scale(g, cb).unwrap();
            let h = t.add(f, g).unwrap();
            t.backward(h).unwrap().get(x).unwrap().clone()
        };
        let combined = grad(a, b);
        let separate = grad(a, 0.0).zip_with(&grad(0.0, b), |p, q| p + q).unwrap();
        prop_assert!(combined.max_abs_diff(&separate) < 1e-9 * (1.0 + combined.max_abs()));
        prop_assert_eq!(grad(a, b), combined);
    }
}

#[test]
fn identity_flow_has_no_parameters() {
    let m = FlowModel::identity(3);
    assert_eq!(m.num_scalars(), 0);
    let x = Array::row(&[1.0, 2.0, 3.0]);
    assert_eq!(m.forward(&x).unwrap(), x);
}
