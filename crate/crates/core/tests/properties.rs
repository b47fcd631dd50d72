use std::collections::BTreeMap;

use noisecurve_core::diffcore::{argmax, softmax};
use noisecurve_core::losses::{compact_loss, margin_loss, reg_loss};
use noisecurve_core::model::{Activation, Model};
use noisecurve_core::perturb::{apply, Grid, PerturbationSpec};
use noisecurve_core::rng::NoiseStream;
use noisecurve_core::theory::{class_dispersion, class_margin, jsd_histogram, FeaturesByClass, Histogram};
use proptest::prelude::*;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_keeps_the_argmax(z in prop::collection::vec(-30.0f64..30.0, 2..8)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(argmax(&p), argmax(&z));
    }

    #[test]
    fn rescaling_preserves_predictions_and_scales_geometry(seed in 0u64..1000, nu in 0.05f64..20.0) {
        let model = Model::init(&[3, 8, 4], &[Activation::Relu, Activation::None], 3, seed).unwrap();
        let scaled = model.scale_transform(nu).unwrap();
        let mut rng = NoiseStream::keyed(seed, 1);
        let x = rng.normal_vec(40 * 3);
        let before = model.predict_batch(&x, 40).unwrap();
        prop_assert_eq!(&before, &scaled.predict_batch(&x, 40).unwrap());
        let group = |m: &Model| -> FeaturesByClass {
            let q = m.features_batch(&x, 40).unwrap();
            let mut out = FeaturesByClass::new();
            for (i, &y) in before.iter().enumerate() {
                out.entry(y).or_default().push(q.row(i).to_vec());
            }
            out
        };
        let (g0, g1) = (group(&model), group(&scaled));
        for (c, m0) in class_margin(&model.head, &g0).unwrap() {
            let m1 = class_margin(&scaled.head, &g1).unwrap()[&c];
            prop_assert!((m1 - nu * m0).abs() <= 1e-9 * (1.0 + nu * m0.abs()));
        }
        for (c, d0) in class_dispersion(&g0).unwrap() {
            let d1 = class_dispersion(&g1).unwrap()[&c];
            prop_assert!((d1 - nu * d0).abs() <= 1e-9 * (1.0 + nu * d0));
        }
    }

    #[test]
    fn perturbations_are_reproducible_per_stream(seed in any::<u64>(), index in 0u64..1000) {
        let grid = Grid::new(8, 8, 1).unwrap();
        let spec = PerturbationSpec::parse("gaussian:0.2+occlusion:2:3:3:0+clamp:0:1").unwrap();
        let x = vec![0.5; 64];
        let a = apply(&spec, &x, Some(&grid), &mut NoiseStream::keyed(seed, index)).unwrap();
        let b = apply(&spec, &x, Some(&grid), &mut NoiseStream::keyed(seed, index)).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn divergence_is_bounded_and_symmetric(
        p in prop::collection::vec(0u64..50, 6),
        q in prop::collection::vec(0u64..50, 6),
    ) {
        prop_assume!(p.iter().sum::<u64>() > 0 && q.iter().sum::<u64>() > 0);
        let hp = Histogram::from_counts(&[6], p).unwrap();
        let hq = Histogram::from_counts(&[6], q).unwrap();
        let js = jsd_histogram(&hp, &hq).unwrap();
        prop_assert!(js >= 0.0 && js <= std::f64::consts::LN_2 + 1e-15);
        prop_assert!((js - jsd_histogram(&hq, &hp).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn geometric_losses_are_nonnegative(
        a in finite_vec(3), b in finite_vec(3), c in finite_vec(3), dv in 0.0f64..3.0, dd in 0.0f64..10.0,
    ) {
        let centroids: BTreeMap<usize, Vec<f64>> = [(0, a.clone()), (1, b.clone())].into();
        let feats: FeaturesByClass = [(0, vec![c.clone(), b.clone()]), (1, vec![a.clone()])].into();
        prop_assert!(compact_loss(&feats, &centroids, dv).unwrap() >= 0.0);
        prop_assert!(reg_loss(&centroids).unwrap() >= 0.0);
        let model = Model::init(&[3, 3], &[Activation::None], 2, 4).unwrap();
        prop_assert!(margin_loss(&model.head, &centroids, dd).unwrap() >= 0.0);
    }
}
