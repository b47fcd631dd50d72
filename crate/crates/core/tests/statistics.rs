//! Monte-Carlo checks against closed-form distributions.

use noisecurve_core::curvature::{quadratic_form_moments, stability_estimates, LabelledModel};
use noisecurve_core::data::{gen_blobs, gen_rings, gen_textures, Dataset};
use noisecurve_core::diffcore::Tensor;
use noisecurve_core::model::{Activation, Backbone, Layer, Model, SoftmaxHead};
use noisecurve_core::perturb::{apply, PerturbationSpec};
use noisecurve_core::rng::NoiseStream;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn identity_model(d: usize) -> Model {
    let eye: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let layer = Layer::new(Tensor::matrix(d, d, eye).unwrap(), Tensor::vector(vec![0.0; d]), Activation::None).unwrap();
    let head = SoftmaxHead::new(
        Tensor::matrix(2, d, (0..2 * d).map(|i| i as f64 * 0.1).collect()).unwrap(),
        Tensor::vector(vec![0.0; 2]),
    )
    .unwrap();
    Model::new(Backbone::new(vec![layer]).unwrap(), head).unwrap()
}

#[test]
fn gaussian_noise_has_the_requested_moments() {
    let n = 100_000;
    let sigma = 0.7;
    let mut rng = NoiseStream::keyed(17, 0);
    let draws = apply(&PerturbationSpec::gaussian(sigma), &vec![0.0; n], None, &mut rng).unwrap();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!(mean.abs() <= 4.0 * sigma / (n as f64).sqrt(), "{mean}");
    assert!((std / sigma - 1.0).abs() <= 0.02, "{std}");
}

#[test]
fn stay_probability_follows_the_chi_distribution() {
    for (d, sigma, delta) in [(3, 0.1, 0.15), (6, 0.2, 0.5), (10, 0.05, 0.2)] {
        let model = identity_model(d);
        let obj = LabelledModel::new(&model, 0).unwrap();
        let n = 4000;
        let est = stability_estimates(&obj, &vec![0.3; d], sigma, delta, n, 5).unwrap();
        let p = ChiSquared::new(d as f64).unwrap().cdf((delta / sigma) * (delta / sigma));
        let se = (p * (1.0 - p) / n as f64).sqrt().max(1.0 / n as f64);
        assert!((est.eta - p).abs() <= 3.0 * se, "d={d}: {} vs {p}", est.eta);
    }
}

#[test]
fn quadratic_form_moments_match_gaussian_identities() {
    let n = 3;
    let h = vec![1.0, 0.4, -0.2, 0.4, -0.5, 0.3, -0.2, 0.3, 2.0];
    let sigma: f64 = 0.4;
    let m = quadratic_form_moments(&h, n, sigma, 100_000, 23).unwrap();
    let s4 = sigma.powi(4);
    let frob2: f64 = h.iter().map(|v| v * v).sum();
    let tr = 1.0 - 0.5 + 2.0;
    let want = 2.0 * s4 * frob2 + s4 * tr * tr;
    assert!((m.fourth_mean - want).abs() <= 4.0 * m.fourth_std_err);
    for (v, se) in m.cross_mean.iter().zip(&m.cross_std_err) {
        assert!(v.abs() <= 4.0 * se);
    }
}

#[test]
fn blob_means_are_close_to_the_generating_means() {
    let (c, n, dim, spread) = (3, 400, 5, 0.8);
    let data = gen_blobs(c, n, dim, spread, 9).unwrap();
    let scale = 4.0 * spread / 2f64.sqrt();
    for (class, idx) in data.indices_by_class() {
        for j in 0..dim {
            let mean = idx.iter().map(|&i| data.sample(i)[j]).sum::<f64>() / idx.len() as f64;
            let target = if j == class { scale } else { 0.0 };
            assert!((mean - target).abs() <= 4.0 * spread / (n as f64).sqrt());
        }
    }
}

#[test]
fn ring_radii_stay_near_their_ring() {
    let data = gen_rings(4, 200, 3).unwrap();
    for i in 0..data.len() {
        let s = data.sample(i);
        let r = (s[0] * s[0] + s[1] * s[1]).sqrt();
        let target = (data.labels()[i] + 1) as f64;
        assert!((r - target).abs() <= 0.4);
    }
}

#[test]
fn datasets_survive_a_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    for (name, d) in [
        ("blobs", gen_blobs(2, 5, 3, 1.0, 1).unwrap()),
        ("rings", gen_rings(3, 4, 2).unwrap()),
        ("textures", gen_textures(2, 3, 8, 9, 3).unwrap()),
    ] {
        let path = dir.path().join(format!("{name}.bin"));
        d.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, d);
        assert!(back.values().iter().zip(d.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
