//! Library results against independent re-implementations and hand values.

use std::collections::BTreeMap;

use noisecurve_core::centroids::{batch_centroid, momentum_update};
use noisecurve_core::curvature::{
    curvature_samples, eig_sums, exact_hessian, input_gradient, jacobi_eigenvalues, InputObjective,
    LabelledModel, QuadraticHook,
};
use noisecurve_core::diffcore::{finite_difference_gradient, max_relative_error, Tape, Tensor};
use noisecurve_core::losses::{compact_loss, margin_loss, noisy_align_loss, reg_loss, softmax_loss};
use noisecurve_core::model::{Activation, Model, SoftmaxHead};
use noisecurve_core::rng::NoiseStream;
use noisecurve_core::theory::{
    class_dispersion, class_margin, empirical_margin_risk, generalization_bound, jsd_histogram, phi_rho, Histogram,
};

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum())
        .collect()
}

fn naive_layers(model: &Model, x: &[f64], upto: usize) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in &model.backbone.layers()[..upto] {
        let mut y = matvec(layer.weight.data(), layer.out_dim(), layer.in_dim(), &h);
        for (v, b) in y.iter_mut().zip(layer.bias.data()) {
            *v += b;
            if layer.activation == Activation::Relu {
                *v = v.max(0.0);
            }
        }
        h = y;
    }
    h
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn squared_norm_of_matrix_product_matches_finite_differences() {
    let mut rng = NoiseStream::keyed(3, 0);
    let w = Tensor::matrix(3, 3, rng.normal_vec(9)).unwrap();
    let x = Tensor::matrix(1, 3, rng.normal_vec(3)).unwrap();
    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone());
    let xv = tape.constant(x.clone());
    let zero = tape.constant(Tensor::vector(vec![0.0; 3]));
    let y = tape.affine(xv, wv, zero).unwrap();
    let sq = tape.square(y).unwrap();
    let f = tape.sum(sq).unwrap();
    let analytic = tape.backward(f).unwrap().wrt(wv);
    let numeric = finite_difference_gradient(
        |p| {
            let y = matvec(p.data(), 3, 3, x.data());
            Ok(y.iter().map(|v| v * v).sum())
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(max_relative_error(analytic.data(), numeric.data(), 1e-8) <= 1e-6);
}

#[test]
fn forward_pass_matches_naive_matrix_products() {
    let model = Model::init(&[2, 16, 8], &[Activation::Relu, Activation::None], 3, 11).unwrap();
    let mut rng = NoiseStream::keyed(5, 0);
    for _ in 0..20 {
        let x = rng.normal_vec(2);
        let got = model.features(&x).unwrap();
        let want = naive_layers(&model, &x, 2);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
        let prefix = model.features_at_layer(&x, 1).unwrap();
        for (a, b) in prefix.iter().zip(naive_layers(&model, &x, 1)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn hyperplane_distance_matches_explicit_projection() {
    let mut rng = NoiseStream::keyed(7, 0);
    let (k, d) = (4, 5);
    let head = SoftmaxHead::new(
        Tensor::matrix(k, d, rng.normal_vec(k * d)).unwrap(),
        Tensor::vector(rng.normal_vec(k)),
    )
    .unwrap();
    for _ in 0..50 {
        let q = rng.normal_vec(d);
        let (c, i) = (rng.below(k), rng.below(k));
        if c == i {
            continue;
        }
        let w: Vec<f64> = head.weight.row(c).iter().zip(head.weight.row(i)).map(|(a, b)| a - b).collect();
        let b = head.bias.data()[c] - head.bias.data()[i];
        // Closest point on {p : w·p + b = 0}, then check it lies on the plane.
        let s = (w.iter().zip(&q).map(|(a, x)| a * x).sum::<f64>() + b) / w.iter().map(|a| a * a).sum::<f64>();
        let p: Vec<f64> = q.iter().zip(&w).map(|(x, a)| x - s * a).collect();
        let z = head.logits(&p).unwrap();
        assert!((z[c] - z[i]).abs() < 1e-9);
        let got = head.hyperplane_distance(&q, c, i).unwrap();
        assert!((got - sq_dist(&p, &q).sqrt()).abs() <= 1e-9);
    }
}

#[test]
fn softmax_loss_matches_per_sample_evaluation() {
    let model = Model::init(&[3, 5, 4], &[Activation::Relu, Activation::None], 3, 2).unwrap();
    let mut rng = NoiseStream::keyed(9, 0);
    let rows = 7;
    let x = rng.normal_vec(rows * 3);
    let labels: Vec<usize> = (0..rows).map(|_| rng.below(3)).collect();
    let mut by_hand = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z = model.logits_of_input(&x[r * 3..r * 3 + 3]).unwrap();
        let p = z[y].exp() / z.iter().map(|v| v.exp()).sum::<f64>();
        by_hand -= p.ln();
    }
    by_hand /= rows as f64;
    assert!((softmax_loss(&model, &x, rows, &labels).unwrap() - by_hand).abs() <= 1e-12);
}

#[test]
fn compact_and_noisy_losses_hand_example() {
    let dv = 0.5;
    let m: BTreeMap<usize, Vec<f64>> = [(0, vec![0.0, 0.0]), (1, vec![10.0, 0.0])].into();
    let feats: BTreeMap<usize, Vec<Vec<f64>>> = [
        (0, vec![vec![dv + 1.0, 0.0], vec![0.0, dv + 3.0]]),
        (1, vec![vec![10.0, dv]]),
    ]
    .into();
    assert_eq!(compact_loss(&feats, &m, dv).unwrap(), 2.5);
    assert_eq!(noisy_align_loss(&feats, &m, dv).unwrap(), 2.5);
}

#[test]
fn margin_loss_one_dimensional_example() {
    let head = SoftmaxHead::new(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap(), Tensor::vector(vec![0.0, 0.0])).unwrap();
    let m: BTreeMap<usize, Vec<f64>> = [(0, vec![1.0]), (1, vec![-1.0])].into();
    assert_eq!(margin_loss(&head, &m, 3.0).unwrap(), 2.0);
    let feats: BTreeMap<usize, Vec<Vec<f64>>> = [(0, vec![vec![1.0]])].into();
    assert_eq!(class_margin(&head, &feats).unwrap()[&0], 1.0);
    let tripled: BTreeMap<usize, Vec<Vec<f64>>> = [(0, vec![vec![3.0]])].into();
    assert_eq!(class_margin(&head, &tripled).unwrap()[&0], 3.0);
}

#[test]
fn reg_loss_is_mean_centroid_norm() {
    let m: BTreeMap<usize, Vec<f64>> = [(0, vec![3.0, 4.0]), (2, vec![0.0, 2.0])].into();
    assert_eq!(reg_loss(&m).unwrap(), (5.0 + 2.0) / 2.0);
}

#[test]
fn centroids_match_naive_means_and_recurrence() {
    let mut rng = NoiseStream::keyed(1, 0);
    let feats: BTreeMap<usize, Vec<Vec<f64>>> = (0..3)
        .map(|c| (c, (0..5 + c).map(|_| rng.normal_vec(4)).collect()))
        .collect();
    let got = batch_centroid(&feats).unwrap();
    for (c, qs) in &feats {
        for j in 0..4 {
            let mean = qs.iter().map(|q| q[j]).sum::<f64>() / qs.len() as f64;
            assert!((got[c][j] - mean).abs() <= 1e-12);
        }
    }
    let p: BTreeMap<usize, Vec<f64>> = [(0, vec![2.0, -1.0])].into();
    let c: BTreeMap<usize, Vec<f64>> = [(0, vec![0.5, 0.5])].into();
    let mut m = p.clone();
    for _ in 0..5 {
        m = momentum_update(&m, &c, 0.7).unwrap();
    }
    for j in 0..2 {
        let closed = c[&0][j] + 0.7f64.powi(5) * (p[&0][j] - c[&0][j]);
        assert!((m[&0][j] - closed).abs() <= 1e-12);
    }
}

#[test]
fn dispersion_matches_brute_force_scan() {
    let mut rng = NoiseStream::keyed(4, 0);
    let pts: Vec<Vec<f64>> = (0..50).map(|_| rng.normal_vec(3)).collect();
    let mut brute = 0.0f64;
    for a in &pts {
        for b in &pts {
            brute = brute.max(sq_dist(a, b).sqrt());
        }
    }
    let feats: BTreeMap<usize, Vec<Vec<f64>>> = [(0, pts)].into();
    assert_eq!(class_dispersion(&feats).unwrap()[&0], brute);
}

#[test]
fn linear_model_gradient_has_closed_form() {
    let mut rng = NoiseStream::keyed(6, 0);
    let (k, d) = (3, 4);
    let w = rng.normal_vec(k * d);
    let model = Model::new(
        noisecurve_core::model::Backbone::new(vec![noisecurve_core::model::Layer::new(
            Tensor::matrix(d, d, (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap(),
            Tensor::vector(vec![0.0; d]),
            Activation::None,
        )
        .unwrap()])
        .unwrap(),
        SoftmaxHead::new(Tensor::matrix(k, d, w.clone()).unwrap(), Tensor::vector(vec![0.0; k])).unwrap(),
    )
    .unwrap();
    let x = rng.normal_vec(d);
    let y = 1;
    let z = matvec(&w, k, d, &x);
    let norm: f64 = z.iter().map(|v| v.exp()).sum();
    let p: Vec<f64> = z.iter().map(|v| v.exp() / norm).collect();
    let closed: Vec<f64> = (0..d)
        .map(|j| (0..k).map(|c| (p[c] - (c == y) as u8 as f64) * w[c * d + j]).sum())
        .collect();
    let got = input_gradient(&LabelledModel::new(&model, y).unwrap(), &x).unwrap();
    for (a, b) in got.iter().zip(&closed) {
        assert!((a - b).abs() <= 1e-10);
    }
}

fn random_symmetric(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = NoiseStream::keyed(seed, 0);
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = rng.normal();
            h[i * n + j] = v;
            h[j * n + i] = v;
        }
    }
    h
}

#[test]
fn eigen_sums_match_frobenius_and_trace() {
    let n = 8;
    let h = random_symmetric(n, 12);
    let s = eig_sums(&h, n).unwrap();
    let frob: f64 = h.iter().map(|v| v * v).sum();
    let trace: f64 = (0..n).map(|i| h[i * n + i]).sum();
    assert!((s.sum_sq - frob).abs() <= 1e-10);
    let eigs = jacobi_eigenvalues(&h, n).unwrap();
    assert!((eigs.iter().sum::<f64>() - trace).abs() <= 1e-8);
}

#[test]
fn diagonal_hook_estimate_is_near_frobenius_target() {
    let hook = QuadraticHook::pure(vec![1.0, 0.0, 0.0, 2.0], 2).unwrap();
    let s = curvature_samples(&hook, &[0.3, -0.2], 1e-2, 2000, &mut NoiseStream::keyed(8, 0)).unwrap();
    let k = s.len() as f64;
    let mean = s.iter().sum::<f64>() / k;
    let se = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
    assert!((mean - 5.0).abs() <= 3.0 * se, "{mean} ± {se}");
}

#[test]
fn exact_hessian_of_trained_free_mlp_is_symmetric() {
    let model = Model::init(&[3, 8, 4], &[Activation::Relu, Activation::None], 3, 21).unwrap();
    let obj = LabelledModel::new(&model, 2).unwrap();
    let x = [0.4, -0.7, 0.2];
    let h = exact_hessian(&obj, &x, 1e-4).unwrap();
    assert!(h.symmetry_defect <= 1e-4, "{}", h.symmetry_defect);
    let trace: f64 = (0..3).map(|i| h.data[i * 3 + i]).sum();
    assert!((eig_sums(&h.data, 3).unwrap().trace - trace).abs() <= 1e-8);
    assert_eq!(obj.input_dim(), 3);
}

#[test]
fn margin_surrogate_and_slack_values() {
    assert_eq!(phi_rho(-1.0, 0.3).unwrap(), 1.0);
    assert_eq!(phi_rho(0.3, 0.3).unwrap(), 0.0);
    assert_eq!(phi_rho(0.15, 0.3).unwrap(), 0.5);
    let slack = generalization_bound(1.0, 1.0, 1e4, 0.5, 0.05).unwrap();
    let hand = 12.04 + 3.0 * (40f64.ln() / 20000.0).sqrt();
    assert!((slack - hand).abs() <= 1e-9);
    assert!((slack - 12.0808).abs() < 1e-4);
    let (r, rho) = (2.0f64, 1.0);
    let inner = vec![vec![(r * r - rho).sqrt() * 0.99, 0.0]];
    assert_eq!(empirical_margin_risk(&inner, &[0.0, 0.0], r, rho).unwrap(), 0.0);
    let mixed = vec![vec![0.0, 0.0], vec![1.5, 0.0], vec![3.0, 0.0]];
    let by_hand = (0.0 + (1.0 - (4.0 - 2.25) / 1.0f64).max(0.0) + 1.0) / 3.0;
    assert!((empirical_margin_risk(&mixed, &[0.0, 0.0], r, rho).unwrap() - by_hand).abs() <= 1e-12);
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

#[test]
fn histogram_jsd_agrees_with_independent_kl() {
    let p = Histogram::from_counts(&[2], vec![3, 1]).unwrap();
    let q = Histogram::from_counts(&[2], vec![1, 3]).unwrap();
    let m = [0.5, 0.5];
    let want = 0.5 * kl(&[0.75, 0.25], &m) + 0.5 * kl(&[0.25, 0.75], &m);
    assert!((jsd_histogram(&p, &q).unwrap() - want).abs() <= 1e-15);
    let a = Histogram::from_counts(&[3], vec![2, 0, 0]).unwrap();
    let b = Histogram::from_counts(&[3], vec![0, 0, 9]).unwrap();
    assert!((jsd_histogram(&a, &b).unwrap() - std::f64::consts::LN_2).abs() <= 1e-15);
}
