//! Self-checking suites: each assertion carries its measured value and the
//! bound it was held to, and failures are results rather than errors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use noisecurve_core::centroids::{batch_centroid, CentroidMode, CentroidState};
use noisecurve_core::curvature::{
    curvature_samples, eig_sums, exact_hessian, quadratic_form_moments, theorem1_check, CurvatureParams,
    LabelledModel, QuadraticHook,
};
use noisecurve_core::data::{gen_blobs, gen_rings, gen_textures, Dataset};
use noisecurve_core::diffcore::{finite_difference_gradient, max_relative_error, Tape, Tensor};
use noisecurve_core::losses::{graph, ClassBatch, LossConfig};
use noisecurve_core::model::{Activation, Model, ModelVars};
use noisecurve_core::rng::{derive_seed, NoiseStream};
use noisecurve_core::theory::{
    empirical_margin_risk, features_by_class, generalization_bound, jsd_histogram, pair_jsd, prop2_check,
    prop3_check, projection_error, random_projection, theorem3_check, Binning, FeaturesByClass, Histogram,
};
use noisecurve_core::{Error as CoreError, Result as CoreResult};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::pipeline::datasets;
use crate::train::{full_set_hinges, train};
use crate::transform::transform_report;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: f64,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, measured: f64, bound: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            measured,
            bound,
            detail: detail.into(),
        }
    }

    fn at_most(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(name, measured <= bound, measured, bound, "measured <= bound")
    }

    fn at_least(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(name, measured >= bound, measured, bound, "measured >= bound")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Propositions,
    CurvatureBounds,
    Generalization,
    Jsd,
    Serialization,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Gradients,
        Suite::Propositions,
        Suite::CurvatureBounds,
        Suite::Generalization,
        Suite::Jsd,
        Suite::Serialization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Propositions => "propositions",
            Suite::CurvatureBounds => "curvature-bounds",
            Suite::Generalization => "generalization",
            Suite::Jsd => "jsd",
            Suite::Serialization => "serialization",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| HarnessError::Invalid(format!("unknown suite `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Gradients => gradient_checks(100, seed)?,
        Suite::Propositions => {
            let mut c = prop1_checks(&[0.0, 0.5, 0.9], 5, seed)?;
            c.extend(constructive_scene_checks(1000, seed)?);
            c.extend(scale_checks(&[0.2, 1.0, 5.0], 1000, seed)?);
            c.extend(toy_geometry_checks(&trained_toy(seed)?)?);
            c
        }
        Suite::CurvatureBounds => {
            let mut c = quadratic_bound_checks(100, seed)?;
            c.extend(hook_estimator_checks(2000, seed)?);
            c.extend(moment_checks(100_000, seed)?);
            c.extend(mlp_checks(seed)?);
            c
        }
        Suite::Generalization => {
            let mut c = vec![slack_example_check()?];
            c.extend(generalization_scene_checks(50, seed)?);
            c
        }
        Suite::Jsd => {
            let mut c = jsd_fixture_checks()?;
            c.push(separated_scene_jsd(seed)?);
            c.extend(toy_divergence_checks(&trained_toy(seed)?)?);
            c
        }
        Suite::Serialization => serialization_checks(seed)?,
    };
    Ok(SuiteReport {
        suite: suite.name().to_string(),
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

// ---------------------------------------------------------------------------
// Gradients

/// Relative errors below this absolute gradient size are measured against it.
pub const GRADIENT_FLOOR: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const TERMS: [&str; 6] = ["softmax", "compact", "margin", "reg", "noisy", "total"];

struct GradientInstance {
    shapes: Vec<Vec<usize>>,
    acts: Vec<Activation>,
    x: Tensor,
    noisy: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    state: CentroidState,
    cfg: LossConfig,
}

fn random_model(rng: &mut NoiseStream, seed: u64) -> Result<Model> {
    let input = 2 + rng.below(4);
    let hidden = 3 + rng.below(4);
    let feature = 2 + rng.below(3);
    let classes = 2 + rng.below(3);
    Ok(Model::init(
        &[input, hidden, feature],
        &[Activation::Relu, Activation::None],
        classes,
        seed,
    )?)
}

/// Labels covering every class at least once, then random.
fn covering_labels(rng: &mut NoiseStream, rows: usize, classes: usize) -> Vec<usize> {
    (0..rows).map(|i| if i < classes { i } else { rng.below(classes) }).collect()
}

fn unflatten(shapes: &[Vec<usize>], flat: &[f64]) -> CoreResult<Vec<Tensor>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut pos = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(Tensor::new(s.clone(), flat[pos..pos + n].to_vec())?);
        pos += n;
    }
    Ok(out)
}

fn record_vars(tape: &mut Tape, params: Vec<Tensor>, acts: &[Activation], leaves: bool) -> ModelVars {
    let mut vars: Vec<_> = params
        .into_iter()
        .map(|t| if leaves { tape.leaf(t) } else { tape.constant(t) })
        .collect();
    let head_bias = vars.pop().expect("head bias");
    let head_weight = vars.pop().expect("head weight");
    let layers = vars.chunks(2).zip(acts).map(|(wb, a)| (wb[0], wb[1], *a)).collect();
    ModelVars {
        layers,
        head_weight,
        head_bias,
    }
}

impl GradientInstance {
    fn random(seed: u64) -> Result<(Self, Vec<f64>)> {
        let mut rng = NoiseStream::keyed(seed, 0);
        let model = random_model(&mut rng, derive_seed(seed, 1))?;
        let rows = model.class_count() + 2 + rng.below(6);
        let n_in = model.input_dim();
        let x = Tensor::matrix(rows, n_in, rng.normal_vec(rows * n_in))?;
        let noisy_vals: Vec<f64> = x.data().iter().map(|v| v + 0.3 * rng.normal()).collect();
        let noisy = Tensor::matrix(rows, n_in, noisy_vals)?;
        let labels = covering_labels(&mut rng, rows, model.class_count());
        let mut state = CentroidState::new(CentroidMode::Partial, rng.uniform(0.0, 0.95), model.feature_dim())?;
        for c in 0..model.class_count() {
            if rng.unit() < 0.7 {
                state.centroids.insert(c, rng.normal_vec(model.feature_dim()));
            }
        }
        let cfg = LossConfig {
            alpha: rng.uniform(0.5, 2.0),
            beta: rng.uniform(0.5, 2.0),
            gamma_reg: rng.uniform(1e-3, 0.5),
            lambda: rng.uniform(0.5, 2.0),
            delta_v: rng.uniform(0.05, 1.0),
            delta_d: rng.uniform(0.1, 3.0),
        };
        let shapes = model.params().iter().map(|t| t.shape().to_vec()).collect();
        let flat = model.flat_params();
        Ok((
            Self {
                shapes,
                acts: model.activations(),
                x,
                noisy,
                labels,
                class_count: model.class_count(),
                state,
                cfg,
            },
            flat,
        ))
    }

    /// Records every term. Classes absent from `state` take their batch mean
    /// as the momentum anchor, so the returned state pins those anchors for
    /// finite differencing.
    fn record(
        &self,
        tape: &mut Tape,
        flat: &[f64],
        leaves: bool,
        state: &CentroidState,
    ) -> CoreResult<(ModelVars, graph::Terms, CentroidState)> {
        let vars = record_vars(tape, unflatten(&self.shapes, flat)?, &self.acts, leaves);
        let x = tape.constant(self.x.clone());
        let xn = tape.constant(self.noisy.clone());
        let q = vars.features(tape, x)?;
        let qn = vars.features(tape, xn)?;
        let z = vars.logits(tape, q)?;
        let batch = ClassBatch::from_labels(&self.labels, self.class_count)?;
        let views = state.views(tape, q, &batch)?;
        let terms = graph::total(tape, &vars, q, z, Some(qn), &self.labels, &batch, &views, &self.cfg)?;
        let mut pinned = state.clone();
        for (c, m) in &views.margin {
            pinned.centroids.entry(*c).or_insert_with(|| tape.value(*m).data().to_vec());
        }
        Ok((vars, terms, pinned))
    }
}

fn term_var(terms: &graph::Terms, i: usize) -> noisecurve_core::diffcore::Var {
    match i {
        0 => terms.softmax,
        1 => terms.compact,
        2 => terms.margin,
        3 => terms.reg,
        4 => terms.noisy.expect("noisy features recorded"),
        _ => terms.total,
    }
}

/// Largest per-term relative error between reverse-mode and central
/// finite-difference gradients over `instances` random tiny models.
pub fn gradient_errors(instances: usize, seed: u64) -> Result<[f64; 6]> {
    let mut worst = [0.0f64; 6];
    for k in 0..instances {
        let (inst, flat) = GradientInstance::random(derive_seed(seed, k as u64))?;
        let mut tape = Tape::new();
        let (vars, terms, pinned) = inst.record(&mut tape, &flat, true, &inst.state)?;
        let point = Tensor::vector(flat.clone());
        for (t, w) in worst.iter_mut().enumerate() {
            let grads = tape.backward(term_var(&terms, t))?;
            let analytic: Vec<f64> = vars.params().iter().flat_map(|v| grads.wrt(*v).into_data()).collect();
            let numeric = finite_difference_gradient(
                |p| {
                    let mut tp = Tape::new();
                    let (_, tm, _) = inst.record(&mut tp, p.data(), false, &pinned)?;
                    Ok(tp.scalar(term_var(&tm, t)))
                },
                &point,
                FD_STEP,
            )?;
            *w = w.max(max_relative_error(&analytic, numeric.data(), GRADIENT_FLOOR));
        }
    }
    Ok(worst)
}

pub fn gradient_checks(instances: usize, seed: u64) -> Result<Vec<Check>> {
    let worst = gradient_errors(instances, seed)?;
    Ok(TERMS
        .iter()
        .zip(worst)
        .map(|(name, e)| Check::at_most(format!("gradient/{name}"), e, 1e-5))
        .collect())
}

// ---------------------------------------------------------------------------
// Propositions

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HingeRegime {
    /// Every centroid violates its margin.
    Active,
    /// Some centroids violate, some do not.
    Mixed,
    /// The head is the nearest-centroid rule and every margin is satisfied.
    Inactive,
}

/// Backbone gradients of the margin loss through momentum centroids (first
/// appearance, so values coincide) and through batch means.
pub fn prop1_gradients(gamma: f64, regime: HingeRegime, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = NoiseStream::keyed(seed, 0);
    let mut model = random_model(&mut rng, derive_seed(seed, 1))?;
    let classes = model.class_count();
    let rows = classes * 3;
    let x = Tensor::matrix(rows, model.input_dim(), rng.normal_vec(rows * model.input_dim()))?;
    let labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
    let batch = ClassBatch::from_labels(&labels, classes)?;
    let q = model.features_batch(x.data(), rows)?;
    let mut fbc = FeaturesByClass::new();
    for (i, &y) in labels.iter().enumerate() {
        fbc.entry(y).or_default().push(q.row(i).to_vec());
    }
    let means = batch_centroid(&fbc)?;
    if regime == HingeRegime::Inactive {
        let d = model.feature_dim();
        let mut w = Vec::with_capacity(classes * d);
        let mut b = Vec::with_capacity(classes);
        for m in means.values() {
            w.extend_from_slice(m);
            b.push(-0.5 * m.iter().map(|v| v * v).sum::<f64>());
        }
        model.head.weight = Tensor::matrix(classes, d, w)?;
        model.head.bias = Tensor::vector(b);
    }
    let signed: Vec<f64> = means
        .iter()
        .map(|(c, m)| {
            let z = model.head.logits(m)?;
            let mut best = f64::INFINITY;
            for i in (0..classes).filter(|i| i != c) {
                let w = model.head.weight.row(*c).iter().zip(model.head.weight.row(i));
                let norm = w.map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                best = best.min((z[*c] - z[i]) / norm);
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let lo = signed.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = signed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let delta_d = match regime {
        HingeRegime::Active => hi.abs() + 10.0,
        HingeRegime::Mixed => 0.5 * (lo + hi),
        HingeRegime::Inactive => (0.5 * lo).max(1e-6),
    };
    let grads = |mode: CentroidMode| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let xv = tape.constant(x.clone());
        let q = vars.features(&mut tape, xv)?;
        let state = CentroidState::new(mode, gamma, model.feature_dim())?;
        let views = state.views(&mut tape, q, &batch)?;
        let l = graph::margin(&mut tape, vars.head_weight, vars.head_bias, &views.margin, delta_d)?;
        let g = tape.backward(l)?;
        Ok(vars.backbone_params().iter().flat_map(|v| g.wrt(*v).into_data()).collect())
    };
    Ok((grads(CentroidMode::Momentum)?, grads(CentroidMode::Naive)?))
}

/// Per-coordinate relative error between momentum gradients and `(1 − γ)`
/// times naive gradients; coordinates are compared against a floor of
/// `1e-12` times the largest gradient entry.
pub fn prop1_error(momentum: &[f64], naive: &[f64], gamma: f64) -> f64 {
    let scaled: Vec<f64> = naive.iter().map(|g| (1.0 - gamma) * g).collect();
    let scale = scaled.iter().chain(momentum).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    max_relative_error(momentum, &scaled, 1e-12 * scale)
}

pub fn prop1_checks(gammas: &[f64], per_case: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (gi, &gamma) in gammas.iter().enumerate() {
        for (ri, regime) in [HingeRegime::Active, HingeRegime::Mixed, HingeRegime::Inactive]
            .into_iter()
            .enumerate()
        {
            let mut worst = 0.0f64;
            let mut nonzero = false;
            for k in 0..per_case {
                let s = derive_seed(seed, (gi * 1000 + ri * 100 + k) as u64);
                let (m, n) = prop1_gradients(gamma, regime, s)?;
                nonzero |= n.iter().any(|v| *v != 0.0);
                worst = worst.max(prop1_error(&m, &n, gamma));
            }
            let name = format!("prop1/gamma={gamma}/{regime:?}").to_lowercase();
            let mut c = Check::at_most(name, worst, 1e-9);
            if regime == HingeRegime::Inactive && nonzero {
                c.passed = false;
                c.detail = "inactive hinge produced a nonzero gradient".into();
            }
            if regime == HingeRegime::Active && !nonzero {
                c.passed = false;
                c.detail = "active hinge produced only zero gradients".into();
            }
            out.push(c);
        }
    }
    Ok(out)
}

/// A random head with centroids on the correct side of every boundary and
/// features drawn uniformly inside the `δ_v`-balls.
pub struct Scene {
    pub model_head: noisecurve_core::model::SoftmaxHead,
    pub centroids: BTreeMap<usize, Vec<f64>>,
    pub features: FeaturesByClass,
    pub delta_v: f64,
    pub delta_d: f64,
}

pub fn constructive_scene(seed: u64) -> Result<Scene> {
    let mut rng = NoiseStream::keyed(seed, 0);
    let classes = 2 + rng.below(4);
    let d = classes + rng.below(3);
    loop {
        let w: Vec<f64> = rng.normal_vec(classes * d);
        let b: Vec<f64> = (0..classes).map(|_| 0.1 * rng.normal()).collect();
        let head = noisecurve_core::model::SoftmaxHead::new(Tensor::matrix(classes, d, w.clone())?, Tensor::vector(b))?;
        let spread = rng.uniform(1.0, 5.0);
        let centroids: BTreeMap<usize, Vec<f64>> = (0..classes)
            .map(|c| (c, w[c * d..(c + 1) * d].iter().map(|v| spread * v + 0.2 * rng.normal()).collect()))
            .collect();
        let mut min_signed = f64::INFINITY;
        for (c, m) in &centroids {
            let z = head.logits(m)?;
            for i in (0..classes).filter(|i| i != c) {
                let norm = head.weight.row(*c).iter().zip(head.weight.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                min_signed = min_signed.min((z[*c] - z[i]) / norm);
            }
        }
        if !(min_signed > 1e-3) {
            continue;
        }
        let delta_d = min_signed * rng.uniform(0.3, 1.0);
        let delta_v = delta_d * rng.uniform(0.05, 1.2);
        let mut features = FeaturesByClass::new();
        for (c, m) in &centroids {
            let n = 1 + rng.below(12);
            for _ in 0..n {
                let dir = rng.normal_vec(d);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let r = delta_v * rng.unit().powf(1.0 / d as f64) * (1.0 - 1e-9);
                features
                    .entry(*c)
                    .or_default()
                    .push(m.iter().zip(&dir).map(|(a, u)| a + r * u / norm).collect());
            }
        }
        return Ok(Scene {
            model_head: head,
            centroids,
            features,
            delta_v,
            delta_d,
        });
    }
}

/// Counts of (scenes checked, violations) for the dispersion bound, the
/// margin bound and the separation property.
pub fn scene_violations(scenes: usize, seed: u64) -> Result<[(usize, usize); 3]> {
    let mut out = [(0usize, 0usize); 3];
    for k in 0..scenes {
        let s = constructive_scene(derive_seed(seed, k as u64))?;
        let p2 = prop2_check(&s.features, &s.centroids, s.delta_v)?;
        let p3 = prop3_check(&s.model_head, &s.features, &s.centroids, s.delta_v, s.delta_d)?;
        for (slot, imp) in out.iter_mut().zip([p2, p3.margin, p3.separation]) {
            if imp.applicable {
                slot.0 += 1;
                slot.1 += (!imp.holds) as usize;
            }
        }
    }
    Ok(out)
}

pub fn constructive_scene_checks(scenes: usize, seed: u64) -> Result<Vec<Check>> {
    let v = scene_violations(scenes, seed)?;
    Ok(["prop2/dispersion", "prop3/margin", "prop3/separation"]
        .iter()
        .zip(v)
        .map(|(name, (checked, bad))| {
            Check::new(
                *name,
                bad == 0 && checked > 0,
                bad as f64,
                0.0,
                format!("{bad} violations over {checked} applicable scenes"),
            )
        })
        .collect())
}

/// Transform invariance on `inputs` random points for a random model.
pub fn scale_checks(nus: &[f64], inputs: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = NoiseStream::keyed(seed, 0);
    let model = Model::init(&[4, 16, 6], &[Activation::Relu, Activation::None], 3, derive_seed(seed, 1))?;
    let values = rng.normal_vec(inputs * 4);
    let data = Dataset::new(
        noisecurve_core::data::SampleKind::Vector { dim: 4 },
        3,
        values,
        vec![0; inputs],
    )?;
    let mut out = Vec::new();
    for &nu in nus {
        let (_, r) = transform_report(&model, &data, nu)?;
        out.push(Check::new(format!("prop4/nu={nu}/agreement"), r.agreement == 1.0, r.agreement, 1.0, "exact"));
        out.push(Check::at_most(format!("prop4/nu={nu}/margin_ratio"), (r.margin_ratio - nu).abs(), 1e-9));
        out.push(Check::at_most(format!("prop4/nu={nu}/dispersion_ratio"), (r.dispersion_ratio - nu).abs(), 1e-9));
    }
    let (_, r) = transform_report(&model, &data, 2.0)?;
    let cos = r.displacement_cosine.unwrap_or(f64::NAN);
    out.push(Check::at_most("prop4/opposite_displacements", (cos + 1.0).abs(), 1e-12));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Curvature

fn random_symmetric(rng: &mut NoiseStream, n: usize, scale: f64) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = scale * rng.normal();
            h[i * n + j] = v;
            h[j * n + i] = v;
        }
    }
    h
}

/// Exact quadratic loss with a head scale large enough for the bounds.
pub fn quadratic_instance(seed: u64) -> Result<(QuadraticHook, Vec<f64>, CurvatureParams)> {
    let mut rng = NoiseStream::keyed(seed, 0);
    let n = 2 + rng.below(5);
    let center = rng.normal_vec(n);
    let g: Vec<f64> = rng.normal_vec(n).iter().map(|v| v * rng.uniform(0.0, 1.0)).collect();
    let hs = rng.uniform(0.1, 3.0);
    let h = random_symmetric(&mut rng, n, hs);
    let sigma = rng.uniform(0.02, 0.5);
    let delta = rng.uniform(0.5, 3.0) * sigma * (n as f64).sqrt();
    let mut hook = QuadraticHook::new(center.clone(), rng.normal(), g, h, 1.0)?;
    let radius = sigma * ((n as f64).sqrt() + 8.0);
    hook.head_scale = hook.sufficient_head_scale(radius);
    let x: Vec<f64> = center.iter().map(|c| c + 0.5 * sigma * rng.normal()).collect();
    let params = CurvatureParams {
        sigma,
        delta,
        n: 500,
        seed: derive_seed(seed, 9),
        ..CurvatureParams::default()
    };
    Ok((hook, x, params))
}

/// Counts of upper- and lower-bound successes over `instances` quadratics.
pub fn quadratic_bound_counts(instances: usize, seed: u64) -> Result<(usize, usize)> {
    let (mut up, mut low) = (0, 0);
    for k in 0..instances {
        let (hook, x, p) = quadratic_instance(derive_seed(seed, k as u64))?;
        let r = theorem1_check(&hook, &x, &p)?;
        up += r.upper_holds as usize;
        low += r.lower_holds as usize;
    }
    Ok((up, low))
}

pub fn quadratic_bound_checks(instances: usize, seed: u64) -> Result<Vec<Check>> {
    let (up, low) = quadratic_bound_counts(instances, seed)?;
    let n = instances as f64;
    Ok(vec![
        Check::at_least("theorem1/quadratic/upper", up as f64, n),
        Check::at_least("theorem1/quadratic/lower", low as f64, n),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HookEstimate {
    pub target: f64,
    pub estimate: f64,
    pub std_err: f64,
    /// Largest relative change of the estimate between step sizes `1e-2` and `1`.
    pub step_change: f64,
}

/// Monte-Carlo estimate of `‖A‖_F²` on a pure quadratic, same directions at
/// both step sizes.
pub fn hook_estimate(k: usize, seed: u64) -> Result<HookEstimate> {
    let mut rng = NoiseStream::keyed(seed, 0);
    let n = 6;
    let a = random_symmetric(&mut rng, n, 1.0);
    let target = a.iter().map(|v| v * v).sum::<f64>();
    let hook = QuadraticHook::pure(a, n)?;
    let x = rng.normal_vec(n);
    let draw = |t: f64| curvature_samples(&hook, &x, t, k, &mut NoiseStream::keyed(derive_seed(seed, 1), 0));
    let small = draw(1e-2)?;
    let unit = draw(1.0)?;
    let m = k as f64;
    let mean = small.iter().sum::<f64>() / m;
    let var = small.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    let mean_unit = unit.iter().sum::<f64>() / m;
    Ok(HookEstimate {
        target,
        estimate: mean,
        std_err: (var / m).sqrt(),
        step_change: (mean - mean_unit).abs() / mean_unit.abs(),
    })
}

pub fn hook_estimator_checks(k: usize, seed: u64) -> Result<Vec<Check>> {
    let e = hook_estimate(k, seed)?;
    Ok(vec![
        Check::at_most("estimator/hook/within_3se", (e.estimate - e.target).abs(), 3.0 * e.std_err),
        Check::at_most("estimator/hook/step_invariance", e.step_change, 1e-12),
    ])
}

/// `(measured, expected, std_err)` for `E[(εᵀHε)²]` and the worst cross term.
pub fn moment_values(draws: usize, seed: u64) -> Result<[(f64, f64, f64); 2]> {
    let mut rng = NoiseStream::keyed(seed, 0);
    let n = 4;
    let h = random_symmetric(&mut rng, n, 1.0);
    let sigma: f64 = 0.3;
    let s4 = sigma.powi(4);
    let frob2 = h.iter().map(|v| v * v).sum::<f64>();
    let tr = (0..n).map(|i| h[i * n + i]).sum::<f64>();
    let m = quadratic_form_moments(&h, n, sigma, draws, derive_seed(seed, 1))?;
    let (worst, se) = m
        .cross_mean
        .iter()
        .zip(&m.cross_std_err)
        .map(|(v, s)| (*v, *s))
        .max_by(|a, b| (a.0.abs() / a.1).total_cmp(&(b.0.abs() / b.1)))
        .expect("n > 0");
    Ok([
        (m.fourth_mean, 2.0 * s4 * frob2 + s4 * tr * tr, m.fourth_std_err),
        (worst, 0.0, se),
    ])
}

pub fn moment_checks(draws: usize, seed: u64) -> Result<Vec<Check>> {
    let [fourth, cross] = moment_values(draws, seed)?;
    Ok(vec![
        Check::at_most("moments/fourth", (fourth.0 - fourth.1).abs(), 4.0 * fourth.2),
        Check::at_most("moments/cross", (cross.0 - cross.1).abs(), 4.0 * cross.2),
    ])
}

/// Relative gap between the estimator at `k` draws and the exact `Σλᵢ²`.
pub fn mlp_estimator_gap(model: &Model, x: &[f64], label: usize, k: usize, t: f64, seed: u64) -> Result<(f64, f64)> {
    let obj = LabelledModel::new(model, label)?;
    let s = curvature_samples(&obj, x, t, k, &mut NoiseStream::keyed(seed, 0))?;
    let est = s.iter().sum::<f64>() / k as f64;
    let h = exact_hessian(&obj, x, 1e-4)?;
    let exact = eig_sums(&h.data, h.n)?.sum_sq;
    Ok((est, exact))
}

// ---------------------------------------------------------------------------
// Generalization

/// Slack at `Λ = R = 1, N = 10⁴, ρ = ½, δ = 0.05`, recomputed by hand.
pub fn slack_example_check() -> Result<Check> {
    let got = generalization_bound(1.0, 1.0, 1e4, 0.5, 0.05)?;
    let hand = 4.0 * (1.0 + 2.0 + 1.0 / 100.0) + 3.0 * ((40.0f64).ln() / 20000.0).sqrt();
    Ok(Check::at_most("theorem2/slack_example", (got - hand).abs(), 1e-9))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneralizationScene {
    pub empirical_risk: f64,
    pub slack: f64,
    pub true_error: f64,
    pub lambda: f64,
    pub r_centroid: f64,
    pub radius: f64,
    pub rho: f64,
    pub n: usize,
}

impl GeneralizationScene {
    pub fn holds(&self) -> bool {
        self.empirical_risk + self.slack >= self.true_error
    }
}

fn scene_config(seed: u64) -> Result<ExperimentConfig> {
    ExperimentConfig::parse(&format!(
        "seed = {seed}\ndata.generator = blobs\ndata.classes = 2\ndata.per_class = 40\ndata.dim = 4\n\
         model.hidden = 8\nmodel.feature_dim = 4\ntrain.method = ours\ntrain.noise = gaussian:0.3\n\
         train.epochs = 15\ntrain.batch_size = 16\ntrain.lr = 0.01\ndata.split = 0.5\n"
    ))
}

/// Trains a small model, fits the class-0 sphere on the training half and
/// measures the true error on a holdout ten times larger.
pub fn generalization_scene(seed: u64) -> Result<GeneralizationScene> {
    let cfg = scene_config(seed)?;
    let (train_set, _) = datasets(&cfg)?;
    let model = train(&cfg, &train_set)?.model;
    let holdout = gen_blobs(2, 10 * train_set.len(), 4, 1.0, derive_seed(seed, 77))?;
    let depth = model.backbone.depth();
    let fbc = features_by_class(&model, &train_set, depth)?;
    let centroids = batch_centroid(&fbc)?;
    let lambda = fbc
        .values()
        .flatten()
        .map(|q| q.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let r_centroid = centroids
        .values()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let q0 = &fbc[&0];
    let m0 = &centroids[&0];
    let mut d: Vec<f64> = q0
        .iter()
        .map(|q| q.iter().zip(m0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    let radius = d[(d.len() * 9 / 10).min(d.len() - 1)].max(1e-6);
    let rho = 0.5 * radius * radius;
    let empirical_risk = empirical_margin_risk(q0, m0, radius, rho)?;
    let slack = generalization_bound(lambda.max(1e-12), r_centroid.max(1e-12), q0.len() as f64, rho, 0.05)?;
    let hold = features_by_class(&model, &holdout, depth)?;
    let true_error = projection_error(&hold[&0], m0, radius)?;
    Ok(GeneralizationScene {
        empirical_risk,
        slack,
        true_error,
        lambda,
        r_centroid,
        radius,
        rho,
        n: q0.len(),
    })
}

pub fn generalization_scene_checks(scenes: usize, seed: u64) -> Result<Vec<Check>> {
    let mut held = 0;
    for k in 0..scenes {
        held += generalization_scene(derive_seed(seed, k as u64))?.holds() as usize;
    }
    Ok(vec![Check::at_least("theorem2/inequality", held as f64, scenes as f64)])
}

// ---------------------------------------------------------------------------
// Divergences

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

pub fn jsd_fixture_checks() -> Result<Vec<Check>> {
    let same = Histogram::from_counts(&[4], vec![1, 2, 3, 4])?;
    let left = Histogram::from_counts(&[2], vec![5, 0])?;
    let right = Histogram::from_counts(&[2], vec![0, 7])?;
    let p = Histogram::from_counts(&[2], vec![3, 1])?;
    let q = Histogram::from_counts(&[2], vec![1, 3])?;
    let (pp, qq) = ([0.75, 0.25], [0.25, 0.75]);
    let m = [0.5, 0.5];
    let independent = 0.5 * kl(&pp, &m) + 0.5 * kl(&qq, &m);
    let js = jsd_histogram(&p, &q)?;
    Ok(vec![
        Check::at_most("jsd/identical", jsd_histogram(&same, &same)?, 0.0),
        Check::at_most("jsd/disjoint", (jsd_histogram(&left, &right)? - std::f64::consts::LN_2).abs(), 1e-15),
        Check::at_most("jsd/two_bin", (js - independent).abs(), 1e-15),
        Check::at_most("jsd/symmetric", (js - jsd_histogram(&q, &p)?).abs(), 1e-15),
    ])
}

/// Two well-separated blobs have JSD close to `ln 2`.
pub fn separated_scene_jsd(seed: u64) -> Result<Check> {
    let data = gen_blobs(2, 500, 2, 0.05, seed)?;
    let by = data.indices_by_class();
    let points = |c: usize| -> Vec<Vec<f64>> { by[&c].iter().map(|&i| data.sample(i).to_vec()).collect() };
    let proj = random_projection(2, seed)?;
    let js = pair_jsd(&points(0), &points(1), &proj, 32)?;
    Ok(Check::at_least("jsd/separated_scene", js, 0.5))
}

/// Theorem 3 at every backbone layer with τ measured on `holdout`.
pub fn theorem3_layers(
    model: &Model,
    train_set: &Dataset,
    holdout: &Dataset,
    delta_v: f64,
    binning: &Binning,
) -> Result<Vec<noisecurve_core::theory::Theorem3Report>> {
    let centroids = batch_centroid(&features_by_class(model, train_set, model.backbone.depth())?)?;
    (1..=model.backbone.depth())
        .map(|layer| Ok(theorem3_check(model, holdout, &centroids, delta_v, layer, binning)?))
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization

/// Which documented error a malformed file produced.
pub fn malformed_kinds(sample: &Dataset) -> Result<[bool; 3]> {
    let bytes = sample.to_bytes()?;
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let truncated = &bytes[..bytes.len() - 3];
    let mut bad_kind = bytes.clone();
    bad_kind[4..8].copy_from_slice(&9u32.to_le_bytes());
    Ok([
        matches!(Dataset::from_bytes(&bad_magic), Err(CoreError::BadMagic { .. })),
        matches!(Dataset::from_bytes(truncated), Err(CoreError::LengthMismatch { .. })),
        matches!(Dataset::from_bytes(&bad_kind), Err(CoreError::MalformedHeader(_)))
            && matches!(Dataset::from_bytes(&bytes[..10]), Err(CoreError::MalformedHeader(_))),
    ])
}

pub fn serialization_checks(seed: u64) -> Result<Vec<Check>> {
    let sets = [
        ("blobs", gen_blobs(3, 7, 5, 1.3, seed)?),
        ("rings", gen_rings(2, 9, seed)?),
        ("textures", gen_textures(3, 4, 8, 9, seed)?),
    ];
    let mut out = Vec::new();
    for (name, d) in &sets {
        let back = Dataset::from_bytes(&d.to_bytes()?)?;
        let same = back == *d && back.values().iter().zip(d.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        out.push(Check::new(format!("dataset/{name}/round_trip"), same, same as u8 as f64, 1.0, "bit-exact"));
    }
    let kinds = malformed_kinds(&sets[0].1)?;
    for (name, ok) in ["bad_magic", "length_mismatch", "malformed_header"].iter().zip(kinds) {
        out.push(Check::new(format!("dataset/{name}"), ok, ok as u8 as f64, 1.0, "distinct error kind"));
    }
    let model = Model::init(&[5, 6, 3], &[Activation::Relu, Activation::None], 3, seed)?;
    let ck = Checkpoint::from_model(&model, seed, "normal", LossConfig::default(), None);
    let back = Checkpoint::from_json(&ck.to_json()?)?;
    let same = back == ck && back.model()? == model;
    out.push(Check::new("checkpoint/round_trip", same, same as u8 as f64, 1.0, "bit-exact"));
    let cfg = ExperimentConfig::parse("train.method = stability\ntrain.noise = gaussian:0.25\nperturb.0 = occlusion:2:3:3:0\n")?;
    let same = ExperimentConfig::parse(&cfg.to_text())? == cfg;
    out.push(Check::new("config/round_trip", same, same as u8 as f64, 1.0, "text form re-parses to the same config"));
    Ok(out)
}

/// Trains `cfg` and reports whether both hinge losses vanish on its training set.
pub fn trained_with_zero_hinges(cfg: &ExperimentConfig) -> Result<(Model, Dataset, Dataset, bool)> {
    let (train_set, test_set) = datasets(cfg)?;
    let model = train(cfg, &train_set)?.model;
    let (c, m) = full_set_hinges(&model, &train_set, cfg.loss.delta_v, cfg.loss.delta_d)?;
    Ok((model, train_set, test_set, c == 0.0 && m == 0.0))
}

/// Small texture task trained with the full objective until both hinges vanish.
pub fn toy_config(seed: u64) -> Result<ExperimentConfig> {
    ExperimentConfig::parse(&format!(
        "seed = {seed}\ndata.generator = textures\ndata.classes = 3\ndata.per_class = 60\n\
         data.height = 8\ndata.width = 8\nmodel.hidden = 32\nmodel.feature_dim = 6\n\
         train.method = ours\ntrain.noise = gaussian:0.3\ntrain.epochs = 60\ntrain.batch_size = 32\n\
         train.lr = 0.01\nloss.delta_v = 0.5\nloss.delta_d = 2.0\n"
    ))
}

pub struct TrainedToy {
    pub model: Model,
    pub train_set: Dataset,
    pub test_set: Dataset,
    pub compact: f64,
    pub margin: f64,
    pub delta_v: f64,
    pub delta_d: f64,
}

pub fn trained_toy(seed: u64) -> Result<TrainedToy> {
    let cfg = toy_config(seed)?;
    let (train_set, test_set) = datasets(&cfg)?;
    let model = train(&cfg, &train_set)?.model;
    let (compact, margin) = full_set_hinges(&model, &train_set, cfg.loss.delta_v, cfg.loss.delta_d)?;
    Ok(TrainedToy {
        model,
        train_set,
        test_set,
        compact,
        margin,
        delta_v: cfg.loss.delta_v,
        delta_d: cfg.loss.delta_d,
    })
}

/// Geometry of the toy model's training features against their class means.
pub fn toy_geometry_checks(toy: &TrainedToy) -> Result<Vec<Check>> {
    let fbc = features_by_class(&toy.model, &toy.train_set, toy.model.backbone.depth())?;
    let centroids = batch_centroid(&fbc)?;
    let p2 = prop2_check(&fbc, &centroids, toy.delta_v)?;
    let p3 = prop3_check(&toy.model.head, &fbc, &centroids, toy.delta_v, toy.delta_d)?;
    let hinges = toy.compact + toy.margin;
    let mut out = vec![Check::new(
        "toy/zero_hinges",
        hinges == 0.0,
        hinges,
        0.0,
        "compact + margin hinge on the full training set",
    )];
    for (name, imp) in [("toy/dispersion", p2), ("toy/margin", p3.margin), ("toy/separation", p3.separation)] {
        let ok = imp.applicable && imp.holds;
        out.push(Check::new(name, ok, ok as u8 as f64, 1.0, format!("{imp:?}")));
    }
    Ok(out)
}

/// Histogram divergence at every layer of the toy model, τ measured on its
/// held-out split.
pub fn toy_divergence_checks(toy: &TrainedToy) -> Result<Vec<Check>> {
    let reports = theorem3_layers(&toy.model, &toy.train_set, &toy.test_set, toy.delta_v, &Binning::default())?;
    let tau = reports.first().map_or(0.0, |r| r.tau);
    let mut out = vec![Check::at_least("theorem3/tau", tau, 0.9)];
    for r in reports {
        let worst = r.pairs.iter().map(|p| p.jsd).fold(f64::INFINITY, f64::min);
        out.push(Check::new(
            format!("theorem3/layer{}", r.layer),
            r.applicable && r.ok(),
            worst,
            r.threshold - r.tolerance,
            "smallest pairwise JSD >= (2τ-1)²/2 - tolerance",
        ));
    }
    Ok(out)
}

/// Tiny MLP on four-dimensional blobs, small enough for exact Hessians.
pub fn tiny_mlp(seed: u64) -> Result<(Model, Dataset)> {
    let cfg = ExperimentConfig::parse(&format!(
        "seed = {seed}\ndata.generator = blobs\ndata.classes = 3\ndata.per_class = 150\ndata.dim = 4\n\
         model.hidden = 16\nmodel.feature_dim = 4\ntrain.method = normal\ntrain.epochs = 30\n\
         train.batch_size = 32\ntrain.lr = 0.01\n"
    ))?;
    let (train_set, test_set) = datasets(&cfg)?;
    Ok((train(&cfg, &train_set)?.model, test_set))
}

/// Worst relative gap between the estimator and exact `Σλᵢ²` over the first
/// `points` test inputs. The step stays well below the typical distance to a
/// ReLU kink, where the local Hessian stops describing the gradient change.
pub const MLP_STEP: f64 = 1e-5;

pub fn mlp_estimator_worst(model: &Model, test: &Dataset, points: usize, k: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..points.min(test.len()) {
        let (est, exact) = mlp_estimator_gap(model, test.sample(i), test.labels()[i], k, MLP_STEP, derive_seed(seed, i as u64))?;
        worst = worst.max((est - exact).abs() / exact.abs().max(1e-12));
    }
    Ok(worst)
}

/// Fraction of `points` test inputs on which the upper curvature bound holds.
pub fn mlp_upper_bound_rate(model: &Model, test: &Dataset, points: usize, sigma: f64, seed: u64) -> Result<f64> {
    let n = points.min(test.len());
    let mut held = 0;
    for i in 0..n {
        let obj = LabelledModel::new(model, test.labels()[i])?;
        let p = CurvatureParams {
            sigma,
            seed: derive_seed(seed, i as u64),
            ..CurvatureParams::default()
        };
        held += theorem1_check(&obj, test.sample(i), &p)?.upper_holds as usize;
    }
    Ok(held as f64 / n as f64)
}

pub fn mlp_checks(seed: u64) -> Result<Vec<Check>> {
    let (model, test) = tiny_mlp(seed)?;
    Ok(vec![
        Check::at_most("estimator/mlp/relative_gap", mlp_estimator_worst(&model, &test, 20, 2000, seed)?, 0.2),
        Check::at_least("theorem1/mlp/upper_rate", mlp_upper_bound_rate(&model, &test, 200, 0.06, seed)?, 0.95),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn small_gradient_run_passes() {
        for c in gradient_checks(3, 1).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
