//! Feature-space geometry and the checks built on it: dispersion and margin,
//! the implications of zero hinge losses, the margin-loss generalization
//! bound, and histogram Jensen–Shannon divergence between class features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{compact_loss, margin_loss};
use crate::model::{Model, SoftmaxHead};
use crate::rng::NoiseStream;

pub type FeaturesByClass = BTreeMap<usize, Vec<Vec<f64>>>;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Features at backbone layer `layer` (1-based; the last layer is the
/// feature space) grouped by label.
pub fn features_by_class(model: &Model, data: &Dataset, layer: usize) -> Result<FeaturesByClass> {
    let h = model.features_at_layer_batch(data.values(), data.len(), layer)?;
    let width = h.len() / data.len().max(1);
    let mut out: FeaturesByClass = BTreeMap::new();
    for (i, &y) in data.labels().iter().enumerate() {
        out.entry(y).or_default().push(h[i * width..(i + 1) * width].to_vec());
    }
    Ok(out)
}

/// Largest intra-class pairwise distance per class.
pub fn class_dispersion(features: &FeaturesByClass) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (c, qs) in features {
        if qs.is_empty() {
            return Err(Error::EmptyClass(*c));
        }
        let mut worst = 0.0f64;
        for (a, qa) in qs.iter().enumerate() {
            for qb in &qs[a + 1..] {
                worst = worst.max(dist(qa, qb));
            }
        }
        out.insert(*c, worst);
    }
    Ok(out)
}

/// Distance from each class's features to their nearest decision boundary.
pub fn class_margin(head: &SoftmaxHead, features: &FeaturesByClass) -> Result<BTreeMap<usize, f64>> {
    let k = head.class_count();
    let mut out = BTreeMap::new();
    for (&c, qs) in features {
        if qs.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let mut best = f64::INFINITY;
        for q in qs {
            for i in (0..k).filter(|&i| i != c) {
                best = best.min(head.hyperplane_distance(q, c, i)?);
            }
        }
        out.insert(c, best);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub dispersion: BTreeMap<usize, f64>,
    pub margin: BTreeMap<usize, f64>,
    pub min_margin: f64,
    pub max_dispersion: f64,
}

pub fn geometry(model: &Model, data: &Dataset) -> Result<GeometryReport> {
    let f = features_by_class(model, data, model.backbone.depth())?;
    geometry_of(&model.head, &f)
}

pub fn geometry_of(head: &SoftmaxHead, features: &FeaturesByClass) -> Result<GeometryReport> {
    let dispersion = class_dispersion(features)?;
    let margin = class_margin(head, features)?;
    Ok(GeometryReport {
        min_margin: margin.values().copied().fold(f64::INFINITY, f64::min),
        max_dispersion: dispersion.values().copied().fold(0.0, f64::max),
        dispersion,
        margin,
    })
}

/// Outcome of one implication check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Implication {
    /// Whether the premise held, so the conclusion was tested.
    pub applicable: bool,
    pub holds: bool,
    pub measured: f64,
    pub bound: f64,
}

impl Implication {
    fn skipped() -> Self {
        Self {
            applicable: false,
            holds: true,
            measured: f64::NAN,
            bound: f64::NAN,
        }
    }

    /// True unless the premise held and the conclusion failed.
    pub fn ok(&self) -> bool {
        !self.applicable || self.holds
    }
}

/// Zero compactness loss implies every class dispersion is at most `2δ_v`.
pub fn prop2_check(features: &FeaturesByClass, centroids: &BTreeMap<usize, Vec<f64>>, delta_v: f64) -> Result<Implication> {
    if compact_loss(features, centroids, delta_v)? > 0.0 {
        return Ok(Implication::skipped());
    }
    let d = class_dispersion(features)?.values().copied().fold(0.0, f64::max);
    Ok(Implication {
        applicable: true,
        holds: d <= 2.0 * delta_v,
        measured: d,
        bound: 2.0 * delta_v,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop3Outcome {
    /// Both hinge losses vanish on the data.
    pub losses_zero: bool,
    /// Minimum margin at least `δ_d − δ_v` (needs `δ_d > δ_v`).
    pub margin: Implication,
    /// Largest intra-class distance below smallest inter-class distance
    /// (needs `δ_d > 2δ_v`).
    pub separation: Implication,
}

impl Prop3Outcome {
    pub fn ok(&self) -> bool {
        self.margin.ok() && self.separation.ok()
    }
}

pub fn prop3_check(
    head: &SoftmaxHead,
    features: &FeaturesByClass,
    centroids: &BTreeMap<usize, Vec<f64>>,
    delta_v: f64,
    delta_d: f64,
) -> Result<Prop3Outcome> {
    let present: BTreeMap<usize, Vec<f64>> = features
        .keys()
        .map(|c| centroids.get(c).cloned().map(|m| (*c, m)).ok_or(Error::MissingCentroid(*c)))
        .collect::<Result<_>>()?;
    let losses_zero =
        compact_loss(features, &present, delta_v)? == 0.0 && margin_loss(head, &present, delta_d)? == 0.0;
    let mut out = Prop3Outcome {
        losses_zero,
        margin: Implication::skipped(),
        separation: Implication::skipped(),
    };
    if !losses_zero {
        return Ok(out);
    }
    if delta_d > delta_v {
        let m = class_margin(head, features)?.values().copied().fold(f64::INFINITY, f64::min);
        out.margin = Implication {
            applicable: true,
            holds: m >= delta_d - delta_v,
            measured: m,
            bound: delta_d - delta_v,
        };
    }
    if delta_d > 2.0 * delta_v {
        let intra = class_dispersion(features)?.values().copied().fold(0.0, f64::max);
        let mut inter = f64::INFINITY;
        let classes: Vec<&Vec<Vec<f64>>> = features.values().collect();
        for (a, qa) in classes.iter().enumerate() {
            for qb in &classes[a + 1..] {
                for p in qa.iter() {
                    for q in qb.iter() {
                        inter = inter.min(dist(p, q));
                    }
                }
            }
        }
        out.separation = Implication {
            applicable: true,
            holds: intra < inter,
            measured: intra,
            bound: inter,
        };
    }
    Ok(out)
}

/// ρ-margin loss: 1 below 0, linear ramp to 0 at ρ.
pub fn phi_rho(tau: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    Ok(if tau <= 0.0 {
        1.0
    } else if tau >= rho {
        0.0
    } else {
        1.0 - tau / rho
    })
}

/// `(1/N) Σ Φ_ρ(r² − ‖q_i − m‖²)`.
pub fn empirical_margin_risk(features: &[Vec<f64>], m: &[f64], r: f64, rho: f64) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(rho > 0.0) || rho >= r * r {
        return Err(Error::InvalidArgument(format!("need 0 < rho < r^2, got rho {rho}, r {r}")));
    }
    let mut s = 0.0;
    for q in features {
        let d = dist(q, m);
        s += phi_rho(r * r - d * d, rho)?;
    }
    Ok(s / features.len() as f64)
}

/// Additive slack `(2/ρ)(Λ² + 2RΛ + R²/√N) + 3√(ln(2/δ)/(2N))`.
pub fn generalization_bound(lambda: f64, r: f64, n: f64, rho: f64, delta: f64) -> Result<f64> {
    if !(lambda > 0.0 && r > 0.0 && n > 0.0 && rho > 0.0 && delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "generalization bound needs positive Λ, R, N, ρ and δ in (0, 1); got {lambda}, {r}, {n}, {rho}, {delta}"
        )));
    }
    Ok((2.0 / rho) * (lambda * lambda + 2.0 * r * lambda + r * r / n.sqrt()) + 3.0 * ((2.0 / delta).ln() / (2.0 * n)).sqrt())
}

/// Fraction of holdout features outside the sphere `C(m, r)`.
pub fn projection_error(features: &[Vec<f64>], m: &[f64], r: f64) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(features.iter().filter(|q| dist(q, m) > r).count() as f64 / features.len() as f64)
}

/// Smallest per-class fraction of features within `δ_v` of their centroid.
pub fn tau_estimate(features: &FeaturesByClass, centroids: &BTreeMap<usize, Vec<f64>>, delta_v: f64) -> Result<f64> {
    let mut tau = 1.0f64;
    for (c, qs) in features {
        if qs.is_empty() {
            return Err(Error::EmptyClass(*c));
        }
        let m = centroids.get(c).ok_or(Error::MissingCentroid(*c))?;
        let inside = qs.iter().filter(|q| dist(q, m) <= delta_v).count();
        tau = tau.min(inside as f64 / qs.len() as f64);
    }
    Ok(tau)
}

/// Counts on a uniform grid over a box, one `(lo, hi, bins)` per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub axes: Vec<(f64, f64, usize)>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn new(axes: Vec<(f64, f64, usize)>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|&(lo, hi, b)| b == 0 || !(lo <= hi)) {
            return Err(Error::InvalidArgument(format!("bad histogram axes {axes:?}")));
        }
        let cells = axes.iter().map(|a| a.2).product();
        Ok(Self {
            axes,
            counts: vec![0; cells],
            total: 0,
        })
    }

    /// Histogram with the given counts on a unit box.
    pub fn from_counts(bins: &[usize], counts: Vec<u64>) -> Result<Self> {
        let mut h = Self::new(bins.iter().map(|&b| (0.0, 1.0, b)).collect())?;
        if counts.len() != h.counts.len() {
            return Err(Error::Dimension(format!("{} counts for {} cells", counts.len(), h.counts.len())));
        }
        h.total = counts.iter().sum();
        h.counts = counts;
        Ok(h)
    }

    /// Adds a point; coordinates outside the box are clamped into the edge bins.
    pub fn add(&mut self, point: &[f64]) -> Result<()> {
        if point.len() != self.axes.len() {
            return Err(Error::Dimension(format!("{}-d point in a {}-d histogram", point.len(), self.axes.len())));
        }
        let mut cell = 0;
        for (&(lo, hi, bins), &v) in self.axes.iter().zip(point) {
            let frac = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            let b = ((frac * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            cell = cell * bins + b;
        }
        self.counts[cell] += 1;
        self.total += 1;
        Ok(())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let t = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Jensen–Shannon divergence in nats between two histograms on one binning.
pub fn jsd_histogram(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.axes != q.axes {
        return Err(Error::InvalidArgument("histograms use different binnings".into()));
    }
    if p.total == 0 || q.total == 0 {
        return Err(Error::EmptyBatch);
    }
    let (pp, qq) = (p.probabilities(), q.probabilities());
    let mut js = 0.0;
    for (a, b) in pp.iter().zip(&qq) {
        let m = 0.5 * (a + b);
        if *a > 0.0 {
            js += 0.5 * a * (a / m).ln();
        }
        if *b > 0.0 {
            js += 0.5 * b * (b / m).ln();
        }
    }
    Ok(js.max(0.0))
}

/// Seeded orthonormal `2 × width` projection.
pub fn random_projection(width: usize, seed: u64) -> Result<[Vec<f64>; 2]> {
    if width == 0 {
        return Err(Error::InvalidArgument("cannot project zero-width features".into()));
    }
    if width == 1 {
        return Ok([vec![1.0], vec![0.0]]);
    }
    let mut rng = NoiseStream::keyed(seed, 0x9A0);
    let normalise = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut a = rng.normal_vec(width);
    normalise(&mut a);
    let mut b = rng.normal_vec(width);
    let proj: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b.iter_mut().zip(&a).for_each(|(y, x)| *y -= proj * x);
    normalise(&mut b);
    Ok([a, b])
}

/// Histogram JSD between the projected features of two classes, binned on
/// the bounding box of both.
pub fn pair_jsd(a: &[Vec<f64>], b: &[Vec<f64>], projection: &[Vec<f64>; 2], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let project = |q: &Vec<f64>| -> [f64; 2] {
        [0, 1].map(|k| projection[k].iter().zip(q).map(|(x, y)| x * y).sum())
    };
    let pa: Vec<[f64; 2]> = a.iter().map(project).collect();
    let pb: Vec<[f64; 2]> = b.iter().map(project).collect();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in pa.iter().chain(&pb) {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let axes = vec![(lo[0], hi[0], bins), (lo[1], hi[1], bins)];
    let mut ha = Histogram::new(axes.clone())?;
    let mut hb = Histogram::new(axes)?;
    for p in &pa {
        ha.add(p)?;
    }
    for p in &pb {
        hb.add(p)?;
    }
    jsd_histogram(&ha, &hb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDivergence {
    pub y: usize,
    pub y_other: usize,
    pub jsd: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Report {
    pub layer: usize,
    pub tau: f64,
    /// `(2τ − 1)² / 2`.
    pub threshold: f64,
    pub tolerance: f64,
    /// False when `τ < ½`.
    pub applicable: bool,
    pub pairs: Vec<PairDivergence>,
}

impl Theorem3Report {
    pub fn ok(&self) -> bool {
        !self.applicable || self.pairs.iter().all(|p| p.holds)
    }
}

/// Binning choices for [`theorem3_check`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub bins: usize,
    pub projection_seed: u64,
    pub tolerance: f64,
}

impl Default for Binning {
    fn default() -> Self {
        Self {
            bins: 32,
            projection_seed: 0,
            tolerance: 0.02,
        }
    }
}

/// Compares histogram JSD between every class pair at `layer` with
/// `(2τ − 1)²/2`, where τ is measured in the feature space.
pub fn theorem3_check(
    model: &Model,
    data: &Dataset,
    centroids: &BTreeMap<usize, Vec<f64>>,
    delta_v: f64,
    layer: usize,
    binning: &Binning,
) -> Result<Theorem3Report> {
    let top = features_by_class(model, data, model.backbone.depth())?;
    if top.len() < 2 {
        return Err(Error::InvalidArgument("the divergence check needs at least two classes".into()));
    }
    let tau = tau_estimate(&top, centroids, delta_v)?;
    let threshold = (2.0 * tau - 1.0).powi(2) / 2.0;
    let applicable = tau >= 0.5;
    let layer_feats = features_by_class(model, data, layer)?;
    let width = layer_feats.values().next().and_then(|v| v.first()).map_or(0, Vec::len);
    let projection = random_projection(width, binning.projection_seed)?;
    let mut pairs = Vec::new();
    let classes: Vec<usize> = layer_feats.keys().copied().collect();
    for (a, &y) in classes.iter().enumerate() {
        for &y_other in &classes[a + 1..] {
            let jsd = pair_jsd(&layer_feats[&y], &layer_feats[&y_other], &projection, binning.bins)?;
            pairs.push(PairDivergence {
                y,
                y_other,
                jsd,
                holds: jsd + binning.tolerance >= threshold,
            });
        }
    }
    Ok(Theorem3Report {
        layer,
        tau,
        threshold,
        tolerance: binning.tolerance,
        applicable,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn dispersion_hand_values() {
        let f: FeaturesByClass = BTreeMap::from([(0, vec![vec![1.0, 1.0]]), (1, vec![vec![0.0, 0.0], vec![3.0, 4.0]])]);
        let d = class_dispersion(&f).unwrap();
        assert_eq!(d[&0], 0.0);
        assert_eq!(d[&1], 5.0);
    }

    #[test]
    fn margin_on_line() {
        let head = SoftmaxHead::new(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap(), Tensor::vector(vec![0.0, 0.0])).unwrap();
        let f: FeaturesByClass = BTreeMap::from([(0, vec![vec![1.0]]), (1, vec![vec![0.0]])]);
        let m = class_margin(&head, &f).unwrap();
        assert_eq!(m[&0], 1.0);
        assert_eq!(m[&1], 0.0);
    }

    #[test]
    fn phi_rho_values() {
        assert_eq!(phi_rho(-1.0, 0.3).unwrap(), 1.0);
        assert_eq!(phi_rho(0.25, 0.5).unwrap(), 0.5);
        assert_eq!(phi_rho(0.5, 0.5).unwrap(), 0.0);
        assert!(phi_rho(0.1, 0.0).is_err());
    }

    #[test]
    fn bound_limits_and_scaling() {
        let inf = generalization_bound(1.0, 1.0, 1e12, 0.5, 0.05).unwrap();
        assert!((inf - 12.0).abs() < 1e-4);
        assert!(generalization_bound(1.0, 1.0, 10.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn tau_counts() {
        let m = BTreeMap::from([(0, vec![0.0]), (1, vec![0.0])]);
        let f: FeaturesByClass = BTreeMap::from([(0, vec![vec![0.1], vec![0.2]]), (1, vec![vec![0.1], vec![3.0]])]);
        assert_eq!(tau_estimate(&f, &m, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn jsd_extremes() {
        let p = Histogram::from_counts(&[2], vec![3, 1]).unwrap();
        let q = Histogram::from_counts(&[2], vec![1, 0]).unwrap();
        let r = Histogram::from_counts(&[2], vec![0, 5]).unwrap();
        assert_eq!(jsd_histogram(&p, &p).unwrap(), 0.0);
        assert!((jsd_histogram(&q, &r).unwrap() - 2f64.ln()).abs() < 1e-15);
        let other = Histogram::from_counts(&[3], vec![1, 1, 1]).unwrap();
        assert!(jsd_histogram(&p, &other).is_err());
    }
}
