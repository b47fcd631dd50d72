//! Softmax loss and the feature-geometry losses.
//!
//! Each loss has a plain evaluator over feature vectors and a recorder in
//! [`graph`] that builds the same quantity on a [`Tape`] for training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidViews;
use crate::diffcore::{log_sum_exp, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ModelVars, SoftmaxHead};

/// Weights and slacks of the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_reg: f64,
    pub lambda: f64,
    pub delta_v: f64,
    pub delta_d: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma_reg: 1e-3,
            lambda: 1.0,
            delta_v: 0.5,
            delta_d: 5.0,
        }
    }
}

impl LossConfig {
    /// Rejects negative weights and non-positive slacks; returns advisory
    /// warnings for settings that void the geometric guarantees.
    pub fn validate(&self) -> Result<Vec<String>> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma_reg", self.gamma_reg),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        for (name, v) in [("delta_v", self.delta_v), ("delta_d", self.delta_d)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        let mut warnings = Vec::new();
        if self.delta_d <= self.delta_v {
            warnings.push(format!(
                "delta_d ({}) <= delta_v ({}): zero hinge losses no longer imply a positive margin",
                self.delta_d, self.delta_v
            ));
        }
        Ok(warnings)
    }
}

/// Row indices of a batch grouped by class, classes in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassBatch {
    groups: Vec<(usize, Vec<usize>)>,
}

impl ClassBatch {
    pub fn from_labels(labels: &[usize], class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &y) in labels.iter().enumerate() {
            if y >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: class_count,
                });
            }
            map.entry(y).or_default().push(row);
        }
        Ok(Self {
            groups: map.into_iter().collect(),
        })
    }

    pub fn groups(&self) -> &[(usize, Vec<usize>)] {
        &self.groups
    }

    pub fn classes(&self) -> Vec<usize> {
        self.groups.iter().map(|(c, _)| *c).collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn hinge(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Mean `−log softmax(z)_y` over a batch of `rows` stacked inputs.
pub fn softmax_loss(model: &Model, x: &[f64], rows: usize, labels: &[usize]) -> Result<f64> {
    if rows == 0 || labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != rows {
        return Err(Error::Dimension(format!("{} labels for {} rows", labels.len(), rows)));
    }
    let q = model.features_batch(x, rows)?;
    let c = model.class_count();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let z = model.logits(q.row(r))?;
        total += log_sum_exp(&z) - z[y];
    }
    Ok(total / rows as f64)
}

/// Mean over present classes of the mean squared hinge `[‖m_c − q‖ − δ_v]_+²`.
pub fn compact_loss(
    features_by_class: &BTreeMap<usize, Vec<Vec<f64>>>,
    centroids: &BTreeMap<usize, Vec<f64>>,
    delta_v: f64,
) -> Result<f64> {
    if features_by_class.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (c, qs) in features_by_class {
        let m = centroids.get(c).ok_or(Error::MissingCentroid(*c))?;
        if qs.is_empty() {
            return Err(Error::EmptyClass(*c));
        }
        let s: f64 = qs.iter().map(|q| hinge(dist(m, q) - delta_v).powi(2)).sum();
        total += s / qs.len() as f64;
    }
    Ok(total / features_by_class.len() as f64)
}

/// Compactness of noisy features around clean centroids.
pub fn noisy_align_loss(
    noisy_features_by_class: &BTreeMap<usize, Vec<Vec<f64>>>,
    clean_centroids: &BTreeMap<usize, Vec<f64>>,
    delta_v: f64,
) -> Result<f64> {
    compact_loss(noisy_features_by_class, clean_centroids, delta_v)
}

/// Mean over centroids of `max_{i≠c} [δ_d + (z_i − z_c)/‖W_c − W_i‖]_+`, the
/// signed-distance form of the margin hinge (on-boundary counts as wrong side).
pub fn margin_loss(head: &SoftmaxHead, centroids: &BTreeMap<usize, Vec<f64>>, delta_d: f64) -> Result<f64> {
    if centroids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = head.class_count();
    let mut total = 0.0;
    for (&c, m) in centroids {
        if c >= k {
            return Err(Error::LabelOutOfRange { label: c, classes: k });
        }
        let z = head.logits(m)?;
        let mut worst = f64::NEG_INFINITY;
        for i in (0..k).filter(|&i| i != c) {
            let (_, _, norm) = head.boundary(c, i)?;
            let v = delta_d + (z[i] - z[c]) / norm;
            if v > worst {
                worst = v;
            }
        }
        total += hinge(worst);
    }
    Ok(total / centroids.len() as f64)
}

/// Mean centroid norm.
pub fn reg_loss(centroids: &BTreeMap<usize, Vec<f64>>) -> Result<f64> {
    if centroids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s: f64 = centroids.values().map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
    Ok(s / centroids.len() as f64)
}

/// Values of every term of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub softmax: f64,
    pub compact: f64,
    pub margin: f64,
    pub reg: f64,
    pub noisy: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted terms `[L_S, αL_c, βL_m, γL_r, λL_n]`, which sum to `total`.
    pub fn weighted(&self, cfg: &LossConfig) -> [f64; 5] {
        [
            self.softmax,
            cfg.alpha * self.compact,
            cfg.beta * self.margin,
            cfg.gamma_reg * self.reg,
            cfg.lambda * self.noisy,
        ]
    }
}

/// Tape recorders for the training objective.
pub mod graph {
    use super::*;
    use crate::centroids::CentroidVars;

    /// Mean softmax loss of `[n, C]` logits.
    pub fn softmax(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let per = tape.softmax_nll(logits, labels.to_vec())?;
        tape.mean(per)
    }

    /// Compactness of `[n, d]` features around the given centroids.
    pub fn compact(
        tape: &mut Tape,
        features: Var,
        batch: &ClassBatch,
        centroids: &CentroidVars,
        delta_v: f64,
    ) -> Result<Var> {
        let mut per_class = Vec::with_capacity(batch.groups().len());
        for (c, rows) in batch.groups() {
            let m = *centroids.get(c).ok_or(Error::MissingCentroid(*c))?;
            let sel = tape.select_rows(features, rows.clone())?;
            let diff = tape.sub_row(sel, m)?;
            let d = tape.row_norms(diff)?;
            let d = tape.offset(d, -delta_v)?;
            let h = tape.hinge(d)?;
            let h2 = tape.square(h)?;
            per_class.push(tape.mean(h2)?);
        }
        let all = tape.stack(per_class)?;
        tape.mean(all)
    }

    /// Margin hinge of each centroid against the head `(W, b)`.
    pub fn margin(tape: &mut Tape, weight: Var, bias: Var, centroids: &CentroidVars, delta_d: f64) -> Result<Var> {
        if centroids.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let head = SoftmaxHead::new(tape.value(weight).clone(), tape.value(bias).clone())?;
        let k = head.class_count();
        let mut per_class = Vec::with_capacity(centroids.len());
        for (&c, &m) in centroids {
            if c >= k {
                return Err(Error::LabelOutOfRange { label: c, classes: k });
            }
            let z = tape.affine(m, weight, bias)?;
            let zc = tape.index(z, c)?;
            let wc = tape.row(weight, c)?;
            let mut signed = Vec::with_capacity(k - 1);
            for i in (0..k).filter(|&i| i != c) {
                head.boundary(c, i)?;
                let zi = tape.index(z, i)?;
                let wi = tape.row(weight, i)?;
                let dw = tape.sub(wc, wi)?;
                let n = tape.norm(dw)?;
                let gap = tape.sub(zi, zc)?;
                signed.push(tape.div(gap, n)?);
            }
            let s = tape.stack(signed)?;
            let worst = tape.max(s)?;
            let shifted = tape.offset(worst, delta_d)?;
            per_class.push(tape.hinge(shifted)?);
        }
        let all = tape.stack(per_class)?;
        tape.mean(all)
    }

    pub fn reg(tape: &mut Tape, centroids: &CentroidVars) -> Result<Var> {
        if centroids.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut norms = Vec::with_capacity(centroids.len());
        for &m in centroids.values() {
            norms.push(tape.norm(m)?);
        }
        let all = tape.stack(norms)?;
        tape.mean(all)
    }

    /// Recorded objective with a handle per term.
    #[derive(Clone, Copy, Debug)]
    pub struct Terms {
        pub softmax: Var,
        pub compact: Var,
        pub margin: Var,
        pub reg: Var,
        pub noisy: Option<Var>,
        pub total: Var,
    }

    impl Terms {
        pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
            LossBreakdown {
                softmax: tape.scalar(self.softmax),
                compact: tape.scalar(self.compact),
                margin: tape.scalar(self.margin),
                reg: tape.scalar(self.reg),
                noisy: self.noisy.map_or(0.0, |v| tape.scalar(v)),
                total: tape.scalar(self.total),
            }
        }
    }

    /// `L_S + α·L_compact + β·L_margin + γ_reg·L_reg + λ·L_noisy` on clean
    /// features `q`, logits `z` and optional noisy features.
    #[allow(clippy::too_many_arguments)]
    pub fn total(
        tape: &mut Tape,
        vars: &ModelVars,
        features: Var,
        logits: Var,
        noisy_features: Option<Var>,
        labels: &[usize],
        batch: &ClassBatch,
        views: &CentroidViews,
        cfg: &LossConfig,
    ) -> Result<Terms> {
        let softmax = softmax(tape, logits, labels)?;
        let compact = compact(tape, features, batch, &views.compact, cfg.delta_v)?;
        let margin = margin(tape, vars.head_weight, vars.head_bias, &views.margin, cfg.delta_d)?;
        let reg = reg(tape, &views.reg)?;
        let noisy = match noisy_features {
            Some(nf) => Some(self::compact(tape, nf, batch, &views.compact, cfg.delta_v)?),
            None => None,
        };
        let mut total = softmax;
        let mut weighted = vec![(compact, cfg.alpha), (margin, cfg.beta), (reg, cfg.gamma_reg)];
        if let Some(n) = noisy {
            weighted.push((n, cfg.lambda));
        }
        for (term, w) in weighted {
            if w != 0.0 {
                let t = tape.scale(term, w)?;
                total = tape.add(total, t)?;
            }
        }
        Ok(Terms {
            softmax,
            compact,
            margin,
            reg,
            noisy,
            total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn classes(items: Vec<(usize, Vec<Vec<f64>>)>) -> BTreeMap<usize, Vec<Vec<f64>>> {
        items.into_iter().collect()
    }

    #[test]
    fn compact_hand_values() {
        let m = BTreeMap::from([(0, vec![0.0, 0.0]), (1, vec![10.0, 0.0])]);
        let inside = classes(vec![(0, vec![vec![0.1, 0.2]]), (1, vec![vec![10.0, 0.4]])]);
        assert_eq!(compact_loss(&inside, &m, 0.5).unwrap(), 0.0);
        let one = classes(vec![(0, vec![vec![1.5, 0.0]])]);
        assert!((compact_loss(&one, &m, 0.5).unwrap() - 1.0).abs() < 1e-15);
        let two = classes(vec![
            (0, vec![vec![1.5, 0.0], vec![0.0, 3.5]]),
            (1, vec![vec![10.0, 0.5]]),
        ]);
        assert!((compact_loss(&two, &m, 0.5).unwrap() - 2.5).abs() < 1e-12);
        assert!((noisy_align_loss(&two, &m, 0.5).unwrap() - 2.5).abs() < 1e-12);
        let missing = classes(vec![(2, vec![vec![0.0, 0.0]])]);
        assert!(matches!(compact_loss(&missing, &m, 0.5), Err(Error::MissingCentroid(2))));
    }

    fn line_head() -> SoftmaxHead {
        SoftmaxHead::new(
            Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn margin_one_dimensional_geometry() {
        let head = line_head();
        let m = BTreeMap::from([(0, vec![1.0]), (1, vec![-1.0])]);
        assert!((margin_loss(&head, &m, 3.0).unwrap() - 2.0).abs() < 1e-15);
        let wrong = BTreeMap::from([(0, vec![-1.0])]);
        assert!((margin_loss(&head, &wrong, 3.0).unwrap() - 4.0).abs() < 1e-15);
        let far = BTreeMap::from([(0, vec![5.0])]);
        assert_eq!(margin_loss(&head, &far, 3.0).unwrap(), 0.0);
        let on = BTreeMap::from([(0, vec![0.0])]);
        assert!((margin_loss(&head, &on, 3.0).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn margin_rejects_degenerate_boundary() {
        let head = SoftmaxHead::new(
            Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap();
        let m = BTreeMap::from([(0, vec![1.0])]);
        assert!(matches!(margin_loss(&head, &m, 1.0), Err(Error::DegenerateBoundary { .. })));
    }

    #[test]
    fn reg_hand_values() {
        assert_eq!(reg_loss(&BTreeMap::from([(0, vec![0.0, 0.0])])).unwrap(), 0.0);
        assert_eq!(reg_loss(&BTreeMap::from([(0, vec![3.0, 4.0])])).unwrap(), 5.0);
        assert_eq!(
            reg_loss(&BTreeMap::from([(0, vec![1.0, 0.0]), (1, vec![0.0, 2.0])])).unwrap(),
            1.5
        );
    }

    #[test]
    fn zero_head_gives_log_class_count() {
        let mut m = Model::init(&[3, 4], &[crate::model::Activation::Relu], 10, 1).unwrap();
        m.head.weight = Tensor::zeros(&[10, 4]);
        m.head.bias = Tensor::zeros(&[10]);
        let l = softmax_loss(&m, &[0.2, -0.3, 1.0, 0.5, 0.5, 0.5], 2, &[3, 7]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-14);
        assert!(matches!(softmax_loss(&m, &[], 0, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn graph_terms_match_plain_values() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::matrix(3, 2, vec![1.5, 0.0, 0.0, 3.5, 10.0, 0.5]).unwrap());
        let batch = ClassBatch::from_labels(&[0, 0, 1], 2).unwrap();
        let m0 = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let m1 = tape.constant(Tensor::vector(vec![10.0, 0.0]));
        let cents = BTreeMap::from([(0, m0), (1, m1)]);
        let l = graph::compact(&mut tape, f, &batch, &cents, 0.5).unwrap();
        assert!((tape.scalar(l) - 2.5).abs() < 1e-12);

        let w = tape.leaf(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let c0 = tape.constant(Tensor::vector(vec![1.0]));
        let c1 = tape.constant(Tensor::vector(vec![-1.0]));
        let mg = graph::margin(&mut tape, w, b, &BTreeMap::from([(0, c0), (1, c1)]), 3.0).unwrap();
        assert!((tape.scalar(mg) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().unwrap().is_empty());
        let close = LossConfig {
            delta_d: 0.4,
            ..LossConfig::default()
        };
        assert_eq!(close.validate().unwrap().len(), 1);
        let bad = LossConfig {
            alpha: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
