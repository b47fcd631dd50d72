//! Class centroids and the partial-momentum protocol.
//!
//! Centroids live on the tape as vectors so that gradients flow through the
//! batch features. The momentum view blends a constant snapshot of the
//! previous centroid with the current batch mean:
//!
//! ```text
//! m_c^t = γ · m_c^{t-1} + (1 − γ) · mean_{q ∈ batch, y = c} q
//! ```
//!
//! The snapshot never carries a gradient, so every derivative through a
//! momentum centroid is exactly `(1 − γ)` times the one through the naive
//! batch mean at the same centroid value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::ClassBatch;

pub type CentroidVars = BTreeMap<usize, Var>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidMode {
    /// Every loss uses the batch means.
    Naive,
    /// Every loss uses the momentum centroids.
    Momentum,
    /// Momentum for compactness and noisy alignment, batch means for the
    /// margin and regularisation terms.
    Partial,
}

impl std::str::FromStr for CentroidMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "momentum" => Ok(Self::Momentum),
            "partial" => Ok(Self::Partial),
            other => Err(Error::InvalidArgument(format!("unknown centroid mode `{other}`"))),
        }
    }
}

/// Per-class centroid snapshots carried between training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidState {
    pub mode: CentroidMode,
    pub gamma: f64,
    pub dim: usize,
    pub centroids: BTreeMap<usize, Vec<f64>>,
}

/// Centroids as seen by each loss term for one step.
#[derive(Clone, Debug)]
pub struct CentroidViews {
    pub compact: CentroidVars,
    pub margin: CentroidVars,
    pub reg: CentroidVars,
    /// Momentum values to store once the step is taken.
    pub next: BTreeMap<usize, Vec<f64>>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

impl CentroidState {
    pub fn new(mode: CentroidMode, gamma: f64, dim: usize) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self {
            mode,
            gamma,
            dim,
            centroids: BTreeMap::new(),
        })
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.centroids.get(&class).map(Vec::as_slice)
    }

    /// Records the views' centroids for the recorded batch; absent classes keep
    /// their previous value.
    pub fn commit(&mut self, views: &CentroidViews) {
        for (c, m) in &views.next {
            self.centroids.insert(*c, m.clone());
        }
    }

    /// Builds the per-loss centroid views for `features` (a `[n, d]` tape node).
    pub fn views(&self, tape: &mut Tape, features: Var, batch: &ClassBatch) -> Result<CentroidViews> {
        check_gamma(self.gamma)?;
        let naive = batch_centroids(tape, features, batch)?;
        let momentum = momentum_centroids(tape, self, &naive)?;
        let next = momentum
            .iter()
            .map(|(c, v)| (*c, tape.value(*v).data().to_vec()))
            .collect();
        let (compact, margin) = match self.mode {
            CentroidMode::Naive => (naive.clone(), naive),
            CentroidMode::Momentum => (momentum.clone(), momentum),
            CentroidMode::Partial => (momentum, naive),
        };
        Ok(CentroidViews {
            compact,
            reg: margin.clone(),
            margin,
            next,
        })
    }
}

/// Per-class mean of the rows of `features`, differentiable.
pub fn batch_centroids(tape: &mut Tape, features: Var, batch: &ClassBatch) -> Result<CentroidVars> {
    let mut out = BTreeMap::new();
    for (c, rows) in batch.groups() {
        if rows.is_empty() {
            return Err(Error::EmptyClass(*c));
        }
        out.insert(*c, tape.mean_rows(features, rows.clone())?);
    }
    Ok(out)
}

/// `γ·prev + (1−γ)·current` with `prev` recorded as a constant. A class seen
/// for the first time takes its current value as `prev`.
pub fn momentum_centroids(tape: &mut Tape, state: &CentroidState, current: &CentroidVars) -> Result<CentroidVars> {
    check_gamma(state.gamma)?;
    let mut out = BTreeMap::new();
    for (c, cur) in current {
        let cur_val = tape.value(*cur).clone();
        if cur_val.len() != state.dim {
            return Err(Error::Dimension(format!(
                "centroid of class {} has {} entries, state expects {}",
                c,
                cur_val.len(),
                state.dim
            )));
        }
        let prev = match state.get(*c) {
            Some(p) => Tensor::vector(p.to_vec()),
            None => cur_val,
        };
        let prev = tape.constant(prev);
        let a = tape.scale(prev, state.gamma)?;
        let b = tape.scale(*cur, 1.0 - state.gamma)?;
        out.insert(*c, tape.add(a, b)?);
    }
    Ok(out)
}

/// Plain per-class means of feature vectors.
pub fn batch_centroid(features_by_class: &BTreeMap<usize, Vec<Vec<f64>>>) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (c, qs) in features_by_class {
        let Some(first) = qs.first() else {
            return Err(Error::EmptyClass(*c));
        };
        let mut acc = vec![0.0; first.len()];
        for q in qs {
            if q.len() != acc.len() {
                return Err(Error::Dimension(format!("ragged features in class {c}")));
            }
            for (a, v) in acc.iter_mut().zip(q) {
                *a += v;
            }
        }
        let inv = 1.0 / qs.len() as f64;
        out.insert(*c, acc.into_iter().map(|a| a * inv).collect());
    }
    Ok(out)
}

/// Value-level momentum step: present classes blend, absent classes keep
/// their previous centroid, unseen classes start at their current mean.
pub fn momentum_update(
    previous: &BTreeMap<usize, Vec<f64>>,
    current: &BTreeMap<usize, Vec<f64>>,
    gamma: f64,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    check_gamma(gamma)?;
    let mut out = previous.clone();
    for (c, cur) in current {
        let blended = match previous.get(c) {
            Some(p) if p.len() == cur.len() => p.iter().zip(cur).map(|(p, q)| gamma * p + (1.0 - gamma) * q).collect(),
            Some(_) => return Err(Error::Dimension(format!("centroid width changed for class {c}"))),
            None => cur.clone(),
        };
        out.insert(*c, blended);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(c: usize, v: Vec<f64>) -> BTreeMap<usize, Vec<f64>> {
        BTreeMap::from([(c, v)])
    }

    #[test]
    fn mean_of_two_points() {
        let m = batch_centroid(&BTreeMap::from([(0, vec![vec![0.0, 0.0], vec![2.0, 2.0]])])).unwrap();
        assert_eq!(m[&0], vec![1.0, 1.0]);
        let s = batch_centroid(&BTreeMap::from([(3, vec![vec![0.5, -2.0]])])).unwrap();
        assert_eq!(s[&3], vec![0.5, -2.0]);
        assert!(matches!(
            batch_centroid(&BTreeMap::from([(1, vec![])])),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn momentum_arithmetic() {
        let prev = one(0, vec![0.0, 0.0]);
        let cur = one(0, vec![10.0, 10.0]);
        let m = momentum_update(&prev, &cur, 0.9).unwrap();
        assert!((m[&0][0] - 1.0).abs() < 1e-12 && (m[&0][1] - 1.0).abs() < 1e-12);
        assert_eq!(momentum_update(&prev, &cur, 0.0).unwrap()[&0], cur[&0]);
        assert!(momentum_update(&prev, &cur, 1.0).is_err());
        assert!(momentum_update(&prev, &cur, -0.1).is_err());
    }

    #[test]
    fn closed_form_recurrence_after_five_steps() {
        let (p, c, g) = (vec![4.0, -2.0], vec![1.0, 3.0], 0.9f64);
        let mut m = one(0, p.clone());
        for _ in 0..5 {
            m = momentum_update(&m, &one(0, c.clone()), g).unwrap();
        }
        for k in 0..2 {
            let expect = c[k] + g.powi(5) * (p[k] - c[k]);
            assert!((m[&0][k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_class_keeps_previous_and_new_class_initialises() {
        let prev = BTreeMap::from([(0, vec![1.0]), (1, vec![5.0])]);
        let m = momentum_update(&prev, &BTreeMap::from([(0, vec![3.0]), (2, vec![7.0])]), 0.5).unwrap();
        assert_eq!(m[&1], vec![5.0]);
        assert_eq!(m[&0], vec![2.0]);
        assert_eq!(m[&2], vec![7.0]);
    }

    #[test]
    fn views_follow_mode() {
        let batch = ClassBatch::from_labels(&[0, 1, 0], 2).unwrap();
        for mode in [CentroidMode::Naive, CentroidMode::Momentum, CentroidMode::Partial] {
            let mut state = CentroidState::new(mode, 0.9, 2).unwrap();
            state.centroids.insert(0, vec![10.0, 10.0]);
            let mut tape = Tape::new();
            let f = tape.leaf(Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap());
            let v = state.views(&mut tape, f, &batch).unwrap();
            let c0 = tape.value(v.compact[&0]).data().to_vec();
            let m0 = tape.value(v.margin[&0]).data().to_vec();
            let blended = vec![0.9 * 10.0 + 0.1 * 1.0; 2];
            match mode {
                CentroidMode::Naive => assert_eq!((c0, m0), (vec![1.0, 1.0], vec![1.0, 1.0])),
                CentroidMode::Momentum => {
                    assert!((c0[0] - blended[0]).abs() < 1e-12 && (m0[0] - blended[0]).abs() < 1e-12)
                }
                CentroidMode::Partial => {
                    assert!((c0[0] - blended[0]).abs() < 1e-12);
                    assert_eq!(m0, vec![1.0, 1.0]);
                }
            }
            state.commit(&v);
            assert!((state.centroids[&0][0] - blended[0]).abs() < 1e-12);
            assert_eq!(state.centroids[&1], vec![1.0, 1.0]);
        }
    }
}
