//! Per-sample input-loss curvature against robustness to noise.

use std::io::Write;

use noisecurve_core::curvature::{curvature_estimate, eig_sums, exact_hessian, LabelledModel, HESSIAN_DIM_CAP};
use noisecurve_core::data::Dataset;
use noisecurve_core::model::Model;
use noisecurve_core::perturb::{apply_keyed, PerturbationSpec};
use noisecurve_core::rng::{derive_seed, NoiseStream};
use serde::Serialize;

use crate::config::CurvatureConfig;
use crate::error::{HarnessError, Result};

const TAG_LAMBDA: u64 = 6;
const TAG_NOISE: u64 = 7;
const HESSIAN_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleCurvature {
    pub index: usize,
    pub label: usize,
    pub lambda: f64,
    /// `Σλᵢ²` of the exact input Hessian, when the input is small enough.
    pub exact: Option<f64>,
    pub clean_correct: bool,
    /// Correct predictions over the noisy repeats.
    pub correct_count: usize,
    /// Correctness under the first noisy draw.
    pub noisy_correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuantileAccuracy {
    pub p: f64,
    pub retained: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountGroup {
    pub correct_count: usize,
    pub members: usize,
    pub mean_lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvatureSummary {
    pub samples: usize,
    pub noise: String,
    pub noise_repeats: usize,
    pub quantile_accuracy: Vec<QuantileAccuracy>,
    pub groups: Vec<CountGroup>,
    /// Pearson coefficient over `(k, mean Λ of group k)`; `None` when fewer
    /// than two groups exist or either coordinate is constant.
    pub pearson: Option<f64>,
    pub pearson_undefined: bool,
    /// Spread of the lowest 90% of curvature values.
    pub low90: Quartiles,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvatureRun {
    pub samples: Vec<SampleCurvature>,
    pub summary: CurvatureSummary,
}

/// Linearly interpolated quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn pearson(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in points {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn sorted_by_lambda(samples: &[SampleCurvature]) -> Vec<&SampleCurvature> {
    let mut s: Vec<&SampleCurvature> = samples.iter().collect();
    s.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.index.cmp(&b.index)));
    s
}

pub fn summarize(samples: &[SampleCurvature], noise: &PerturbationSpec, repeats: usize) -> Result<CurvatureSummary> {
    if samples.is_empty() {
        return Err(HarnessError::Invalid("no samples to summarise".into()));
    }
    let by_lambda = sorted_by_lambda(samples);
    let n = samples.len();
    let quantile_accuracy = (1..=10)
        .map(|i| {
            let p = i as f64 / 10.0;
            let retained = ((p * n as f64).ceil() as usize).clamp(1, n);
            let hits = by_lambda[..retained].iter().filter(|s| s.noisy_correct).count();
            QuantileAccuracy {
                p,
                retained,
                accuracy: hits as f64 / retained as f64,
            }
        })
        .collect();
    let groups: Vec<CountGroup> = (0..=repeats)
        .filter_map(|k| {
            let members: Vec<f64> = samples.iter().filter(|s| s.correct_count == k).map(|s| s.lambda).collect();
            (!members.is_empty()).then(|| CountGroup {
                correct_count: k,
                members: members.len(),
                mean_lambda: members.iter().sum::<f64>() / members.len() as f64,
            })
        })
        .collect();
    let points: Vec<(f64, f64)> = groups.iter().map(|g| (g.correct_count as f64, g.mean_lambda)).collect();
    let pearson = pearson(&points);
    let keep = ((0.9 * n as f64).ceil() as usize).clamp(1, n);
    let low: Vec<f64> = by_lambda[..keep].iter().map(|s| s.lambda).collect();
    Ok(CurvatureSummary {
        samples: n,
        noise: noise.to_string(),
        noise_repeats: repeats,
        quantile_accuracy,
        groups,
        pearson,
        pearson_undefined: pearson.is_none(),
        low90: Quartiles {
            min: low[0],
            q1: quantile_sorted(&low, 0.25),
            median: quantile_sorted(&low, 0.5),
            q3: quantile_sorted(&low, 0.75),
            max: low[low.len() - 1],
        },
    })
}

/// Computes `Λ(x)` and the noisy correct-count for each test sample. Sample
/// `i` draws its estimator directions from the stream keyed by `i`, and its
/// `r`-th noisy copy from a seed keyed by `r`.
pub fn curvature_report(model: &Model, test: &Dataset, cfg: &CurvatureConfig, seed: u64) -> Result<CurvatureRun> {
    if test.sample_len() != model.input_dim() {
        return Err(HarnessError::Invalid(format!(
            "samples of length {} for a model expecting {}",
            test.sample_len(),
            model.input_dim()
        )));
    }
    if cfg.noise_repeats == 0 {
        return Err(HarnessError::Invalid("curvature.noise_repeats must be positive".into()));
    }
    let noise = cfg.noise.clone().unwrap_or(PerturbationSpec::Gaussian { sigma: cfg.sigma });
    noise.validate(test.grid())?;
    let n = cfg.max_samples.map_or(test.len(), |m| m.min(test.len()));
    let exact = model.input_dim() <= HESSIAN_DIM_CAP;
    let lambda_seed = derive_seed(seed, TAG_LAMBDA);
    let noise_seed = derive_seed(seed, TAG_NOISE);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let x = test.sample(i);
        let label = test.labels()[i];
        let obj = LabelledModel::new(model, label)?;
        let mut rng = NoiseStream::keyed(lambda_seed, i as u64);
        let lambda = curvature_estimate(&obj, x, cfg.t, cfg.k, &mut rng)?;
        let exact = if exact {
            let h = exact_hessian(&obj, x, HESSIAN_STEP)?;
            Some(eig_sums(&h.data, h.n)?.sum_sq)
        } else {
            None
        };
        let mut correct_count = 0;
        let mut noisy_correct = false;
        for r in 0..cfg.noise_repeats {
            let xn = apply_keyed(&noise, x, test.grid(), derive_seed(noise_seed, r as u64), i as u64)?;
            let ok = model.predict(&xn)? == label;
            correct_count += ok as usize;
            if r == 0 {
                noisy_correct = ok;
            }
        }
        samples.push(SampleCurvature {
            index: i,
            label,
            lambda,
            exact,
            clean_correct: model.predict(x)? == label,
            correct_count,
            noisy_correct,
        });
    }
    let summary = summarize(&samples, &noise, cfg.noise_repeats)?;
    Ok(CurvatureRun { samples, summary })
}

pub fn write_curvature_csv(samples: &[SampleCurvature], mut out: impl Write) -> Result<()> {
    writeln!(out, "index,label,lambda,exact_sum_sq,clean_correct,correct_count,noisy_correct")?;
    for s in samples {
        let exact = s.exact.map_or(String::new(), |v| format!("{v:.16e}"));
        writeln!(
            out,
            "{},{},{:.16e},{},{},{},{}",
            s.index, s.label, s.lambda, exact, s.clean_correct as u8, s.correct_count, s.noisy_correct as u8
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_of_a_line_is_one() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0 - 2.0 * i as f64)).collect();
        assert!((pearson(&pts).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[(0.0, 1.0), (1.0, 1.0)]), None);
        assert_eq!(pearson(&[(0.0, 1.0)]), None);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.25), 2.0);
        assert_eq!(quantile_sorted(&[1.0, 2.0], 0.5), 1.5);
    }
}
