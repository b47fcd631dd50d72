//! Accuracy under perturbations, one record per (perturbation, repeat).

use std::collections::BTreeMap;
use std::io::Write;

use noisecurve_core::centroids::batch_centroid;
use noisecurve_core::data::Dataset;
use noisecurve_core::losses::{self, LossBreakdown, LossConfig};
use noisecurve_core::model::Model;
use noisecurve_core::perturb::PerturbationSpec;
use noisecurve_core::rng::derive_seed;
use noisecurve_core::theory::features_by_class;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::train::accuracy;

const TAG_EVAL: u64 = 5;

/// Label used for the unperturbed test set.
pub const CLEAN: &str = "clean";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub perturbation: String,
    pub repeat: usize,
    pub accuracy: f64,
    pub losses: LossBreakdown,
}

impl MetricsRecord {
    pub const HEADER: &'static str =
        "run_id,method,seed,perturbation,repeat,accuracy,loss_softmax,loss_compact,loss_margin,loss_reg,loss_noisy,loss_total";

    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let f = |v: f64| format!("{v:.16e}");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.method,
            self.seed,
            self.perturbation,
            self.repeat,
            f(self.accuracy),
            f(l.softmax),
            f(l.compact),
            f(l.margin),
            f(l.reg),
            f(l.noisy),
            f(l.total),
        )
    }
}

pub fn write_metrics_csv(records: &[MetricsRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{}", MetricsRecord::HEADER)?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracySummary {
    pub perturbation: String,
    pub repeats: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single repeat.
    pub std: f64,
}

/// Mean and standard deviation per perturbation, in first-seen order.
pub fn summarize(records: &[MetricsRecord]) -> Vec<AccuracySummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        let g = groups.entry(&r.perturbation).or_default();
        if g.is_empty() {
            order.push(&r.perturbation);
        }
        g.push(r.accuracy);
    }
    order
        .into_iter()
        .map(|p| {
            let acc = &groups[p];
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let var = if acc.len() > 1 {
                acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            AccuracySummary {
                perturbation: p.to_string(),
                repeats: acc.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

/// Loss terms on `data`, with centroids taken from `reference` features.
/// The noisy term measures `data` features against those centroids.
pub fn set_losses(model: &Model, data: &Dataset, reference: &Dataset, cfg: &LossConfig) -> Result<LossBreakdown> {
    let depth = model.backbone.depth();
    let fbc = features_by_class(model, data, depth)?;
    let centroids = batch_centroid(&features_by_class(model, reference, depth)?)?;
    let own = batch_centroid(&fbc)?;
    let softmax = losses::softmax_loss(model, data.values(), data.len(), data.labels())?;
    let compact = losses::compact_loss(&fbc, &own, cfg.delta_v)?;
    let margin = losses::margin_loss(&model.head, &own, cfg.delta_d)?;
    let reg = losses::reg_loss(&own)?;
    let noisy = losses::noisy_align_loss(&fbc, &centroids, cfg.delta_v)?;
    let mut b = LossBreakdown {
        softmax,
        compact,
        margin,
        reg,
        noisy,
        total: 0.0,
    };
    b.total = b.weighted(cfg).iter().sum::<f64>();
    Ok(b)
}

pub struct EvalRequest<'a> {
    pub run_id: &'a str,
    pub method: &'a str,
    pub seed: u64,
    pub perturbations: &'a [PerturbationSpec],
    pub repeats: usize,
    pub loss: &'a LossConfig,
}

/// Clean accuracy first, then every perturbation `repeats` times; repeat `r`
/// of perturbation `p` draws from a seed keyed by `(p, r)`.
pub fn evaluate(model: &Model, test: &Dataset, req: &EvalRequest) -> Result<Vec<MetricsRecord>> {
    if test.sample_len() != model.input_dim() {
        return Err(HarnessError::Invalid(format!(
            "samples of length {} for a model expecting {}",
            test.sample_len(),
            model.input_dim()
        )));
    }
    if test.is_empty() {
        return Err(HarnessError::Invalid("test set is empty".into()));
    }
    for p in req.perturbations {
        p.validate(test.grid())?;
    }
    let record = |perturbation: String, repeat: usize, data: &Dataset| -> Result<MetricsRecord> {
        Ok(MetricsRecord {
            run_id: req.run_id.to_string(),
            method: req.method.to_string(),
            seed: req.seed,
            perturbation,
            repeat,
            accuracy: accuracy(model, data)?,
            losses: set_losses(model, data, test, req.loss)?,
        })
    };
    let mut out = vec![record(CLEAN.to_string(), 0, test)?];
    let base = derive_seed(req.seed, TAG_EVAL);
    for (pi, spec) in req.perturbations.iter().enumerate() {
        for r in 0..req.repeats.max(1) {
            let seed = derive_seed(derive_seed(base, pi as u64), r as u64);
            out.push(record(spec.to_string(), r, &test.perturbed(spec, seed)?)?);
        }
    }
    Ok(out)
}
