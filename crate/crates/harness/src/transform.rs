//! Prediction-preserving rescaling and the invariance it should exhibit.

use noisecurve_core::data::Dataset;
use noisecurve_core::model::Model;
use noisecurve_core::theory::{geometry_of, FeaturesByClass};
use serde::Serialize;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransformReport {
    pub nu: f64,
    pub samples: usize,
    /// Fraction of inputs whose prediction is unchanged.
    pub agreement: f64,
    pub margin_ratio: f64,
    pub dispersion_ratio: f64,
    /// Cosine between the parameter displacements of `T_ν` and `T_{1/ν}`;
    /// `None` for `ν = 1`, where both displacements vanish.
    pub displacement_cosine: Option<f64>,
}

fn grouped(model: &Model, x: &[f64], rows: usize, labels: &[usize]) -> Result<FeaturesByClass> {
    let q = model.features_batch(x, rows)?;
    let mut out = FeaturesByClass::new();
    for (i, &y) in labels.iter().enumerate() {
        out.entry(y).or_default().push(q.row(i).to_vec());
    }
    Ok(out)
}

fn displacement(a: &Model, b: &Model) -> Vec<f64> {
    a.flat_params().iter().zip(b.flat_params()).map(|(x, y)| x - y).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Applies `T_ν` and compares predictions and feature geometry on `data`,
/// grouping features by the original model's predictions.
pub fn transform_report(model: &Model, data: &Dataset, nu: f64) -> Result<(Model, TransformReport)> {
    if data.is_empty() {
        return Err(HarnessError::Invalid("transform report needs samples".into()));
    }
    let scaled = model.scale_transform(nu)?;
    let n = data.len();
    let before = model.predict_batch(data.values(), n)?;
    let after = scaled.predict_batch(data.values(), n)?;
    let agreement = before.iter().zip(&after).filter(|(a, b)| a == b).count() as f64 / n as f64;
    let g0 = geometry_of(&model.head, &grouped(model, data.values(), n, &before)?)?;
    let g1 = geometry_of(&scaled.head, &grouped(&scaled, data.values(), n, &before)?)?;
    let inverse = model.scale_transform(1.0 / nu)?;
    let report = TransformReport {
        nu,
        samples: n,
        agreement,
        margin_ratio: g1.min_margin / g0.min_margin,
        dispersion_ratio: g1.max_dispersion / g0.max_dispersion,
        displacement_cosine: cosine(&displacement(&scaled, model), &displacement(&inverse, model)),
    };
    Ok((scaled, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use noisecurve_core::data::gen_blobs;
    use noisecurve_core::model::Activation;

    #[test]
    fn identity_scale_keeps_everything() {
        let data = gen_blobs(3, 20, 4, 1.0, 2).unwrap();
        let model = Model::init(&[4, 6, 3], &[Activation::Relu, Activation::None], 3, 5).unwrap();
        let (scaled, r) = transform_report(&model, &data, 1.0).unwrap();
        assert_eq!(scaled, model);
        assert_eq!((r.agreement, r.margin_ratio, r.dispersion_ratio), (1.0, 1.0, 1.0));
        assert_eq!(r.displacement_cosine, None);
    }
}
