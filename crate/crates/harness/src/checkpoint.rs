//! JSON checkpoints holding the architecture, parameters and centroid state.

use std::path::Path;

use noisecurve_core::centroids::CentroidState;
use noisecurve_core::diffcore::Tensor;
use noisecurve_core::losses::LossConfig;
use noisecurve_core::model::{Activation, Backbone, Layer, Model, SoftmaxHead};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub method: String,
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub class_count: usize,
    pub params: Vec<NamedParam>,
    pub loss: LossConfig,
    pub centroids: Option<CentroidState>,
}

fn param_names(depth: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..depth)
        .flat_map(|l| [format!("backbone.{l}.weight"), format!("backbone.{l}.bias")])
        .collect();
    names.push("head.weight".into());
    names.push("head.bias".into());
    names
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        seed: u64,
        method: &str,
        loss: LossConfig,
        centroids: Option<CentroidState>,
    ) -> Self {
        let params = param_names(model.backbone.depth())
            .into_iter()
            .zip(model.params())
            .map(|(name, t)| NamedParam {
                name,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            seed,
            method: method.to_string(),
            layer_dims: model.layer_dims(),
            activations: model.activations(),
            class_count: model.class_count(),
            params,
            loss,
            centroids,
        }
    }

    pub fn model(&self) -> Result<Model> {
        let bad = |m: String| HarnessError::Checkpoint(m);
        if self.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", self.version)));
        }
        let depth = self.activations.len();
        if self.layer_dims.len() != depth + 1 {
            return Err(bad("layer_dims and activations disagree".into()));
        }
        let names = param_names(depth);
        if self.params.len() != names.len() {
            return Err(bad(format!("expected {} parameters, found {}", names.len(), self.params.len())));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for (p, name) in self.params.iter().zip(&names) {
            if &p.name != name {
                return Err(bad(format!("expected parameter `{name}`, found `{}`", p.name)));
            }
            tensors.push(Tensor::new(p.shape.clone(), p.values.clone())?);
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(depth);
        for &act in &self.activations {
            let w = it.next().expect("counted above");
            let b = it.next().expect("counted above");
            layers.push(Layer::new(w, b, act)?);
        }
        let head = SoftmaxHead::new(it.next().expect("counted above"), it.next().expect("counted above"))?;
        let model = Model::new(Backbone::new(layers)?, head)?;
        if model.layer_dims() != self.layer_dims || model.class_count() != self.class_count {
            return Err(bad("parameter shapes disagree with the recorded architecture".into()));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let model = Model::init(&[3, 5, 2], &[Activation::Relu, Activation::None], 3, 11).unwrap();
        let ck = Checkpoint::from_model(&model, 11, "normal", LossConfig::default(), None);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model().unwrap(), model);
    }

    #[test]
    fn rejects_renamed_parameters() {
        let model = Model::init(&[2, 2], &[Activation::None], 2, 0).unwrap();
        let mut ck = Checkpoint::from_model(&model, 0, "normal", LossConfig::default(), None);
        ck.params[0].name = "w".into();
        assert!(matches!(ck.model(), Err(HarnessError::Checkpoint(_))));
    }
}
