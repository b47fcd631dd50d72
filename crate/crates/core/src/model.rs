//! MLP backbone, affine softmax head and decision-hyperplane geometry.

use serde::{Deserialize, Serialize};

use crate::diffcore::{affine_rows, argmax, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::NoiseStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        if self == Activation::Relu {
            for x in v {
                if !(*x > 0.0) {
                    *x = 0.0;
                }
            }
        }
    }
}

/// Fully-connected layer `act(W x + b)` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Dimension(format!(
                "layer weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = affine_rows(
            x,
            rows,
            self.in_dim(),
            self.weight.data(),
            self.out_dim(),
            self.bias.data(),
        );
        self.activation.apply(&mut y);
        y
    }
}

/// Feature extractor `f_θ`; its last layer's output is the feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    layers: Vec<Layer>,
}

impl Backbone {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("backbone needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    k,
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }
}

/// Affine head `z = W q + b` producing `C` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl SoftmaxHead {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Dimension(format!(
                "head weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        if weight.shape()[0] < 2 {
            return Err(Error::Dimension("a softmax head needs at least two classes".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn class_count(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn logits(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.feature_dim() {
            return Err(Error::Dimension(format!(
                "feature of length {} for head expecting {}",
                q.len(),
                self.feature_dim()
            )));
        }
        Ok(affine_rows(
            q,
            1,
            self.feature_dim(),
            self.weight.data(),
            self.class_count(),
            self.bias.data(),
        ))
    }

    /// Largest row norm, `max_j ‖W_j‖`.
    pub fn max_row_norm(&self) -> f64 {
        (0..self.class_count())
            .map(|j| self.weight.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `(W_c − W_i, b_c − b_i)` after checking that the pair has a proper boundary.
    pub(crate) fn boundary(&self, c: usize, i: usize) -> Result<(Vec<f64>, f64, f64)> {
        let k = self.class_count();
        if c >= k || i >= k || c == i {
            return Err(Error::InvalidArgument(format!(
                "class pair ({c}, {i}) with {k} classes"
            )));
        }
        let diff: Vec<f64> = self
            .weight
            .row(c)
            .iter()
            .zip(self.weight.row(i))
            .map(|(a, b)| a - b)
            .collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let db = self.bias.data()[c] - self.bias.data()[i];
        if norm == 0.0 {
            return Err(if db == 0.0 {
                Error::DegenerateBoundary { c, i }
            } else {
                Error::EmptyBoundary { c, i }
            });
        }
        Ok((diff, db, norm))
    }

    /// Euclidean distance from `q` to the boundary `P_ci` where `z_c = z_i`.
    pub fn hyperplane_distance(&self, q: &[f64], c: usize, i: usize) -> Result<f64> {
        if q.len() != self.feature_dim() {
            return Err(Error::Dimension(format!(
                "feature of length {} for head expecting {}",
                q.len(),
                self.feature_dim()
            )));
        }
        let (diff, db, norm) = self.boundary(c, i)?;
        let dot: f64 = diff.iter().zip(q).map(|(a, b)| a * b).sum();
        Ok((dot + db).abs() / norm)
    }

    /// Fails when any class pair has coinciding weight rows.
    pub fn check_boundaries(&self) -> Result<()> {
        let k = self.class_count();
        for c in 0..k {
            for i in (c + 1)..k {
                self.boundary(c, i)?;
            }
        }
        Ok(())
    }
}

/// Softmax classifier: backbone followed by the affine head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub head: SoftmaxHead,
}

/// Tape handles for every model parameter, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub layers: Vec<(Var, Var, Activation)>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ModelVars {
    pub fn params(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flat_map(|(w, b, _)| [*w, *b]).collect();
        out.push(self.head_weight);
        out.push(self.head_bias);
        out
    }

    /// Backbone parameters only (`θ` without the head).
    pub fn backbone_params(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|(w, b, _)| [*w, *b]).collect()
    }

    /// Records `f_θ(x)` for a vector or a `[rows, in]` batch.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (w, b, act) in &self.layers {
            h = tape.affine(h, *w, *b)?;
            if *act == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn logits(&self, tape: &mut Tape, q: Var) -> Result<Var> {
        tape.affine(q, self.head_weight, self.head_bias)
    }
}

impl Model {
    pub fn new(backbone: Backbone, head: SoftmaxHead) -> Result<Self> {
        if head.feature_dim() != backbone.feature_dim() {
            return Err(Error::Dimension(format!(
                "head expects features of size {}, backbone produces {}",
                head.feature_dim(),
                backbone.feature_dim()
            )));
        }
        Ok(Self { backbone, head })
    }

    /// Seeded initialisation, every weight and bias uniform in `±1/√fan_in`.
    ///
    /// `layer_dims` is `[input, hidden…, feature]`; `activations` has one
    /// entry per backbone layer.
    pub fn init(layer_dims: &[usize], activations: &[Activation], class_count: usize, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || activations.len() != layer_dims.len() - 1 {
            return Err(Error::Dimension(format!(
                "{} layer dims need {} activations, got {}",
                layer_dims.len(),
                layer_dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension("layer dimensions must be positive".into()));
        }
        let uniform_layer = |fan_in: usize, fan_out: usize, key: u64| {
            let mut rng = NoiseStream::keyed(seed, key);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
            let b: Vec<f64> = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
            (
                Tensor::from_parts(vec![fan_out, fan_in], w),
                Tensor::vector(b),
            )
        };
        let mut layers = Vec::with_capacity(activations.len());
        for (k, act) in activations.iter().enumerate() {
            let (w, b) = uniform_layer(layer_dims[k], layer_dims[k + 1], k as u64);
            layers.push(Layer::new(w, b, *act)?);
        }
        let d = *layer_dims.last().unwrap();
        let (hw, hb) = uniform_layer(d, class_count, activations.len() as u64);
        Self::new(Backbone::new(layers)?, SoftmaxHead::new(hw, hb)?)
    }

    pub fn class_count(&self) -> usize {
        self.head.class_count()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// Layer widths `[input, …, feature]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.backbone.layers().iter().map(Layer::out_dim));
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.backbone.layers().iter().map(|l| l.activation).collect()
    }

    fn check_input(&self, len: usize, rows: usize) -> Result<()> {
        if len != rows * self.input_dim() {
            return Err(Error::Dimension(format!(
                "input of {} values for {} rows of width {}",
                len,
                rows,
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Activation after backbone layer `layer` (1-based) for `rows` inputs.
    pub fn features_at_layer_batch(&self, x: &[f64], rows: usize, layer: usize) -> Result<Vec<f64>> {
        if layer == 0 || layer > self.backbone.depth() {
            return Err(Error::InvalidArgument(format!(
                "layer index {} outside 1..={}",
                layer,
                self.backbone.depth()
            )));
        }
        self.check_input(x.len(), rows)?;
        let mut h = x.to_vec();
        for l in &self.backbone.layers()[..layer] {
            h = l.forward_rows(&h, rows);
        }
        Ok(h)
    }

    pub fn features_at_layer(&self, x: &[f64], layer: usize) -> Result<Vec<f64>> {
        self.features_at_layer_batch(x, 1, layer)
    }

    /// `q = f_θ(x)`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.features_at_layer_batch(x, 1, self.backbone.depth())
    }

    /// Features for `rows` stacked inputs, as a `[rows, d]` tensor.
    pub fn features_batch(&self, x: &[f64], rows: usize) -> Result<Tensor> {
        let q = self.features_at_layer_batch(x, rows, self.backbone.depth())?;
        Ok(Tensor::from_parts(vec![rows, self.feature_dim()], q))
    }

    pub fn logits(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.head.logits(q)
    }

    pub fn logits_of_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.head.logits(&self.features(x)?)
    }

    /// `argmax_i z_i`, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits_of_input(x)?))
    }

    pub fn predict_batch(&self, x: &[f64], rows: usize) -> Result<Vec<usize>> {
        let q = self.features_batch(x, rows)?;
        let c = self.class_count();
        let z = affine_rows(
            q.data(),
            rows,
            self.feature_dim(),
            self.head.weight.data(),
            c,
            self.head.bias.data(),
        );
        Ok(z.chunks(c).map(argmax).collect())
    }

    /// Prediction-preserving rescaling: the last backbone layer `(W⁻, b⁻)` and
    /// the head bias are multiplied by `nu`, everything else is untouched.
    pub fn scale_transform(&self, nu: f64) -> Result<Model> {
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {nu}")));
        }
        let mut out = self.clone();
        let last = out.backbone.layers.last_mut().expect("backbone is never empty");
        for v in last.weight.data_mut().iter_mut().chain(last.bias.data_mut()) {
            *v *= nu;
        }
        for v in out.head.bias.data_mut() {
            *v *= nu;
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self
            .backbone
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .backbone
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// All parameters concatenated in [`Model::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        self.register_with(tape, true)
    }

    /// Registers parameters as constants, for input-space derivatives.
    pub fn register_frozen(&self, tape: &mut Tape) -> ModelVars {
        self.register_with(tape, false)
    }

    fn register_with(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .backbone
            .layers
            .iter()
            .map(|l| (put(&l.weight), put(&l.bias), l.activation))
            .collect();
        let head_weight = put(&self.head.weight);
        let head_bias = put(&self.head.bias);
        ModelVars {
            layers,
            head_weight,
            head_bias,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, d).unwrap()
    }

    fn one_layer(bias: Vec<f64>, act: Activation) -> Model {
        let layer = Layer::new(eye(2), Tensor::vector(bias), act).unwrap();
        let head = SoftmaxHead::new(eye(2), Tensor::vector(vec![0.0, 0.0])).unwrap();
        Model::new(Backbone::new(vec![layer]).unwrap(), head).unwrap()
    }

    #[test]
    fn identity_backbone_features() {
        let m = one_layer(vec![0.0, 0.0], Activation::None);
        assert_eq!(m.features(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(m.features_at_layer(&[1.0, 2.0], 1).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn affine_relu_features() {
        let m = one_layer(vec![-3.0, 0.0], Activation::Relu);
        assert_eq!(m.features(&[1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn dimension_and_layer_errors() {
        let m = one_layer(vec![0.0, 0.0], Activation::None);
        assert!(m.features(&[1.0]).is_err());
        assert!(m.features_at_layer(&[1.0, 2.0], 0).is_err());
        assert!(m.features_at_layer(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn predict_argmax_and_tie_rule() {
        let m = one_layer(vec![0.0, 0.0], Activation::None);
        assert_eq!(m.predict(&[0.1, 0.9]).unwrap(), 1);
        assert_eq!(m.predict(&[0.5, 0.5]).unwrap(), 0);
    }

    #[test]
    fn hyperplane_distance_hand_values() {
        let head = SoftmaxHead::new(
            Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(head.hyperplane_distance(&[2.0, 0.0], 0, 1).unwrap(), 2.0);
        assert_eq!(head.hyperplane_distance(&[0.0, 5.0], 0, 1).unwrap(), 0.0);
        assert_eq!(
            head.hyperplane_distance(&[2.0, 1.0], 0, 1).unwrap(),
            head.hyperplane_distance(&[2.0, 1.0], 1, 0).unwrap()
        );
    }

    #[test]
    fn degenerate_and_empty_boundaries() {
        let w = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let same = SoftmaxHead::new(w.clone(), Tensor::vector(vec![0.5, 0.5])).unwrap();
        assert!(matches!(
            same.hyperplane_distance(&[1.0], 0, 1),
            Err(Error::DegenerateBoundary { c: 0, i: 1 })
        ));
        let shifted = SoftmaxHead::new(w, Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert!(matches!(
            shifted.hyperplane_distance(&[1.0], 0, 1),
            Err(Error::EmptyBoundary { .. })
        ));
    }

    #[test]
    fn scale_by_one_is_bitwise_identity() {
        let m = Model::init(&[3, 5, 4], &[Activation::Relu, Activation::None], 3, 11).unwrap();
        assert_eq!(m.scale_transform(1.0).unwrap(), m);
        assert!(m.scale_transform(0.0).is_err());
        assert!(m.scale_transform(-2.0).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Model::init(&[4, 6, 3], &[Activation::Relu, Activation::None], 2, 5).unwrap();
        let b = Model::init(&[4, 6, 3], &[Activation::Relu, Activation::None], 2, 5).unwrap();
        let c = Model::init(&[4, 6, 3], &[Activation::Relu, Activation::None], 2, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / 2f64;
        assert!(a.backbone.layers()[0].weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn tape_features_match_plain_evaluation() {
        let m = Model::init(&[3, 7, 4], &[Activation::Relu, Activation::Relu], 3, 2).unwrap();
        let x = [0.3, -1.1, 0.8];
        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        let xv = tape.constant(Tensor::vector(x.to_vec()));
        let q = vars.features(&mut tape, xv).unwrap();
        assert_eq!(tape.value(q).data(), m.features(&x).unwrap().as_slice());
    }
}
