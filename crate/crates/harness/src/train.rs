//! Training loop for the four baselines and the centroid-regularised method.

use noisecurve_core::centroids::{batch_centroid, CentroidState};
use noisecurve_core::data::Dataset;
use noisecurve_core::diffcore::{Tape, Tensor, Var};
use noisecurve_core::losses::{self, graph, ClassBatch, LossBreakdown};
use noisecurve_core::model::{Activation, Model, ModelVars};
use noisecurve_core::perturb::apply_keyed;
use noisecurve_core::rng::{derive_seed, NoiseStream};
use noisecurve_core::theory::features_by_class;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method, OptimConfig};
use crate::error::{HarnessError, Result};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_NOISE: u64 = 3;

/// Mean per-batch losses over one epoch, plus the hinge terms on the whole
/// training set at the epoch's end.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub stability: f64,
    pub train_compact: f64,
    pub train_margin: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub centroids: Option<CentroidState>,
    pub log: Vec<EpochLog>,
}

pub fn layer_plan(cfg: &ExperimentConfig, input_dim: usize) -> (Vec<usize>, Vec<Activation>) {
    let mut dims = vec![input_dim];
    dims.extend(&cfg.hidden);
    dims.push(cfg.feature_dim);
    let mut acts = vec![Activation::Relu; cfg.hidden.len()];
    acts.push(cfg.feature_activation);
    (dims, acts)
}

pub fn init_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<Model> {
    let (dims, acts) = layer_plan(cfg, data.sample_len());
    Ok(Model::init(&dims, &acts, data.class_count(), derive_seed(cfg.seed, TAG_INIT))?)
}

/// SGD with momentum, optional Nesterov and L2 weight decay folded into the
/// gradient, matching the common deep-learning formulation.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
    buffers: Option<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            nesterov: cfg.nesterov,
            weight_decay: cfg.weight_decay,
            buffers: None,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        let first = self.buffers.is_none();
        let buffers = self
            .buffers
            .get_or_insert_with(|| grads.iter().map(|g| vec![0.0; g.len()]).collect());
        for ((p, g), buf) in params.into_iter().zip(grads).zip(buffers.iter_mut()) {
            for ((w, &gi), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let mut d = gi + self.weight_decay * *w;
                if self.momentum != 0.0 {
                    *b = if first { d } else { self.momentum * *b + d };
                    d = if self.nesterov { d + self.momentum * *b } else { *b };
                }
                *w -= lr * d;
            }
        }
    }
}

fn noisy_batch(cfg: &ExperimentConfig, data: &Dataset, rows: &[usize], epoch: usize) -> Result<Vec<f64>> {
    let spec = cfg.train_noise.as_ref().expect("validated: method needs noise");
    let seed = derive_seed(derive_seed(cfg.seed, TAG_NOISE), epoch as u64);
    let mut out = Vec::with_capacity(rows.len() * data.sample_len());
    for &i in rows {
        out.extend(apply_keyed(spec, data.sample(i), data.grid(), seed, i as u64)?);
    }
    Ok(out)
}

struct StepLoss {
    loss: Var,
    breakdown: LossBreakdown,
    stability: f64,
}

fn record_step(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ExperimentConfig,
    state: Option<&mut CentroidState>,
    clean: Tensor,
    noisy: Option<Tensor>,
    labels: &[usize],
    class_count: usize,
) -> Result<StepLoss> {
    let forward = |tape: &mut Tape, x: Tensor| -> Result<(Var, Var)> {
        let x = tape.constant(x);
        let q = vars.features(tape, x)?;
        let z = vars.logits(tape, q)?;
        Ok((q, z))
    };
    let softmax_only = |tape: &mut Tape, loss: Var| StepLoss {
        breakdown: LossBreakdown {
            softmax: tape.scalar(loss),
            total: tape.scalar(loss),
            ..LossBreakdown::default()
        },
        loss,
        stability: 0.0,
    };
    match cfg.method {
        Method::Normal => {
            let (_, z) = forward(tape, clean)?;
            let l = graph::softmax(tape, z, labels)?;
            Ok(softmax_only(tape, l))
        }
        Method::NoisyOnly => {
            let (_, z) = forward(tape, noisy.expect("noise drawn"))?;
            let l = graph::softmax(tape, z, labels)?;
            Ok(softmax_only(tape, l))
        }
        Method::CleanPlusNoisy => {
            let noisy = noisy.expect("noise drawn");
            let rows = clean.rows() + noisy.rows();
            let cols = clean.cols();
            let mut both = clean.into_data();
            both.extend_from_slice(noisy.data());
            let (_, z) = forward(tape, Tensor::matrix(rows, cols, both)?)?;
            let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();
            let l = graph::softmax(tape, z, &doubled)?;
            Ok(softmax_only(tape, l))
        }
        Method::Stability => {
            let (q, z) = forward(tape, clean)?;
            let (qn, _) = forward(tape, noisy.expect("noise drawn"))?;
            let ls = graph::softmax(tape, z, labels)?;
            let diff = tape.sub(q, qn)?;
            let dist = tape.row_norms(diff)?;
            let stab = tape.mean(dist)?;
            let weighted = tape.scale(stab, cfg.stability_weight)?;
            let loss = tape.add(ls, weighted)?;
            Ok(StepLoss {
                breakdown: LossBreakdown {
                    softmax: tape.scalar(ls),
                    total: tape.scalar(loss),
                    ..LossBreakdown::default()
                },
                loss,
                stability: tape.scalar(stab),
            })
        }
        Method::Ours => {
            let state = state.expect("ours keeps centroids");
            let batch = ClassBatch::from_labels(labels, class_count)?;
            let (q, z) = forward(tape, clean)?;
            let qn = match noisy {
                Some(x) if cfg.loss.lambda != 0.0 => Some(forward(tape, x)?.0),
                _ => None,
            };
            let views = state.views(tape, q, &batch)?;
            let terms = graph::total(tape, vars, q, z, qn, labels, &batch, &views, &cfg.loss)?;
            state.commit(&views);
            Ok(StepLoss {
                loss: terms.total,
                breakdown: terms.breakdown(tape),
                stability: 0.0,
            })
        }
    }
}

/// Hinge losses and accuracy over the full set, with centroids recomputed
/// from all of its features.
pub fn full_set_hinges(model: &Model, data: &Dataset, delta_v: f64, delta_d: f64) -> Result<(f64, f64)> {
    let fbc = features_by_class(model, data, model.backbone.depth())?;
    let centroids = batch_centroid(&fbc)?;
    let compact = losses::compact_loss(&fbc, &centroids, delta_v)?;
    let margin = losses::margin_loss(&model.head, &centroids, delta_d)?;
    Ok((compact, margin))
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict_batch(data.values(), data.len())?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Trains from the seeded initialisation. Fully determined by `cfg` and `data`.
pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(HarnessError::Invalid("training set is empty".into()));
    }
    if let Some(spec) = &cfg.train_noise {
        spec.validate(data.grid())?;
    }
    let mut model = init_model(cfg, data)?;
    let mut state = match cfg.method {
        Method::Ours => Some(CentroidState::new(cfg.centroid_mode, cfg.centroid_gamma, cfg.feature_dim)?),
        _ => None,
    };
    let mut sgd = Sgd::new(&cfg.optim);
    let mut log = Vec::with_capacity(cfg.optim.epochs);
    let n = data.len();
    let width = data.sample_len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.optim.epochs {
        let lr = cfg.optim.lr_at(epoch);
        let mut rng = NoiseStream::keyed(derive_seed(cfg.seed, TAG_SHUFFLE), epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 7];
        let mut batches = 0usize;
        for (b, rows) in order.chunks(cfg.optim.batch_size).enumerate() {
            let mut x = Vec::with_capacity(rows.len() * width);
            for &i in rows {
                x.extend_from_slice(data.sample(i));
            }
            let labels: Vec<usize> = rows.iter().map(|&i| data.labels()[i]).collect();
            let noisy = if cfg.method.needs_noise() {
                Some(Tensor::matrix(rows.len(), width, noisy_batch(cfg, data, rows, epoch)?)?)
            } else {
                None
            };
            let diverged = |detail: String| HarnessError::Diverged { epoch, batch: b, detail };

            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let step = record_step(
                &mut tape,
                &vars,
                cfg,
                state.as_mut(),
                Tensor::matrix(rows.len(), width, x)?,
                noisy,
                &labels,
                data.class_count(),
            )?;
            if !step.breakdown.total.is_finite() {
                return Err(diverged(format!("loss is {}", step.breakdown.total)));
            }
            let grads = tape.backward(step.loss)?;
            let grads: Vec<Tensor> = vars.params().iter().map(|v| grads.wrt(*v)).collect();
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            sgd.step(model.params_mut(), &grads, lr);
            if model.params().iter().any(|p| !p.all_finite()) {
                return Err(diverged("non-finite parameter after update".into()));
            }

            let bd = step.breakdown;
            for (s, v) in sums.iter_mut().zip([
                bd.softmax,
                bd.compact,
                bd.margin,
                bd.reg,
                bd.noisy,
                bd.total,
                step.stability,
            ]) {
                *s += v;
            }
            batches += 1;
        }
        let k = batches.max(1) as f64;
        let (train_compact, train_margin) = full_set_hinges(&model, data, cfg.loss.delta_v, cfg.loss.delta_d)?;
        log.push(EpochLog {
            epoch,
            lr,
            losses: LossBreakdown {
                softmax: sums[0] / k,
                compact: sums[1] / k,
                margin: sums[2] / k,
                reg: sums[3] / k,
                noisy: sums[4] / k,
                total: sums[5] / k,
            },
            stability: sums[6] / k,
            train_compact,
            train_margin,
            train_accuracy: accuracy(&model, data)?,
        });
    }
    Ok(Trained {
        model,
        centroids: state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::OptimConfig;

    #[test]
    fn sgd_matches_hand_rolled_nesterov() {
        let cfg = OptimConfig {
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        let mut sgd = Sgd::new(&cfg);
        let mut p = Tensor::vector(vec![1.0]);
        let g = [Tensor::vector(vec![0.5])];
        sgd.step(vec![&mut p], &g, 0.1);
        // d = 0.5 + 0.1 = 0.6, buf = 0.6, step = 0.6 + 0.54
        assert!((p.data()[0] - (1.0 - 0.1 * 1.14)).abs() < 1e-15);
        let w1 = p.data()[0];
        sgd.step(vec![&mut p], &g, 0.1);
        let d = 0.5 + 0.1 * w1;
        let buf = 0.9 * 0.6 + d;
        assert!((p.data()[0] - (w1 - 0.1 * (d + 0.9 * buf))).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_steps_at_milestones() {
        let cfg = OptimConfig {
            epochs: 10,
            ..OptimConfig::default()
        };
        assert_eq!(cfg.milestones(), vec![3, 6, 8]);
        assert_eq!(cfg.lr_at(2), 1e-3);
        assert!((cfg.lr_at(3) - 2e-4).abs() < 1e-18);
        assert!((cfg.lr_at(9) - 1e-3 * 0.008).abs() < 1e-18);
    }
}
