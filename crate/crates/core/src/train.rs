//! Reference training: full-precision Adam, then int8 quantization.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{quantize_shaped, Layer, LayerKind, ModelMeta, QuantizedModel, Role};
use crate::nn::{evaluate_accuracy, ExitSelector, FloatLayer, FloatNet, LossExits};
use crate::rng::{stream, Stage};

/// One entry of an architecture description. Widths of exits and layer norms
/// follow from the surrounding layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default)]
        role: Role,
    },
    Relu,
    LayerNorm,
    SoftmaxExit,
}

/// Two 64-unit hidden projections with an exit after each.
pub fn desk_arch() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { units: 64, role: Role::AttnQ },
        LayerSpec::Relu,
        LayerSpec::SoftmaxExit,
        LayerSpec::Dense { units: 64, role: Role::Ffn },
        LayerSpec::Relu,
        LayerSpec::SoftmaxExit,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training accuracy of the quantized model below this is an error.
    pub accuracy_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, learning_rate: 0.01, batch_size: 64, accuracy_floor: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Trains with cross-entropy summed over every exit, so early exits are usable
/// classifiers, then quantizes each weight tensor.
pub fn train_reference(
    arch: &[LayerSpec],
    data: &Dataset,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(QuantizedModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Parameter("batch size and learning rate must be positive".into()));
    }
    let mut net = init_net(arch, data.dim(), data.num_classes(), seed)?;
    let mut adam = Adam::new(&net, cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = stream(seed, Stage::Shuffle);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = net.zero_grads();
            for &i in batch {
                epoch_loss += net.backprop(data.row(i), data.labels()[i], LossExits::All, &mut grads);
            }
            let inv = 1.0 / batch.len() as f64;
            adam.step(&mut net, &grads, inv);
        }
        final_loss = epoch_loss / data.len() as f64;
        if !final_loss.is_finite() {
            return Err(Error::TrainingFailure { accuracy: 0.0, floor: cfg.accuracy_floor });
        }
    }

    let meta = ModelMeta { seed, dataset_id: data.fingerprint(), train_accuracy: None };
    let mut model = quantize_net(&net, meta)?;
    let acc = evaluate_accuracy(&model, data, ExitSelector::Final)?;
    model.meta.train_accuracy = Some(acc);
    if acc < cfg.accuracy_floor {
        return Err(Error::TrainingFailure { accuracy: acc, floor: cfg.accuracy_floor });
    }
    Ok((model, TrainReport { train_accuracy: acc, final_loss }))
}

fn init_net(arch: &[LayerSpec], input: usize, classes: usize, seed: u64) -> Result<FloatNet> {
    if arch.is_empty() {
        return Err(Error::Config("empty architecture".into()));
    }
    if arch.last() != Some(&LayerSpec::SoftmaxExit) {
        return Err(Error::Config("architecture must end with softmax_exit".into()));
    }
    let mut rng = stream(seed, Stage::Init);
    let mut width = input;
    let mut layers = Vec::with_capacity(arch.len());
    for spec in arch {
        let layer = match *spec {
            LayerSpec::Dense { units, role } => {
                if units == 0 {
                    return Err(Error::Config("dense layer with zero units".into()));
                }
                let l = he_layer(LayerKind::Dense, role, units, width, &mut rng);
                width = units;
                l
            }
            LayerSpec::SoftmaxExit => he_layer(LayerKind::SoftmaxExit, Role::Generic, classes, width, &mut rng),
            LayerSpec::Relu => FloatLayer { kind: LayerKind::Relu, role: Role::Generic, w: vec![], b: vec![], shape: vec![] },
            LayerSpec::LayerNorm => FloatLayer {
                kind: LayerKind::LayerNorm,
                role: Role::Norm,
                w: vec![1.0; width],
                b: vec![0.0; width],
                shape: vec![width],
            },
        };
        layers.push(layer);
    }
    Ok(FloatNet { layers })
}

fn he_layer(kind: LayerKind, role: Role, out: usize, inp: usize, rng: &mut impl rand::Rng) -> FloatLayer {
    let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("finite std");
    let w = (0..out * inp).map(|_| normal.sample(rng)).collect();
    FloatLayer { kind, role, w, b: vec![0.0; out], shape: vec![out, inp] }
}

fn quantize_net(net: &FloatNet, meta: ModelMeta) -> Result<QuantizedModel> {
    let layers = net
        .layers
        .iter()
        .map(|l| {
            Ok(match l.kind {
                LayerKind::Relu => Layer::relu(),
                LayerKind::Dense => Layer::dense(quantize_shaped(&l.w, l.shape.clone())?, l.b.clone(), l.role),
                LayerKind::LayerNorm => Layer::layer_norm(quantize_shaped(&l.w, l.shape.clone())?, l.b.clone()),
                LayerKind::SoftmaxExit => Layer::exit(quantize_shaped(&l.w, l.shape.clone())?, l.b.clone()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedModel::new(layers, meta)
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<(Vec<f64>, Vec<f64>)>,
    v: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &FloatNet, lr: f64) -> Self {
        let zeros: Vec<_> = net.layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect();
        Self { lr, t: 0, m: zeros.clone(), v: zeros }
    }

    fn step(&mut self, net: &mut FloatNet, grads: &[crate::nn::FloatGrad], scale: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let (mw, mb) = &mut self.m[i];
            let (vw, vb) = &mut self.v[i];
            update(&mut layer.w, &grads[i].w, mw, vw, scale, self.lr, c1, c2);
            update(&mut layer.b, &grads[i].b, mb, vb, scale, self.lr, c1, c2);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], scale: f64, lr: f64, c1: f64, c2: f64) {
    for j in 0..p.len() {
        let gj = g[j] * scale;
        m[j] = Adam::B1 * m[j] + (1.0 - Adam::B1) * gj;
        v[j] = Adam::B2 * v[j] + (1.0 - Adam::B2) * gj * gj;
        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Adam::EPS);
    }
}
