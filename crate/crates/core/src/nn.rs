//! Forward inference, accuracy and backpropagation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LayerKind, QuantizedModel, QuantizedTensor, Role};

pub const LN_EPS: f64 = 1e-5;

/// Which exit's logits to score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitSelector {
    #[default]
    Final,
    /// Position in the model's exit list (0 = earliest exit).
    Exit(usize),
}

/// Logits of every exit, in exit order.
pub fn forward(model: &QuantizedModel, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_input(model, x.len())?;
    let mut outs = Vec::with_capacity(model.exits().len());
    let mut h = x.to_vec();
    for layer in model.layers() {
        match layer.kind {
            LayerKind::SoftmaxExit => {
                outs.push(dense(layer.weights.as_ref().expect("exit weights"), &layer.bias, &h))
            }
            _ => h = apply_hidden(layer.kind, layer.weights.as_ref(), &layer.bias, &h),
        }
    }
    Ok(outs)
}

fn check_input(model: &QuantizedModel, n: usize) -> Result<()> {
    if n != model.input_dim() {
        return Err(Error::Dimension(format!(
            "input has {n} features, model expects {}",
            model.input_dim()
        )));
    }
    Ok(())
}

/// One non-exit layer applied to `h`.
pub(crate) fn apply_hidden(kind: LayerKind, w: Option<&QuantizedTensor>, bias: &[f64], h: &[f64]) -> Vec<f64> {
    match kind {
        LayerKind::Dense => dense(w.expect("dense weights"), bias, h),
        LayerKind::Relu => h.iter().map(|v| v.max(0.0)).collect(),
        LayerKind::LayerNorm => {
            let g = w.expect("layer_norm gain");
            let (xhat, _) = normalize(h);
            xhat.iter().enumerate().map(|(i, x)| g.dequantized(i) * x + bias[i]).collect()
        }
        LayerKind::SoftmaxExit => h.to_vec(),
    }
}

/// Runs layers `start..` on activation `h` and returns the final exit's
/// logits, skipping intermediate exit heads.
pub(crate) fn final_logits_from(model: &QuantizedModel, start: usize, h: &[f64]) -> Vec<f64> {
    let layers = model.layers();
    let last = layers.len() - 1;
    let mut cur = h.to_vec();
    for layer in &layers[start..last] {
        if layer.kind != LayerKind::SoftmaxExit {
            cur = apply_hidden(layer.kind, layer.weights.as_ref(), &layer.bias, &cur);
        }
    }
    let head = &layers[last];
    dense(head.weights.as_ref().expect("exit weights"), &head.bias, &cur)
}

pub(crate) fn dense(w: &QuantizedTensor, bias: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = w.shape[1];
    w.values
        .chunks_exact(cols)
        .zip(bias)
        .map(|(row, b)| row_dot(row, w.scale, x) + b)
        .collect()
}

#[inline]
pub(crate) fn row_dot(row: &[i8], scale: f64, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&w, &v) in row.iter().zip(x) {
        acc += w as f64 * v;
    }
    acc * scale
}

fn normalize(h: &[f64]) -> (Vec<f64>, f64) {
    let n = h.len() as f64;
    let mu = h.iter().sum::<f64>() / n;
    let var = h.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (h.iter().map(|v| (v - mu) * inv).collect(), inv)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn predict(model: &QuantizedModel, x: &[f64], exit: ExitSelector) -> Result<usize> {
    let outs = forward(model, x)?;
    let i = match exit {
        ExitSelector::Final => outs.len() - 1,
        ExitSelector::Exit(i) if i < outs.len() => i,
        ExitSelector::Exit(i) => return Err(Error::Parameter(format!("model has no exit {i}"))),
    };
    Ok(argmax(&outs[i]))
}

/// Fraction of rows whose predicted class at `exit` equals the label.
pub fn evaluate_accuracy(model: &QuantizedModel, data: &Dataset, exit: ExitSelector) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("accuracy over an empty dataset".into()));
    }
    check_input(model, data.dim())?;
    let mut correct = 0usize;
    for (x, y) in data.rows() {
        if predict(model, x, exit)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Gradient with respect to a layer's dequantized weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientTensor {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Mean cross-entropy gradient of the final exit with respect to every
/// layer's dequantized weights (straight-through on the rounding). Entries are
/// `None` for layers without weights.
pub fn compute_gradients(model: &QuantizedModel, data: &Dataset) -> Result<Vec<Option<GradientTensor>>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("gradients over an empty dataset".into()));
    }
    check_input(model, data.dim())?;
    let net = FloatNet::from_model(model);
    let mut grads = net.zero_grads();
    for (x, y) in data.rows() {
        net.backprop(x, y, LossExits::Final, &mut grads);
    }
    let n = data.len() as f64;
    Ok(net
        .layers
        .iter()
        .zip(grads)
        .map(|(l, g)| {
            l.has_weights().then(|| GradientTensor {
                values: g.w.iter().map(|v| v / n).collect(),
                shape: l.shape.clone(),
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LossExits {
    Final,
    All,
}

/// Full-precision mirror of a model, used for training and gradients.
#[derive(Clone, Debug)]
pub(crate) struct FloatLayer {
    pub kind: LayerKind,
    pub role: Role,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub shape: Vec<usize>,
}

impl FloatLayer {
    fn has_weights(&self) -> bool {
        self.kind != LayerKind::Relu
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FloatGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct FloatNet {
    pub layers: Vec<FloatLayer>,
}

struct Trace {
    inputs: Vec<Vec<f64>>,
    logits: Vec<Option<Vec<f64>>>,
    norm: Vec<Option<(Vec<f64>, f64)>>,
}

impl FloatNet {
    pub fn from_model(model: &QuantizedModel) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                let (w, shape) = match &l.weights {
                    Some(t) => (t.dequantize(), t.shape.clone()),
                    None => (vec![], vec![]),
                };
                FloatLayer { kind: l.kind, role: l.role, w, b: l.bias.clone(), shape }
            })
            .collect();
        Self { layers }
    }

    pub fn zero_grads(&self) -> Vec<FloatGrad> {
        self.layers
            .iter()
            .map(|l| FloatGrad { w: vec![0.0; l.w.len()], b: vec![0.0; l.b.len()] })
            .collect()
    }

    fn run(&self, x: &[f64]) -> Trace {
        let n = self.layers.len();
        let mut t = Trace { inputs: Vec::with_capacity(n), logits: vec![None; n], norm: vec![None; n] };
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            t.inputs.push(h.clone());
            match l.kind {
                LayerKind::Dense => h = float_dense(l, &h),
                LayerKind::Relu => h.iter_mut().for_each(|v| *v = v.max(0.0)),
                LayerKind::LayerNorm => {
                    let (xhat, inv) = normalize(&h);
                    h = xhat.iter().enumerate().map(|(j, v)| l.w[j] * v + l.b[j]).collect();
                    t.norm[i] = Some((xhat, inv));
                }
                LayerKind::SoftmaxExit => t.logits[i] = Some(float_dense(l, &h)),
            }
        }
        t
    }

    /// Logits of every exit.
    #[cfg(test)]
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.run(x).logits.into_iter().flatten().collect()
    }

    /// Accumulates one sample's gradient into `grads`; returns its loss.
    pub fn backprop(&self, x: &[f64], y: usize, loss_exits: LossExits, grads: &mut [FloatGrad]) -> f64 {
        let t = self.run(x);
        let last = self.layers.len() - 1;
        let mut loss = 0.0;
        let mut g = vec![0.0; t.inputs[last].len()];
        for i in (0..=last).rev() {
            let l = &self.layers[i];
            let input = &t.inputs[i];
            let gr = &mut grads[i];
            match l.kind {
                LayerKind::SoftmaxExit => {
                    if loss_exits == LossExits::All || i == last {
                        let logits = t.logits[i].as_ref().expect("exit logits");
                        let p = softmax(logits);
                        loss -= p[y].max(f64::MIN_POSITIVE).ln();
                        let mut d = p;
                        d[y] -= 1.0;
                        let back = dense_backward(l, input, &d, gr);
                        g.iter_mut().zip(back).for_each(|(a, b)| *a += b);
                    }
                }
                LayerKind::Dense => g = dense_backward(l, input, &g, gr),
                LayerKind::Relu => {
                    g.iter_mut().zip(input).for_each(|(a, &v)| {
                        if v <= 0.0 {
                            *a = 0.0
                        }
                    });
                }
                LayerKind::LayerNorm => {
                    let (xhat, inv) = t.norm[i].as_ref().expect("norm trace");
                    let n = xhat.len() as f64;
                    let mut dxhat = vec![0.0; xhat.len()];
                    for j in 0..xhat.len() {
                        gr.w[j] += g[j] * xhat[j];
                        gr.b[j] += g[j];
                        dxhat[j] = g[j] * l.w[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n;
                    let m2 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    g = dxhat.iter().zip(xhat).map(|(d, xh)| inv * (d - m1 - xh * m2)).collect();
                }
            }
        }
        loss
    }
}

fn float_dense(l: &FloatLayer, x: &[f64]) -> Vec<f64> {
    let cols = l.shape[1];
    l.w.chunks_exact(cols)
        .zip(&l.b)
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect()
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn dense_backward(l: &FloatLayer, input: &[f64], dout: &[f64], gr: &mut FloatGrad) -> Vec<f64> {
    let cols = l.shape[1];
    let mut din = vec![0.0; cols];
    for (r, &d) in dout.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gr.b[r] += d;
        let row = &l.w[r * cols..(r + 1) * cols];
        let grow = &mut gr.w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            grow[c] += d * input[c];
            din[c] += d * row[c];
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, ModelMeta, QuantizedTensor};

    fn identity_model() -> QuantizedModel {
        let w = QuantizedTensor::new(vec![1, 0, 0, 1], 1.0, vec![2, 2]).unwrap();
        QuantizedModel::new(vec![Layer::exit(w, vec![0.0, 0.0])], ModelMeta::default()).unwrap()
    }

    #[test]
    fn identity_layer_passes_input() {
        let out = forward(&identity_model(), &[3.0, -2.0]).unwrap();
        assert_eq!(out, vec![vec![3.0, -2.0]]);
    }

    #[test]
    fn wrong_input_length() {
        assert!(matches!(forward(&identity_model(), &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn constant_predictor_accuracy() {
        // Zero weights and a bias favouring class 0.
        let w = QuantizedTensor::new(vec![0, 0, 0, 0], 1.0, vec![2, 2]).unwrap();
        let m = QuantizedModel::new(vec![Layer::exit(w, vec![1.0, 0.0])], ModelMeta::default()).unwrap();
        let ds = Dataset::new(vec![0.0; 8], 2, vec![0, 1, 1, 1], 2).unwrap();
        assert_eq!(evaluate_accuracy(&m, &ds, ExitSelector::Final).unwrap(), 0.25);
        let empty = Dataset::new(vec![], 2, vec![], 2).unwrap();
        assert!(matches!(evaluate_accuracy(&m, &empty, ExitSelector::Final), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn confident_correct_samples_have_tiny_gradient() {
        let w = QuantizedTensor::new(vec![127, -127, -127, 127], 1.0, vec![2, 2]).unwrap();
        let m = QuantizedModel::new(vec![Layer::exit(w, vec![0.0, 0.0])], ModelMeta::default()).unwrap();
        let ds = Dataset::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1], 2).unwrap();
        let g = compute_gradients(&m, &ds).unwrap();
        let norm: f64 = g[0].as_ref().unwrap().values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "{norm}");
    }

    fn small_net() -> FloatNet {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut layer = |kind, rows: usize, cols: usize| {
            let (w, shape) = match kind {
                LayerKind::Relu => (vec![], vec![]),
                LayerKind::LayerNorm => ((0..rows).map(|_| rng.random_range(0.5..1.5)).collect(), vec![rows]),
                _ => ((0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![rows, cols]),
            };
            let b = if kind == LayerKind::Relu { vec![] } else { (0..rows).map(|_| rng.random_range(-0.5..0.5)).collect() };
            FloatLayer { kind, role: Role::Generic, w, b, shape }
        };
        // 112 parameters: dense, norm, side exit, relu, dense, final exit.
        FloatNet {
            layers: vec![
                layer(LayerKind::Dense, 6, 5),
                layer(LayerKind::LayerNorm, 6, 6),
                layer(LayerKind::SoftmaxExit, 3, 6),
                layer(LayerKind::Relu, 6, 6),
                layer(LayerKind::Dense, 4, 6),
                layer(LayerKind::SoftmaxExit, 3, 4),
            ],
        }
    }

    fn total_loss(net: &FloatNet, x: &[f64], y: usize) -> f64 {
        net.forward(x).iter().map(|l| -softmax(l)[y].ln()).sum()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let net = small_net();
        let x = [0.3, -1.2, 0.8, 2.0, -0.4];
        let y = 1;
        let mut grads = net.zero_grads();
        let loss = net.backprop(&x, y, LossExits::All, &mut grads);
        assert!((loss - total_loss(&net, &x, y)).abs() < 1e-12);
        let h = 1e-6;
        let mut checked = 0;
        for li in 0..net.layers.len() {
            for (which, len) in [(0, net.layers[li].w.len()), (1, net.layers[li].b.len())] {
                for j in 0..len {
                    let mut up = net.clone();
                    let mut down = net.clone();
                    let (pu, pd) = if which == 0 {
                        (&mut up.layers[li].w[j], &mut down.layers[li].w[j])
                    } else {
                        (&mut up.layers[li].b[j], &mut down.layers[li].b[j])
                    };
                    *pu += h;
                    *pd -= h;
                    let fd = (total_loss(&up, &x, y) - total_loss(&down, &x, y)) / (2.0 * h);
                    let g = if which == 0 { grads[li].w[j] } else { grads[li].b[j] };
                    let tol = f64::max(1e-4, 1e-3 * g.abs());
                    assert!((fd - g).abs() <= tol, "layer {li} param {which}/{j}: fd {fd} vs {g}");
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, 112);
    }
}
