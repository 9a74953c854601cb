//! Fast repeated accuracy evaluation for flips confined to one layer.
//!
//! Activations entering the target layer and its unperturbed outputs are
//! cached once. A flip set then only recomputes the touched output rows and the
//! layers after the target. Row sums use the same kernel and order as
//! [`crate::nn::forward`], so results are bit-identical to a full pass over a
//! perturbed copy.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fault::{flip_bit, MSB};
use crate::model::{LayerKind, QuantizedModel, QuantizedTensor};
use crate::nn::{apply_hidden, argmax, dense, final_logits_from, row_dot};

pub struct LayerEvaluator<'a> {
    model: &'a QuantizedModel,
    layer: usize,
    labels: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    golden: Vec<Vec<f64>>,
    evaluations: u64,
}

impl<'a> LayerEvaluator<'a> {
    pub fn new(model: &'a QuantizedModel, data: &Dataset, layer: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("evaluation set is empty".into()));
        }
        if data.dim() != model.input_dim() {
            return Err(Error::Dimension(format!(
                "data has {} features, model expects {}",
                data.dim(),
                model.input_dim()
            )));
        }
        let target = model.weights(layer)?;
        let kind = model.layers()[layer].kind;
        let prefix = &model.layers()[..layer];
        let mut inputs = Vec::with_capacity(data.len());
        let mut golden = Vec::with_capacity(data.len());
        for (x, _) in data.rows() {
            let mut h = x.to_vec();
            for l in prefix {
                if l.kind != LayerKind::SoftmaxExit {
                    h = apply_hidden(l.kind, l.weights.as_ref(), &l.bias, &h);
                }
            }
            if matches!(kind, LayerKind::Dense | LayerKind::SoftmaxExit) {
                golden.push(dense(target, &model.layers()[layer].bias, &h));
            }
            inputs.push(h);
        }
        Ok(Self { model, layer, labels: data.labels().to_vec(), inputs, golden, evaluations: 0 })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn model(&self) -> &QuantizedModel {
        self.model
    }

    pub fn weight_count(&self) -> usize {
        self.model.layers()[self.layer].weight_count()
    }

    /// Number of accuracy evaluations performed so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    /// Accuracy with the MSB of each listed param flipped.
    pub fn accuracy(&mut self, params: &[usize]) -> f64 {
        let flips: Vec<(usize, u8)> = params.iter().map(|&p| (p, MSB)).collect();
        self.accuracy_bits(&flips)
    }

    /// Accuracy with arbitrary `(param, bit)` flips applied. Params must be
    /// inside the layer; repeated entries flip again.
    pub fn accuracy_bits(&mut self, flips: &[(usize, u8)]) -> f64 {
        self.evaluations += 1;
        let layer = &self.model.layers()[self.layer];
        let w = layer.weights.as_ref().expect("target has weights");
        let last = self.model.num_layers() - 1;
        let mut correct = 0usize;
        match layer.kind {
            LayerKind::Dense | LayerKind::SoftmaxExit => {
                let rows = perturbed_rows(w, flips);
                let feeds_forward = layer.kind == LayerKind::Dense || self.layer == last;
                for (s, x) in self.inputs.iter().enumerate() {
                    let logits = if feeds_forward {
                        let mut out = self.golden[s].clone();
                        for (&r, row) in &rows {
                            out[r] = row_dot(row, w.scale, x) + layer.bias[r];
                        }
                        if self.layer == last {
                            out
                        } else {
                            final_logits_from(self.model, self.layer + 1, &out)
                        }
                    } else {
                        // An intermediate head does not feed the final exit.
                        final_logits_from(self.model, self.layer + 1, x)
                    };
                    correct += (argmax(&logits) == self.labels[s]) as usize;
                }
            }
            LayerKind::LayerNorm => {
                let mut t = w.clone();
                for &(p, b) in flips {
                    t.values[p] = flip_bit(t.values[p], b);
                }
                for (s, x) in self.inputs.iter().enumerate() {
                    let h = apply_hidden(LayerKind::LayerNorm, Some(&t), &layer.bias, x);
                    let logits = final_logits_from(self.model, self.layer + 1, &h);
                    correct += (argmax(&logits) == self.labels[s]) as usize;
                }
            }
            LayerKind::Relu => unreachable!("relu has no weights"),
        }
        correct as f64 / self.labels.len() as f64
    }
}

fn perturbed_rows(w: &QuantizedTensor, flips: &[(usize, u8)]) -> BTreeMap<usize, Vec<i8>> {
    let cols = w.shape[1];
    let mut rows: BTreeMap<usize, Vec<i8>> = BTreeMap::new();
    for &(p, b) in flips {
        let r = p / cols;
        let row = rows.entry(r).or_insert_with(|| w.values[r * cols..(r + 1) * cols].to_vec());
        row[p % cols] = flip_bit(row[p % cols], b);
    }
    rows
}
