//! Quantized network representation and its JSON file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer operation tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Relu,
    LayerNorm,
    SoftmaxExit,
}

/// Architectural role annotation. Only used for reporting and for the
/// structural importance table of the detector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Generic,
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    Norm,
    Ffn,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Generic,
        Role::AttnQ,
        Role::AttnK,
        Role::AttnV,
        Role::AttnO,
        Role::Norm,
        Role::Ffn,
    ];

    pub fn is_attention(self) -> bool {
        matches!(self, Role::AttnQ | Role::AttnK | Role::AttnV | Role::AttnO)
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Generic => "generic",
            Role::AttnQ => "attn_q",
            Role::AttnK => "attn_k",
            Role::AttnV => "attn_v",
            Role::AttnO => "attn_o",
            Role::Norm => "norm",
            Role::Ffn => "ffn",
        }
    }
}

/// Symmetric per-tensor int8 weights. `values` are row-major over `shape`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub values: Vec<i8>,
    pub scale: f64,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn new(values: Vec<i8>, scale: f64, shape: Vec<usize>) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Parameter(format!("scale must be positive, got {scale}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { values, scale, shape })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn dequantized(&self, i: usize) -> f64 {
        self.values[i] as f64 * self.scale
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64 * self.scale).collect()
    }

    /// Raw two's-complement storage bytes.
    pub fn bytes(&self) -> Vec<u8> {
        self.values.iter().map(|&v| v as u8).collect()
    }
}

/// Quantize a flat weight vector (shape `[n]`).
pub fn quantize(weights: &[f64]) -> Result<QuantizedTensor> {
    quantize_shaped(weights, vec![weights.len()])
}

/// scale = max|w| / 127, values rounded half away from zero and clamped to ±127.
pub fn quantize_shaped(weights: &[f64], shape: Vec<usize>) -> Result<QuantizedTensor> {
    if weights.is_empty() {
        return Err(Error::EmptyInput("cannot quantize an empty tensor".into()));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::Parameter(format!("non-finite weight {w}")));
    }
    let max = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max == 0.0 {
        return Err(Error::DegenerateScale);
    }
    let scale = max / 127.0;
    let values = weights.iter().map(|&w| requantize(w, scale)).collect();
    QuantizedTensor::new(values, scale, shape)
}

/// Map one real value onto the int8 grid of an existing scale.
#[inline]
pub fn requantize(w: f64, scale: f64) -> i8 {
    (w / scale).round().clamp(-127.0, 127.0) as i8
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub role: Role,
    pub weights: Option<QuantizedTensor>,
    pub bias: Vec<f64>,
}

impl Layer {
    /// Dense projection; `weights.shape` is `[out, in]`.
    pub fn dense(weights: QuantizedTensor, bias: Vec<f64>, role: Role) -> Self {
        Self { kind: LayerKind::Dense, role, weights: Some(weights), bias }
    }

    pub fn relu() -> Self {
        Self { kind: LayerKind::Relu, role: Role::Generic, weights: None, bias: vec![] }
    }

    /// Layer norm with quantized gain and float shift.
    pub fn layer_norm(gain: QuantizedTensor, shift: Vec<f64>) -> Self {
        Self { kind: LayerKind::LayerNorm, role: Role::Norm, weights: Some(gain), bias: shift }
    }

    /// Exit head projecting the current activation to class logits. The
    /// activation itself passes through unchanged.
    pub fn exit(weights: QuantizedTensor, bias: Vec<f64>) -> Self {
        Self { kind: LayerKind::SoftmaxExit, role: Role::Generic, weights: Some(weights), bias }
    }

    pub fn weight_count(&self) -> usize {
        self.weights.as_ref().map_or(0, |w| w.len())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
}

/// A validated layered network. Construct through [`QuantizedModel::new`] or
/// the JSON loaders so the shape invariants hold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct QuantizedModel {
    layers: Vec<Layer>,
    exits: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
    pub meta: ModelMeta,
}

impl QuantizedModel {
    pub fn new(layers: Vec<Layer>, meta: ModelMeta) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        let mut width: Option<usize> = None;
        let mut exits = Vec::new();
        let mut classes: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            let w = layer.weights.as_ref();
            match layer.kind {
                LayerKind::Relu => {
                    if w.is_some() || !layer.bias.is_empty() {
                        return Err(Error::Config(format!("relu layer {i} carries parameters")));
                    }
                }
                LayerKind::LayerNorm => {
                    let w = w.ok_or_else(|| Error::Config(format!("layer_norm {i} has no gain")))?;
                    let n = match w.shape[..] {
                        [n] => n,
                        _ => return Err(Error::Config(format!("layer_norm {i} gain must be 1-D"))),
                    };
                    check_width(i, &mut width, n)?;
                    if layer.bias.len() != n {
                        return Err(Error::Config(format!("layer_norm {i} shift length mismatch")));
                    }
                }
                LayerKind::Dense | LayerKind::SoftmaxExit => {
                    let w = w.ok_or_else(|| Error::Config(format!("layer {i} has no weights")))?;
                    let (out, inp) = match w.shape[..] {
                        [o, n] => (o, n),
                        _ => return Err(Error::Config(format!("layer {i} weights must be 2-D"))),
                    };
                    if out == 0 || inp == 0 {
                        return Err(Error::Config(format!("layer {i} has an empty dimension")));
                    }
                    check_width(i, &mut width, inp)?;
                    if layer.bias.len() != out {
                        return Err(Error::Config(format!("layer {i} bias length mismatch")));
                    }
                    if layer.kind == LayerKind::Dense {
                        width = Some(out);
                    } else {
                        if *classes.get_or_insert(out) != out {
                            return Err(Error::Config("exits disagree on class count".into()));
                        }
                        exits.push(i);
                    }
                }
            }
        }
        if exits.last() != Some(&(layers.len() - 1)) {
            return Err(Error::Config("the final layer must be an exit head".into()));
        }
        let num_classes = classes.unwrap_or(0);
        if num_classes < 2 {
            return Err(Error::Config("exits need at least two classes".into()));
        }
        // Exits are the first weighted layers at worst, so width is known.
        let input_dim = first_input_width(&layers).expect("validated above");
        Ok(Self { layers, exits, input_dim, num_classes, meta })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> Option<&Layer> {
        self.layers.get(i)
    }

    /// Layer positions hosting exit heads, strictly increasing.
    pub fn exits(&self) -> &[usize] {
        &self.exits
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Indices of layers that own a weight tensor.
    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].weights.is_some()).collect()
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(Layer::weight_count).sum()
    }

    pub fn weights(&self, layer: usize) -> Result<&QuantizedTensor> {
        self.layers
            .get(layer)
            .and_then(|l| l.weights.as_ref())
            .ok_or_else(|| Error::Address(format!("layer {layer} has no weights")))
    }

    /// Mutable access to the raw int8 values of a layer. Shapes and scales stay
    /// fixed, so the model invariants cannot be broken through this.
    pub fn values_mut(&mut self, layer: usize) -> Result<&mut [i8]> {
        self.layers
            .get_mut(layer)
            .and_then(|l| l.weights.as_mut())
            .map(|w| w.values.as_mut_slice())
            .ok_or_else(|| Error::Address(format!("layer {layer} has no weights")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

fn check_width(i: usize, width: &mut Option<usize>, n: usize) -> Result<()> {
    match *width {
        Some(w) if w != n => Err(Error::Config(format!(
            "layer {i} expects width {n} but receives {w}"
        ))),
        _ => {
            *width = Some(n);
            Ok(())
        }
    }
}

fn first_input_width(layers: &[Layer]) -> Option<usize> {
    layers.iter().find_map(|l| {
        let w = l.weights.as_ref()?;
        Some(match l.kind {
            LayerKind::LayerNorm => w.shape[0],
            _ => w.shape[1],
        })
    })
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    kind: LayerKind,
    #[serde(default)]
    role: Role,
    #[serde(default)]
    shape: Vec<usize>,
    #[serde(default)]
    scale: Option<f64>,
    #[serde(default)]
    values: Vec<i8>,
    #[serde(default)]
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    layers: Vec<LayerRecord>,
    exits: Vec<usize>,
    #[serde(default)]
    meta: ModelMeta,
}

impl TryFrom<ModelFile> for QuantizedModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let layers = f
            .layers
            .into_iter()
            .map(|r| {
                let weights = match (r.kind, r.scale) {
                    (LayerKind::Relu, _) => None,
                    (_, Some(scale)) => Some(QuantizedTensor::new(r.values, scale, r.shape)?),
                    (_, None) => return Err(Error::Config(format!("{:?} layer without scale", r.kind))),
                };
                Ok(Layer { kind: r.kind, role: r.role, weights, bias: r.bias })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = QuantizedModel::new(layers, f.meta)?;
        if model.exits != f.exits {
            return Err(Error::Config(format!(
                "exits {:?} do not match exit heads at {:?}",
                f.exits, model.exits
            )));
        }
        Ok(model)
    }
}

impl From<QuantizedModel> for ModelFile {
    fn from(m: QuantizedModel) -> Self {
        let layers = m
            .layers
            .into_iter()
            .map(|l| {
                let (shape, scale, values) = match l.weights {
                    Some(w) => (w.shape, Some(w.scale), w.values),
                    None => (vec![], None, vec![]),
                };
                LayerRecord { kind: l.kind, role: l.role, shape, scale, values, bias: l.bias }
            })
            .collect();
        ModelFile { layers, exits: m.exits, meta: m.meta }
    }
}
