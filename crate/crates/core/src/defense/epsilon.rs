//! Statistical fault detection and repair against golden-model signatures,
//! gated by multi-exit confidence.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fault::{apply_flipset, BitFlipSet};
use crate::model::{requantize, LayerKind, QuantizedModel, QuantizedTensor, Role};
use crate::nn::{argmax, forward, softmax};
use crate::rng::{substream, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignatureConfig {
    /// Requested block count per layer.
    pub blocks: usize,
    /// Stored values with |q| at or below this count as zero.
    pub zero_band: u8,
}

impl Default for SignatureConfig {
    fn default() -> Self {
        Self { blocks: 16, zero_band: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSignature {
    pub layer: usize,
    pub mu: f64,
    pub sigma: f64,
    /// Lower quartile, median, upper quartile.
    pub q: [f64; 3],
    /// Zero fraction per block.
    pub rho: Vec<f64>,
    pub block_size: usize,
    pub zero_band: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceFactors {
    pub beta_p: f64,
    pub gamma_s: f64,
    pub alpha_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionParams {
    /// Offset added to the importance factor before scaling by σ.
    pub m: f64,
    /// An exit answers when its top softmax probability exceeds this.
    pub confidence_threshold: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self { m: 3.0, confidence_threshold: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitTaken {
    /// Early exit at this position of the exit list.
    Exit(usize),
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonVerdict {
    pub label: usize,
    pub fault_detected: bool,
    pub corrected_layers: Vec<usize>,
    pub exit_taken: ExitTaken,
    pub confidences: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, population standard deviation and quartiles.
pub fn moments(w: &[f64]) -> (f64, f64, [f64; 3]) {
    let n = w.len() as f64;
    let mu = w.iter().sum::<f64>() / n;
    let sigma = (w.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt();
    let mut s = w.to_vec();
    s.sort_by(f64::total_cmp);
    (mu, sigma, [quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75)])
}

/// Block length giving at most `blocks` contiguous blocks over `n` values.
pub fn block_size(n: usize, blocks: usize) -> usize {
    n.div_ceil(blocks.max(1)).max(1)
}

pub fn zero_fractions(values: &[i8], block_size: usize, zero_band: u8) -> Vec<f64> {
    values
        .chunks(block_size)
        .map(|b| b.iter().filter(|v| v.unsigned_abs() <= zero_band).count() as f64 / b.len() as f64)
        .collect()
}

pub fn layer_signature(layer: usize, t: &QuantizedTensor, cfg: &SignatureConfig) -> LayerSignature {
    let (mu, sigma, q) = moments(&t.dequantize());
    let bs = block_size(t.len(), cfg.blocks);
    LayerSignature { layer, mu, sigma, q, rho: zero_fractions(&t.values, bs, cfg.zero_band), block_size: bs, zero_band: cfg.zero_band }
}

/// One signature per weighted layer of the golden model.
pub fn build_signatures(model: &QuantizedModel, cfg: &SignatureConfig) -> Result<Vec<LayerSignature>> {
    if cfg.blocks == 0 {
        return Err(Error::Parameter("block count must be at least 1".into()));
    }
    model
        .weighted_layers()
        .into_iter()
        .map(|l| Ok(layer_signature(l, model.weights(l)?, cfg)))
        .collect()
}

/// Structural weight of a layer kind and role.
pub fn structural_weight(kind: LayerKind, role: Role) -> f64 {
    match kind {
        LayerKind::Dense if role.is_attention() => 1.0,
        LayerKind::Dense => 0.8,
        LayerKind::LayerNorm => 0.6,
        _ => 0.2,
    }
}

/// `beta_p = 1 − (i−1)/L` for 1-based position `i`, times the structural weight.
pub fn layer_importance(layer_index: usize, total: usize, kind: LayerKind, role: Role) -> Result<ImportanceFactors> {
    if layer_index == 0 || layer_index > total {
        return Err(Error::Parameter(format!("layer index {layer_index} outside 1..={total}")));
    }
    let beta_p = 1.0 - (layer_index - 1) as f64 / total as f64;
    let gamma_s = structural_weight(kind, role);
    Ok(ImportanceFactors { beta_p, gamma_s, alpha_l: beta_p * gamma_s })
}

/// Importance factors for every weighted layer, aligned with
/// [`build_signatures`].
pub fn model_importances(model: &QuantizedModel) -> Vec<ImportanceFactors> {
    let total = model.num_layers();
    model
        .weighted_layers()
        .into_iter()
        .map(|l| {
            let layer = &model.layers()[l];
            layer_importance(l + 1, total, layer.kind, layer.role).expect("index in range")
        })
        .collect()
}

/// `(m + alpha_l) · sigma`.
pub fn detection_threshold(sigma: f64, alpha_l: f64, m: f64) -> f64 {
    (m + alpha_l) * sigma
}

/// L1 distance between block zero-fraction vectors.
pub fn pattern_score(rho_ref: &[f64], rho_cur: &[f64]) -> Result<f64> {
    if rho_ref.len() != rho_cur.len() {
        return Err(Error::Dimension(format!("{} blocks vs {}", rho_ref.len(), rho_cur.len())));
    }
    Ok(rho_ref.iter().zip(rho_cur).map(|(a, b)| (a - b).abs()).sum())
}

/// Closest quartile to `w`; exact ties go to the smaller candidate.
pub fn nearest_valid(w: f64, q: [f64; 3]) -> f64 {
    let mut best = q[0];
    for &v in &q[1..] {
        let (d, bd) = ((w - v).abs(), (w - best).abs());
        if d < bd || (d == bd && v < best) {
            best = v;
        }
    }
    best
}

/// Signature plus the derived importance and threshold, as written to the
/// signatures file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureRecord {
    #[serde(flatten)]
    pub signature: LayerSignature,
    pub alpha_l: f64,
    #[serde(rename = "T_l")]
    pub t_l: f64,
}

pub fn signature_records(
    signatures: &[LayerSignature],
    importances: &[ImportanceFactors],
    m: f64,
) -> Vec<SignatureRecord> {
    signatures
        .iter()
        .zip(importances)
        .map(|(s, i)| SignatureRecord {
            signature: s.clone(),
            alpha_l: i.alpha_l,
            t_l: detection_threshold(s.sigma, i.alpha_l, m),
        })
        .collect()
}

/// Confidence-gated inference with stage-two repair. `model` is the caller's
/// private copy and keeps any corrections for later calls.
pub fn epsilon_infer(
    model: &mut QuantizedModel,
    signatures: &[LayerSignature],
    importances: &[ImportanceFactors],
    params: &DetectionParams,
    x: &[f64],
) -> Result<EpsilonVerdict> {
    let weighted = model.weighted_layers();
    if signatures.len() != importances.len() {
        return Err(Error::Config("signatures and importances differ in length".into()));
    }
    for &l in &weighted {
        if !signatures.iter().any(|s| s.layer == l) {
            return Err(Error::Config(format!("no signature for layer {l}")));
        }
    }

    let outs = forward(model, x)?;
    let mut confidences = Vec::with_capacity(outs.len());
    for (i, logits) in outs.iter().enumerate() {
        let conf = softmax(logits).into_iter().fold(0.0, f64::max);
        confidences.push(conf);
        if conf > params.confidence_threshold {
            return Ok(EpsilonVerdict {
                label: argmax(logits),
                fault_detected: false,
                corrected_layers: vec![],
                exit_taken: ExitTaken::Exit(i),
                confidences,
            });
        }
    }

    let mut corrected = Vec::new();
    for (sig, imp) in signatures.iter().zip(importances) {
        let t_l = detection_threshold(sig.sigma, imp.alpha_l, params.m);
        let tensor = model.weights(sig.layer)?;
        let rho = zero_fractions(&tensor.values, sig.block_size, sig.zero_band);
        if pattern_score(&sig.rho, &rho)? > t_l {
            let scale = tensor.scale;
            let values = model.values_mut(sig.layer)?;
            for v in values.iter_mut() {
                let w = *v as f64 * scale;
                if (w - sig.mu).abs() > t_l {
                    *v = requantize(nearest_valid(w, sig.q), scale);
                }
            }
            corrected.push(sig.layer);
        }
    }
    let label = if corrected.is_empty() {
        argmax(outs.last().expect("at least one exit"))
    } else {
        argmax(forward(model, x)?.last().expect("at least one exit"))
    };
    Ok(EpsilonVerdict {
        label,
        fault_detected: !corrected.is_empty(),
        corrected_layers: corrected,
        exit_taken: ExitTaken::Final,
        confidences,
    })
}

/// `exp(−alpha_l² / 2p)`.
pub fn missed_detection_bound(alpha_l: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Parameter(format!("fault rate {p} outside (0, 1]")));
    }
    Ok((-alpha_l * alpha_l / (2.0 * p)).exp())
}

/// `(1 − gamma)^N + exp(−alpha_l² / 2p)`; may exceed 1.
pub fn error_bound(confidence_threshold: f64, num_exits: u32, alpha_l: f64, p: f64) -> Result<f64> {
    Ok((1.0 - confidence_threshold).powi(num_exits as i32) + missed_detection_bound(alpha_l, p)?)
}

/// Outcome of running the detector over a whole dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRun {
    pub accuracy: f64,
    pub detected: bool,
    pub stage_two_samples: usize,
    pub flagged_samples: usize,
    pub early_exits: usize,
}

/// Feeds every row through [`epsilon_infer`] on one private copy of `model`.
pub fn epsilon_over(
    model: &QuantizedModel,
    signatures: &[LayerSignature],
    importances: &[ImportanceFactors],
    params: &DetectionParams,
    data: &Dataset,
) -> Result<EpsilonRun> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no rows to screen".into()));
    }
    let mut private = model.clone();
    let mut run = EpsilonRun { accuracy: 0.0, detected: false, stage_two_samples: 0, flagged_samples: 0, early_exits: 0 };
    let mut correct = 0usize;
    for (x, y) in data.rows() {
        let v = epsilon_infer(&mut private, signatures, importances, params, x)?;
        correct += (v.label == y) as usize;
        match v.exit_taken {
            ExitTaken::Exit(_) => run.early_exits += 1,
            ExitTaken::Final => run.stage_two_samples += 1,
        }
        if v.fault_detected {
            run.flagged_samples += 1;
            run.detected = true;
        }
    }
    run.accuracy = correct as f64 / data.len() as f64;
    Ok(run)
}

/// MSB faults in `round(fraction · |W|)` distinct weights of `layer`,
/// drawn from the `trial`-th fault-injection stream.
pub fn random_msb_faults(model: &QuantizedModel, layer: usize, fraction: f64, seed: u64, trial: u64) -> Result<BitFlipSet> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Parameter(format!("fault fraction {fraction} outside [0, 1]")));
    }
    let n = model.weights(layer)?.len();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = substream(seed, Stage::FaultInjection, trial);
    Ok(BitFlipSet::msb_in_layer(layer, sample(&mut rng, n, count)))
}

/// Convenience: the faulty copy for a fault set.
pub fn inject(model: &QuantizedModel, faults: &BitFlipSet) -> Result<QuantizedModel> {
    Ok(apply_flipset(model, faults)?.0)
}
