//! Layer-wise sensitivity profiling and target-layer selection.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::LayerEvaluator;
use crate::model::{QuantizedModel, QuantizedTensor};
use crate::nn::{compute_gradients, GradientTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    /// Gradient weight in the score mix, in [0, 1].
    pub alpha: f64,
    /// Selection rate as a percentage of the layer's weights.
    pub rate_percent: f64,
    pub eval_subset_seed: u64,
    /// Rows of the evaluation split to use; `None` uses all of them.
    pub eval_subset_size: Option<usize>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        // 0.390625% of the 16384-weight first projection is 64 candidates.
        Self { alpha: 0.5, rate_percent: 0.390625, eval_subset_seed: 0, eval_subset_size: Some(500) }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.rate_percent > 0.0 && self.rate_percent <= 100.0) {
            return Err(Error::Parameter(format!("rate {}% outside (0, 100]", self.rate_percent)));
        }
        Ok(())
    }

    /// Candidate count for a layer with `n` weights, at least one.
    pub fn k_for(&self, n: usize) -> usize {
        ((self.rate_percent * n as f64 / 100.0).floor() as usize).clamp(1, n.max(1))
    }

    /// The evaluation rows this configuration selects.
    pub fn subset(&self, data: &Dataset) -> Dataset {
        data.eval_subset(self.eval_subset_size, self.eval_subset_seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfileEntry {
    pub layer: usize,
    #[serde(rename = "acc")]
    pub post_flip_accuracy: f64,
    pub k: usize,
    pub subset: Vec<usize>,
    #[serde(skip)]
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub entries: Vec<LayerProfileEntry>,
    pub target_layer: usize,
    pub initial_candidates: Vec<usize>,
}

impl SensitivityProfile {
    pub fn entry(&self, layer: usize) -> Option<&LayerProfileEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    /// Candidates of the target layer ordered by descending score (ties to
    /// the lower index).
    pub fn ranked_candidates(&self) -> Vec<usize> {
        let e = self.entry(self.target_layer).expect("target layer is profiled");
        rank_by_score(&self.initial_candidates, &e.scores)
    }
}

/// `alpha·|g/‖g‖| + (1−alpha)·|w/‖w‖|` over dequantized weights.
pub fn sensitivity_scores(weights: &QuantizedTensor, grads: &GradientTensor, alpha: f64) -> Result<Vec<f64>> {
    if weights.shape != grads.shape || weights.len() != grads.values.len() {
        return Err(Error::Dimension(format!(
            "weights {:?} vs gradients {:?}",
            weights.shape, grads.shape
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    let w = l2_normalized(&weights.dequantize());
    let g = l2_normalized(&grads.values);
    Ok(w.iter().zip(&g).map(|(w, g)| alpha * g.abs() + (1.0 - alpha) * w.abs()).collect())
}

fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Parameter(format!("k = {k} outside 1..={}", scores.len())));
    }
    let all: Vec<usize> = (0..scores.len()).collect();
    let mut top = rank_by_score(&all, scores);
    top.truncate(k);
    top.sort_unstable();
    Ok(top)
}

/// Orders `indices` by descending score; ties keep the lower index first.
pub fn rank_by_score(indices: &[usize], scores: &[f64]) -> Vec<usize> {
    let mut v = indices.to_vec();
    v.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    v
}

/// Scores, flips and re-evaluates every weighted layer in turn, then selects
/// the layer whose top-k flips hurt accuracy most (ties to the lower layer).
pub fn profile_layers(model: &QuantizedModel, data: &Dataset, cfg: &ProfileConfig) -> Result<SensitivityProfile> {
    cfg.validate()?;
    let eval = cfg.subset(data);
    let grads = compute_gradients(model, &eval)?;
    let mut entries = Vec::new();
    for layer in model.weighted_layers() {
        let w = model.weights(layer)?;
        let g = grads[layer].as_ref().ok_or_else(|| Error::Internal(format!("no gradient for layer {layer}")))?;
        let scores = sensitivity_scores(w, g, cfg.alpha)?;
        let k = cfg.k_for(w.len());
        let subset = top_k_indices(&scores, k)?;
        let acc = LayerEvaluator::new(model, &eval, layer)?.accuracy(&subset);
        entries.push(LayerProfileEntry { layer, post_flip_accuracy: acc, k, subset, scores });
    }
    let best = entries
        .iter()
        .min_by(|a, b| a.post_flip_accuracy.total_cmp(&b.post_flip_accuracy).then(a.layer.cmp(&b.layer)))
        .ok_or_else(|| Error::Precondition("model has no weighted layer".into()))?;
    Ok(SensitivityProfile {
        target_layer: best.layer,
        initial_candidates: best.subset.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_example() {
        let w = QuantizedTensor::new(vec![3, 4], 1.0, vec![2]).unwrap();
        let g = GradientTensor { values: vec![4.0, 3.0], shape: vec![2] };
        let s = sensitivity_scores(&w, &g, 0.5).unwrap();
        assert!((s[0] - 0.7).abs() < 1e-12 && (s[1] - 0.7).abs() < 1e-12);
        let s0 = sensitivity_scores(&w, &g, 0.0).unwrap();
        assert_eq!(s0, vec![0.6, 0.8]);
        let s1 = sensitivity_scores(&w, &g, 1.0).unwrap();
        assert_eq!(s1, vec![0.8, 0.6]);
    }

    #[test]
    fn zero_gradient_contributes_nothing() {
        let w = QuantizedTensor::new(vec![3, 4], 1.0, vec![2]).unwrap();
        let g = GradientTensor { values: vec![0.0, 0.0], shape: vec![2] };
        assert_eq!(sensitivity_scores(&w, &g, 1.0).unwrap(), vec![0.0, 0.0]);
        let bad = GradientTensor { values: vec![0.0], shape: vec![1] };
        assert!(matches!(sensitivity_scores(&w, &bad, 0.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.3, 0.3, 0.3], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.3, 0.1], 2).unwrap(), vec![0, 1]);
        assert!(top_k_indices(&[0.3], 0).is_err());
        assert!(top_k_indices(&[0.3], 2).is_err());
    }

    #[test]
    fn k_is_floored_at_one() {
        let cfg = ProfileConfig { rate_percent: 0.1, ..Default::default() };
        assert_eq!(cfg.k_for(100), 1);
        assert_eq!(cfg.k_for(20_000), 20);
        let cfg = ProfileConfig::default();
        assert_eq!(cfg.k_for(16_384), 64);
    }
}
