//! Reference attacks the Q-learning search is compared against.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::LayerEvaluator;
use crate::fault::{flip_bit, BitAddress, BitFlipSet, MSB};
use crate::model::QuantizedModel;
use crate::nn::compute_gradients;
use crate::profile::rank_by_score;
use crate::rl::better_state;
use crate::rng::{stream, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RandomFlips,
    GradientGreedy,
    GreedySelection,
    RandomSearch,
    BruteForce,
}

/// Bits the random baseline may pick.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BitChoice {
    #[default]
    Msb,
    Any,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: Method,
    pub flips: BitFlipSet,
    pub final_accuracy: f64,
    pub evaluations: u64,
    /// Size of the smallest evaluated set at or under the failure threshold.
    pub flips_to_tau: Option<usize>,
}

fn params(set: &[usize]) -> Vec<usize> {
    let mut v = set.to_vec();
    v.sort_unstable();
    v
}

/// `n` distinct uniformly drawn flips in `layer`, evaluated once.
pub fn random_flips(
    model: &QuantizedModel,
    data: &Dataset,
    layer: usize,
    n: usize,
    seed: u64,
    bits: BitChoice,
) -> Result<BaselineResult> {
    let w = model.weights(layer)?.len();
    let cap = match bits {
        BitChoice::Msb => w,
        BitChoice::Any => 8 * w,
    };
    if n > cap {
        return Err(Error::Parameter(format!("{n} distinct flips requested, layer offers {cap}")));
    }
    let mut rng = stream(seed, Stage::RandomFlips);
    let picks = sample(&mut rng, cap, n).into_vec();
    let flips: Vec<(usize, u8)> = picks
        .iter()
        .map(|&i| match bits {
            BitChoice::Msb => (i, MSB),
            BitChoice::Any => (i / 8, (i % 8) as u8),
        })
        .collect();
    let mut eval = LayerEvaluator::new(model, data, layer)?;
    let acc = eval.accuracy_bits(&flips);
    Ok(BaselineResult {
        method: Method::RandomFlips,
        flips: flips.iter().map(|&(param, bit)| BitAddress { layer, param, bit }).collect(),
        final_accuracy: acc,
        evaluations: eval.evaluations(),
        flips_to_tau: None,
    })
}

/// Ranks every MSB in `layer` by |g·Δw| and flips them cumulatively in that
/// order until `budget` flips or accuracy ≤ `tau`.
pub fn gradient_greedy(model: &QuantizedModel, data: &Dataset, layer: usize, budget: usize, tau: f64) -> Result<BaselineResult> {
    if budget == 0 {
        return Err(Error::Parameter("budget must be at least 1".into()));
    }
    let w = model.weights(layer)?;
    let grads = compute_gradients(model, data)?;
    let g = grads[layer].as_ref().ok_or_else(|| Error::Internal("missing gradient".into()))?;
    let impact: Vec<f64> = w
        .values
        .iter()
        .zip(&g.values)
        .map(|(&v, &gv)| {
            let dw = (flip_bit(v, MSB) as f64 - v as f64) * w.scale;
            (gv * dw).abs()
        })
        .collect();
    let all: Vec<usize> = (0..w.len()).collect();
    let order = rank_by_score(&all, &impact);
    let mut eval = LayerEvaluator::new(model, data, layer)?;
    let mut set = Vec::new();
    let mut acc = f64::NAN;
    let mut reached = None;
    for &p in order.iter().take(budget) {
        set.push(p);
        acc = eval.accuracy(&set);
        if acc <= tau {
            reached = Some(set.len());
            break;
        }
    }
    Ok(BaselineResult {
        method: Method::GradientGreedy,
        flips: BitFlipSet::msb_in_layer(layer, params(&set)),
        final_accuracy: acc,
        evaluations: eval.evaluations(),
        flips_to_tau: reached,
    })
}

/// Adds, at each step, the pool index whose flip leaves the lowest accuracy
/// (the largest immediate attack gain). Stops at `budget`, at accuracy ≤
/// `tau`, or when no candidate lowers accuracy further.
pub fn greedy_selection(
    model: &QuantizedModel,
    data: &Dataset,
    layer: usize,
    pool: &[usize],
    budget: usize,
    tau: f64,
) -> Result<BaselineResult> {
    if pool.is_empty() {
        return Err(Error::Precondition("greedy selection needs a nonempty pool".into()));
    }
    let mut eval = LayerEvaluator::new(model, data, layer)?;
    check_pool(&eval, pool)?;
    let mut set: Vec<usize> = Vec::new();
    let mut acc = eval.accuracy(&set);
    let mut reached = (acc <= tau).then_some(0);
    while reached.is_none() && set.len() < budget {
        let mut best: Option<(f64, usize)> = None;
        for &p in pool {
            if set.contains(&p) {
                continue;
            }
            set.push(p);
            let a = eval.accuracy(&set);
            set.pop();
            if best.is_none_or(|(b, _)| a < b) {
                best = Some((a, p));
            }
        }
        match best {
            Some((a, p)) if a < acc => {
                set.push(p);
                acc = a;
                if acc <= tau {
                    reached = Some(set.len());
                }
            }
            _ => break,
        }
    }
    Ok(BaselineResult {
        method: Method::GreedySelection,
        flips: BitFlipSet::msb_in_layer(layer, params(&set)),
        final_accuracy: acc,
        evaluations: eval.evaluations(),
        flips_to_tau: reached,
    })
}

/// Uniform subset sizes in `1..=|pool|`, uniform subsets of that size. Keeps
/// the lowest-accuracy (then smallest) subset and, separately, the size of
/// the smallest subset reaching `tau`.
pub fn random_search(
    model: &QuantizedModel,
    data: &Dataset,
    layer: usize,
    pool: &[usize],
    trials: usize,
    seed: u64,
    tau: f64,
) -> Result<BaselineResult> {
    if trials == 0 || pool.is_empty() {
        return Err(Error::Parameter("random search needs trials ≥ 1 and a nonempty pool".into()));
    }
    let mut eval = LayerEvaluator::new(model, data, layer)?;
    check_pool(&eval, pool)?;
    let mut rng = stream(seed, Stage::RandomSearch);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut reached: Option<usize> = None;
    for _ in 0..trials {
        let size = rng.random_range(1..=pool.len());
        let set: Vec<usize> = sample(&mut rng, pool.len(), size).into_iter().map(|i| pool[i]).collect();
        let acc = eval.accuracy(&set);
        if best.as_ref().is_none_or(|(b, s)| better_state(acc, set.len(), *b, s.len(), 0.0)) {
            best = Some((acc, set.clone()));
        }
        if acc <= tau && reached.is_none_or(|r| set.len() < r) {
            reached = Some(set.len());
        }
    }
    let (acc, set) = best.expect("at least one trial");
    Ok(BaselineResult {
        method: Method::RandomSearch,
        flips: BitFlipSet::msb_in_layer(layer, params(&set)),
        final_accuracy: acc,
        evaluations: eval.evaluations(),
        flips_to_tau: reached,
    })
}

pub const BRUTE_FORCE_MAX_POOL: usize = 64;

/// Every flip set of size 1..=`max_size` (at most 2) over `pool`; returns the
/// lowest-accuracy, then smallest, set. Singles are tried before pairs and
/// earlier pool positions first, so the first optimum found wins ties.
pub fn brute_force_oracle(
    model: &QuantizedModel,
    data: &Dataset,
    layer: usize,
    pool: &[usize],
    max_size: usize,
) -> Result<BaselineResult> {
    if pool.len() > BRUTE_FORCE_MAX_POOL {
        return Err(Error::Capacity(format!(
            "pool of {} exceeds the {BRUTE_FORCE_MAX_POOL}-index enumeration limit",
            pool.len()
        )));
    }
    if !(1..=2).contains(&max_size) || pool.is_empty() {
        return Err(Error::Parameter("brute force needs max_size in 1..=2 and a nonempty pool".into()));
    }
    let mut eval = LayerEvaluator::new(model, data, layer)?;
    check_pool(&eval, pool)?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut consider = |acc: f64, set: Vec<usize>| {
        if best.as_ref().is_none_or(|(b, s)| better_state(acc, set.len(), *b, s.len(), 0.0)) {
            best = Some((acc, set));
        }
    };
    for &p in pool {
        consider(eval.accuracy(&[p]), vec![p]);
    }
    if max_size == 2 {
        for i in 0..pool.len() {
            for j in i + 1..pool.len() {
                let pair = [pool[i], pool[j]];
                consider(eval.accuracy(&pair), pair.to_vec());
            }
        }
    }
    let (acc, set) = best.expect("nonempty pool");
    Ok(BaselineResult {
        method: Method::BruteForce,
        flips: BitFlipSet::msb_in_layer(layer, params(&set)),
        final_accuracy: acc,
        evaluations: eval.evaluations(),
        flips_to_tau: None,
    })
}

fn check_pool(eval: &LayerEvaluator, pool: &[usize]) -> Result<()> {
    let n = eval.weight_count();
    match pool.iter().find(|&&p| p >= n) {
        Some(p) => Err(Error::Address(format!("pool index {p} outside layer of {n} weights"))),
        None => Ok(()),
    }
}
