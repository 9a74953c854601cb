//! Tabular Q-learning over flip sets in the target layer.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::LayerEvaluator;
use crate::fault::{apply_flipset, BitFlipSet};
use crate::model::QuantizedModel;
use crate::nn::{evaluate_accuracy, ExitSelector};
use crate::profile::{profile_layers, ProfileConfig, SensitivityProfile};
use crate::rng::{stream, Stage, StageRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Add,
    Remove,
    Shift,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Add, Action::Remove, Action::Shift];
}

/// How an action picks the index it inserts or drops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionRule {
    /// Evaluate every candidate and take the one giving the lowest accuracy.
    #[default]
    Scan,
    /// Highest-ranked outside index in, lowest-ranked member out.
    Ranked,
    /// Uniform choices.
    Random,
}

/// Where the trajectory starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// Empty flip set; the candidates only form the pool.
    #[default]
    Empty,
    /// All candidates flipped.
    Candidates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    /// Steps of the single trajectory.
    pub episodes: usize,
    pub epsilon: f64,
    pub learn_rate: f64,
    pub discount: f64,
    pub rng_seed: u64,
    /// Accuracy at or below which the model counts as broken.
    pub failure_threshold: f64,
    pub early_stop: bool,
    pub transition: TransitionRule,
    pub start: StartRule,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            epsilon: 0.1,
            learn_rate: 0.1,
            discount: 0.9,
            rng_seed: 0,
            failure_threshold: 0.35,
            early_stop: false,
            transition: TransitionRule::Scan,
            start: StartRule::Empty,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.epsilon) {
            return Err(Error::Parameter(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.learn_rate > 0.0 && self.learn_rate <= 1.0) {
            return Err(Error::Parameter(format!("learn rate {} outside (0, 1]", self.learn_rate)));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Parameter(format!("discount {} outside [0, 1)", self.discount)));
        }
        if !unit.contains(&self.failure_threshold) {
            return Err(Error::Parameter(format!("threshold {} outside [0, 1]", self.failure_threshold)));
        }
        Ok(())
    }
}

/// A flip set (sorted param indices) plus the sensitivity-ordered pool it
/// draws from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RlState {
    set: Vec<usize>,
    pool: Arc<Vec<usize>>,
}

impl RlState {
    pub fn new(set: impl IntoIterator<Item = usize>, pool: Arc<Vec<usize>>) -> Self {
        let mut set: Vec<usize> = set.into_iter().collect();
        set.sort_unstable();
        set.dedup();
        Self { set, pool }
    }

    pub fn set(&self) -> &[usize] {
        &self.set
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    fn contains(&self, p: usize) -> bool {
        self.set.binary_search(&p).is_ok()
    }

    /// Pool indices not in the set, in pool order.
    pub fn outside(&self) -> Vec<usize> {
        self.pool.iter().copied().filter(|&p| !self.contains(p)).collect()
    }

    /// Members in pool order; members not in the pool go last.
    fn members_ranked(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.pool.iter().copied().filter(|&p| self.contains(p)).collect();
        v.extend(self.set.iter().filter(|p| !self.pool.contains(p)));
        v
    }

    fn with(&self, set: Vec<usize>) -> Self {
        Self::new(set, self.pool.clone())
    }

    /// Add needs an outside index; remove needs a member; shift needs both.
    pub fn applicable(&self) -> Vec<Action> {
        let can_add = self.pool.iter().any(|&p| !self.contains(p));
        let mut v = Vec::with_capacity(3);
        if can_add {
            v.push(Action::Add);
        }
        if !self.set.is_empty() {
            v.push(Action::Remove);
            if can_add {
                v.push(Action::Shift);
            }
        }
        v
    }
}

/// `-(1 - accuracy) / max(1, size)`.
pub fn reward(accuracy: f64, set_size: usize) -> f64 {
    -(1.0 - accuracy) / set_size.max(1) as f64
}

/// Best-state ordering: sets at or under the threshold win, smallest first;
/// otherwise lower accuracy wins. With a zero threshold this is plain
/// (accuracy, size) order.
pub fn better_state(acc: f64, size: usize, best_acc: f64, best_size: usize, tau: f64) -> bool {
    let key = |a: f64, s: usize| if a <= tau { (0u8, s as f64, a) } else { (1u8, a, s as f64) };
    key(acc, size).partial_cmp(&key(best_acc, best_size)) == Some(std::cmp::Ordering::Less)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QPolicy {
    #[serde(with = "table_as_list")]
    pub table: BTreeMap<(Vec<usize>, Action), f64>,
    pub best_state: Vec<usize>,
    pub best_accuracy: f64,
}

impl QPolicy {
    pub fn q(&self, s: &[usize], a: Action) -> f64 {
        self.table.get(&(s.to_vec(), a)).copied().unwrap_or(0.0)
    }

    fn max_q(&self, s: &RlState) -> f64 {
        s.applicable().into_iter().map(|a| self.q(&s.set, a)).fold(None, |m: Option<f64>, q| {
            Some(m.map_or(q, |m| m.max(q)))
        })
        .unwrap_or(0.0)
    }
}

mod table_as_list {
    use super::Action;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        state: Vec<usize>,
        action: Action,
        q: f64,
    }

    pub fn serialize<S: Serializer>(t: &BTreeMap<(Vec<usize>, Action), f64>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Entry> = t.iter().map(|((st, a), q)| Entry { state: st.clone(), action: *a, q: *q }).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(Vec<usize>, Action), f64>, D::Error> {
        let v = Vec::<Entry>::deserialize(d)?;
        Ok(v.into_iter().map(|e| ((e.state, e.action), e.q)).collect())
    }
}

/// ε-greedy over applicable actions; greedy ties go add < remove < shift.
/// The exploration coin is drawn even when ε is 0 or 1.
pub fn select_action(state: &RlState, policy: &QPolicy, epsilon: f64, rng: &mut impl Rng) -> Result<Action> {
    let acts = state.applicable();
    if acts.is_empty() {
        return Err(Error::StuckState);
    }
    if rng.random::<f64>() < epsilon {
        return Ok(acts[rng.random_range(0..acts.len())]);
    }
    let mut best = acts[0];
    for &a in &acts[1..] {
        if policy.q(&state.set, a) > policy.q(&state.set, best) {
            best = a;
        }
    }
    Ok(best)
}

/// Model-free transition under the `Ranked` or `Random` rule.
pub fn transition(state: &RlState, action: Action, rule: TransitionRule, rng: &mut impl Rng) -> Result<RlState> {
    if !state.applicable().contains(&action) {
        return Err(Error::Precondition(format!("{action:?} is not applicable")));
    }
    if rule == TransitionRule::Scan {
        return Err(Error::Parameter("scan transitions need an evaluator".into()));
    }
    let next = match action {
        Action::Add => {
            let p = pick_in(state, rule, rng);
            let mut s = state.set.clone();
            s.push(p);
            state.with(s)
        }
        Action::Remove => {
            let p = pick_out(state, rule, rng);
            state.with(state.set.iter().copied().filter(|&x| x != p).collect())
        }
        Action::Shift => {
            let p = pick_out(state, rule, rng);
            let mid = state.with(state.set.iter().copied().filter(|&x| x != p).collect());
            let q = pick_in(&mid, rule, rng);
            let mut s = mid.set.clone();
            s.push(q);
            mid.with(s)
        }
    };
    Ok(next)
}

fn pick_in(s: &RlState, rule: TransitionRule, rng: &mut impl Rng) -> usize {
    let outside = s.outside();
    match rule {
        TransitionRule::Random => outside[rng.random_range(0..outside.len())],
        _ => outside[0],
    }
}

fn pick_out(s: &RlState, rule: TransitionRule, rng: &mut impl Rng) -> usize {
    let members = s.members_ranked();
    match rule {
        TransitionRule::Random => members[rng.random_range(0..members.len())],
        _ => *members.last().expect("nonempty"),
    }
}

/// Evaluation-guided transition: every admissible candidate is tried and the
/// one leaving the lowest accuracy is kept. Add ties go to the higher-ranked
/// index, remove ties to the lower-ranked member. Returns the new state with
/// its accuracy.
pub fn scan_transition(state: &RlState, action: Action, eval: &mut LayerEvaluator) -> Result<(RlState, f64)> {
    if !state.applicable().contains(&action) {
        return Err(Error::Precondition(format!("{action:?} is not applicable")));
    }
    match action {
        Action::Add => Ok(scan_add(state, None, eval)),
        Action::Remove => Ok(scan_remove(state, eval)),
        Action::Shift => {
            let (mid, _) = scan_remove(state, eval);
            let removed = state.set.iter().copied().find(|p| !mid.contains(*p));
            if mid.outside().iter().all(|&p| Some(p) == removed) {
                return Err(Error::Precondition("shift has no replacement index".into()));
            }
            Ok(scan_add(&mid, removed, eval))
        }
    }
}

fn scan_add(state: &RlState, exclude: Option<usize>, eval: &mut LayerEvaluator) -> (RlState, f64) {
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut trial = state.set.clone();
    for p in state.outside() {
        if Some(p) == exclude {
            continue;
        }
        trial.push(p);
        let acc = eval.accuracy(&trial);
        trial.pop();
        if best.as_ref().is_none_or(|(b, _)| acc < *b) {
            let mut s = state.set.clone();
            s.push(p);
            best = Some((acc, s));
        }
    }
    let (acc, set) = best.expect("caller checked an outside index exists");
    (state.with(set), acc)
}

fn scan_remove(state: &RlState, eval: &mut LayerEvaluator) -> (RlState, f64) {
    let mut best: Option<(f64, usize)> = None;
    for p in state.members_ranked().into_iter().rev() {
        let trial: Vec<usize> = state.set.iter().copied().filter(|&x| x != p).collect();
        let acc = eval.accuracy(&trial);
        if best.is_none_or(|(b, _)| acc < b) {
            best = Some((acc, p));
        }
    }
    let (acc, p) = best.expect("state is nonempty");
    (state.with(state.set.iter().copied().filter(|&x| x != p).collect()), acc)
}

/// `Q(s,a) ← (1−lr)·Q(s,a) + lr·(r + discount·max Q(s',·))`, unseen entries 0.
pub fn q_update(policy: &mut QPolicy, s: &RlState, a: Action, r: f64, s_next: &RlState, learn_rate: f64, discount: f64) {
    let target = r + discount * policy.max_q(s_next);
    let old = policy.q(&s.set, a);
    policy.table.insert((s.set.clone(), a), (1.0 - learn_rate) * old + learn_rate * target);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub action: Action,
    pub size: usize,
    pub accuracy: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub flips: BitFlipSet,
    pub best_accuracy: f64,
    pub policy: QPolicy,
    pub trace: Vec<TraceStep>,
    pub evaluations: u64,
}

/// Runs `cfg.episodes` steps of one persistent trajectory from `s0` and
/// returns the best state seen as MSB flips in `layer`.
pub fn optimize(model: &QuantizedModel, layer: usize, s0: &RlState, data: &Dataset, cfg: &RlConfig) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    let n = model.weights(layer)?.len();
    if let Some(p) = s0.pool.iter().chain(&s0.set).find(|&&p| p >= n) {
        return Err(Error::Address(format!("param {p} outside layer {layer} with {n} weights")));
    }
    let mut eval = LayerEvaluator::new(model, data, layer)?;
    let mut rng: StageRng = stream(cfg.rng_seed, Stage::Agent);
    let mut policy = QPolicy::default();
    let tau = cfg.failure_threshold;

    let mut state = s0.clone();
    let acc0 = eval.accuracy(&state.set);
    policy.best_state = state.set.clone();
    policy.best_accuracy = acc0;
    let mut trace = Vec::with_capacity(cfg.episodes);

    for step in 0..cfg.episodes {
        let action = select_action(&state, &policy, cfg.epsilon, &mut rng)?;
        let (next, acc) = match cfg.transition {
            TransitionRule::Scan => scan_transition(&state, action, &mut eval)?,
            rule => {
                let next = transition(&state, action, rule, &mut rng)?;
                let acc = eval.accuracy(&next.set);
                (next, acc)
            }
        };
        let r = reward(acc, next.len());
        q_update(&mut policy, &state, action, r, &next, cfg.learn_rate, cfg.discount);
        if better_state(acc, next.len(), policy.best_accuracy, policy.best_state.len(), tau) {
            policy.best_state = next.set.clone();
            policy.best_accuracy = acc;
        }
        trace.push(TraceStep { step, action, size: next.len(), accuracy: acc, reward: r });
        state = next;
        if cfg.early_stop && acc <= tau {
            break;
        }
    }
    Ok(OptimizeOutcome {
        flips: BitFlipSet::msb_in_layer(layer, policy.best_state.iter().copied()),
        best_accuracy: policy.best_accuracy,
        evaluations: eval.evaluations(),
        policy,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipLlmOutcome {
    pub profile: SensitivityProfile,
    pub flips: BitFlipSet,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
    /// Flipped bits over all stored weight bits.
    pub perturbation_fraction: f64,
    pub trace: Vec<TraceStep>,
    pub evaluations: u64,
    pub q_entries: usize,
}

/// Profile, pick the target layer, optimize, then measure the final accuracy
/// on a perturbed copy of the model.
pub fn run_flipllm(model: &QuantizedModel, data: &Dataset, pcfg: &ProfileConfig, rcfg: &RlConfig) -> Result<FlipLlmOutcome> {
    let profile = profile_layers(model, data, pcfg)?;
    let eval = pcfg.subset(data);
    let pool = Arc::new(profile.ranked_candidates());
    let s0 = match rcfg.start {
        StartRule::Empty => RlState::new([], pool),
        StartRule::Candidates => RlState::new(pool.iter().copied(), pool.clone()),
    };
    let opt = optimize(model, profile.target_layer, &s0, &eval, rcfg)?;
    let (perturbed, _) = apply_flipset(model, &opt.flips)?;
    let final_accuracy = evaluate_accuracy(&perturbed, &eval, ExitSelector::Final)?;
    let baseline_accuracy = evaluate_accuracy(model, &eval, ExitSelector::Final)?;
    Ok(FlipLlmOutcome {
        perturbation_fraction: opt.flips.len() as f64 / (8 * model.total_weights()) as f64,
        q_entries: opt.policy.table.len(),
        flips: opt.flips,
        baseline_accuracy,
        final_accuracy,
        trace: opt.trace,
        evaluations: opt.evaluations + profile.entries.len() as u64,
        profile,
    })
}
