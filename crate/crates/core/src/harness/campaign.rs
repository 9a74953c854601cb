use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    brute_force_oracle, gradient_greedy, greedy_selection, random_flips, random_search, BaselineResult, Method,
};
use crate::data::Dataset;
use crate::defense::epsilon::{epsilon_over, inject, random_msb_faults};
use crate::defense::{
    build_signatures, model_importances, protect_and_apply, Protection, WordOutcome, WordStatus,
};
use crate::error::{Error, Result};
use crate::eval::LayerEvaluator;
use crate::fault::BitFlipSet;
use crate::harness::config::{CampaignConfig, EpsilonBlock, Prepared};
use crate::model::{QuantizedModel, Role};
use crate::nn::{evaluate_accuracy, ExitSelector};
use crate::profile::{profile_layers, rank_by_score, SensitivityProfile};
use crate::rl::{optimize, run_flipllm, RlState, StartRule, TraceStep};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub entries: Vec<ProfileRow>,
    pub target_layer: usize,
    pub initial_candidates: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub layer: usize,
    pub role: Role,
    pub acc: f64,
    pub k: usize,
}

impl ProfileSummary {
    pub fn of(p: &SensitivityProfile, model: &QuantizedModel) -> Self {
        Self {
            entries: p
                .entries
                .iter()
                .map(|e| ProfileRow { layer: e.layer, role: model.layers()[e.layer].role, acc: e.post_flip_accuracy, k: e.k })
                .collect(),
            target_layer: p.target_layer,
            initial_candidates: p.initial_candidates.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub critical: BitFlipSet,
    pub final_accuracy: f64,
    pub reached_tau: bool,
    pub evaluations: u64,
    pub perturbation_fraction: f64,
    pub q_entries: usize,
    pub trace: Vec<TraceStep>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub flips: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EccRecord {
    pub protected_accuracy: f64,
    pub unprotected_accuracy: f64,
    pub words: Vec<WordStatus>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRecord {
    pub fault_layer: usize,
    pub faults_per_trial: usize,
    pub trials: usize,
    pub detections: usize,
    pub clean_detections: usize,
    pub golden_accuracy: f64,
    pub golden_guarded_accuracy: f64,
    pub mean_faulty_accuracy: f64,
    pub mean_mitigated_accuracy: f64,
    /// Share of the fault-induced accuracy drop won back by mitigation.
    pub recovery: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub baseline_accuracy: f64,
    pub profile: Option<ProfileSummary>,
    pub attack: Option<AttackRecord>,
    pub curve: Vec<CurvePoint>,
    pub baselines: Vec<BaselineResult>,
    pub ecc: Option<EccRecord>,
    pub epsilon: Option<EpsilonRecord>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub by_role: BTreeMap<Role, usize>,
    pub by_layer: BTreeMap<usize, usize>,
    pub total: usize,
}

/// Canonical campaign output; wall times live in [`Timing`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub model_fingerprint: String,
    pub eval_rows: usize,
    pub records: Vec<SeedRecord>,
    pub localization: Localization,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds_by_seed: BTreeMap<u64, f64>,
    pub total_seconds: f64,
}

/// Counts of critical bits per role (all roles listed) and per layer.
pub fn localization_report(sets: &[BitFlipSet], model: &QuantizedModel) -> Result<Localization> {
    let mut loc = Localization { by_role: Role::ALL.iter().map(|&r| (r, 0)).collect(), ..Default::default() };
    for set in sets {
        for a in set.addresses() {
            let layer = model
                .layer(a.layer)
                .ok_or_else(|| Error::Address(format!("layer {} does not exist", a.layer)))?;
            *loc.by_role.entry(layer.role).or_default() += 1;
            *loc.by_layer.entry(a.layer).or_default() += 1;
            loc.total += 1;
        }
    }
    Ok(loc)
}

/// Accuracy after flipping the first 0, 1, .., n params of `order`.
pub fn accuracy_curve(model: &QuantizedModel, data: &Dataset, layer: usize, order: &[usize]) -> Result<Vec<CurvePoint>> {
    let mut eval = LayerEvaluator::new(model, data, layer)?;
    Ok((0..=order.len())
        .map(|n| CurvePoint { flips: n, accuracy: eval.accuracy(&order[..n]) })
        .collect())
}

/// Runs every configured stage for every seed. A failing seed is recorded and
/// the remaining seeds still run.
pub fn run_campaign(cfg: &CampaignConfig, prepared: &Prepared) -> Result<(CampaignReport, Timing)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut timing = Timing::default();
    let mut records = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let t = Instant::now();
        let rec = match run_seed(cfg, prepared, seed) {
            Ok(r) => r,
            Err(e) => SeedRecord {
                seed,
                baseline_accuracy: f64::NAN,
                profile: None,
                attack: None,
                curve: vec![],
                baselines: vec![],
                ecc: None,
                epsilon: None,
                error: Some(e.to_string()),
            },
        };
        timing.seconds_by_seed.insert(seed, t.elapsed().as_secs_f64());
        records.push(rec);
    }
    timing.total_seconds = start.elapsed().as_secs_f64();
    let sets: Vec<BitFlipSet> = records.iter().filter_map(|r| r.attack.as_ref().map(|a| a.critical.clone())).collect();
    let localization = localization_report(&sets, &prepared.model)?;
    let report = CampaignReport {
        model_fingerprint: fingerprint(&prepared.model)?,
        eval_rows: prepared.eval.len(),
        records,
        localization,
    };
    Ok((report, timing))
}

fn fingerprint(model: &QuantizedModel) -> Result<String> {
    let json = model.to_json()?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

fn seeded(cfg: &CampaignConfig, seed: u64) -> CampaignConfig {
    let mut c = cfg.clone();
    c.profile.eval_subset_seed = seed;
    c.rl.rng_seed = seed;
    c
}

pub fn run_seed(cfg: &CampaignConfig, prepared: &Prepared, seed: u64) -> Result<SeedRecord> {
    let cfg = seeded(cfg, seed);
    let model = &prepared.model;
    let eval = cfg.profile.subset(&prepared.eval);
    let baseline_accuracy = evaluate_accuracy(model, &eval, ExitSelector::Final)?;
    let out = run_flipllm(model, &prepared.eval, &cfg.profile, &cfg.rl)?;
    let layer = out.profile.target_layer;
    let pool = out.profile.ranked_candidates();
    let tau = cfg.rl.failure_threshold;

    let order: Vec<usize> = pool.iter().copied().filter(|p| out.flips.params_in(layer).contains(p)).collect();
    let curve = accuracy_curve(model, &eval, layer, &order)?;

    let mut baselines = Vec::new();
    let b = &cfg.baselines;
    let mut greedy_evals = None;
    for method in &b.methods {
        let r = match method {
            Method::RandomFlips => {
                let n = b.random_multiplier * out.flips.len().max(1);
                random_flips(model, &eval, layer, n, seed, b.random_bits)?
            }
            Method::GradientGreedy => gradient_greedy(model, &eval, layer, b.gradient_budget, tau)?,
            Method::GreedySelection => {
                let r = greedy_selection(model, &eval, layer, &pool, b.greedy_budget.unwrap_or(pool.len()), tau)?;
                greedy_evals = Some(r.evaluations as usize);
                r
            }
            Method::RandomSearch => {
                let trials = b.random_search_trials.or(greedy_evals).unwrap_or(1000);
                random_search(model, &eval, layer, &pool, trials, seed, tau)?
            }
            Method::BruteForce => {
                let small: Vec<usize> = pool.iter().copied().take(crate::baselines::BRUTE_FORCE_MAX_POOL).collect();
                brute_force_oracle(model, &eval, layer, &small, 2)?
            }
        };
        baselines.push(r);
    }

    let ecc = if cfg.defenses.ecc { Some(ecc_record(model, &eval, &out.flips)?) } else { None };
    let epsilon = match &cfg.defenses.epsilon {
        Some(e) => Some(epsilon_record(model, &eval, e, seed)?),
        None => None,
    };

    Ok(SeedRecord {
        seed,
        baseline_accuracy,
        profile: Some(ProfileSummary::of(&out.profile, model)),
        attack: Some(AttackRecord {
            reached_tau: out.final_accuracy <= tau,
            critical: out.flips,
            final_accuracy: out.final_accuracy,
            evaluations: out.evaluations,
            perturbation_fraction: out.perturbation_fraction,
            q_entries: out.q_entries,
            trace: out.trace,
        }),
        curve,
        baselines,
        ecc,
        epsilon,
        error: None,
    })
}

/// Critical set behind full ECC and without protection.
pub fn ecc_record(model: &QuantizedModel, data: &Dataset, flips: &BitFlipSet) -> Result<EccRecord> {
    let (protected, words) = protect_and_apply(model, flips, |w| Protection::All.covers(w))?;
    let (bare, _) = protect_and_apply(model, flips, |_| false)?;
    Ok(EccRecord {
        protected_accuracy: evaluate_accuracy(&protected, data, ExitSelector::Final)?,
        unprotected_accuracy: evaluate_accuracy(&bare, data, ExitSelector::Final)?,
        words,
    })
}

/// Seeded fault-injection trials plus the same number of fault-free runs.
pub fn epsilon_record(model: &QuantizedModel, data: &Dataset, e: &EpsilonBlock, seed: u64) -> Result<EpsilonRecord> {
    let sigs = build_signatures(model, &e.signature)?;
    let imps = model_importances(model);
    let golden_accuracy = evaluate_accuracy(model, data, ExitSelector::Final)?;
    let clean = epsilon_over(model, &sigs, &imps, &e.detection, data)?;
    let clean_detections = if clean.detected { e.trials } else { 0 };
    let mut detections = 0;
    let mut faulty_sum = 0.0;
    let mut mitigated_sum = 0.0;
    let mut faults_per_trial = 0;
    for trial in 0..e.trials as u64 {
        let faults = random_msb_faults(model, e.fault_layer, e.fault_fraction, seed, trial)?;
        faults_per_trial = faults.len();
        let faulty = inject(model, &faults)?;
        faulty_sum += evaluate_accuracy(&faulty, data, ExitSelector::Final)?;
        let run = epsilon_over(&faulty, &sigs, &imps, &e.detection, data)?;
        detections += run.detected as usize;
        mitigated_sum += run.accuracy;
    }
    let n = e.trials.max(1) as f64;
    let (mean_faulty, mean_mitigated) = (faulty_sum / n, mitigated_sum / n);
    let drop = golden_accuracy - mean_faulty;
    Ok(EpsilonRecord {
        fault_layer: e.fault_layer,
        faults_per_trial,
        trials: e.trials,
        detections,
        clean_detections,
        golden_accuracy,
        golden_guarded_accuracy: clean.accuracy,
        mean_faulty_accuracy: mean_faulty,
        mean_mitigated_accuracy: mean_mitigated,
        recovery: if drop > 0.0 { (mean_mitigated - mean_faulty) / drop } else { f64::NAN },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub alpha: f64,
    pub seed: u64,
    pub target_layer: usize,
    pub critical_size: usize,
    pub final_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// (alpha, median critical-set size across seeds), sorted by alpha.
    pub medians: Vec<(f64, f64)>,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One attack per (alpha, seed) with everything else fixed.
pub fn ablation_alpha(cfg: &CampaignConfig, prepared: &Prepared, grid: &[f64]) -> Result<AblationTable> {
    if grid.is_empty() || grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Parameter("alpha grid must be a nonempty subset of [0, 1]".into()));
    }
    let mut alphas = grid.to_vec();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for &alpha in &alphas {
        let mut sizes = Vec::new();
        for &seed in &cfg.seeds {
            let mut c = seeded(cfg, seed);
            c.profile.alpha = alpha;
            let out = run_flipllm(&prepared.model, &prepared.eval, &c.profile, &c.rl)?;
            sizes.push(out.flips.len() as f64);
            rows.push(AblationRow {
                alpha,
                seed,
                target_layer: out.profile.target_layer,
                critical_size: out.flips.len(),
                final_accuracy: out.final_accuracy,
            });
        }
        medians.push((alpha, median(&mut sizes)));
    }
    Ok(AblationTable { rows, medians })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Parameter("a fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Parameter("all x values are equal; the fit is degenerate".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r_squared })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub k: usize,
    pub seed: u64,
    pub evaluations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityReport {
    pub points: Vec<ScalePoint>,
    pub fit: LinearFit,
}

/// Phase-three runs with the pool cut to the top `k` scores of the target
/// layer; fits evaluation count against `k`.
pub fn scalability_sweep(cfg: &CampaignConfig, prepared: &Prepared, k_values: &[usize]) -> Result<(ScalabilityReport, Timing)> {
    if k_values.len() < 3 || k_values.contains(&0) {
        return Err(Error::Parameter("scalability needs at least three positive k values".into()));
    }
    let start = Instant::now();
    let mut timing = Timing::default();
    let mut points = Vec::new();
    for &seed in &cfg.seeds {
        let t = Instant::now();
        let c = seeded(cfg, seed);
        let profile = profile_layers(&prepared.model, &prepared.eval, &c.profile)?;
        let layer = profile.target_layer;
        let scores = &profile.entry(layer).expect("target profiled").scores;
        let all: Vec<usize> = (0..scores.len()).collect();
        let ranked = rank_by_score(&all, scores);
        let eval = c.profile.subset(&prepared.eval);
        for &k in k_values {
            if k > ranked.len() {
                return Err(Error::Parameter(format!("k = {k} exceeds the layer's {} weights", ranked.len())));
            }
            let pool = Arc::new(ranked[..k].to_vec());
            let s0 = match c.rl.start {
                StartRule::Empty => RlState::new([], pool),
                StartRule::Candidates => RlState::new(pool.iter().copied(), pool.clone()),
            };
            let mut rl = c.rl.clone();
            rl.early_stop = false;
            let o = optimize(&prepared.model, layer, &s0, &eval, &rl)?;
            points.push(ScalePoint { k, seed, evaluations: o.evaluations });
        }
        timing.seconds_by_seed.insert(seed, t.elapsed().as_secs_f64());
    }
    timing.total_seconds = start.elapsed().as_secs_f64();
    let xs: Vec<f64> = points.iter().map(|p| p.k as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.evaluations as f64).collect();
    let fit = linear_fit(&xs, &ys)?;
    Ok((ScalabilityReport { points, fit }, timing))
}

/// True when every touched word is protected and corrected.
pub fn fully_corrected(words: &[WordStatus]) -> bool {
    words.iter().all(|w| w.outcome == WordOutcome::Corrected)
}
