use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fliplab::baselines::{
    brute_force_oracle, gradient_greedy, greedy_selection, random_flips, random_search, BitChoice, Method,
    BRUTE_FORCE_MAX_POOL,
};
use fliplab::defense::{build_signatures, model_importances, protect_and_apply, signature_records, Protection};
use fliplab::fault::BitFlipSet;
use fliplab::harness::campaign::{ecc_record, epsilon_record, ProfileSummary};
use fliplab::harness::config::{load_data, DataSource, EpsilonBlock, ModelSource};
use fliplab::harness::report::to_json_pretty;
use fliplab::harness::{
    ablation_alpha, emit_ablation, emit_report, emit_scalability, emit_timing, prepare, run_campaign,
    scalability_sweep, CampaignConfig, CampaignReport, Format, Prepared,
};
use fliplab::nn::{evaluate_accuracy, ExitSelector};
use fliplab::profile::profile_layers;
use fliplab::rl::run_flipllm;
use fliplab::train::train_reference;
use fliplab::Error;

/// Bit-flip attack and defense laboratory for int8 models.
#[derive(Parser)]
#[command(name = "fliplab", version)]
struct Cli {
    /// Campaign configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed: data seed for gen-data, init seed for train,
    /// the single campaign seed everywhere else.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArg {
    /// Use this model file instead of the configured model source.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the blob dataset and write train.csv / eval.csv.
    GenData,
    /// Train and quantize the reference model; writes model.json.
    Train,
    /// Per-layer sensitivity profile; writes profile.json.
    Profile {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Profile plus Q-learning search; writes attack.json and flips.json.
    Attack {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// One baseline attack on the profiled target layer.
    Baseline {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, value_enum)]
        method: Method,
        /// Flip count for random_flips, budget for the greedy methods,
        /// trial count for random_search.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_enum, default_value = "msb")]
        bits: BitChoice,
    },
    /// ECC protection of a flip set, or EPSILON fault-injection trials.
    Defend {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, value_enum)]
        mode: DefendMode,
        /// Flip set file (ecc mode).
        #[arg(long)]
        flips: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        protect: ProtectArg,
        #[arg(long)]
        m: Option<f64>,
        /// Exit confidence threshold.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        zero_band: Option<u8>,
        #[arg(long)]
        fault_layer: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Every configured stage for every seed; writes report and timing.
    Campaign,
    /// Critical-set size across alpha values.
    AblateAlpha {
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        grid: Vec<f64>,
    },
    /// Evaluation count against candidate pool size.
    ScaleSweep {
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
        k: Vec<usize>,
    },
    /// Re-emit a saved report.json in the requested format.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DefendMode {
    Ecc,
    Epsilon,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ProtectArg {
    All,
    Flipset,
    None,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_config));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

fn load_config(cli: &Cli) -> fliplab::Result<CampaignConfig> {
    let mut cfg = match &cli.config {
        Some(p) => CampaignConfig::load(p)?,
        None => CampaignConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn prepared(cfg: &CampaignConfig, m: &ModelArg) -> fliplab::Result<Prepared> {
    let mut cfg = cfg.clone();
    if let Some(p) = &m.model {
        cfg.model = ModelSource::File { path: p.clone() };
        cfg.validate()?;
    }
    prepare(&cfg)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, to_json_pretty(v)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn done(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let seed = cfg.seeds[0];
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData => {
            let mut src = cfg.data.clone();
            if let (DataSource::Generate { seed: s, .. }, Some(o)) = (&mut src, cli.seed) {
                *s = o;
            }
            if matches!(src, DataSource::Files { .. }) {
                bail!(Error::Config("gen-data needs a generated data source".into()));
            }
            let (train, eval) = load_data(&src)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            train.save_csv(out.join("train.csv"))?;
            eval.save_csv(out.join("eval.csv"))?;
            done(&[out.join("train.csv"), out.join("eval.csv")]);
        }
        Command::Train => {
            let (train, eval) = load_data(&cfg.data)?;
            let (arch, mseed, tc) = match &cfg.model {
                ModelSource::Train { arch, seed, train } => (arch.clone(), cli.seed.unwrap_or(*seed), train.clone()),
                ModelSource::File { .. } => bail!(Error::Config("train needs a model source of kind train".into())),
            };
            let (model, rep) = train_reference(&arch, &train, mseed, &tc)?;
            let eval_acc = evaluate_accuracy(&model, &eval, ExitSelector::Final)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            model.save(out.join("model.json"))?;
            eprintln!("train accuracy {:.4}, eval accuracy {eval_acc:.4}", rep.train_accuracy);
            done(&[out.join("model.json")]);
        }
        Command::Profile { model, alpha } => {
            let p = prepared(&cfg, model)?;
            let mut pc = cfg.profile.clone();
            pc.eval_subset_seed = seed;
            if let Some(a) = alpha {
                pc.alpha = *a;
            }
            pc.validate().map_err(|e| Error::Config(e.to_string()))?;
            let prof = profile_layers(&p.model, &p.eval, &pc)?;
            done(&[write_json(out, "profile.json", &ProfileSummary::of(&prof, &p.model))?]);
        }
        Command::Attack { model, episodes } => {
            let p = prepared(&cfg, model)?;
            let (mut pc, mut rc) = (cfg.profile.clone(), cfg.rl.clone());
            pc.eval_subset_seed = seed;
            rc.rng_seed = seed;
            if let Some(g) = episodes {
                rc.episodes = *g;
            }
            rc.validate().map_err(|e| Error::Config(e.to_string()))?;
            let o = run_flipllm(&p.model, &p.eval, &pc, &rc)?;
            #[derive(Serialize)]
            struct AttackOut<'a> {
                target_layer: usize,
                critical: &'a BitFlipSet,
                baseline_accuracy: f64,
                final_accuracy: f64,
                evaluations: u64,
                perturbation_fraction: f64,
            }
            let a = AttackOut {
                target_layer: o.profile.target_layer,
                critical: &o.flips,
                baseline_accuracy: o.baseline_accuracy,
                final_accuracy: o.final_accuracy,
                evaluations: o.evaluations,
                perturbation_fraction: o.perturbation_fraction,
            };
            let a_path = write_json(out, "attack.json", &a)?;
            o.flips.save(out.join("flips.json"))?;
            done(&[a_path, out.join("flips.json")]);
        }
        Command::Baseline { model, method, budget, bits } => {
            let p = prepared(&cfg, model)?;
            let mut pc = cfg.profile.clone();
            pc.eval_subset_seed = seed;
            let prof = profile_layers(&p.model, &p.eval, &pc)?;
            let layer = prof.target_layer;
            let pool = prof.ranked_candidates();
            let eval = pc.subset(&p.eval);
            let tau = cfg.rl.failure_threshold;
            let b = &cfg.baselines;
            let r = match method {
                Method::RandomFlips => random_flips(&p.model, &eval, layer, budget.unwrap_or(250), seed, *bits)?,
                Method::GradientGreedy => {
                    gradient_greedy(&p.model, &eval, layer, budget.unwrap_or(b.gradient_budget), tau)?
                }
                Method::GreedySelection => {
                    greedy_selection(&p.model, &eval, layer, &pool, budget.unwrap_or(pool.len()), tau)?
                }
                Method::RandomSearch => random_search(&p.model, &eval, layer, &pool, budget.unwrap_or(1000), seed, tau)?,
                Method::BruteForce => {
                    let small: Vec<usize> = pool.iter().copied().take(BRUTE_FORCE_MAX_POOL).collect();
                    brute_force_oracle(&p.model, &eval, layer, &small, 2)?
                }
            };
            let label = serde_json::to_value(method)?;
            let name = format!("baseline_{}.json", label.as_str().unwrap_or("method"));
            done(&[write_json(out, &name, &r)?]);
        }
        Command::Defend { model, mode, flips, protect, m, gamma, blocks, zero_band, fault_layer, trials } => {
            let p = prepared(&cfg, model)?;
            let mut pc = cfg.profile.clone();
            pc.eval_subset_seed = seed;
            let eval = pc.subset(&p.eval);
            match mode {
                DefendMode::Ecc => {
                    let Some(path) = flips else {
                        bail!(Error::Config("--flips is required in ecc mode".into()));
                    };
                    let set = BitFlipSet::load(path)?;
                    let guard = match protect {
                        ProtectArg::All => Protection::All,
                        ProtectArg::Flipset => Protection::words_of(&set),
                        ProtectArg::None => Protection::None,
                    };
                    let (protected, words) = protect_and_apply(&p.model, &set, |w| guard.covers(w))?;
                    #[derive(Serialize)]
                    struct EccOut {
                        protect: ProtectArg,
                        protected_accuracy: f64,
                        unprotected_accuracy: f64,
                        words: Vec<fliplab::defense::WordStatus>,
                    }
                    let rec = EccOut {
                        protect: *protect,
                        protected_accuracy: evaluate_accuracy(&protected, &eval, ExitSelector::Final)?,
                        unprotected_accuracy: ecc_record(&p.model, &eval, &set)?.unprotected_accuracy,
                        words,
                    };
                    done(&[write_json(out, "ecc.json", &rec)?]);
                }
                DefendMode::Epsilon => {
                    let mut e = cfg.defenses.epsilon.clone().unwrap_or_default();
                    apply_epsilon_flags(&mut e, *m, *gamma, *blocks, *zero_band, *fault_layer, *trials);
                    let sigs = build_signatures(&p.model, &e.signature)?;
                    let records = signature_records(&sigs, &model_importances(&p.model), e.detection.m);
                    let s_path = write_json(out, "signatures.json", &records)?;
                    let rec = epsilon_record(&p.model, &eval, &e, seed)?;
                    done(&[s_path, write_json(out, "epsilon.json", &rec)?]);
                }
            }
        }
        Command::Campaign => {
            let p = prepare(&cfg)?;
            let dir = cfg.out_dir.clone().unwrap_or_else(|| out.to_path_buf());
            let (report, timing) = run_campaign(&cfg, &p)?;
            let mut paths = emit_report(&report, cli.format, &dir)?;
            paths.push(emit_timing(&timing, &dir)?);
            done(&paths);
            let failed: Vec<_> = report.records.iter().filter(|r| r.error.is_some()).map(|r| r.seed).collect();
            if !failed.is_empty() {
                bail!("seeds {failed:?} failed; see the report");
            }
        }
        Command::AblateAlpha { grid } => {
            let p = prepare(&cfg)?;
            let table = ablation_alpha(&cfg, &p, grid)?;
            done(&[emit_ablation(&table, cli.format, out)?]);
        }
        Command::ScaleSweep { k } => {
            let p = prepare(&cfg)?;
            let (rep, timing) = scalability_sweep(&cfg, &p, k)?;
            eprintln!("r^2 = {:.4}, {:.1} s", rep.fit.r_squared, timing.total_seconds);
            done(&[emit_scalability(&rep, cli.format, out)?]);
        }
        Command::Report { input } => {
            let text = std::fs::read_to_string(input).map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
            let report: CampaignReport =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
            done(&emit_report(&report, cli.format, out)?);
        }
    }
    Ok(())
}

fn apply_epsilon_flags(
    e: &mut EpsilonBlock,
    m: Option<f64>,
    gamma: Option<f64>,
    blocks: Option<usize>,
    zero_band: Option<u8>,
    fault_layer: Option<usize>,
    trials: Option<usize>,
) {
    if let Some(v) = m {
        e.detection.m = v;
    }
    if let Some(v) = gamma {
        e.detection.confidence_threshold = v;
    }
    if let Some(v) = blocks {
        e.signature.blocks = v;
    }
    if let Some(v) = zero_band {
        e.signature.zero_band = v;
    }
    if let Some(v) = fault_layer {
        e.fault_layer = v;
    }
    if let Some(v) = trials {
        e.trials = v;
    }
}
