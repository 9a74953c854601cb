use std::path::Path;
use std::process::Command;

use fliplab::fault::{BitAddress, BitFlipSet};
use fliplab::harness::{emit_report, linear_fit, localization_report, prepare, run_campaign, CampaignConfig, Format};
use fliplab::model::Role;
use fliplab::Error;
use serde_json::json;

/// Small, fast campaign: 16-feature blobs, two hidden projections, two seeds.
fn small_config() -> serde_json::Value {
    json!({
        "data": { "generate": { "spec": { "samples": 800, "dim": 16, "informative": 4 }, "seed": 3, "train": 600 } },
        "model": { "train": { "seed": 11, "arch": [
            { "kind": "dense", "units": 12, "role": "attn_q" },
            { "kind": "relu" },
            { "kind": "softmax_exit" },
            { "kind": "dense", "units": 12, "role": "ffn" },
            { "kind": "relu" },
            { "kind": "softmax_exit" }
        ] } },
        "profile": { "rate_percent": 10.0, "eval_subset_size": null },
        "rl": { "episodes": 30 },
        "baselines": { "methods": ["random_flips", "greedy_selection"], "random_multiplier": 2 },
        "defenses": { "ecc": true, "epsilon": { "trials": 3, "fault_fraction": 0.1,
                      "signature": { "blocks": 24, "zero_band": 4 } } },
        "seeds": [1, 2]
    })
}

fn write_config(dir: &Path, v: &serde_json::Value) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fliplab"))
}

#[test]
fn localization_counts_by_role_and_layer() {
    let cfg: CampaignConfig = serde_json::from_value(small_config()).unwrap();
    let model = prepare(&cfg).unwrap().model;
    let a = BitFlipSet::msb_in_layer(0, [1, 2, 3]);
    let b = BitFlipSet::msb_in_layer(0, [4]);
    let loc = localization_report(&[a.clone(), b], &model).unwrap();
    assert_eq!(loc.total, 4);
    assert_eq!(loc.by_role[&Role::AttnQ], 4);
    assert_eq!(loc.by_role.values().sum::<usize>(), loc.total);
    assert_eq!(loc.by_role.len(), Role::ALL.len());

    let empty = localization_report(&[], &model).unwrap();
    assert_eq!(empty.total, 0);
    assert!(empty.by_role.values().all(|&n| n == 0));

    let mixed = localization_report(&[a, BitFlipSet::msb_in_layer(3, [0, 1])], &model).unwrap();
    assert_eq!(mixed.by_layer.values().sum::<usize>(), mixed.total);
    assert_eq!(mixed.by_role[&Role::Ffn], 2);

    let bad: BitFlipSet = [BitAddress::msb(9, 0)].into_iter().collect();
    assert!(matches!(localization_report(&[bad], &model), Err(Error::Address(_))));
}

#[test]
fn linear_fit_recovers_a_line_and_rejects_degenerate_input() {
    let f = linear_fit(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]).unwrap();
    assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
    assert!((f.r_squared - 1.0).abs() < 1e-12);
    assert!(matches!(linear_fit(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::Parameter(_))));
    assert!(matches!(linear_fit(&[1.0], &[1.0]), Err(Error::Parameter(_))));
}

#[test]
fn config_rejects_unknown_fields_and_empty_seeds() {
    let mut v = small_config();
    v["surprise"] = json!(1);
    assert!(serde_json::from_value::<CampaignConfig>(v).is_err());
    let mut v = small_config();
    v["defenses"]["epsilon"]["typo"] = json!(true);
    assert!(serde_json::from_value::<CampaignConfig>(v).is_err());

    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config();
    v["seeds"] = json!([]);
    let err = CampaignConfig::load(write_config(dir.path(), &v)).unwrap_err();
    assert!(err.is_config());
}

#[test]
fn campaign_report_is_deterministic_and_round_trips() {
    let cfg: CampaignConfig = serde_json::from_value(small_config()).unwrap();
    let prepared = prepare(&cfg).unwrap();
    let (report, timing) = run_campaign(&cfg, &prepared).unwrap();
    assert_eq!(report.records.len(), 2);
    assert!(report.records.iter().all(|r| r.error.is_none()));
    assert_eq!(timing.seconds_by_seed.len(), 2);

    let (again, _) = run_campaign(&cfg, &prepared).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&report, Format::Json, d1.path()).unwrap();
    emit_report(&again, Format::Json, d2.path()).unwrap();
    let bytes = std::fs::read(d1.path().join("report.json")).unwrap();
    assert_eq!(bytes, std::fs::read(d2.path().join("report.json")).unwrap());
    let back: fliplab::harness::CampaignReport = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(back, report);

    let files = emit_report(&report, Format::Csv, d1.path()).unwrap();
    assert_eq!(files.len(), 4);
    let curves = std::fs::read_to_string(d1.path().join("curves.csv")).unwrap();
    let expected_rows: usize = report.records.iter().map(|r| r.attack.as_ref().unwrap().critical.len() + 1).sum();
    assert_eq!(curves.lines().count(), expected_rows + 1);
    assert!(curves.starts_with("seed,flips,accuracy"));

    for r in &report.records {
        let ecc = r.ecc.as_ref().unwrap();
        assert_eq!(ecc.protected_accuracy, r.baseline_accuracy);
        let eps = r.epsilon.as_ref().unwrap();
        assert_eq!(eps.trials, 3);
        assert_eq!(eps.clean_detections, 0);
    }
}

#[test]
fn cli_help_lists_subcommands() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["gen-data", "train", "profile", "attack", "baseline", "defend", "campaign", "report"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn cli_generates_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = bin().arg("--config").arg(&cfg).arg("--out").arg(dir.path()).arg("gen-data").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train = fliplab::data::Dataset::load_csv(dir.path().join("train.csv"), None).unwrap();
    let eval = fliplab::data::Dataset::load_csv(dir.path().join("eval.csv"), None).unwrap();
    assert_eq!((train.len(), eval.len(), train.dim()), (600, 200, 16));
}

#[test]
fn cli_bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config();
    v["unknown"] = json!(0);
    let cfg = write_config(dir.path(), &v);
    let out = bin().arg("--config").arg(&cfg).arg("--out").arg(dir.path()).arg("campaign").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let missing = bin().args(["--config", "/nonexistent.json", "campaign"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn cli_attack_then_ecc_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let run = |args: &[&str]| {
        let out = bin().arg("--config").arg(&cfg).arg("--out").arg(dir.path()).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["train"]);
    let model = dir.path().join("model.json");
    run(&["attack", "--model", model.to_str().unwrap(), "--episodes", "20"]);
    let flips = BitFlipSet::load(dir.path().join("flips.json")).unwrap();
    assert!(!flips.is_empty());
    run(&["defend", "--model", model.to_str().unwrap(), "--mode", "ecc", "--flips", dir.path().join("flips.json").to_str().unwrap()]);
    let ecc: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("ecc.json")).unwrap()).unwrap();
    assert!(ecc["protected_accuracy"].as_f64().unwrap() >= ecc["unprotected_accuracy"].as_f64().unwrap());

    // Re-emitting a saved report reproduces it byte for byte.
    let cfg_v: CampaignConfig = serde_json::from_value(small_config()).unwrap();
    let prepared = prepare(&cfg_v).unwrap();
    let (report, _) = run_campaign(&CampaignConfig { seeds: vec![1], ..cfg_v }, &prepared).unwrap();
    let src = tempfile::tempdir().unwrap();
    emit_report(&report, Format::Json, src.path()).unwrap();
    let input = src.path().join("report.json");
    let out = bin().arg("--out").arg(dir.path()).args(["report", "--input"]).arg(&input).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(dir.path().join("report.json")).unwrap());
}
