//! JSON and CSV emission. JSON is the full record; CSV files are flat
//! exports of its tables.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::campaign::{AblationTable, CampaignReport, ScalabilityReport, Timing};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Internal(e.to_string()))
}

#[derive(Serialize)]
struct CurveRow {
    seed: u64,
    flips: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct BaselineRow {
    seed: u64,
    method: String,
    flips: usize,
    final_accuracy: f64,
    evaluations: u64,
    flips_to_tau: Option<usize>,
}

#[derive(Serialize)]
struct AttackRow {
    seed: u64,
    target_layer: usize,
    critical_size: usize,
    baseline_accuracy: f64,
    final_accuracy: f64,
    evaluations: u64,
    error: Option<String>,
}

/// Writes the canonical report (`report.json`) or its CSV tables
/// (`attack.csv`, `curves.csv`, `baselines.csv`, `localization.csv`) into `dir`.
pub fn emit_report(report: &CampaignReport, format: Format, dir: &Path) -> Result<Vec<PathBuf>> {
    match format {
        Format::Json => Ok(vec![write(dir.join("report.json"), &to_json_pretty(report)?)?]),
        Format::Csv => {
            let mut curves = Vec::new();
            let mut baselines = Vec::new();
            let mut attacks = Vec::new();
            for r in &report.records {
                curves.extend(r.curve.iter().map(|p| CurveRow { seed: r.seed, flips: p.flips, accuracy: p.accuracy }));
                baselines.extend(r.baselines.iter().map(|b| BaselineRow {
                    seed: r.seed,
                    method: serde_json::to_value(b.method).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                    flips: b.flips.len(),
                    final_accuracy: b.final_accuracy,
                    evaluations: b.evaluations,
                    flips_to_tau: b.flips_to_tau,
                }));
                attacks.push(AttackRow {
                    seed: r.seed,
                    target_layer: r.profile.as_ref().map_or(usize::MAX, |p| p.target_layer),
                    critical_size: r.attack.as_ref().map_or(0, |a| a.critical.len()),
                    baseline_accuracy: r.baseline_accuracy,
                    final_accuracy: r.attack.as_ref().map_or(f64::NAN, |a| a.final_accuracy),
                    evaluations: r.attack.as_ref().map_or(0, |a| a.evaluations),
                    error: r.error.clone(),
                });
            }
            let loc: Vec<(String, usize)> =
                report.localization.by_role.iter().map(|(r, n)| (r.name().to_string(), *n)).collect();
            let mut loc_csv = csv::Writer::from_writer(Vec::new());
            loc_csv.write_record(["role", "count"])?;
            for (r, n) in &loc {
                loc_csv.write_record([r.as_str(), &n.to_string()])?;
            }
            let loc_bytes = loc_csv.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
            Ok(vec![
                write(dir.join("attack.csv"), &csv_bytes(&attacks)?)?,
                write(dir.join("curves.csv"), &csv_bytes(&curves)?)?,
                write(dir.join("baselines.csv"), &csv_bytes(&baselines)?)?,
                write(dir.join("localization.csv"), &loc_bytes)?,
            ])
        }
    }
}

/// Wall-clock figures go to their own file so the canonical report stays
/// byte-stable across machines.
pub fn emit_timing(timing: &Timing, dir: &Path) -> Result<PathBuf> {
    write(dir.join("timing.json"), &to_json_pretty(timing)?)
}

pub fn emit_ablation(table: &AblationTable, format: Format, dir: &Path) -> Result<PathBuf> {
    match format {
        Format::Json => write(dir.join("ablation.json"), &to_json_pretty(table)?),
        Format::Csv => write(dir.join("ablation.csv"), &csv_bytes(&table.rows)?),
    }
}

pub fn emit_scalability(rep: &ScalabilityReport, format: Format, dir: &Path) -> Result<PathBuf> {
    match format {
        Format::Json => write(dir.join("scalability.json"), &to_json_pretty(rep)?),
        Format::Csv => write(dir.join("scalability.csv"), &csv_bytes(&rep.points)?),
    }
}
