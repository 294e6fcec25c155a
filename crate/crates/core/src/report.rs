//! CSV/JSON emission for campaign results and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::campaign::{CampaignConfig, CampaignResult, LayerCell, ScenarioRun, ScenarioSummary};
use crate::error::{Error, Result};
use crate::fault::write_sites_csv;

pub const TRIAL_HEADER: &str = "scenario,trial,fault_count,faulty_correct,baseline_correct,delta,effective";
pub const SUMMARY_HEADER: &str = "scenario,network,target,fault_model,fault_count,trials,workload_len,baseline_accuracy,\
accuracy_reduction,accuracy_reduction_pct,effective_faults_pct,min,q1,median,q3,max";
pub const LAYER_HEADER: &str =
    "layer,kind,bits,fault_model,fault_count,trials,mean_delta,mean_delta_pct,effective_faults_pct,min,q1,median,q3,max";

/// Everything needed to regenerate a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub master_seed: u64,
    pub config: CampaignConfig,
    pub model_crc32: u32,
    pub baseline_correct: usize,
    pub workload_len: usize,
    pub layers: Option<Vec<usize>>,
    pub files: Vec<String>,
}

/// File-name form of a scenario key.
pub fn file_stem(key: &str) -> String {
    key.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn trial_rows(out: &mut String, run: &ScenarioRun) {
    let key = run.scenario.key();
    for o in &run.outcomes {
        let _ = writeln!(
            out,
            "{key},{},{},{},{},{},{}",
            o.trial,
            o.fault_count,
            o.faulty_correct,
            o.baseline_correct,
            o.delta(),
            o.effective()
        );
    }
}

pub fn trial_csv(runs: &[ScenarioRun]) -> String {
    let mut out = format!("{TRIAL_HEADER}\n");
    for r in runs {
        trial_rows(&mut out, r);
    }
    out
}

pub fn sites_csv(run: &ScenarioRun) -> String {
    let rows: Vec<_> = run
        .outcomes
        .iter()
        .flat_map(|o| o.sites.iter().map(move |s| (o.trial, *s)))
        .collect();
    let mut buf = Vec::new();
    write_sites_csv(&mut buf, &rows).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

pub fn summary_csv(summaries: &[ScenarioSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.scenario,
            s.network,
            s.target,
            s.fault_model,
            s.fault_count,
            s.trials,
            s.workload_len,
            s.baseline_accuracy,
            s.mean_delta,
            s.mean_delta_pct,
            s.effective_faults_pct,
            s.min,
            s.q1,
            s.median,
            s.q3,
            s.max
        );
    }
    out
}

pub fn summary_json(summaries: &[ScenarioSummary]) -> Result<String> {
    Ok(serde_json::to_string_pretty(summaries)? + "\n")
}

pub fn layer_matrix_csv(cells: &[LayerCell]) -> String {
    let mut out = format!("{LAYER_HEADER}\n");
    for c in cells {
        for s in &c.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                c.layer,
                c.kind.as_str(),
                c.bits,
                s.fault_model,
                s.fault_count,
                s.trials,
                s.mean_delta,
                s.mean_delta_pct,
                s.effective_faults_pct,
                s.min,
                s.q1,
                s.median,
                s.q3,
                s.max
            );
        }
    }
    out
}

fn write(dir: &Path, name: &str, text: &str, files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    files.push(name.to_string());
    Ok(())
}

fn finish(dir: &Path, mut manifest: Manifest, mut files: Vec<String>) -> Result<Vec<PathBuf>> {
    files.push("manifest.json".into());
    manifest.files = files.clone();
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    let path = dir.join("manifest.json");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(files.iter().map(|f| dir.join(f)).collect())
}

fn base_manifest(command: &str, cfg: &CampaignConfig, model_crc32: u32, baseline_correct: usize, workload_len: usize) -> Manifest {
    Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        master_seed: cfg.master_seed,
        config: cfg.clone(),
        model_crc32,
        baseline_correct,
        workload_len,
        layers: None,
        files: Vec::new(),
    }
}

/// Writes `trials.csv`, `summary.csv`, `summary.json`, one fault-site CSV
/// per scenario under `faults/`, and `manifest.json`.
pub fn emit_campaign(dir: &Path, cfg: &CampaignConfig, model_crc32: u32, result: &CampaignResult) -> Result<Vec<PathBuf>> {
    if result.runs.is_empty() {
        return Err(Error::NoOutcomes);
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let summaries = result.summaries();
    write(dir, "trials.csv", &trial_csv(&result.runs), &mut files)?;
    write(dir, "summary.csv", &summary_csv(&summaries), &mut files)?;
    write(dir, "summary.json", &summary_json(&summaries)?, &mut files)?;
    for run in &result.runs {
        let name = format!("faults/{}.csv", file_stem(&run.scenario.key()));
        write(dir, &name, &sites_csv(run), &mut files)?;
    }
    let manifest = base_manifest("campaign", cfg, model_crc32, result.baseline_correct, result.workload_len);
    finish(dir, manifest, files)
}

/// Writes `layers.csv`, `layers.json` and `manifest.json`.
pub fn emit_layers(
    dir: &Path,
    cfg: &CampaignConfig,
    model_crc32: u32,
    baseline_correct: usize,
    layers: &[usize],
    cells: &[LayerCell],
) -> Result<Vec<PathBuf>> {
    if cells.is_empty() {
        return Err(Error::NoOutcomes);
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    write(dir, "layers.csv", &layer_matrix_csv(cells), &mut files)?;
    write(dir, "layers.json", &(serde_json::to_string_pretty(cells)? + "\n"), &mut files)?;
    let workload = cells[0].summaries.first().map_or(0, |s| s.workload_len);
    let mut manifest = base_manifest("layers", cfg, model_crc32, baseline_correct, workload);
    manifest.layers = Some(layers.to_vec());
    finish(dir, manifest, files)
}
