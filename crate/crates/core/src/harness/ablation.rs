use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::RunConfig;
use super::train::{read_run_log, run_training, save_json};
use crate::error::{invalid, Error, Result};

/// One row of an ablation matrix: a name and config overrides on top of the base run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    #[serde(default = "empty_object")]
    pub overrides: Value,
}

fn empty_object() -> Value {
    json!({})
}

impl AblationCell {
    pub fn new(name: &str, overrides: Value) -> Self {
        Self {
            name: name.into(),
            overrides,
        }
    }

    pub fn config(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        cfg.apply_json(&self.overrides)?;
        Ok(cfg)
    }
}

pub const PRESETS: [&str; 3] = ["table2", "table3-position", "table3-distribution"];

pub fn preset(name: &str) -> Result<Vec<AblationCell>> {
    let cell = AblationCell::new;
    Ok(match name {
        "table2" => vec![
            cell("baseline", json!({"method": "baseline"})),
            cell("dfa", json!({"method": "dfa"})),
            cell("constyx", json!({"method": "constyx"})),
        ],
        "table3-position" => vec![
            cell(
                "random_k",
                json!({"method": "constyx", "aug": {"mask_mode": "random_k"}}),
            ),
            cell(
                "max_k",
                json!({"method": "constyx", "aug": {"mask_mode": "max_k"}}),
            ),
            cell(
                "min_k",
                json!({"method": "constyx", "aug": {"mask_mode": "min_k"}}),
            ),
        ],
        "table3-distribution" => vec![
            cell(
                "normal",
                json!({"method": "constyx", "aug": {"cross_dist": "normal"}}),
            ),
            cell(
                "uniform",
                json!({"method": "constyx", "aug": {"cross_dist": "uniform"}}),
            ),
        ],
        other => {
            return Err(invalid!(
                "unknown ablation preset '{other}' (expected one of {PRESETS:?} or a JSON file)"
            ))
        }
    })
}

/// A preset name, or the path of a JSON array of cells.
pub fn load_matrix(spec: &str) -> Result<Vec<AblationCell>> {
    if PRESETS.contains(&spec) {
        return preset(spec);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return preset(spec);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let cells: Vec<AblationCell> = serde_json::from_slice(&bytes)?;
    if cells.is_empty() {
        return Err(invalid!("ablation matrix {} has no cells", path.display()));
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub seed: u64,
    /// Cross-domain average DSC of the selected checkpoint.
    pub average: Option<f64>,
    /// In-domain validation DSC of the selected checkpoint.
    pub val_dsc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub name: String,
    pub overrides: Value,
    pub runs: Vec<CellRun>,
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 for a single run.
    pub sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16}{:>10}{:>8}{:>6}",
            "cell", "mean DSC", "sd", "ok"
        );
        for c in &self.cells {
            let ok = c.runs.iter().filter(|r| r.error.is_none()).count();
            match (c.mean, c.sd) {
                (Some(m), Some(s)) => {
                    let _ = writeln!(
                        out,
                        "{:<16}{:>10.2}{:>8.2}{:>6}",
                        c.name,
                        100.0 * m,
                        100.0 * s,
                        ok
                    );
                }
                _ => {
                    let _ = writeln!(out, "{:<16}{:>10}{:>8}{:>6}", c.name, "-", "-", ok);
                }
            }
        }
        out
    }
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(sd))
}

/// Runs every `(cell, seed)` pair sequentially under `out/<cell>/seed_<seed>`.
///
/// With `reuse`, a run directory whose log records the same effective config
/// is read back instead of retrained. Failed runs are recorded and skipped.
/// Writes `ablation.json` and `ablation.txt` to `out`.
pub fn run_ablation(
    base: &RunConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    out: impl AsRef<Path>,
    reuse: bool,
) -> Result<AblationReport> {
    let out = out.as_ref();
    if seeds.is_empty() {
        return Err(invalid!("ablation needs at least one seed"));
    }
    if cells.is_empty() {
        return Err(invalid!("ablation needs at least one cell"));
    }
    let mut summaries = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = cell.config(base).and_then(|mut cfg| {
                cfg.seed = seed;
                cfg.out = out.join(&cell.name).join(format!("seed_{seed}"));
                if reuse {
                    if let Ok(log) = read_run_log(&cfg.out) {
                        if log.config == cfg {
                            log::info!("reusing {}", cfg.out.display());
                            return Ok(log);
                        }
                    }
                }
                log::info!("running cell {} seed {seed}", cell.name);
                run_training(&cfg, false).map(|o| o.log)
            });
            runs.push(match run {
                Ok(log) => CellRun {
                    seed,
                    average: Some(log.final_eval.average),
                    val_dsc: Some(log.val_eval.average),
                    error: None,
                },
                Err(e) => {
                    log::error!("cell {} seed {seed} failed: {e}", cell.name);
                    CellRun {
                        seed,
                        average: None,
                        val_dsc: None,
                        error: Some(e.to_string()),
                    }
                }
            });
        }
        let ok: Vec<f64> = runs.iter().filter_map(|r| r.average).collect();
        let (mean, sd) = mean_sd(&ok);
        summaries.push(CellSummary {
            name: cell.name.clone(),
            overrides: cell.overrides.clone(),
            runs,
            mean,
            sd,
        });
    }
    let report = AblationReport {
        seeds: seeds.to_vec(),
        cells: summaries,
    };
    save_json(&out.join("ablation.json"), &report)?;
    let txt = out.join("ablation.txt");
    std::fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}
