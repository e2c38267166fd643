//! Aggregates per-cell traces into log-MSE curves and final-iterate comparisons.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{
    cell_dir, cells, csv_bytes, read_csv, write_atomic, BaselineRow, BASELINE_FILE, CONFIG_FILE, ERROR_FILE,
    TRACE_FILE,
};
use crate::error::Result;
use crate::federated::TraceRow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub cell: String,
    pub algorithm: String,
    pub t: usize,
    /// `log` of the MSE pooled over replicates and clients.
    pub log_mse: f64,
    pub em_log_mse: Option<f64>,
    pub semi_em_log_mse: Option<f64>,
    pub local_log_mse: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalComparison {
    pub cell: String,
    pub algorithm: String,
    pub t: usize,
    pub mse: f64,
    pub em_mse: Option<f64>,
    pub semi_em_mse: Option<f64>,
    pub local_mse: Option<f64>,
    pub ratio_to_em: Option<f64>,
    pub ratio_to_local: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Partial,
    Missing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusRow {
    pub cell: String,
    pub status: CellStatus,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub curves: Vec<CurvePoint>,
    pub finals: Vec<FinalComparison>,
    pub status: Vec<StatusRow>,
}

impl Summary {
    pub fn incomplete(&self) -> usize {
        self.status.iter().filter(|s| s.status != CellStatus::Ok).count()
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Curves and final comparisons for one cell's rows.
pub fn summarize_cell(cell: &str, trace: &[TraceRow], baselines: &[BaselineRow]) -> (Vec<CurvePoint>, Vec<FinalComparison>) {
    let base = |method: &str| {
        let v: Vec<f64> = baselines.iter().filter(|b| b.method == method).map(|b| b.mse).collect();
        mean(&v)
    };
    let em = base("em");
    let semi_em = base("semi-em");
    let local = base("local");
    let mut groups: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in trace {
        groups.entry(&r.algorithm).or_default().entry(r.t).or_default().push(r.mse);
    }
    let mut curves = Vec::new();
    let mut finals = Vec::new();
    for (algo, by_t) in groups {
        for (&t, v) in &by_t {
            curves.push(CurvePoint {
                cell: cell.to_string(),
                algorithm: algo.to_string(),
                t,
                log_mse: mean(v).expect("nonempty group").ln(),
                em_log_mse: em.map(f64::ln),
                semi_em_log_mse: semi_em.map(f64::ln),
                local_log_mse: local.map(f64::ln),
                count: v.len(),
            });
        }
        let (&t, v) = by_t.iter().next_back().expect("nonempty algorithm group");
        let mse = mean(v).expect("nonempty group");
        finals.push(FinalComparison {
            cell: cell.to_string(),
            algorithm: algo.to_string(),
            t,
            mse,
            em_mse: em,
            semi_em_mse: semi_em,
            local_mse: local,
            ratio_to_em: em.map(|e| mse / e),
            ratio_to_local: local.map(|l| mse / l),
        });
    }
    (curves, finals)
}

/// Reads a results directory written by `run_experiment` and writes
/// `summary/{curves,final,status}.csv`. Missing or partial cells are flagged.
pub fn summarize(out: &Path) -> Result<Summary> {
    let cfg = ExperimentConfig::load(&out.join(CONFIG_FILE))?;
    let mut summary = Summary {
        curves: Vec::new(),
        finals: Vec::new(),
        status: Vec::new(),
    };
    for cell in cells(&cfg) {
        let name = cell.dir_name();
        let dir = cell_dir(out, &cell);
        let trace_path = dir.join(TRACE_FILE);
        let base_path = dir.join(BASELINE_FILE);
        if !trace_path.exists() || !base_path.exists() {
            summary.status.push(StatusRow {
                cell: name,
                status: CellStatus::Missing,
                detail: "no results".into(),
            });
            continue;
        }
        let trace: Vec<TraceRow> = read_csv(&trace_path)?;
        let baselines: Vec<BaselineRow> = read_csv(&base_path)?;
        let (c, f) = summarize_cell(&name, &trace, &baselines);
        summary.curves.extend(c);
        summary.finals.extend(f);
        let err_path = dir.join(ERROR_FILE);
        let reps: std::collections::BTreeSet<usize> = baselines.iter().map(|b| b.replicate).collect();
        let (status, detail) = if err_path.exists() {
            let text = std::fs::read_to_string(&err_path)?;
            (CellStatus::Partial, text.lines().next().unwrap_or("").to_string())
        } else if reps.len() < cfg.scale.replicates {
            (
                CellStatus::Partial,
                format!("{} of {} replicates", reps.len(), cfg.scale.replicates),
            )
        } else {
            (CellStatus::Ok, String::new())
        };
        summary.status.push(StatusRow {
            cell: name,
            status,
            detail,
        });
    }
    let dir = out.join("summary");
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("curves.csv"), &csv_bytes(&summary.curves)?)?;
    write_atomic(&dir.join("final.csv"), &csv_bytes(&summary.finals)?)?;
    write_atomic(&dir.join("status.csv"), &csv_bytes(&summary.status)?)?;
    Ok(summary)
}
