//! Run artifacts on disk. Floats are written with Rust's shortest
//! round-trip formatting, so identical records produce byte-identical
//! files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runner::train::{Phase, RunRecord, TrainRun};

/// Contents of `result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub mean_acc: f64,
    pub ci95: f64,
    pub config_hash: String,
}

/// One row per epoch: `epoch,train_loss,val_acc`.
pub fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from("epoch,train_loss,val_acc\n");
    for e in &record.epochs {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_acc));
    }
    out
}

/// One row per weighted-phase epoch: `epoch,kind,` then one weight column
/// per task position (`w_1..`) or per coarse class id (`c_0..`). `None`
/// when the run had no weighted epochs.
pub fn trajectory_csv(record: &RunRecord) -> Option<String> {
    let rows: Vec<_> = record
        .epochs
        .iter()
        .filter(|e| e.phase == Phase::Weighted)
        .collect();
    let first = rows.first()?;
    let mut out = String::from("epoch,kind");
    for i in 0..first.weights.len() {
        if record.coarse_mode {
            out.push_str(&format!(",c_{i}"));
        } else {
            out.push_str(&format!(",w_{}", i + 1));
        }
    }
    out.push('\n');
    for e in rows {
        out.push_str(&format!("{},{}", e.epoch, record.mtm.label()));
        for w in &e.weights {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
    }
    Some(out)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes `metrics.csv`, `weights.csv` (when the run had weighted epochs),
/// `best.ckpt.json`, `run_record.json`, and `result.json` into `dir`.
pub fn write_artifacts(run: &TrainRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    write(&dir.join("metrics.csv"), &metrics_csv(&run.record))?;
    if let Some(csv) = trajectory_csv(&run.record) {
        write(&dir.join("weights.csv"), &csv)?;
    }
    run.best.save(&dir.join("best.ckpt.json"))?;
    let record_json = serde_json::to_string_pretty(&run.record)
        .map_err(|e| Error::json("run record", e))?;
    write(&dir.join("run_record.json"), &record_json)?;
    let summary = ResultSummary {
        mean_acc: run.record.test_mean_acc,
        ci95: run.record.test_ci95,
        config_hash: run.record.config_hash.clone(),
    };
    let summary_json =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::json("result summary", e))?;
    write(&dir.join("result.json"), &summary_json)
}

/// Rebuilds `weights.csv` from a run directory's `run_record.json`.
pub fn export_weight_trajectory(run_dir: &Path) -> Result<PathBuf> {
    let record_path = run_dir.join("run_record.json");
    let text = fs::read_to_string(&record_path).map_err(|_| Error::MissingTrajectory {
        dir: run_dir.to_path_buf(),
    })?;
    let record: RunRecord =
        serde_json::from_str(&text).map_err(|e| Error::json("run record", e))?;
    let csv = trajectory_csv(&record).ok_or_else(|| Error::MissingTrajectory {
        dir: run_dir.to_path_buf(),
    })?;
    let out = run_dir.join("weights.csv");
    write(&out, &csv)?;
    Ok(out)
}
