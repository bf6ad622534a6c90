//! Plot-ready tables from run directories.

use std::fs;
use std::path::{Path, PathBuf};

use memlab_core::metrics::{detect_tau_mem, Checkpoint, RegimeLabel};
use memlab_core::{Error, Result};
use memlab_kernel_lab::SweepTable;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{csv_error, read_trace};
use crate::rhm::regime;

pub fn write_sweep_csv(path: &Path, hash: &str, table: &SweepTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["config_hash", "axis_value", "tau_mem", "censored", "steps_run"]).map_err(csv_error)?;
    for r in &table.rows {
        w.write_record([
            hash.to_string(),
            r.value.to_string(),
            r.tau_mem.map(|t| t.to_string()).unwrap_or_default(),
            r.censored.to_string(),
            r.steps_run.to_string(),
        ])
        .map_err(csv_error)?;
    }
    let (slope, r2) = table.fit.map(|f| (f.slope.to_string(), f.r2.to_string())).unwrap_or_default();
    w.write_record([hash.to_string(), "slope".into(), slope, "r2".into(), r2]).map_err(csv_error)?;
    w.flush()?;
    Ok(())
}

/// One trace of one run directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub dir: String,
    pub trace: String,
    pub config_hash: String,
    pub train_size: usize,
    pub checkpoints: usize,
    pub tau_mem: Option<u64>,
    pub copy_onset: Option<u64>,
    /// First checkpoint classified as full generalization.
    pub first_full_generalization: Option<u64>,
    pub final_regime: String,
    pub min_val_loss: f64,
    #[serde(skip)]
    pub series: Vec<(Checkpoint, RegimeLabel)>,
}

/// Reads `config.toml` and every `*trace.jsonl` in each directory. All files
/// of one directory must carry the hash of its config.
pub fn collect(dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for dir in dirs {
        let cfg = RunConfig::from_toml(&fs::read_to_string(dir.join("config.toml"))?)?;
        let hash = cfg.hash()?;
        let mut traces: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("trace.jsonl")))
            .collect();
        traces.sort();
        for path in traces {
            let (h, cps) = read_trace(&path)?;
            if h != hash {
                return Err(Error::Format(format!("{} has config hash {h}, its config has {hash}", path.display())));
            }
            let taus: Vec<u64> = cps.iter().map(|c| c.tau).collect();
            let vals: Vec<f64> = cps.iter().map(|c| c.val_loss).collect();
            let series: Vec<(Checkpoint, RegimeLabel)> = cps.into_iter().map(|c| { let r = regime(&cfg, &c); (c, r) }).collect();
            rows.push(ReportRow {
                dir: dir.display().to_string(),
                trace: path.file_name().unwrap().to_string_lossy().into_owned(),
                config_hash: hash.clone(),
                train_size: cfg.data.train_size,
                checkpoints: series.len(),
                tau_mem: detect_tau_mem(&taus, &vals, cfg.eval.delta, cfg.eval.patience),
                copy_onset: series.iter().find(|(c, _)| c.copy_fraction > memlab_core::metrics::DEFAULT_COPY_ONSET).map(|(c, _)| c.tau),
                first_full_generalization: series.iter().find(|(_, r)| *r == RegimeLabel::FullGeneralization).map(|(c, _)| c.tau),
                final_regime: series.last().map(|(_, r)| r.name()).unwrap_or_default(),
                min_val_loss: vals.iter().copied().fold(f64::INFINITY, f64::min),
                series,
            });
        }
    }
    Ok(rows)
}

/// Writes the summary table to `path` and a long per-checkpoint table next
/// to it with a `_checkpoints` suffix.
pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let long = path.with_file_name(format!("{stem}_checkpoints.csv"));
    let mut w = csv::Writer::from_path(long).map_err(csv_error)?;
    w.write_record(["dir", "trace", "config_hash", "train_size", "tau", "train_loss", "val_loss", "copy_fraction", "max_error", "regime"])
        .map_err(csv_error)?;
    for r in rows {
        for (c, reg) in &r.series {
            w.write_record([
                r.dir.clone(),
                r.trace.clone(),
                r.config_hash.clone(),
                r.train_size.to_string(),
                c.tau.to_string(),
                c.train_loss.to_string(),
                c.val_loss.to_string(),
                c.copy_fraction.to_string(),
                c.error_fraction.iter().copied().fold(0.0, f64::max).to_string(),
                reg.name(),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}
