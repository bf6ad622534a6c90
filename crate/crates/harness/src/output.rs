//! Run directories: effective config, JSONL traces and CSV tables, every
//! record tagged with the config hash.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use memlab_core::metrics::Checkpoint;
use memlab_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// One JSONL line of a training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub config_hash: String,
    #[serde(flatten)]
    pub checkpoint: Checkpoint,
}

pub fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Creates `dir` and writes `config.toml` with every resolved value.
pub fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = format!("# config_hash = \"{}\"\n", cfg.hash()?);
    text.push_str(&cfg.effective_toml()?);
    fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

/// Appends checkpoints to `trace.jsonl` and `metrics.csv` as they arrive, so
/// a diverged run still leaves its partial trace behind.
pub struct TraceWriter {
    hash: String,
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    header_written: bool,
}

impl TraceWriter {
    pub fn create(dir: &Path, prefix: &str, hash: &str) -> Result<Self> {
        let jsonl = BufWriter::new(File::create(dir.join(format!("{prefix}trace.jsonl")))?);
        let csv = csv::Writer::from_path(dir.join(format!("{prefix}metrics.csv"))).map_err(csv_error)?;
        Ok(Self { hash: hash.to_string(), jsonl, csv, header_written: false })
    }

    pub fn push(&mut self, c: &Checkpoint) -> Result<()> {
        let rec = TraceRecord { config_hash: self.hash.clone(), checkpoint: c.clone() };
        serde_json::to_writer(&mut self.jsonl, &rec)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        if !self.header_written {
            let mut head: Vec<String> = ["config_hash", "tau", "train_loss", "val_loss", "copy_fraction", "mean_nn_hamming"]
                .map(String::from)
                .to_vec();
            head.extend((1..=c.error_fraction.len()).map(|l| format!("error_l{l}")));
            head.extend((1..=c.block_error_fraction.len()).map(|l| format!("block_error_l{l}")));
            head.push("timestamp".into());
            self.csv.write_record(&head).map_err(csv_error)?;
            self.header_written = true;
        }
        let mut row = vec![
            self.hash.clone(),
            c.tau.to_string(),
            c.train_loss.to_string(),
            c.val_loss.to_string(),
            c.copy_fraction.to_string(),
            c.mean_nn_hamming.to_string(),
        ];
        row.extend(c.error_fraction.iter().map(|e| e.to_string()));
        row.extend(c.block_error_fraction.iter().map(|e| e.to_string()));
        row.push(c.timestamp.map(|t| t.to_string()).unwrap_or_default());
        self.csv.write_record(&row).map_err(csv_error)?;
        self.csv.flush()?;
        Ok(())
    }
}

/// Reads a trace back, rejecting files that mix config hashes.
pub fn read_trace(path: &Path) -> Result<(String, Vec<Checkpoint>)> {
    let text = fs::read_to_string(path)?;
    let mut hash: Option<String> = None;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: TraceRecord = serde_json::from_str(line)?;
        match &hash {
            Some(h) if *h != rec.config_hash => {
                return Err(Error::Format(format!("{}: config hash {} after {h}", path.display(), rec.config_hash)));
            }
            None => hash = Some(rec.config_hash.clone()),
            _ => {}
        }
        out.push(rec.checkpoint);
    }
    let hash = hash.ok_or_else(|| Error::Format(format!("{} holds no records", path.display())))?;
    Ok((hash, out))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path, prefix: &str, tau: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("{prefix}step_{tau:09}.mlck"))
}
