use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ErrorHistogram, EvalResult};
use crate::error::{Error, Result};
use crate::training::{Stage, TrainLog};

pub const CSV_HEADER: [&str; 5] = [
    "dataset",
    "coherence_score",
    "perplexity_reduction_pct",
    "semantic_alignment_pct",
    "samples",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::config("format", format!("expected csv or json, got {other:?}"))),
        }
    }
}

fn one_decimal(x: f64) -> String {
    format!("{x:.1}")
}

/// Writes the metrics table. CSV rounds every metric to one decimal; JSON
/// keeps full precision.
pub fn emit_report(results: &[EvalResult], format: ReportFormat, path: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one result".into()));
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
            w.write_record(CSV_HEADER)?;
            for r in results {
                w.write_record([
                    r.dataset.clone(),
                    one_decimal(r.coherence_score),
                    one_decimal(r.perplexity_reduction_pct),
                    one_decimal(r.semantic_alignment_pct),
                    r.samples.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(results)?;
            s.push('\n');
            fs::write(path, s).map_err(|e| Error::io(path, e))
        }
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Mean pretraining `L_total` per epoch as `epoch,L_total`.
pub fn write_loss_curve(log: &TrainLog, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["epoch", "L_total"])?;
    for (epoch, total) in log.epoch_means(Stage::Pretrain) {
        w.write_record([epoch.to_string(), format!("{total}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per category and bin: `category,bin_start,bin_end,count`.
pub fn write_error_histogram(hist: &ErrorHistogram, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["category", "bin_start", "bin_end", "count"])?;
    for (category, counts) in &hist.counts {
        for (bin, count) in counts.iter().enumerate() {
            let (lo, hi) = hist.bin_edges(bin);
            w.write_record([category.clone(), one_decimal(lo), one_decimal(hi), count.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
