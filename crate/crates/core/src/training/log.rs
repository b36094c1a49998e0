use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// One optimizer step. Loss terms are batch means; in the fine-tuning stage
/// `epoch` is the iteration index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub ce: f64,
    pub sa: f64,
    pub total: f64,
    pub reg: f64,
    pub mean_reward: Option<f64>,
    pub baseline: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Validation loss, on the last step of an evaluated epoch.
    pub val_loss: Option<f64>,
    /// Seconds since the start of the run.
    pub wall_time: f64,
}

/// Append-only sequence of [`TrainRecord`]s with a strictly increasing
/// step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    pub fn last_step(&self) -> Option<u64> {
        self.records.last().map(|r| r.step)
    }

    /// Step number the next record should carry.
    pub fn next_step(&self) -> u64 {
        self.last_step().map_or(0, |s| s + 1)
    }

    pub fn push(&mut self, record: TrainRecord) -> Result<()> {
        if let Some(last) = self.last_step() {
            if record.step <= last {
                return Err(Error::InvalidArgument(format!(
                    "log step {} does not follow step {last}",
                    record.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Attaches a validation loss to the most recent record.
    pub fn annotate_validation(&mut self, loss: f64) {
        if let Some(r) = self.records.last_mut() {
            r.val_loss = Some(loss);
        }
    }

    /// Records with timing removed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Vec<TrainRecord> {
        self.records
            .iter()
            .map(|r| TrainRecord {
                wall_time: 0.0,
                ..r.clone()
            })
            .collect()
    }

    /// Mean `L_total` per epoch of one stage, in epoch order.
    pub fn epoch_means(&self, stage: Stage) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in self.records.iter().filter(|r| r.stage == stage) {
            match out.last_mut() {
                Some((e, sum, n)) if *e == r.epoch => {
                    *sum += r.total;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.total, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut log = TrainLog::new();
        for (i, line) in content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: TrainRecord = serde_json::from_str(line).map_err(|e| Error::Jsonl {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            log.push(record)?;
        }
        Ok(log)
    }
}
