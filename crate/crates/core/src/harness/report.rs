//! Serializable run results. Field order is fixed and no maps are used, so
//! identical runs serialize to identical bytes.

use serde::{Deserialize, Serialize};

use super::StrategyConfig;
use crate::error::Result;
use crate::ledger::LedgerSnapshot;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub image_f1: f64,
    pub pixel_f1: f64,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["image_f1", "pixel_f1", "image_auroc", "pixel_auroc"];

    pub fn values(&self) -> [f64; 4] {
        [self.image_f1, self.pixel_f1, self.image_auroc, self.pixel_auroc]
    }

    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
        let mut acc = [0.0; 4];
        let mut n = 0usize;
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
            n += 1;
        }
        let n = n.max(1) as f64;
        Metrics {
            image_f1: acc[0] / n,
            pixel_f1: acc[1] / n,
            image_auroc: acc[2] / n,
            pixel_auroc: acc[3] / n,
        }
    }
}

/// Performance on evaluated task `task` after training through `checkpoint` (both 1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub checkpoint: usize,
    pub task: usize,
    pub task_name: String,
    pub image_threshold: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub checkpoint: usize,
    /// Operations spent learning this task.
    pub update: LedgerSnapshot,
    /// Operations spent evaluating tasks 1..=checkpoint.
    pub eval: LedgerSnapshot,
    /// Running totals after this checkpoint.
    pub cumulative: LedgerSnapshot,
    pub model_bytes: u64,
    pub retention_bytes: u64,
    pub replay_bytes: u64,
    pub replay_entries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub distance_ops: u64,
    pub phase1_ops: u64,
    pub phase2_ops: u64,
    pub update_ops: u64,
    pub identification_ops: u64,
    pub inference_ops: u64,
    pub model_bytes: u64,
    pub retention_bytes: u64,
    pub replay_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub manifest_hash: String,
    pub config: StrategyConfig,
    pub tasks: Vec<String>,
    pub cells: Vec<Cell>,
    pub final_avg: Metrics,
    pub checkpoints: Vec<Checkpoint>,
    pub cost: Cost,
}

/// Totals at the end of the run; storage is what the final model retains.
pub fn cost_rollup(report: &EvalReport) -> Cost {
    let last = report.checkpoints.last();
    let ledger = last.map(|c| c.cumulative).unwrap_or_default();
    Cost {
        distance_ops: ledger.distance_ops,
        phase1_ops: ledger.phase1_ops,
        phase2_ops: ledger.phase2_ops,
        update_ops: ledger.update_ops(),
        identification_ops: ledger.identification_ops,
        inference_ops: ledger.inference_ops,
        model_bytes: last.map_or(0, |c| c.model_bytes),
        retention_bytes: last.map_or(0, |c| c.retention_bytes),
        replay_bytes: last.map_or(0, |c| c.replay_bytes),
    }
}

impl EvalReport {
    pub fn cell(&self, checkpoint: usize, task: usize) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.checkpoint == checkpoint && c.task == task)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    /// One row per matrix cell and metric.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["schema_version", "checkpoint", "task", "task_name", "metric", "value"])?;
        for c in &self.cells {
            for (name, v) in Metrics::NAMES.iter().zip(c.metrics.values()) {
                w.write_record([
                    SCHEMA_VERSION.to_string(),
                    c.checkpoint.to_string(),
                    c.task.to_string(),
                    c.task_name.clone(),
                    name.to_string(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error().into())
    }

    /// Per-checkpoint operation counts.
    pub fn ledger_json(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct LedgerFile<'a> {
            schema_version: u32,
            manifest_hash: &'a str,
            checkpoints: &'a [Checkpoint],
            cost: &'a Cost,
        }
        let mut out = serde_json::to_vec_pretty(&LedgerFile {
            schema_version: SCHEMA_VERSION,
            manifest_hash: &self.manifest_hash,
            checkpoints: &self.checkpoints,
            cost: &self.cost,
        })?;
        out.push(b'\n');
        Ok(out)
    }
}
