//! Distance-operation accounting. One operation is one vector-vector
//! operation on d-dim vectors (distance, dot product, axpy), counted as unit
//! cost regardless of d.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Debug, Default)]
pub struct OpLedger {
    phase1: AtomicU64,
    phase2: AtomicU64,
    identification: AtomicU64,
    inference: AtomicU64,
    images: AtomicU64,
    positions: AtomicU64,
}

/// Point-in-time copy of an [`OpLedger`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub distance_ops: u64,
    /// Updating state kept from earlier tasks (recompression, fusion).
    pub phase1_ops: u64,
    /// Building state for the newly arrived task.
    pub phase2_ops: u64,
    pub identification_ops: u64,
    pub inference_ops: u64,
    pub inference_images: u64,
    pub inference_positions: u64,
}

impl LedgerSnapshot {
    pub fn update_ops(&self) -> u64 {
        self.phase1_ops + self.phase2_ops
    }

    /// Inference-side total: scoring plus task identification.
    pub fn query_ops(&self) -> u64 {
        self.inference_ops + self.identification_ops
    }

    pub fn since(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        LedgerSnapshot {
            distance_ops: self.distance_ops - earlier.distance_ops,
            phase1_ops: self.phase1_ops - earlier.phase1_ops,
            phase2_ops: self.phase2_ops - earlier.phase2_ops,
            identification_ops: self.identification_ops - earlier.identification_ops,
            inference_ops: self.inference_ops - earlier.inference_ops,
            inference_images: self.inference_images - earlier.inference_images,
            inference_positions: self.inference_positions - earlier.inference_positions,
        }
    }
}

impl OpLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_phase1(&self, ops: u64) {
        self.phase1.fetch_add(ops, Ordering::Relaxed);
    }

    pub fn add_phase2(&self, ops: u64) {
        self.phase2.fetch_add(ops, Ordering::Relaxed);
    }

    pub fn add_identification(&self, ops: u64) {
        self.identification.fetch_add(ops, Ordering::Relaxed);
    }

    pub fn add_inference(&self, ops: u64) {
        self.inference.fetch_add(ops, Ordering::Relaxed);
    }

    /// Records one scored image with `positions` patch positions.
    pub fn add_image(&self, positions: usize) {
        self.images.fetch_add(1, Ordering::Relaxed);
        self.positions.fetch_add(positions as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let phase1_ops = self.phase1.load(Ordering::Relaxed);
        let phase2_ops = self.phase2.load(Ordering::Relaxed);
        let identification_ops = self.identification.load(Ordering::Relaxed);
        let inference_ops = self.inference.load(Ordering::Relaxed);
        LedgerSnapshot {
            distance_ops: phase1_ops + phase2_ops + identification_ops + inference_ops,
            phase1_ops,
            phase2_ops,
            identification_ops,
            inference_ops,
            inference_images: self.images.load(Ordering::Relaxed),
            inference_positions: self.positions.load(Ordering::Relaxed),
        }
    }
}
