//! Continual PatchCore: one greedy-ordered bank per task under a shared
//! vector budget `S`, with per-task budget `floor(S / i)` after task `i`.
//!
//! * `Cl` re-runs the coreset on every old bank when the budget shrinks and
//!   scores test images against every bank.
//! * `Clpp` truncates old banks (free, by the prefix property) and routes each
//!   test image to a single bank through nearest-prototype lookup.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coreset::{gonzalez, l2, Points};
use crate::error::{Error, Result};
use crate::fmap::LayerStack;
use crate::ledger::OpLedger;
use crate::patchcore::{score_grid, score_grid_ops, AnomalyMap, MemoryBank, PatchGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClVariant {
    Cl,
    Clpp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankList {
    pub banks: Vec<MemoryBank>,
    pub total_budget: usize,
    pub variant: ClVariant,
}

#[derive(Serialize, Deserialize)]
struct BankIndex {
    #[serde(rename = "S")]
    total_budget: usize,
    tasks: Vec<String>,
    variant: ClVariant,
}

impl BankList {
    pub fn new(total_budget: usize, variant: ClVariant) -> Self {
        BankList {
            banks: Vec::new(),
            total_budget,
            variant,
        }
    }

    pub fn tasks_seen(&self) -> usize {
        self.banks.len()
    }

    pub fn per_task_budget(&self, tasks: usize) -> usize {
        self.total_budget / tasks
    }

    pub fn total_vectors(&self) -> usize {
        self.banks.iter().map(MemoryBank::len).sum()
    }

    pub fn bytes(&self) -> usize {
        self.banks.iter().map(MemoryBank::bytes).sum()
    }

    /// Adds a task: shrinks every old bank to the new per-task budget
    /// (phase 1) and coresets the new task's patches to the same size (phase 2).
    pub fn update(&mut self, task_name: &str, patches: Points<'_>, ledger: &OpLedger) -> Result<()> {
        if self.banks.iter().any(|b| b.task_name == task_name) {
            return Err(Error::arg(format!("task {task_name} already has a bank")));
        }
        if let Some(first) = self.banks.first() {
            if first.d != patches.dim() {
                return Err(Error::arg(format!(
                    "task {task_name} patches have d={}, banks have d={}",
                    patches.dim(),
                    first.d
                )));
            }
        }
        let i = self.tasks_seen() + 1;
        let budget = self.per_task_budget(i);
        if budget == 0 {
            return Err(Error::Capacity {
                budget: self.total_budget,
                tasks: i,
            });
        }
        if patches.len() < budget {
            return Err(Error::arg(format!(
                "task {task_name} has {} patches, fewer than the per-task budget {budget} (S={}, i={i})",
                patches.len(),
                self.total_budget
            )));
        }

        // phase 2 first so a failure leaves the old banks untouched
        let (new_bank, coreset) = MemoryBank::from_pool(patches, budget, task_name, 0)?;
        ledger.add_phase2(coreset.distance_ops());

        for bank in &mut self.banks {
            match self.variant {
                ClVariant::Cl => {
                    // the stored first vector is the seed of the bank's own greedy order
                    let shrunk = gonzalez(bank.points(), budget, 0)?;
                    ledger.add_phase1(shrunk.distance_ops());
                    *bank = MemoryBank::gather(
                        bank.points(),
                        &shrunk.indices,
                        bank.task_name.clone(),
                        bank.gonzalez_seed,
                    );
                }
                ClVariant::Clpp => bank.vectors.truncate(budget * bank.d),
            }
        }
        self.banks.push(new_bank);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        for (i, bank) in self.banks.iter().enumerate() {
            let path = dir.join(format!("bank_{:02}.bank", i + 1));
            fs::write(&path, bank.to_bytes()?).map_err(|e| Error::path(&path, e))?;
        }
        let index = BankIndex {
            total_budget: self.total_budget,
            tasks: self.banks.iter().map(|b| b.task_name.clone()).collect(),
            variant: self.variant,
        };
        let path = dir.join("index.json");
        fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::path(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let index: BankIndex =
            serde_json::from_slice(&fs::read(&path).map_err(|e| Error::path(&path, e))?)?;
        let mut banks = Vec::with_capacity(index.tasks.len());
        for (i, name) in index.tasks.iter().enumerate() {
            let path = dir.join(format!("bank_{:02}.bank", i + 1));
            let bank = MemoryBank::from_bytes(&fs::read(&path).map_err(|e| Error::path(&path, e))?)?;
            if &bank.task_name != name {
                return Err(Error::Format(format!(
                    "{} holds task {}, index says {name}",
                    path.display(),
                    bank.task_name
                )));
            }
            banks.push(bank);
        }
        Ok(BankList {
            banks,
            total_budget: index.total_budget,
            variant: index.variant,
        })
    }
}

/// Per-task mean of last-layer feature maps, flattened channel-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeTable {
    pub prototypes: Vec<Vec<f32>>,
}

impl PrototypeTable {
    pub fn dim(&self) -> Option<usize> {
        self.prototypes.first().map(Vec::len)
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn push(&mut self, prototype: Vec<f32>) -> Result<()> {
        if let Some(d) = self.dim() {
            if d != prototype.len() {
                return Err(Error::arg(format!(
                    "prototype dim {} does not match table dim {d}",
                    prototype.len()
                )));
            }
        }
        self.prototypes.push(prototype);
        Ok(())
    }

    pub fn bytes(&self) -> usize {
        self.prototypes.iter().map(|p| p.len() * 4).sum()
    }
}

pub fn build_prototype(train_stacks: &[LayerStack]) -> Result<Vec<f32>> {
    let first = train_stacks
        .first()
        .ok_or_else(|| Error::arg("prototype needs at least one stack"))?
        .last_layer();
    let shape = (first.channels, first.height, first.width);
    let mut acc = vec![0f64; first.data.len()];
    for stack in train_stacks {
        let last = stack.last_layer();
        if (last.channels, last.height, last.width) != shape {
            return Err(Error::arg(format!(
                "stack {} last layer is {}x{}x{}, expected {}x{}x{}",
                stack.image_id, last.channels, last.height, last.width, shape.0, shape.1, shape.2
            )));
        }
        for (a, &v) in acc.iter_mut().zip(&last.data) {
            *a += v as f64;
        }
    }
    let n = train_stacks.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Nearest prototype to the test image's last layer; ties to the lowest task.
pub fn identify_task(test_stack: &LayerStack, table: &PrototypeTable, ledger: &OpLedger) -> Result<usize> {
    let d = table
        .dim()
        .ok_or_else(|| Error::arg("prototype table is empty"))?;
    let query = &test_stack.last_layer().data;
    if query.len() != d {
        return Err(Error::arg(format!(
            "stack {} last layer has {} values, prototypes have {d}",
            test_stack.image_id,
            query.len()
        )));
    }
    ledger.add_identification(table.len() as u64);
    let mut best = (0usize, f64::INFINITY);
    for (j, p) in table.prototypes.iter().enumerate() {
        let dist = l2(query, p);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    Ok(best.0)
}

/// Scores one test image against the bank list. Returns the feature-resolution
/// map and the index of the bank that produced it.
pub fn infer(
    grid: &PatchGrid,
    test_stack: &LayerStack,
    state: &BankList,
    table: Option<&PrototypeTable>,
    b_neighbors: usize,
    ledger: &OpLedger,
) -> Result<(AnomalyMap, usize)> {
    if state.banks.is_empty() {
        return Err(Error::arg("inference on an empty bank list"));
    }
    let positions = grid.positions();
    let result = match state.variant {
        ClVariant::Cl => {
            let mut best: Option<(AnomalyMap, usize)> = None;
            for (j, bank) in state.banks.iter().enumerate() {
                let map = score_grid(grid, bank, b_neighbors)?;
                ledger.add_inference(score_grid_ops(positions, bank.len()));
                if best
                    .as_ref()
                    .is_none_or(|(m, _)| map.image_score < m.image_score)
                {
                    best = Some((map, j));
                }
            }
            best.expect("nonempty bank list")
        }
        ClVariant::Clpp => {
            let table = table.ok_or_else(|| Error::arg("CL++ inference needs a prototype table"))?;
            if table.len() != state.banks.len() {
                return Err(Error::arg(format!(
                    "{} prototypes for {} banks",
                    table.len(),
                    state.banks.len()
                )));
            }
            let j = identify_task(test_stack, table, ledger)?;
            let bank = &state.banks[j];
            let map = score_grid(grid, bank, b_neighbors)?;
            ledger.add_inference(score_grid_ops(positions, bank.len()));
            (map, j)
        }
    };
    ledger.add_image(positions);
    Ok(result)
}
