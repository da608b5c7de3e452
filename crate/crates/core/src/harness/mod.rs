//! Runs a task sequence through one method and strategy, evaluating every
//! seen task after each training step.

pub mod metrics;
pub mod replay;
pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{auroc, f1_best_threshold, pixel_metrics, PixelMetrics};
pub use replay::{ReplayBuffer, ReplayEntry};
pub use report::{cost_rollup, Cell, Checkpoint, Cost, EvalReport, Metrics, SCHEMA_VERSION};

use crate::coreset::Points;
use crate::error::{Error, Result};
use crate::fmap::{Label, LayerStack, Mask};
use crate::ledger::OpLedger;
use crate::padim::{self, CovMode, GaussianField};
use crate::padim_cl::{score_multimodal, FieldList, FusedField};
use crate::patchcore::{
    build_patch_grid, pool_patches, render_map, score_grid, score_grid_ops, AnomalyMap, MemoryBank,
    PatchGrid, DEFAULT_NEIGHBORS, DEFAULT_POOLING, DEFAULT_SIGMA,
};
use crate::patchcore_cl::{build_prototype, infer, BankList, ClVariant, PrototypeTable};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PatchcoreCl,
    PatchcoreClpp,
    PadimUni,
    PadimMulti,
    PadimLiteUni,
    PadimLiteMulti,
}

impl Method {
    pub fn is_bank(self) -> bool {
        matches!(self, Method::PatchcoreCl | Method::PatchcoreClpp)
    }

    pub fn cov_mode(self) -> Option<CovMode> {
        match self {
            Method::PadimUni | Method::PadimMulti => Some(CovMode::Full),
            Method::PadimLiteUni | Method::PadimLiteMulti => Some(CovMode::Diag),
            _ => None,
        }
    }
}

/// `native` uses the method's own continual mechanism. The other strategies
/// refit a single-task model from scratch at every step on their training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Native,
    Finetune,
    Replay,
    Joint,
}

fn default_pooling() -> usize {
    DEFAULT_POOLING
}

fn default_neighbors() -> usize {
    DEFAULT_NEIGHBORS
}

fn default_sigma() -> f32 {
    DEFAULT_SIGMA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub method: Method,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub replay_capacity: Option<usize>,
    #[serde(default)]
    pub bank_budget: Option<usize>,
    #[serde(default = "default_pooling")]
    pub pooling_p: usize,
    #[serde(default = "default_neighbors")]
    pub b_neighbors: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f32,
    #[serde(default)]
    pub seed: u64,
}

impl StrategyConfig {
    pub fn new(method: Method) -> Self {
        StrategyConfig {
            method,
            strategy: Strategy::Native,
            replay_capacity: None,
            bank_budget: None,
            pooling_p: DEFAULT_POOLING,
            b_neighbors: DEFAULT_NEIGHBORS,
            sigma: DEFAULT_SIGMA,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.strategy, self.replay_capacity) {
            (Strategy::Replay, None) => return Err(Error::config("strategy replay needs replay_capacity")),
            (Strategy::Replay, Some(0)) => return Err(Error::config("replay_capacity must be >= 1")),
            (s, Some(_)) if s != Strategy::Replay => {
                return Err(Error::config(format!(
                    "replay_capacity is only valid with strategy replay, not {s:?}"
                )))
            }
            _ => {}
        }
        if self.method.is_bank() && self.bank_budget.is_none_or(|s| s == 0) {
            return Err(Error::config("bank_budget must be >= 1 for memory-bank methods"));
        }
        if self.pooling_p == 0 || self.pooling_p.is_multiple_of(2) {
            return Err(Error::config(format!("pooling_p={} must be odd and >= 1", self.pooling_p)));
        }
        if self.b_neighbors == 0 {
            return Err(Error::config("b_neighbors must be >= 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("sigma={} must be > 0", self.sigma)));
        }
        Ok(())
    }

    fn grid_pooling(&self) -> usize {
        if self.method.is_bank() {
            self.pooling_p
        } else {
            1
        }
    }
}

enum Model {
    Banks(BankList, PrototypeTable),
    Bank(MemoryBank),
    Fused(FusedField),
    Fields(FieldList),
    Field(GaussianField),
}

impl Model {
    fn bytes(&self) -> u64 {
        match self {
            Model::Banks(list, _) => list.bytes() as u64,
            Model::Bank(b) => b.bytes() as u64,
            Model::Fused(f) => f.field().bytes(),
            Model::Fields(l) => l.bytes(),
            Model::Field(f) => f.bytes(),
        }
    }

    fn prototype_bytes(&self) -> u64 {
        match self {
            Model::Banks(_, t) => t.bytes() as u64,
            _ => 0,
        }
    }
}

/// Every task needs a normal and an anomalous test image, and anomalous
/// images need masks.
fn check_test_sets(scenario: &Scenario) -> Result<()> {
    for t in &scenario.tasks {
        let normals = t.test.iter().filter(|s| s.label() == Label::Normal).count();
        let anomalies = t.test.iter().filter(|s| s.label() == Label::Anomalous).count();
        if normals == 0 || anomalies == 0 {
            return Err(Error::Metric(format!(
                "task {} test set has {normals} normal and {anomalies} anomalous images; both are required",
                t.name
            )));
        }
        if let Some(s) = t.test.iter().find(|s| s.label() == Label::Anomalous && s.mask().is_none()) {
            return Err(Error::Metric(format!("anomalous test image {} has no mask", s.image_id)));
        }
        if let Some(s) = t.test.iter().find(|s| s.label() == Label::Unlabeled) {
            return Err(Error::Metric(format!("test image {} is unlabeled", s.image_id)));
        }
    }
    Ok(())
}

fn fit_ops(field: &GaussianField) -> u64 {
    let per = match field.mode {
        CovMode::Diag => field.n_samples as u64,
        CovMode::Full => (field.n_samples * field.d) as u64,
    };
    field.positions() as u64 * per
}

fn fit_field(grids: &[PatchGrid], mode: CovMode, ledger: &OpLedger) -> Result<GaussianField> {
    let f = padim::fit(grids, mode)?;
    ledger.add_phase2(fit_ops(&f));
    Ok(f)
}

fn refit_bank(grids: &[PatchGrid], budget: usize, name: &str, ledger: &OpLedger) -> Result<MemoryBank> {
    let (pool, d) = pool_patches(grids)?;
    let points = Points::new(&pool, d)?;
    let target = budget.min(points.len());
    let (bank, coreset) = MemoryBank::from_pool(points, target, name, 0)?;
    ledger.add_phase2(coreset.distance_ops());
    Ok(bank)
}

fn grids_for(stacks: &[LayerStack], p: usize) -> Result<Vec<PatchGrid>> {
    stacks.par_iter().map(|s| build_patch_grid(s, p)).collect()
}

/// Feature-resolution map of one test image.
fn score_one(
    model: &Model,
    grid: &PatchGrid,
    stack: &LayerStack,
    b: usize,
    ledger: &OpLedger,
) -> Result<AnomalyMap> {
    let positions = grid.positions();
    let map = match model {
        Model::Banks(list, table) => {
            let b = b.min(list.banks.iter().map(MemoryBank::len).min().unwrap_or(1));
            return infer(grid, stack, list, Some(table), b, ledger).map(|(m, _)| m);
        }
        Model::Bank(bank) => {
            let m = score_grid(grid, bank, b.min(bank.len()))?;
            ledger.add_inference(score_grid_ops(positions, bank.len()));
            m
        }
        Model::Fused(f) => {
            let f = f.field();
            ledger.add_inference(positions as u64 * f.score_ops_per_position());
            padim::score(grid, f)?
        }
        Model::Field(f) => {
            ledger.add_inference(positions as u64 * f.score_ops_per_position());
            padim::score(grid, f)?
        }
        Model::Fields(list) => {
            let per: u64 = list.fields.iter().map(|f| f.score_ops_per_position()).sum();
            ledger.add_inference(positions as u64 * per);
            score_multimodal(grid, list)?.0
        }
    };
    ledger.add_image(positions);
    Ok(map)
}

fn evaluate_task(
    model: &Model,
    config: &StrategyConfig,
    stacks: &[LayerStack],
    image_size: (usize, usize),
    ledger: &OpLedger,
) -> Result<(Metrics, f64)> {
    let p = config.grid_pooling();
    let maps: Vec<AnomalyMap> = stacks
        .par_iter()
        .map(|s| {
            let grid = build_patch_grid(s, p)?;
            let feature = score_one(model, &grid, s, config.b_neighbors, ledger)?;
            let mut full = render_map(&feature, image_size, config.sigma)?;
            if !config.method.is_bank() {
                full.image_score = full.max_score();
            }
            Ok(full)
        })
        .collect::<Result<_>>()?;
    let image_scores: Vec<f32> = maps.iter().map(|m| m.image_score).collect();
    let labels: Vec<bool> = stacks.iter().map(|s| s.label() == Label::Anomalous).collect();
    let masks: Vec<Mask> = stacks
        .iter()
        .map(|s| s.mask().cloned().unwrap_or_else(|| Mask::zeros(image_size.0, image_size.1)))
        .collect();
    let (image_f1, threshold) = f1_best_threshold(&image_scores, &labels)?;
    let image_auroc = auroc(&image_scores, &labels)?;
    let px = pixel_metrics(&maps, &masks)?;
    Ok((
        Metrics {
            image_f1,
            pixel_f1: px.pixel_f1,
            image_auroc,
            pixel_auroc: px.pixel_auroc,
        },
        threshold,
    ))
}

/// Trains on the tasks in order and evaluates tasks `1..=t` after each task `t`.
pub fn run_scenario(scenario: &Scenario, config: &StrategyConfig) -> Result<EvalReport> {
    config.validate()?;
    check_test_sets(scenario)?;
    let ledger = OpLedger::new();
    let p = config.grid_pooling();
    let budget = config.bank_budget.unwrap_or(0);
    let mut replay = config
        .replay_capacity
        .map(|c| ReplayBuffer::new(c, config.seed));
    let mut history: Vec<Vec<PatchGrid>> = Vec::new();
    let mut model: Option<Model> = None;
    let mut cells = Vec::new();
    let mut checkpoints = Vec::new();

    for (t, task) in scenario.tasks.iter().enumerate() {
        let before = ledger.snapshot();
        let grids = grids_for(&task.train, p)?;

        let pool: Vec<PatchGrid> = match config.strategy {
            Strategy::Native | Strategy::Finetune => grids.clone(),
            Strategy::Joint => history.iter().flatten().chain(&grids).cloned().collect(),
            Strategy::Replay => {
                let buffered: Vec<LayerStack> = replay.as_ref().map_or(Vec::new(), |r| r.stacks().cloned().collect());
                let mut pool = grids_for(&buffered, p)?;
                pool.extend(grids.iter().cloned());
                pool
            }
        };

        model = Some(match (config.strategy, config.method, model.take()) {
            (Strategy::Native, Method::PatchcoreCl | Method::PatchcoreClpp, prev) => {
                let variant = if config.method == Method::PatchcoreCl { ClVariant::Cl } else { ClVariant::Clpp };
                let (mut list, mut table) = match prev {
                    Some(Model::Banks(l, tb)) => (l, tb),
                    _ => (BankList::new(budget, variant), PrototypeTable::default()),
                };
                let (patches, d) = pool_patches(&pool)?;
                list.update(&task.name, Points::new(&patches, d)?, &ledger)?;
                table.push(build_prototype(&task.train)?)?;
                ledger.add_phase2(task.train.len() as u64);
                Model::Banks(list, table)
            }
            (Strategy::Native, Method::PadimUni | Method::PadimLiteUni, prev) => {
                let mode = config.method.cov_mode().expect("gaussian method");
                let new_field = fit_field(&pool, mode, &ledger)?;
                match prev {
                    Some(Model::Fused(mut fused)) => {
                        let f = fused.field();
                        ledger.add_phase1(f.positions() as u64 * f.score_ops_per_position());
                        fused.fuse_exact(&new_field)?;
                        Model::Fused(fused)
                    }
                    _ => Model::Fused(FusedField::new(new_field)?),
                }
            }
            (Strategy::Native, Method::PadimMulti | Method::PadimLiteMulti, prev) => {
                let mode = config.method.cov_mode().expect("gaussian method");
                let mut list = match prev {
                    Some(Model::Fields(l)) => l,
                    _ => FieldList::new(),
                };
                list.push(&task.name, fit_field(&pool, mode, &ledger)?)?;
                Model::Fields(list)
            }
            (_, method, _) if method.is_bank() => Model::Bank(refit_bank(&pool, budget, &task.name, &ledger)?),
            (_, method, _) => {
                let mode = method.cov_mode().expect("gaussian method");
                Model::Field(fit_field(&pool, mode, &ledger)?)
            }
        });
        if let Some(r) = replay.as_mut() {
            r.absorb(t, &task.train);
        }
        history.push(grids);
        let after_update = ledger.snapshot();

        let current = model.as_ref().expect("model trained");
        for (k, seen) in scenario.tasks[..=t].iter().enumerate() {
            let (metrics, image_threshold) =
                evaluate_task(current, config, &seen.test, scenario.image_size, &ledger)?;
            cells.push(Cell {
                checkpoint: t + 1,
                task: k + 1,
                task_name: seen.name.clone(),
                image_threshold,
                metrics,
            });
        }
        let after_eval = ledger.snapshot();

        let replay_bytes = replay.as_ref().map_or(0, ReplayBuffer::bytes);
        checkpoints.push(Checkpoint {
            checkpoint: t + 1,
            update: after_update.since(&before),
            eval: after_eval.since(&after_update),
            cumulative: after_eval,
            model_bytes: current.bytes() + current.prototype_bytes(),
            retention_bytes: current.bytes() + replay_bytes,
            replay_bytes,
            replay_entries: replay.as_ref().map_or(0, ReplayBuffer::len),
        });
    }

    let last = scenario.tasks.len();
    let final_avg = Metrics::mean(cells.iter().filter(|c| c.checkpoint == last).map(|c| &c.metrics));
    let mut report = EvalReport {
        schema_version: SCHEMA_VERSION,
        manifest_hash: scenario.manifest_hash.clone(),
        config: config.clone(),
        tasks: scenario.tasks.iter().map(|t| t.name.clone()).collect(),
        cells,
        final_avg,
        checkpoints,
        cost: Cost {
            distance_ops: 0,
            phase1_ops: 0,
            phase2_ops: 0,
            update_ops: 0,
            identification_ops: 0,
            inference_ops: 0,
            model_bytes: 0,
            retention_bytes: 0,
            replay_bytes: 0,
        },
    };
    report.cost = cost_rollup(&report);
    Ok(report)
}
