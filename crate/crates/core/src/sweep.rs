//! Grid sweeps over threshold, capacity and policy, and the exhaustive
//! strategy selector that runs over their result tables.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::Policy;
use crate::engine::{run_experiment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::metrics::{reduction_vs_baseline, RunMetrics};

pub const DEFAULT_TAU_GRID: [f64; 3] = [0.01, 0.10, 0.30];
pub const DEFAULT_CAPACITY_GRID: [usize; 4] = [3, 4, 6, 8];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Cheapest policy whose mean final accuracy reaches `floor`.
    MinCommAtAccuracyFloor { floor: f64 },
    /// Most accurate policy whose mean communication fits in `budget` bytes.
    MaxAccuracyAtCommBudget { budget: u64 },
}

impl Default for Objective {
    fn default() -> Self {
        Objective::MinCommAtAccuracyFloor { floor: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub tau_grid: Vec<f64>,
    pub capacity_grid: Vec<usize>,
    pub policy_grid: Vec<Policy>,
    /// Repeat `r` runs with seed `base.seed + r`.
    pub repeats: u32,
    pub objective: Objective,
}

impl SweepSpec {
    pub fn new(base: ExperimentConfig) -> Self {
        Self {
            base,
            tau_grid: DEFAULT_TAU_GRID.to_vec(),
            capacity_grid: DEFAULT_CAPACITY_GRID.to_vec(),
            policy_grid: Policy::ALL.to_vec(),
            repeats: 1,
            objective: Objective::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_grid.is_empty() {
            return Err(Error::config("tau_grid", "must not be empty"));
        }
        if self.capacity_grid.is_empty() {
            return Err(Error::config("capacity_grid", "must not be empty"));
        }
        if self.policy_grid.is_empty() {
            return Err(Error::config("policy_grid", "must not be empty"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        for &tau in &self.tau_grid {
            self.cell_config(&Cell { policy: Policy::None, tau, capacity: self.capacity_grid[0], seed: 0 })
                .validate()?;
        }
        for &capacity in &self.capacity_grid {
            self.cell_config(&Cell { policy: Policy::None, tau: self.tau_grid[0], capacity, seed: 0 })
                .validate()?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.base.seed.wrapping_add(r)).collect()
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &policy in &self.policy_grid {
            for &tau in &self.tau_grid {
                for &capacity in &self.capacity_grid {
                    for seed in self.seeds() {
                        cells.push(Cell { policy, tau, capacity, seed });
                    }
                }
            }
        }
        cells
    }

    pub fn cell_config(&self, cell: &Cell) -> ExperimentConfig {
        ExperimentConfig {
            tau: cell.tau,
            cache_capacity: cell.capacity,
            policy: cell.policy,
            seed: cell.seed,
            ..self.base.clone()
        }
    }

    /// Plain-FedAvg reference for a seed: gating off, no cache.
    pub fn baseline_config(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            tau: 0.0,
            policy: Policy::None,
            seed,
            ..self.base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub policy: Policy,
    pub tau: f64,
    pub capacity: usize,
    pub seed: u64,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@tau={},C={},seed={}", self.policy, self.tau, self.capacity, self.seed)
    }
}

/// One report record; field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: Policy,
    pub tau: f64,
    pub capacity: usize,
    pub seed: u64,
    pub rounds: u64,
    pub comm_bytes: u64,
    pub cache_hits: u64,
    pub peak_mem_bytes: u64,
    pub final_accuracy: f64,
    /// Absent when the baseline sent nothing (e.g. zero rounds).
    pub reduction_vs_baseline: Option<f64>,
}

impl SweepRow {
    fn sort_key(&self, other: &Self) -> std::cmp::Ordering {
        self.policy
            .cmp(&other.policy)
            .then(self.tau.total_cmp(&other.tau))
            .then(self.capacity.cmp(&other.capacity))
            .then(self.seed.cmp(&other.seed))
    }
}

/// Sorts rows by `(policy, tau, capacity, seed)`.
pub fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(SweepRow::sort_key);
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub cell: Cell,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<CellFailure>,
    /// Full metrics for every successful cell, in row order.
    pub metrics: Vec<RunMetrics>,
}

impl SweepOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs every cell of the grid on up to `workers` threads (0 = rayon's
/// default). A failing cell is reported and does not stop its siblings.
pub fn run_sweep(spec: &SweepSpec, workers: usize) -> Result<SweepOutcome> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;

    let seeds = spec.seeds();
    let cells = spec.cells();
    let (baselines, results) = pool.install(|| {
        let baselines: BTreeMap<u64, Result<RunMetrics>> = seeds
            .par_iter()
            .map(|&seed| (seed, run_experiment(&spec.baseline_config(seed)).map(|r| r.metrics)))
            .collect();
        let results: Vec<(Cell, Result<RunMetrics>)> = cells
            .par_iter()
            .map(|cell| (*cell, run_experiment(&spec.cell_config(cell)).map(|r| r.metrics)))
            .collect();
        (baselines, results)
    });

    let mut outcome = SweepOutcome::default();
    let mut ok = Vec::new();
    for (cell, result) in results {
        match result {
            Ok(metrics) => {
                let reduction = match &baselines[&cell.seed] {
                    Ok(base) => reduction_vs_baseline(&metrics, base).ok(),
                    Err(_) => None,
                };
                let row = SweepRow {
                    policy: cell.policy,
                    tau: cell.tau,
                    capacity: cell.capacity,
                    seed: cell.seed,
                    rounds: metrics.rounds,
                    comm_bytes: metrics.comm_cost_bytes,
                    cache_hits: metrics.cache_hits_total,
                    peak_mem_bytes: metrics.peak_mem_bytes,
                    final_accuracy: metrics.final_accuracy,
                    reduction_vs_baseline: reduction,
                };
                ok.push((row, metrics));
            }
            Err(e) => outcome.failures.push(CellFailure { cell, error: e.to_string() }),
        }
    }
    ok.sort_by(|a, b| a.0.sort_key(&b.0));
    (outcome.rows, outcome.metrics) = ok.into_iter().unzip();
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: Policy,
    pub repeats: usize,
    pub mean_comm_bytes: f64,
    pub mean_final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub tau: f64,
    pub capacity: usize,
    pub policy: Policy,
    /// Whether the choice satisfies the objective's constraint; if no policy
    /// does, the closest one is returned with `feasible = false`.
    pub feasible: bool,
    pub candidates: Vec<PolicySummary>,
}

fn summarize(rows: &[&SweepRow], policy: Policy) -> PolicySummary {
    let mut picked: Vec<&SweepRow> = rows.iter().copied().filter(|r| r.policy == policy).collect();
    // Fixed summation order keeps means independent of the input row order.
    picked.sort_by_key(|r| r.seed);
    let n = picked.len() as f64;
    PolicySummary {
        policy,
        repeats: picked.len(),
        mean_comm_bytes: picked.iter().map(|r| r.comm_bytes as f64).sum::<f64>() / n,
        mean_final_accuracy: picked.iter().map(|r| r.final_accuracy).sum::<f64>() / n,
    }
}

/// Picks the caching policy (FIFO, LRU or PBR) that best meets `objective`
/// at one `(tau, capacity)` cell, averaging over repeats. Ties go to lower
/// communication, then to FIFO < LRU < PBR.
pub fn recommend_strategy(
    rows: &[SweepRow],
    tau: f64,
    capacity: usize,
    objective: Objective,
) -> Result<Recommendation> {
    let cell_rows: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| r.tau == tau && r.capacity == capacity)
        .collect();
    let missing: Vec<String> = Policy::CACHING
        .iter()
        .filter(|p| !cell_rows.iter().any(|r| r.policy == **p))
        .map(|p| format!("{p}@tau={tau},C={capacity}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteTable(missing));
    }

    let candidates: Vec<PolicySummary> = Policy::CACHING.iter().map(|&p| summarize(&cell_rows, p)).collect();
    // Candidates are already in tie-break order, so a stable min/max keeps the earliest.
    let by_comm = |a: &&PolicySummary, b: &&PolicySummary| a.mean_comm_bytes.total_cmp(&b.mean_comm_bytes);
    let by_acc_then_comm = |a: &&PolicySummary, b: &&PolicySummary| {
        b.mean_final_accuracy
            .total_cmp(&a.mean_final_accuracy)
            .then(a.mean_comm_bytes.total_cmp(&b.mean_comm_bytes))
    };
    let pick = |pool: Vec<&PolicySummary>, cmp: &dyn Fn(&&PolicySummary, &&PolicySummary) -> std::cmp::Ordering| {
        pool.into_iter().min_by(|a, b| cmp(a, b)).map(|s| s.policy)
    };

    let (feasible, choice) = match objective {
        Objective::MinCommAtAccuracyFloor { floor } => {
            let ok: Vec<&PolicySummary> = candidates.iter().filter(|s| s.mean_final_accuracy >= floor).collect();
            if ok.is_empty() {
                (false, pick(candidates.iter().collect(), &by_acc_then_comm))
            } else {
                (true, pick(ok, &by_comm))
            }
        }
        Objective::MaxAccuracyAtCommBudget { budget } => {
            let ok: Vec<&PolicySummary> = candidates
                .iter()
                .filter(|s| s.mean_comm_bytes <= budget as f64)
                .collect();
            if ok.is_empty() {
                (false, pick(candidates.iter().collect(), &by_comm))
            } else {
                (true, pick(ok, &by_acc_then_comm))
            }
        }
    };

    Ok(Recommendation {
        tau,
        capacity,
        policy: choice.expect("three candidates"),
        feasible,
        candidates,
    })
}

/// Recommendations for every `(tau, capacity)` cell present in `rows`.
pub fn recommend_all(rows: &[SweepRow], objective: Objective) -> Result<Vec<Recommendation>> {
    let mut cells: Vec<(f64, usize)> = rows.iter().map(|r| (r.tau, r.capacity)).collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cells.dedup();
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for (tau, capacity) in cells {
        match recommend_strategy(rows, tau, capacity, objective) {
            Ok(r) => out.push(r),
            Err(Error::IncompleteTable(m)) => missing.extend(m),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteTable(missing));
    }
    Ok(out)
}
