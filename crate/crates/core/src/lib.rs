//! Deterministic simulator of synchronous federated learning where clients
//! withhold insignificant updates and the server substitutes them from a
//! bounded FIFO, LRU or priority-based cache.

pub mod cache;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod sweep;
pub mod workloads;

pub use cache::{Policy, PriorityConfig, UpdateCache};
pub use engine::{run_experiment, run_plain_fedavg, ExperimentConfig, RoundOutcome, Simulation};
pub use error::{Error, Result};
pub use metrics::RunMetrics;
pub use model::{ClientUpdate, GlobalModel};
pub use workloads::{Task, WorkloadSpec};
