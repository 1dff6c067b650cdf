//! Flat key-value experiment files.
//!
//! Keys mirror the field names of `ExperimentConfig` and `WorkloadSpec`,
//! plus the sweep grid keys. Values from the command line override the
//! file, which overrides the built-in defaults.

use std::path::Path;

use fedcache_core::cache::{Policy, PriorityConfig};
use fedcache_core::engine::{ExperimentConfig, Substitution};
use fedcache_core::sweep::{Objective, SweepSpec};
use fedcache_core::workloads::{SamplesPerClient, Task, WorkloadSpec};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub n_clients: Option<usize>,
    pub clients_per_round: Option<usize>,
    pub tau: Option<f64>,
    pub cache_capacity: Option<usize>,
    pub policy: Option<String>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub substitution: Option<String>,
    pub rounds: Option<u64>,
    pub seed: Option<u64>,

    pub task: Option<String>,
    pub dim: Option<usize>,
    pub classes: Option<usize>,
    pub samples_per_client: Option<SamplesPerClient>,
    pub heterogeneity: Option<f64>,
    pub local_epochs: Option<u32>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub noise_std: Option<f64>,

    pub tau_grid: Option<Vec<f64>>,
    pub capacity_grid: Option<Vec<usize>>,
    pub policy_grid: Option<Vec<String>>,
    pub repeats: Option<u32>,
    pub objective: Option<String>,
    pub accuracy_floor: Option<f64>,
    pub comm_budget: Option<u64>,
    pub workers: Option<usize>,
}

/// Values given on the command line.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub capacity: Option<usize>,
    pub policy: Option<Policy>,
    pub rounds: Option<u64>,
    pub clients: Option<usize>,
    pub workers: Option<usize>,
    pub objective: Option<String>,
    pub accuracy_floor: Option<f64>,
    pub comm_budget: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub experiment: ExperimentConfig,
    pub sweep: SweepSpec,
    pub workers: usize,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig, String> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            parse(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

pub fn parse(text: &str) -> Result<FileConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

fn parse_objective(name: &str, floor: Option<f64>, budget: Option<u64>) -> Result<Objective, String> {
    match name {
        "min-comm-at-accuracy-floor" => Ok(Objective::MinCommAtAccuracyFloor {
            floor: floor.unwrap_or(0.0),
        }),
        "max-accuracy-at-comm-budget" => Ok(Objective::MaxAccuracyAtCommBudget {
            budget: budget.ok_or("objective max-accuracy-at-comm-budget needs comm_budget")?,
        }),
        other => Err(format!(
            "unknown objective `{other}` (expected min-comm-at-accuracy-floor or max-accuracy-at-comm-budget)"
        )),
    }
}

pub fn resolve(file: FileConfig, cli: &Overrides) -> Result<Resolved, String> {
    let defaults = ExperimentConfig::default();
    let dw = WorkloadSpec::default();

    let task = match file.task {
        Some(t) => t.parse::<Task>()?,
        None => dw.task,
    };
    let classes = file.classes.unwrap_or(match task {
        Task::LogisticBinary => 2,
        _ => dw.classes,
    });
    let workload = WorkloadSpec {
        task,
        dim: file.dim.unwrap_or(dw.dim),
        classes,
        samples_per_client: file.samples_per_client.unwrap_or(dw.samples_per_client),
        heterogeneity: file.heterogeneity.unwrap_or(dw.heterogeneity),
        local_epochs: file.local_epochs.unwrap_or(dw.local_epochs),
        learning_rate: file.learning_rate.unwrap_or(dw.learning_rate),
        batch_size: file.batch_size.unwrap_or(dw.batch_size),
        noise_std: file.noise_std.unwrap_or(dw.noise_std),
    };

    let n_clients = cli.clients.or(file.n_clients).unwrap_or(defaults.n_clients);
    let policy = match (cli.policy, file.policy) {
        (Some(p), _) => p,
        (None, Some(p)) => p.parse()?,
        (None, None) => defaults.policy,
    };
    let dp = PriorityConfig::default();
    let experiment = ExperimentConfig {
        n_clients,
        clients_per_round: file.clients_per_round.unwrap_or(n_clients),
        tau: cli.tau.or(file.tau).unwrap_or(defaults.tau),
        cache_capacity: cli.capacity.or(file.cache_capacity).unwrap_or(defaults.cache_capacity),
        policy,
        priority: PriorityConfig {
            alpha: file.alpha.unwrap_or(dp.alpha),
            beta: file.beta.unwrap_or(dp.beta),
            gamma: file.gamma.unwrap_or(dp.gamma),
        },
        substitution: match file.substitution {
            Some(s) => s.parse::<Substitution>()?,
            None => defaults.substitution,
        },
        rounds: cli.rounds.or(file.rounds).unwrap_or(defaults.rounds),
        workload,
        seed: cli.seed.or(file.seed).unwrap_or(defaults.seed),
    };

    let mut sweep = SweepSpec::new(experiment.clone());
    if let Some(tau) = cli.tau {
        sweep.tau_grid = vec![tau];
    } else if let Some(g) = file.tau_grid {
        sweep.tau_grid = g;
    }
    if let Some(c) = cli.capacity {
        sweep.capacity_grid = vec![c];
    } else if let Some(g) = file.capacity_grid {
        sweep.capacity_grid = g;
    }
    if let Some(p) = cli.policy {
        sweep.policy_grid = vec![p];
    } else if let Some(g) = file.policy_grid {
        sweep.policy_grid = g.iter().map(|p| p.parse()).collect::<Result<_, _>>()?;
    }
    if let Some(r) = file.repeats {
        sweep.repeats = r;
    }
    let floor = cli.accuracy_floor.or(file.accuracy_floor);
    let budget = cli.comm_budget.or(file.comm_budget);
    sweep.objective = match cli.objective.as_deref().or(file.objective.as_deref()) {
        Some(name) => parse_objective(name, floor, budget)?,
        None => match (floor, budget) {
            (None, Some(b)) => Objective::MaxAccuracyAtCommBudget { budget: b },
            (f, _) => Objective::MinCommAtAccuracyFloor { floor: f.unwrap_or(0.0) },
        },
    };

    Ok(Resolved {
        experiment,
        sweep,
        workers: cli.workers.or(file.workers).unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let r = resolve(parse("").unwrap(), &Overrides::default()).unwrap();
        assert_eq!(r.experiment, ExperimentConfig::default());
        assert_eq!(r.sweep.tau_grid, vec![0.01, 0.10, 0.30]);
        assert_eq!(r.sweep.cells().len(), 48);
    }

    #[test]
    fn precedence_is_cli_then_file_then_default() {
        let file = parse("tau = 0.3\nrounds = 7\nseed = 9\npolicy = \"lru\"\nalpha = 0.5").unwrap();
        let cli = Overrides {
            tau: Some(0.01),
            policy: Some(Policy::Pbr),
            ..Default::default()
        };
        let r = resolve(file, &cli).unwrap();
        assert_eq!(r.experiment.tau, 0.01);
        assert_eq!(r.experiment.policy, Policy::Pbr);
        assert_eq!(r.experiment.rounds, 7);
        assert_eq!(r.experiment.seed, 9);
        assert_eq!(r.experiment.priority.alpha, 0.5);
        assert_eq!(r.experiment.priority.beta, 0.3);
        assert_eq!(r.sweep.tau_grid, vec![0.01]);
        assert_eq!(r.sweep.policy_grid, vec![Policy::Pbr]);
    }

    #[test]
    fn workload_keys_and_lists() {
        let file = parse(
            "task = \"logistic-binary\"\ndim = 20\nsamples_per_client = [5, 6, 7]\nn_clients = 3\n\
             tau_grid = [0.2]\ncapacity_grid = [2]\npolicy_grid = [\"FIFO\", \"NONE\"]\nrepeats = 2",
        )
        .unwrap();
        let r = resolve(file, &Overrides::default()).unwrap();
        let w = &r.experiment.workload;
        assert_eq!((w.task, w.dim, w.classes), (Task::LogisticBinary, 20, 2));
        assert_eq!(w.samples_per_client, SamplesPerClient::PerClient(vec![5, 6, 7]));
        assert_eq!(r.experiment.clients_per_round, 3);
        assert_eq!(r.sweep.cells().len(), 4);
    }

    #[test]
    fn objective_selection() {
        let r = resolve(parse("comm_budget = 100").unwrap(), &Overrides::default()).unwrap();
        assert_eq!(r.sweep.objective, Objective::MaxAccuracyAtCommBudget { budget: 100 });
        let cli = Overrides {
            objective: Some("min-comm-at-accuracy-floor".into()),
            accuracy_floor: Some(0.8),
            ..Default::default()
        };
        let r = resolve(parse("comm_budget = 100").unwrap(), &cli).unwrap();
        assert_eq!(r.sweep.objective, Objective::MinCommAtAccuracyFloor { floor: 0.8 });
        let bad = Overrides {
            objective: Some("max-accuracy-at-comm-budget".into()),
            ..Default::default()
        };
        assert!(resolve(FileConfig::default(), &bad).is_err());
    }

    #[test]
    fn bad_files_rejected() {
        assert!(parse("unknown_key = 1").is_err());
        assert!(parse("tau = \"high\"").is_err());
        assert!(resolve(parse("policy = \"MRU\"").unwrap(), &Overrides::default()).is_err());
        assert!(resolve(parse("task = \"svm\"").unwrap(), &Overrides::default()).is_err());
    }
}
