//! Synchronous round loop: selection, local training, client-side gating,
//! cache substitution and aggregation.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::cache::{Policy, PriorityConfig, UpdateCache};
use crate::error::{Error, Result};
use crate::metrics::RunMetrics;
use crate::model::{fedavg_aggregate, should_transmit, AggregationSet, GlobalModel};
use crate::rng::{substream, Purpose};
use crate::workloads::{evaluate_global, generate_federation, local_train, Federation, WorkloadSpec};

/// How a cached update enters aggregation in a later round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Substitution {
    /// Add the cached delta as is. Repeated reuse moves the model by the same
    /// step every round.
    Verbatim,
    /// Treat the cached update as the client's trained parameters
    /// (`θ_produced + Δ`) and aggregate their offset from the current model.
    #[default]
    Rebased,
}

impl Substitution {
    pub fn as_str(self) -> &'static str {
        match self {
            Substitution::Verbatim => "verbatim",
            Substitution::Rebased => "rebased",
        }
    }
}

impl std::str::FromStr for Substitution {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "verbatim" => Ok(Substitution::Verbatim),
            "rebased" => Ok(Substitution::Rebased),
            other => Err(format!("unknown substitution `{other}` (expected verbatim or rebased)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub tau: f64,
    pub cache_capacity: usize,
    pub policy: Policy,
    pub priority: PriorityConfig,
    pub substitution: Substitution,
    pub rounds: u64,
    pub workload: WorkloadSpec,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_clients: 10,
            clients_per_round: 10,
            tau: 0.10,
            cache_capacity: 4,
            policy: Policy::Fifo,
            priority: PriorityConfig::default(),
            substitution: Substitution::default(),
            rounds: 100,
            workload: WorkloadSpec::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be positive"));
        }
        if u32::try_from(self.n_clients).is_err() {
            return Err(Error::config("n_clients", "too many clients"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return Err(Error::config("clients_per_round", "must lie in [1, n_clients]"));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::config("tau", "must be >= 0"));
        }
        if self.cache_capacity == 0 {
            return Err(Error::config("cache_capacity", "must be positive"));
        }
        self.priority.validate()?;
        self.workload.validate()?;
        Ok(())
    }
}

/// The clients taking part in `round`, ascending. Each round draws from its
/// own stream, so the set depends only on `(seed, round, N, k)`.
pub fn select_clients(config: &ExperimentConfig, round: u64) -> Vec<u32> {
    let (n, k) = (config.n_clients, config.clients_per_round);
    if k >= n {
        return (0..n as u32).collect();
    }
    let mut rng = substream(config.seed, Purpose::ClientSelection, round, 0);
    let mut ids: Vec<u32> = index::sample(&mut rng, n, k).into_iter().map(|i| i as u32).collect();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: u64,
    pub transmitted_ids: Vec<u32>,
    pub cache_hit_ids: Vec<u32>,
    pub skipped_ids: Vec<u32>,
    pub bytes_sent: u64,
    /// Cache footprint at the end of the round.
    pub cache_mem_bytes: u64,
    pub cache_entries: usize,
    pub eval_accuracy: f64,
    pub eval_loss: f64,
}

impl RoundOutcome {
    pub fn participants(&self) -> usize {
        self.transmitted_ids.len() + self.cache_hit_ids.len() + self.skipped_ids.len()
    }
}

/// State of one run. Rounds execute strictly in sequence.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: ExperimentConfig,
    federation: Federation,
    model: GlobalModel,
    cache: Option<UpdateCache>,
    // Global parameters of every round some cache entry was produced in.
    history: BTreeMap<u64, Vec<f64>>,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let federation = generate_federation(&config.workload, config.seed, config.n_clients)?;
        let model = GlobalModel::zeros(config.workload.param_dim());
        let cache = match config.policy.eviction() {
            Some(policy) => Some(UpdateCache::new(config.cache_capacity, policy, config.priority)?),
            None => None,
        };
        Ok(Self {
            config,
            federation,
            model,
            cache,
            history: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn federation(&self) -> &Federation {
        &self.federation
    }

    pub fn model(&self) -> &GlobalModel {
        &self.model
    }

    pub fn cache(&self) -> Option<&UpdateCache> {
        self.cache.as_ref()
    }

    pub fn cache_mut(&mut self) -> Option<&mut UpdateCache> {
        self.cache.as_mut()
    }

    /// Runs one round against the current global model.
    ///
    /// Withheld clients are resolved against the cache as it stood at the
    /// start of the round; transmitted updates are inserted afterwards. A
    /// round with nothing to aggregate leaves the parameters unchanged.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let round = self.model.round();
        let selected = select_clients(&self.config, round);
        let spec = &self.config.workload;

        let mut set = AggregationSet::default();
        let mut withheld = Vec::new();
        for &id in &selected {
            let update = local_train(&self.federation.clients[id as usize], &self.model, spec)?;
            if should_transmit(update.significance, self.config.tau) {
                set.transmitted.push(update);
            } else {
                withheld.push(id);
            }
        }

        let mut cache_hit_ids = Vec::new();
        let mut skipped_ids = Vec::new();
        for id in withheld {
            match self.cache.as_mut().and_then(|c| c.lookup_for_substitution(id, round)) {
                Some(mut update) => {
                    if self.config.substitution == Substitution::Rebased {
                        if let Some(base) = self.history.get(&update.round_produced) {
                            for ((d, b), now) in update.delta.iter_mut().zip(base).zip(self.model.params()) {
                                *d += b - now;
                            }
                        }
                    }
                    cache_hit_ids.push(id);
                    set.cache_substituted.push(update);
                }
                None => skipped_ids.push(id),
            }
        }

        let transmitted_ids: Vec<u32> = set.transmitted.iter().map(|u| u.client_id).collect();
        let bytes_sent = set.transmitted.iter().map(|u| u.size_bytes).sum();
        if let Some(cache) = self.cache.as_mut() {
            for update in &set.transmitted {
                cache.insert(update.clone(), round);
            }
            if self.config.substitution == Substitution::Rebased {
                if !set.transmitted.is_empty() {
                    self.history.insert(round, self.model.params().to_vec());
                }
                let live: std::collections::BTreeSet<u64> =
                    cache.entries().map(|e| e.update.round_produced).collect();
                self.history.retain(|r, _| live.contains(r));
            }
        }

        match fedavg_aggregate(&self.model, &set) {
            Ok(next) => self.model = next,
            Err(Error::NoParticipants) => self.model.advance_round(),
            Err(e) => return Err(e),
        }

        let eval = evaluate_global(&self.model, &self.federation, spec)?;
        let (cache_mem_bytes, cache_entries) = self
            .cache
            .as_ref()
            .map_or((0, 0), |c| (c.mem_usage(), c.len()));
        Ok(RoundOutcome {
            round,
            transmitted_ids,
            cache_hit_ids,
            skipped_ids,
            bytes_sent,
            cache_mem_bytes,
            cache_entries,
            eval_accuracy: eval.accuracy,
            eval_loss: eval.loss,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub metrics: RunMetrics,
    pub log: Vec<RoundOutcome>,
    pub final_params: Vec<f64>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut sim = Simulation::new(config.clone())?;
    let mut metrics = RunMetrics::new();
    let mut log = Vec::with_capacity(config.rounds as usize);
    for _ in 0..config.rounds {
        let outcome = sim.run_round()?;
        metrics.accumulate(&outcome)?;
        log.push(outcome);
    }
    Ok(ExperimentResult {
        metrics,
        log,
        final_params: sim.model.params().to_vec(),
    })
}

/// Plain FedAvg on the same federation and client schedule: every selected
/// client transmits and nothing is cached, whatever `tau` and `policy` say.
pub fn run_plain_fedavg(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let spec = &config.workload;
    let federation = generate_federation(spec, config.seed, config.n_clients)?;
    let mut model = GlobalModel::zeros(spec.param_dim());
    let mut metrics = RunMetrics::new();
    let mut log = Vec::with_capacity(config.rounds as usize);
    for round in 0..config.rounds {
        let selected = select_clients(config, round);
        let transmitted = selected
            .iter()
            .map(|&id| local_train(&federation.clients[id as usize], &model, spec))
            .collect::<Result<Vec<_>>>()?;
        let bytes_sent = transmitted.iter().map(|u| u.size_bytes).sum();
        model = fedavg_aggregate(
            &model,
            &AggregationSet {
                transmitted,
                cache_substituted: vec![],
            },
        )?;
        let eval = evaluate_global(&model, &federation, spec)?;
        let outcome = RoundOutcome {
            round,
            transmitted_ids: selected,
            cache_hit_ids: vec![],
            skipped_ids: vec![],
            bytes_sent,
            cache_mem_bytes: 0,
            cache_entries: 0,
            eval_accuracy: eval.accuracy,
            eval_loss: eval.loss,
        };
        metrics.accumulate(&outcome)?;
        log.push(outcome);
    }
    Ok(ExperimentResult {
        metrics,
        log,
        final_params: model.params().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::{SamplesPerClient, Task};

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n_clients: 6,
            clients_per_round: 4,
            rounds: 5,
            workload: WorkloadSpec {
                dim: 8,
                samples_per_client: SamplesPerClient::Uniform(30),
                ..WorkloadSpec::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn full_participation_selects_everyone() {
        let cfg = ExperimentConfig { clients_per_round: 6, ..small() };
        assert_eq!(select_clients(&cfg, 3), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn selection_is_deterministic() {
        let cfg = small();
        for round in 0..10 {
            let a = select_clients(&cfg, round);
            assert_eq!(a, select_clients(&cfg, round));
            assert_eq!(a.len(), 4);
            assert!(a.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn selection_golden() {
        let cfg = ExperimentConfig {
            n_clients: 10,
            clients_per_round: 4,
            seed: 42,
            ..ExperimentConfig::default()
        };
        assert_eq!(select_clients(&cfg, 5), GOLDEN_SEED42_ROUND5);
    }

    // Generated once from the ChaCha selection stream.
    const GOLDEN_SEED42_ROUND5: [u32; 4] = [0, 1, 7, 8];

    #[test]
    fn gating_disabled_is_fedavg() {
        let cfg = ExperimentConfig { tau: 0.0, policy: Policy::None, ..small() };
        let mut sim = Simulation::new(cfg.clone()).unwrap();
        for _ in 0..3 {
            let out = sim.run_round().unwrap();
            assert_eq!(out.transmitted_ids.len(), 4);
            assert!(out.cache_hit_ids.is_empty() && out.skipped_ids.is_empty());
        }
        let plain = run_plain_fedavg(&ExperimentConfig { rounds: 3, ..cfg }).unwrap();
        assert_eq!(plain.final_params, sim.model().params());
    }

    #[test]
    fn infinite_threshold_skips_everyone() {
        let cfg = ExperimentConfig { tau: 1e300, policy: Policy::Lru, ..small() };
        let mut sim = Simulation::new(cfg).unwrap();
        // A zero model makes every nonzero update maximally significant, so
        // start from a nonzero model.
        sim.model = GlobalModel::new(vec![1.0; sim.config.workload.param_dim()]).unwrap();
        let before = sim.model.params().to_vec();
        let out = sim.run_round().unwrap();
        assert_eq!(out.skipped_ids.len(), 4);
        assert_eq!(out.bytes_sent, 0);
        assert_eq!(sim.model.params(), &before[..]);
        assert_eq!(sim.model.round(), 1);
    }

    #[test]
    fn preloaded_entry_is_substituted_verbatim() {
        let cfg = ExperimentConfig { tau: 1e300, policy: Policy::Fifo, clients_per_round: 6, ..small() };
        let mut sim = Simulation::new(cfg).unwrap();
        let dim = sim.config.workload.param_dim();
        sim.model = GlobalModel::new(vec![1.0; dim]).unwrap();
        let cached = crate::model::ClientUpdate::new(
            2,
            &sim.model,
            (0..dim).map(|i| i as f64 * 0.01).collect(),
            30,
            0.9,
        )
        .unwrap();
        sim.cache_mut().unwrap().insert(cached.clone(), 0);
        let out = sim.run_round().unwrap();
        assert_eq!(out.cache_hit_ids, vec![2]);
        assert_eq!(out.skipped_ids, vec![0, 1, 3, 4, 5]);
        let expected: Vec<f64> = cached.delta.iter().map(|d| 1.0 + d).collect();
        assert_eq!(sim.model.params(), &expected[..]);
        assert_eq!(sim.cache().unwrap().get(2).unwrap().use_count, 1);
    }

    fn cached_then_withheld(substitution: Substitution) -> (Simulation, Vec<crate::model::ClientUpdate>) {
        // On the zero model every update clears tau = 1e6; afterwards none do.
        let cfg = ExperimentConfig {
            tau: 1e6,
            policy: Policy::Fifo,
            cache_capacity: 3,
            clients_per_round: 6,
            substitution,
            ..small()
        };
        let mut sim = Simulation::new(cfg).unwrap();
        let first = sim.run_round().unwrap();
        assert_eq!(first.transmitted_ids.len(), 6);
        let cached: Vec<_> = sim.cache().unwrap().entries().map(|e| e.update.clone()).collect();
        assert_eq!(cached.len(), 3);
        (sim, cached)
    }

    fn weighted_mean(updates: &[crate::model::ClientUpdate]) -> Vec<f64> {
        let total: u64 = updates.iter().map(|u| u.sample_count).sum();
        let mut out = vec![0.0; updates[0].dim()];
        for u in updates {
            for (o, d) in out.iter_mut().zip(&u.delta) {
                *o += u.sample_count as f64 / total as f64 * d;
            }
        }
        out
    }

    #[test]
    fn rebased_reuse_settles_on_cached_local_models() {
        let (mut sim, cached) = cached_then_withheld(Substitution::Rebased);
        // cached deltas were produced against the zero model
        let target = weighted_mean(&cached);
        for _ in 0..3 {
            let out = sim.run_round().unwrap();
            assert_eq!(out.cache_hit_ids.len(), 3);
            assert_eq!(out.bytes_sent, 0);
            for (p, t) in sim.model().params().iter().zip(&target) {
                assert!((p - t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn verbatim_reuse_repeats_the_cached_step() {
        let (mut sim, cached) = cached_then_withheld(Substitution::Verbatim);
        let step = weighted_mean(&cached);
        let mut before = sim.model().params().to_vec();
        for _ in 0..3 {
            let out = sim.run_round().unwrap();
            assert_eq!(out.cache_hit_ids.len(), 3);
            for ((p, b), s) in sim.model().params().iter().zip(&before).zip(&step) {
                assert!((p - (b + s)).abs() < 1e-12);
            }
            before = sim.model().params().to_vec();
        }
    }

    #[test]
    fn zero_rounds_is_empty() {
        let res = run_experiment(&ExperimentConfig { rounds: 0, ..small() }).unwrap();
        assert!(res.log.is_empty());
        assert_eq!(res.metrics, RunMetrics::default());
    }

    #[test]
    fn invalid_config_names_field() {
        let bad = ExperimentConfig { clients_per_round: 7, ..small() };
        let err = run_experiment(&bad).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { field: "clients_per_round", .. }));
        let bad = ExperimentConfig { tau: -0.1, ..small() };
        assert!(matches!(run_experiment(&bad), Err(Error::InvalidConfig { field: "tau", .. })));
        let mut bad = small();
        bad.workload.task = Task::LogisticMulticlass;
        bad.workload.classes = 1;
        assert!(matches!(run_experiment(&bad), Err(Error::InvalidConfig { field: "classes", .. })));
    }

    #[test]
    fn rounds_conserve_participants() {
        for policy in Policy::ALL {
            let res = run_experiment(&ExperimentConfig { policy, tau: 0.05, rounds: 20, ..small() }).unwrap();
            for out in &res.log {
                assert_eq!(out.participants(), 4);
            }
        }
    }
}
