//! Bounded server-side update cache with FIFO, LRU and priority-based
//! replacement.
//!
//! The cache holds at most one entry per client. Capacity counts entries, not
//! bytes; [`UpdateCache::mem_usage`] reports the resident bytes separately.
//! All victim choices break ties on the lowest client id so that replays are
//! deterministic.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClientUpdate;

/// Server caching policy for an experiment. `None` disables the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "FIFO")]
    Fifo,
    #[serde(rename = "LRU")]
    Lru,
    #[serde(rename = "PBR")]
    Pbr,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::None, Policy::Fifo, Policy::Lru, Policy::Pbr];
    pub const CACHING: [Policy; 3] = [Policy::Fifo, Policy::Lru, Policy::Pbr];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::None => "NONE",
            Policy::Fifo => "FIFO",
            Policy::Lru => "LRU",
            Policy::Pbr => "PBR",
        }
    }

    pub fn eviction(self) -> Option<EvictionPolicy> {
        match self {
            Policy::None => None,
            Policy::Fifo => Some(EvictionPolicy::Fifo),
            Policy::Lru => Some(EvictionPolicy::Lru),
            Policy::Pbr => Some(EvictionPolicy::Pbr),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" => Ok(Policy::None),
            "FIFO" => Ok(Policy::Fifo),
            "LRU" => Ok(Policy::Lru),
            "PBR" => Ok(Policy::Pbr),
            other => Err(format!("unknown policy `{other}` (expected NONE, FIFO, LRU or PBR)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvictionPolicy {
    Fifo,
    Lru,
    Pbr,
}

/// Weights for the PBR score `alpha * accuracy + beta * recency` and the
/// substitution threshold `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for PriorityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            gamma: 0.0,
        }
    }
}

impl PriorityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be a finite value >= 0"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be a finite value >= 0"));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::config("alpha", "alpha + beta must be positive"));
        }
        if self.gamma.is_nan() {
            return Err(Error::config("gamma", "must not be NaN"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub update: ClientUpdate,
    pub inserted_at: u64,
    pub last_used_at: u64,
    pub use_count: u64,
}

/// `1 / (1 + rounds since last use)`, in `(0, 1]`.
pub fn recency(entry: &CacheEntry, now: u64) -> f64 {
    1.0 / (1.0 + now.saturating_sub(entry.last_used_at) as f64)
}

pub fn priority_score(entry: &CacheEntry, now: u64, cfg: &PriorityConfig) -> f64 {
    cfg.alpha * entry.update.reported_accuracy + cfg.beta * recency(entry, now)
}

/// What happened to the cache on an insert.
#[derive(Debug, Clone, PartialEq)]
pub enum InsertOutcome {
    /// Stored in a free slot.
    Inserted,
    /// Overwrote the existing entry of the same client.
    Replaced,
    /// Stored after evicting the returned entry.
    Evicted(CacheEntry),
    /// PBR only: the incoming update scored below every resident entry.
    Rejected,
}

impl InsertOutcome {
    pub fn evicted(&self) -> Option<&CacheEntry> {
        match self {
            InsertOutcome::Evicted(e) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UpdateCache {
    capacity: usize,
    policy: EvictionPolicy,
    priority: PriorityConfig,
    entries: BTreeMap<u32, CacheEntry>,
    // (inserted_at, client) for FIFO, (last_used_at, client) for LRU.
    order: BTreeSet<(u64, u32)>,
}

impl UpdateCache {
    pub fn new(capacity: usize, policy: EvictionPolicy, priority: PriorityConfig) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("cache_capacity", "must be positive"));
        }
        priority.validate()?;
        Ok(Self {
            capacity,
            policy,
            priority,
            entries: BTreeMap::new(),
            order: BTreeSet::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    pub fn priority_config(&self) -> &PriorityConfig {
        &self.priority
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.priority.gamma = gamma;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, client_id: u32) -> Option<&CacheEntry> {
        self.entries.get(&client_id)
    }

    /// Entries in ascending client-id order.
    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.values()
    }

    /// Resident bytes: the sum of `size_bytes` over all entries.
    pub fn mem_usage(&self) -> u64 {
        self.entries.values().map(|e| e.update.size_bytes).sum()
    }

    fn order_key(&self, entry: &CacheEntry) -> Option<(u64, u32)> {
        let id = entry.update.client_id;
        match self.policy {
            EvictionPolicy::Fifo => Some((entry.inserted_at, id)),
            EvictionPolicy::Lru => Some((entry.last_used_at, id)),
            EvictionPolicy::Pbr => None,
        }
    }

    fn remove(&mut self, client_id: u32) -> Option<CacheEntry> {
        let entry = self.entries.remove(&client_id)?;
        if let Some(key) = self.order_key(&entry) {
            self.order.remove(&key);
        }
        Some(entry)
    }

    fn put(&mut self, entry: CacheEntry) {
        if let Some(key) = self.order_key(&entry) {
            self.order.insert(key);
        }
        self.entries.insert(entry.update.client_id, entry);
    }

    fn pbr_victim(&self, now: u64) -> Option<(u32, f64)> {
        self.entries
            .values()
            .map(|e| (e.update.client_id, priority_score(e, now, &self.priority)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }

    fn check_invariants(&self) {
        assert!(self.entries.len() <= self.capacity, "cache over capacity");
        if self.policy != EvictionPolicy::Pbr {
            assert_eq!(self.order.len(), self.entries.len(), "order index out of sync");
        }
    }

    /// Stores `update` as of round `now`, evicting one entry per policy when
    /// the cache is full. An existing entry for the same client is replaced
    /// in place and never causes an eviction.
    pub fn insert(&mut self, update: ClientUpdate, now: u64) -> InsertOutcome {
        let id = update.client_id;
        let entry = CacheEntry {
            update,
            inserted_at: now,
            last_used_at: now,
            use_count: 0,
        };

        if self.remove(id).is_some() {
            self.put(entry);
            self.check_invariants();
            return InsertOutcome::Replaced;
        }
        if self.entries.len() < self.capacity {
            self.put(entry);
            self.check_invariants();
            return InsertOutcome::Inserted;
        }

        let victim = match self.policy {
            EvictionPolicy::Fifo | EvictionPolicy::Lru => {
                self.order.first().map(|&(_, client)| client)
            }
            EvictionPolicy::Pbr => {
                let incoming = priority_score(&entry, now, &self.priority);
                match self.pbr_victim(now) {
                    Some((_, lowest)) if incoming.total_cmp(&lowest) == Ordering::Less => {
                        return InsertOutcome::Rejected;
                    }
                    other => other.map(|(client, _)| client),
                }
            }
        }
        .expect("full cache has a victim");

        let evicted = self.remove(victim).expect("victim is resident");
        self.put(entry);
        self.check_invariants();
        InsertOutcome::Evicted(evicted)
    }

    /// Whether `client_id`'s entry may stand in for a withheld update at
    /// round `now`. Only PBR applies the `gamma` filter.
    pub fn is_eligible(&self, client_id: u32, now: u64) -> bool {
        match self.entries.get(&client_id) {
            None => false,
            Some(e) => match self.policy {
                EvictionPolicy::Pbr => priority_score(e, now, &self.priority) >= self.priority.gamma,
                _ => true,
            },
        }
    }

    /// Client ids currently eligible for substitution, ascending.
    pub fn eligible_clients(&self, now: u64) -> BTreeSet<u32> {
        self.entries
            .keys()
            .copied()
            .filter(|&id| self.is_eligible(id, now))
            .collect()
    }

    /// Returns the cached update for a withheld client, marking the entry as
    /// used at `now`.
    pub fn lookup_for_substitution(&mut self, client_id: u32, now: u64) -> Option<ClientUpdate> {
        if !self.is_eligible(client_id, now) {
            return None;
        }
        let mut entry = self.remove(client_id).expect("eligible entry is resident");
        entry.last_used_at = entry.last_used_at.max(now);
        entry.use_count += 1;
        let update = entry.update.clone();
        self.put(entry);
        self.check_invariants();
        Some(update)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::update_size_bytes;

    fn upd(client_id: u32, acc: f64, dim: usize) -> ClientUpdate {
        ClientUpdate {
            client_id,
            round_produced: 0,
            delta: vec![0.0; dim],
            significance: 1.0,
            size_bytes: update_size_bytes(dim),
            sample_count: 1,
            reported_accuracy: acc,
        }
    }

    fn ids(c: &UpdateCache) -> Vec<u32> {
        c.entries().map(|e| e.update.client_id).collect()
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut c = UpdateCache::new(2, EvictionPolicy::Fifo, PriorityConfig::default()).unwrap();
        assert_eq!(c.insert(upd(0, 0.5, 1), 1), InsertOutcome::Inserted);
        c.insert(upd(1, 0.5, 1), 2);
        // use does not matter for FIFO
        c.lookup_for_substitution(0, 3).unwrap();
        let out = c.insert(upd(2, 0.5, 1), 3);
        assert_eq!(out.evicted().unwrap().update.client_id, 0);
        assert_eq!(ids(&c), vec![1, 2]);
    }

    #[test]
    fn lru_evicts_least_recently_used() {
        let mut c = UpdateCache::new(2, EvictionPolicy::Lru, PriorityConfig::default()).unwrap();
        c.insert(upd(0, 0.5, 1), 1);
        c.insert(upd(1, 0.5, 1), 2);
        assert!(c.lookup_for_substitution(0, 3).is_some());
        assert_eq!(c.get(0).unwrap().last_used_at, 3);
        assert_eq!(c.get(0).unwrap().use_count, 1);
        let out = c.insert(upd(2, 0.5, 1), 4);
        assert_eq!(out.evicted().unwrap().update.client_id, 1);
        assert_eq!(ids(&c), vec![0, 2]);
    }

    #[test]
    fn pbr_evicts_lowest_priority() {
        let cfg = PriorityConfig { alpha: 1.0, beta: 0.0, gamma: 0.0 };
        let mut c = UpdateCache::new(2, EvictionPolicy::Pbr, cfg).unwrap();
        c.insert(upd(0, 0.9, 1), 1);
        c.insert(upd(1, 0.2, 1), 1);
        let out = c.insert(upd(2, 0.5, 1), 2);
        assert_eq!(out.evicted().unwrap().update.client_id, 1);
        assert_eq!(ids(&c), vec![0, 2]);
    }

    #[test]
    fn pbr_rejects_update_worse_than_all_residents() {
        let cfg = PriorityConfig { alpha: 1.0, beta: 0.0, gamma: 0.0 };
        let mut c = UpdateCache::new(2, EvictionPolicy::Pbr, cfg).unwrap();
        c.insert(upd(0, 0.9, 1), 1);
        c.insert(upd(1, 0.6, 1), 1);
        assert_eq!(c.insert(upd(2, 0.5, 1), 2), InsertOutcome::Rejected);
        assert_eq!(ids(&c), vec![0, 1]);
        // equal to the minimum is admitted
        let out = c.insert(upd(3, 0.6, 1), 2);
        assert_eq!(out.evicted().unwrap().update.client_id, 1);
    }

    #[test]
    fn ties_evict_lowest_client_id() {
        for policy in [EvictionPolicy::Fifo, EvictionPolicy::Lru, EvictionPolicy::Pbr] {
            let mut c = UpdateCache::new(3, policy, PriorityConfig::default()).unwrap();
            for id in [7, 2, 5] {
                c.insert(upd(id, 0.5, 1), 4);
            }
            let out = c.insert(upd(9, 0.5, 1), 4);
            assert_eq!(out.evicted().unwrap().update.client_id, 2, "{policy:?}");
        }
    }

    #[test]
    fn reinsert_replaces_without_eviction() {
        let mut c = UpdateCache::new(2, EvictionPolicy::Fifo, PriorityConfig::default()).unwrap();
        c.insert(upd(0, 0.5, 1), 1);
        c.insert(upd(1, 0.5, 1), 2);
        assert_eq!(c.insert(upd(0, 0.8, 1), 3), InsertOutcome::Replaced);
        assert_eq!(ids(&c), vec![0, 1]);
        let e = c.get(0).unwrap();
        assert_eq!((e.inserted_at, e.last_used_at, e.use_count), (3, 3, 0));
        assert_eq!(e.update.reported_accuracy, 0.8);
        // client 1 is now the oldest
        let out = c.insert(upd(2, 0.5, 1), 4);
        assert_eq!(out.evicted().unwrap().update.client_id, 1);
    }

    #[test]
    fn priority_examples() {
        let entry = |acc: f64, last_used_at: u64| CacheEntry {
            update: upd(0, acc, 1),
            inserted_at: 0,
            last_used_at,
            use_count: 0,
        };
        let cfg = PriorityConfig { alpha: 0.7, beta: 0.3, gamma: 0.0 };
        assert!((priority_score(&entry(0.8, 10), 10, &cfg) - 0.86).abs() < 1e-15);
        let acc_only = PriorityConfig { alpha: 1.0, beta: 0.0, gamma: 0.0 };
        assert_eq!(priority_score(&entry(0.37, 1), 9, &acc_only), 0.37);
        let recency_only = PriorityConfig { alpha: 0.0, beta: 1.0, gamma: 0.0 };
        assert_eq!(priority_score(&entry(0.9, 6), 10, &recency_only), 0.2);
    }

    #[test]
    fn lookup_paths() {
        let mut c = UpdateCache::new(2, EvictionPolicy::Lru, PriorityConfig::default()).unwrap();
        assert!(c.lookup_for_substitution(4, 0).is_none());
        c.insert(upd(4, 0.5, 3), 0);
        assert_eq!(c.lookup_for_substitution(4, 5).unwrap().client_id, 4);
        assert_eq!(c.get(4).unwrap().last_used_at, 5);

        let cfg = PriorityConfig { alpha: 1.0, beta: 0.0, gamma: 0.6 };
        let mut p = UpdateCache::new(2, EvictionPolicy::Pbr, cfg).unwrap();
        p.insert(upd(1, 0.4, 3), 0);
        assert!(p.lookup_for_substitution(1, 1).is_none());
        assert_eq!(p.get(1).unwrap().use_count, 0);
        p.set_gamma(0.4);
        assert!(p.lookup_for_substitution(1, 1).is_some());
    }

    #[test]
    fn gamma_does_not_apply_outside_pbr() {
        let cfg = PriorityConfig { alpha: 1.0, beta: 0.0, gamma: 10.0 };
        let mut c = UpdateCache::new(2, EvictionPolicy::Fifo, cfg).unwrap();
        c.insert(upd(1, 0.1, 3), 0);
        assert!(c.lookup_for_substitution(1, 1).is_some());
    }

    #[test]
    fn mem_usage_examples() {
        let mut c = UpdateCache::new(3, EvictionPolicy::Fifo, PriorityConfig::default()).unwrap();
        assert_eq!(c.mem_usage(), 0);
        for id in 0..3 {
            c.insert(upd(id, 0.5, 100), id as u64);
        }
        assert_eq!(c.mem_usage(), 2592);
        c.remove(1);
        assert_eq!(c.mem_usage(), 1728);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(UpdateCache::new(0, EvictionPolicy::Fifo, PriorityConfig::default()).is_err());
        let bad = PriorityConfig { alpha: 0.0, beta: 0.0, gamma: 0.0 };
        assert!(UpdateCache::new(1, EvictionPolicy::Pbr, bad).is_err());
        let neg = PriorityConfig { alpha: -1.0, beta: 1.0, gamma: 0.0 };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
        assert_eq!("lru".parse::<Policy>().unwrap(), Policy::Lru);
        assert!("MRU".parse::<Policy>().is_err());
    }
}
