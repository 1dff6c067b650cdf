//! Run-level communication, cache-hit and memory accounting.

use serde::{Deserialize, Serialize};

use crate::engine::RoundOutcome;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rounds: u64,
    /// Bytes of every transmitted update over all rounds.
    pub comm_cost_bytes: u64,
    /// Withheld updates served from the cache over all rounds.
    pub cache_hits_total: u64,
    pub transmissions_total: u64,
    pub skips_total: u64,
    /// Largest end-of-round cache footprint.
    pub peak_mem_bytes: u64,
    pub mem_by_round: Vec<u64>,
    pub accuracy_by_round: Vec<f64>,
    pub final_accuracy: f64,
    pub final_loss: f64,
}

impl RunMetrics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds one round into the totals. Rounds must arrive in order, each once.
    pub fn accumulate(&mut self, outcome: &RoundOutcome) -> Result<()> {
        if outcome.round != self.rounds {
            return Err(Error::RoundOrder {
                expected: self.rounds,
                got: outcome.round,
            });
        }
        self.rounds += 1;
        self.comm_cost_bytes += outcome.bytes_sent;
        self.cache_hits_total += outcome.cache_hit_ids.len() as u64;
        self.transmissions_total += outcome.transmitted_ids.len() as u64;
        self.skips_total += outcome.skipped_ids.len() as u64;
        self.peak_mem_bytes = self.peak_mem_bytes.max(outcome.cache_mem_bytes);
        self.mem_by_round.push(outcome.cache_mem_bytes);
        self.accuracy_by_round.push(outcome.eval_accuracy);
        self.final_accuracy = outcome.eval_accuracy;
        self.final_loss = outcome.eval_loss;
        Ok(())
    }

    pub fn from_log<'a>(log: impl IntoIterator<Item = &'a RoundOutcome>) -> Result<Self> {
        let mut m = Self::new();
        for outcome in log {
            m.accumulate(outcome)?;
        }
        Ok(m)
    }
}

/// Fractional communication saving: `1 - cached / baseline`.
pub fn reduction_vs_baseline(cached: &RunMetrics, baseline: &RunMetrics) -> Result<f64> {
    if baseline.comm_cost_bytes == 0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(1.0 - cached.comm_cost_bytes as f64 / baseline.comm_cost_bytes as f64)
}
