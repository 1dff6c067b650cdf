//! Global model, client updates and sample-weighted aggregation.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Guard for the zero-model case in [`compute_significance`].
pub const SIGNIFICANCE_EPSILON: f64 = 1e-12;

/// Fixed per-update header added to the payload in [`update_size_bytes`].
pub const UPDATE_HEADER_BYTES: u64 = 64;

/// Server-side parameter vector and the index of the next round.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    params: Vec<f64>,
    round: u64,
}

impl GlobalModel {
    pub fn new(params: Vec<f64>) -> Result<Self> {
        ensure_finite(&params, "model parameters")?;
        Ok(Self { params, round: 0 })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            params: vec![0.0; dim],
            round: 0,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.params)
    }

    /// Moves to the next round without changing the parameters, for rounds
    /// in which nothing was aggregated.
    pub fn advance_round(&mut self) {
        self.round += 1;
    }
}

/// One client's parameter delta together with the metadata the server needs
/// for gating, accounting and priority scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub round_produced: u64,
    pub delta: Vec<f64>,
    pub significance: f64,
    pub size_bytes: u64,
    pub sample_count: u64,
    pub reported_accuracy: f64,
}

impl ClientUpdate {
    /// Builds an update whose significance and size are derived from `delta`
    /// and the model the client trained from.
    pub fn new(
        client_id: u32,
        reference: &GlobalModel,
        delta: Vec<f64>,
        sample_count: u64,
        reported_accuracy: f64,
    ) -> Result<Self> {
        let significance = compute_significance(&delta, reference)?;
        Ok(Self {
            client_id,
            round_produced: reference.round(),
            size_bytes: update_size_bytes(delta.len()),
            delta,
            significance,
            sample_count,
            reported_accuracy,
        })
    }

    pub fn dim(&self) -> usize {
        self.delta.len()
    }
}

/// Updates that take part in one aggregation: fresh transmissions plus
/// updates the server pulled from its cache for withheld clients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregationSet {
    pub transmitted: Vec<ClientUpdate>,
    pub cache_substituted: Vec<ClientUpdate>,
}

impl AggregationSet {
    pub fn len(&self) -> usize {
        self.transmitted.len() + self.cache_substituted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClientUpdate> {
        self.transmitted.iter().chain(self.cache_substituted.iter())
    }
}

/// Wire size of an update with `dim` 64-bit parameters.
pub fn update_size_bytes(dim: usize) -> u64 {
    8 * dim as u64 + UPDATE_HEADER_BYTES
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn ensure_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Applies `θ' = θ + Σ (n_i / n) Δ_i` over every update in the set, with
/// cache-substituted updates weighted by their original sample counts.
pub fn fedavg_aggregate(model: &GlobalModel, updates: &AggregationSet) -> Result<GlobalModel> {
    if updates.is_empty() {
        return Err(Error::NoParticipants);
    }
    let dim = model.dim();
    let mut seen = BTreeSet::new();
    for u in updates.iter() {
        if u.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: u.dim(),
            });
        }
        if !seen.insert(u.client_id) {
            return Err(Error::DuplicateClient { client: u.client_id });
        }
    }

    let total: u64 = updates.iter().map(|u| u.sample_count).sum();
    let total = total as f64;
    let mut params = model.params.clone();
    for u in updates.iter() {
        let w = u.sample_count as f64 / total;
        for (p, d) in params.iter_mut().zip(&u.delta) {
            *p += w * d;
        }
    }
    ensure_finite(&params, "aggregated parameters")?;
    Ok(GlobalModel {
        params,
        round: model.round + 1,
    })
}

/// Relative update magnitude `‖Δ‖₂ / ‖θ‖₂`.
///
/// When the reference model is (numerically) zero the denominator is clamped
/// to [`SIGNIFICANCE_EPSILON`], so any nonzero delta clears every practical
/// threshold; the result is capped at `f64::MAX` to stay finite.
pub fn compute_significance(delta: &[f64], reference: &GlobalModel) -> Result<f64> {
    if delta.len() != reference.dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.dim(),
            actual: delta.len(),
        });
    }
    ensure_finite(delta, "update delta")?;
    ensure_finite(reference.params(), "reference model")?;
    let ratio = l2_norm(delta) / reference.norm().max(SIGNIFICANCE_EPSILON);
    Ok(ratio.min(f64::MAX))
}

/// Client-side gate: transmit iff `significance >= tau`.
pub fn should_transmit(significance: f64, tau: f64) -> bool {
    significance >= tau
}
