//! Exponentially weighted aggregation of expert predictions.
//!
//! Weights decay as `exp(-eta * cumulative loss)`. The batch rule computes
//! them directly from the loss totals; the online rule applies one
//! multiplicative step per round. Both start from unit weights, so the two
//! agree on the final weights; they differ only in which weights the
//! hierarchical strategy uses for intermediate predictions at past dates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertPool;
use crate::field::{loss, predict_linear, Expert, Observation, VisualField};

/// How expert weights are formed from the target's past observations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    /// Weights from all observed rounds at once.
    #[default]
    Batch,
    /// Weights as they stood before each round.
    Online,
}

/// Raw (unnormalized) expert weights with their loss totals.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub weights: Vec<f64>,
    pub cumulative_losses: Vec<f64>,
    pub eta: f64,
}

impl WeightState {
    /// Unit weights for `n` experts.
    pub fn uniform(n: usize, eta: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("experts", "need at least one expert"));
        }
        check_eta(eta)?;
        Ok(Self {
            weights: vec![1.0; n],
            cumulative_losses: vec![0.0; n],
            eta,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Weights scaled to sum to one.
    pub fn normalized(&self) -> Result<Vec<f64>> {
        let total = self.total();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::ZeroWeights);
        }
        Ok(self.weights.iter().map(|w| w / total).collect())
    }

    /// Index of the largest weight, ties to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::param("eta", format!("must be finite and nonnegative, got {eta}")));
    }
    Ok(())
}

/// Weighted mean of the expert predictions.
pub fn aggregate_prediction(state: &WeightState, predictions: &[VisualField]) -> Result<VisualField> {
    if predictions.len() != state.len() {
        return Err(Error::DimensionMismatch {
            expected: state.len(),
            found: predictions.len(),
        });
    }
    let total = state.total();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::ZeroWeights);
    }
    let dim = predictions[0].dim();
    let mut acc = vec![0.0; dim];
    for (w, p) in state.weights.iter().zip(predictions) {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: p.dim(),
            });
        }
        if *w == 0.0 {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += w * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    // the mean of in-range values stays in range up to rounding
    Ok(VisualField::from_clamped(acc))
}

fn check_losses(n: usize, losses: &[f64]) -> Result<()> {
    if losses.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: losses.len(),
        });
    }
    if let Some(l) = losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::param("losses", format!("loss {l} is not a finite nonnegative value")));
    }
    Ok(())
}

/// One multiplicative step: `w_i <- w_i * exp(-eta * l_i)`.
pub fn online_update(state: &WeightState, losses: &[f64]) -> Result<WeightState> {
    check_losses(state.len(), losses)?;
    Ok(WeightState {
        weights: state
            .weights
            .iter()
            .zip(losses)
            .map(|(w, l)| w * (-state.eta * l).exp())
            .collect(),
        cumulative_losses: state.cumulative_losses.iter().zip(losses).map(|(c, l)| c + l).collect(),
        eta: state.eta,
    })
}

fn column_sums(loss_matrix: &[Vec<f64>], n_experts: usize) -> Result<Vec<f64>> {
    let mut totals = vec![0.0; n_experts];
    for row in loss_matrix {
        check_losses(n_experts, row)?;
        for (t, l) in totals.iter_mut().zip(row) {
            *t += l;
        }
    }
    Ok(totals)
}

/// Weights from cumulative losses, shifted by the smallest total so the best
/// expert always has weight one.
pub fn weights_from_totals(totals: &[f64], eta: f64) -> Vec<f64> {
    let min = totals.iter().copied().fold(f64::INFINITY, f64::min);
    totals.iter().map(|l| (-eta * (l - min)).exp()).collect()
}

/// Batch weights `exp(-eta * sum_t l_{t,i})` over an `n x N` loss matrix.
pub fn batch_weights(loss_matrix: &[Vec<f64>], n_experts: usize, eta: f64) -> Result<WeightState> {
    if n_experts == 0 {
        return Err(Error::param("experts", "need at least one expert"));
    }
    check_eta(eta)?;
    let totals = column_sums(loss_matrix, n_experts)?;
    Ok(WeightState {
        weights: weights_from_totals(&totals, eta),
        cumulative_losses: totals,
        eta,
    })
}

/// Replays [`online_update`] from unit weights, rescaling by the largest
/// weight after each round to avoid underflow.
pub fn online_weights(loss_matrix: &[Vec<f64>], n_experts: usize, eta: f64) -> Result<WeightState> {
    let mut state = WeightState::uniform(n_experts, eta)?;
    for row in loss_matrix {
        state = online_update(&state, row)?;
        let max = state.weights.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            state.weights.iter_mut().for_each(|w| *w /= max);
        }
    }
    Ok(state)
}

fn weights_by_rule(loss_matrix: &[Vec<f64>], n_experts: usize, eta: f64, rule: UpdateRule) -> Result<WeightState> {
    match rule {
        UpdateRule::Batch => batch_weights(loss_matrix, n_experts, eta),
        UpdateRule::Online => online_weights(loss_matrix, n_experts, eta),
    }
}

/// Learning rate minimizing the worst-case regret bound, `sqrt(8 ln N / n)`.
pub fn rg_optimal_eta(n_experts: usize, rounds: usize) -> Result<f64> {
    if n_experts == 0 {
        return Err(Error::param("experts", "need at least one expert"));
    }
    if rounds == 0 {
        return Err(Error::param("rounds", "must be positive"));
    }
    Ok((8.0 * (n_experts as f64).ln() / rounds as f64).sqrt())
}

/// Learning rates for the two levels of the hierarchical strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalEta {
    /// One rate per pool.
    pub level1: Vec<f64>,
    pub level2: f64,
}

impl HierarchicalEta {
    pub fn shared(eta: f64, pools: usize) -> Self {
        Self {
            level1: vec![eta; pools],
            level2: eta,
        }
    }

    /// Regret-optimal rates: each pool uses its own size, the top level the
    /// number of pools.
    pub fn regret_optimal(pool_sizes: &[usize], rounds: usize) -> Result<Self> {
        Ok(Self {
            level1: pool_sizes
                .iter()
                .map(|&n| rg_optimal_eta(n, rounds))
                .collect::<Result<_>>()?,
            level2: rg_optimal_eta(pool_sizes.len(), rounds)?,
        })
    }
}

fn predictions_at(experts: &[&Expert], date: f64) -> Result<Vec<VisualField>> {
    experts.iter().map(|e| predict_linear(e, date)).collect()
}

/// Loss of every expert at every prefix observation, `n x N`.
pub fn expert_loss_matrix(experts: &[&Expert], prefix: &[Observation]) -> Result<Vec<Vec<f64>>> {
    prefix
        .iter()
        .map(|obs| {
            experts
                .iter()
                .map(|e| loss(&predict_linear(e, obs.date)?, &obs.field))
                .collect()
        })
        .collect()
}

fn check_prefix(pools: &[ExpertPool], prefix: &[Observation]) -> Result<()> {
    if prefix.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    if pools.is_empty() {
        return Err(Error::param("pools", "need at least one pool"));
    }
    Ok(())
}

/// One weighted average over every expert of every pool.
pub fn flat_predict(pools: &[ExpertPool], prefix: &[Observation], eta: f64, target_date: f64) -> Result<VisualField> {
    flat_predict_with(pools, prefix, eta, UpdateRule::Batch, target_date)
}

pub fn flat_predict_with(
    pools: &[ExpertPool],
    prefix: &[Observation],
    eta: f64,
    rule: UpdateRule,
    target_date: f64,
) -> Result<VisualField> {
    check_prefix(pools, prefix)?;
    let experts: Vec<&Expert> = pools.iter().flat_map(|p| p.experts()).collect();
    let losses = expert_loss_matrix(&experts, prefix)?;
    let state = weights_by_rule(&losses, experts.len(), eta, rule)?;
    aggregate_prediction(&state, &predictions_at(&experts, target_date)?)
}

/// Per-method aggregation into intermediate predictors, then aggregation of
/// the intermediates, both with the same learning rate.
pub fn hierarchical_predict(
    pools: &[ExpertPool],
    prefix: &[Observation],
    eta: f64,
    target_date: f64,
) -> Result<VisualField> {
    let etas = HierarchicalEta::shared(eta, pools.len());
    hierarchical_predict_with(pools, prefix, &etas, UpdateRule::Batch, target_date)
}

/// Intermediate predictions of one pool at each prefix date and at the target.
fn intermediate_trajectory(
    pool: &ExpertPool,
    prefix: &[Observation],
    eta: f64,
    rule: UpdateRule,
    target_date: f64,
) -> Result<(Vec<VisualField>, VisualField)> {
    let experts: Vec<&Expert> = pool.experts().iter().collect();
    let losses = expert_loss_matrix(&experts, prefix)?;
    let final_state = batch_weights(&losses, experts.len(), eta)?;
    let mut at_prefix = Vec::with_capacity(prefix.len());
    for (t, obs) in prefix.iter().enumerate() {
        let state = match rule {
            UpdateRule::Batch => final_state.clone(),
            UpdateRule::Online => online_weights(&losses[..t], experts.len(), eta)?,
        };
        at_prefix.push(aggregate_prediction(&state, &predictions_at(&experts, obs.date)?)?);
    }
    let target = aggregate_prediction(&final_state, &predictions_at(&experts, target_date)?)?;
    Ok((at_prefix, target))
}

pub fn hierarchical_predict_with(
    pools: &[ExpertPool],
    prefix: &[Observation],
    etas: &HierarchicalEta,
    rule: UpdateRule,
    target_date: f64,
) -> Result<VisualField> {
    check_prefix(pools, prefix)?;
    if etas.level1.len() != pools.len() {
        return Err(Error::DimensionMismatch {
            expected: pools.len(),
            found: etas.level1.len(),
        });
    }
    let mut level2_losses = vec![Vec::with_capacity(pools.len()); prefix.len()];
    let mut targets = Vec::with_capacity(pools.len());
    for (pool, &eta) in pools.iter().zip(&etas.level1) {
        let (at_prefix, target) = intermediate_trajectory(pool, prefix, eta, rule, target_date)?;
        for ((row, pred), obs) in level2_losses.iter_mut().zip(&at_prefix).zip(prefix) {
            row.push(loss(pred, &obs.field)?);
        }
        targets.push(target);
    }
    let state = weights_by_rule(&level2_losses, pools.len(), etas.level2, rule)?;
    aggregate_prediction(&state, &targets)
}

/// Running loss totals of a forecaster and its experts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegretLedger {
    pub forecaster_loss_sum: f64,
    pub per_expert_loss_sums: Vec<f64>,
    pub rounds: usize,
}

impl RegretLedger {
    pub fn new(n_experts: usize) -> Self {
        Self {
            forecaster_loss_sum: 0.0,
            per_expert_loss_sums: vec![0.0; n_experts],
            rounds: 0,
        }
    }

    pub fn record(&mut self, forecaster_loss: f64, expert_losses: &[f64]) -> Result<()> {
        check_losses(self.per_expert_loss_sums.len(), expert_losses)?;
        self.forecaster_loss_sum += forecaster_loss;
        for (s, l) in self.per_expert_loss_sums.iter_mut().zip(expert_losses) {
            *s += l;
        }
        self.rounds += 1;
        Ok(())
    }
}

/// Forecaster loss minus the best expert's loss.
pub fn regret(ledger: &RegretLedger) -> Result<f64> {
    if ledger.rounds == 0 || ledger.per_expert_loss_sums.is_empty() {
        return Err(Error::EmptyLedger);
    }
    let best = ledger
        .per_expert_loss_sums
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(ledger.forecaster_loss_sum - best)
}

/// The classic online exponentially weighted average forecaster.
#[derive(Debug, Clone)]
pub struct Forecaster {
    state: WeightState,
    ledger: RegretLedger,
}

impl Forecaster {
    pub fn new(n_experts: usize, eta: f64) -> Result<Self> {
        Ok(Self {
            state: WeightState::uniform(n_experts, eta)?,
            ledger: RegretLedger::new(n_experts),
        })
    }

    pub fn state(&self) -> &WeightState {
        &self.state
    }

    pub fn ledger(&self) -> &RegretLedger {
        &self.ledger
    }

    /// Predicts, observes the outcome, scores everyone and updates the weights.
    /// Returns the forecaster's prediction for this round.
    pub fn step(&mut self, predictions: &[VisualField], outcome: &VisualField) -> Result<VisualField> {
        let forecast = aggregate_prediction(&self.state, predictions)?;
        let losses = predictions
            .iter()
            .map(|p| loss(p, outcome))
            .collect::<Result<Vec<_>>>()?;
        self.ledger.record(loss(&forecast, outcome)?, &losses)?;
        let mut next = online_update(&self.state, &losses)?;
        let max = next.weights.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            next.weights.iter_mut().for_each(|w| *w /= max);
        }
        self.state = next;
        Ok(forecast)
    }
}
