//! Experimental protocol: improvement rate over the patient-wise LR
//! baseline, learning-rate tuning by inner cross-validation, the outer
//! cross-validated experiment and the one-sided binomial test.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{batch_weights, expert_loss_matrix, rg_optimal_eta, UpdateRule};
use crate::clustering::cluster_spatial;
use crate::config::{RunConfig, Strategy};
use crate::engine::{baseline_prediction, CaseEvaluation, PoolAggregates, PoolSlopes};
use crate::error::{Error, Result};
use crate::experts::{build_lr_experts, build_sc_experts, build_tslr_experts, ExpertPool};
use crate::field::{predict_linear, rmse, rmse_slices, Expert, Method, Observation, PatientSeries};
use crate::seed;

/// RMSE differences at or below this count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// How the learning rate of a reported row was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaKind {
    Ir,
    Rg,
    Fixed,
}

impl EtaKind {
    pub fn label(self) -> &'static str {
        match self {
            EtaKind::Ir => "ir",
            EtaKind::Rg => "rg",
            EtaKind::Fixed => "fixed",
        }
    }
}

/// A row of the result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Row {
    Aggregate { strategy: Strategy, eta: EtaKind },
    /// Expert with the largest final weight, within one method or overall.
    BestExpert(Option<Method>),
}

impl Row {
    pub fn label(self) -> String {
        match self {
            Row::Aggregate { strategy, eta } => format!("{}_{}", strategy.label(), eta.label()),
            Row::BestExpert(Some(m)) => format!("best_expert_{}", m.label()),
            Row::BestExpert(None) => "best_expert_all".into(),
        }
    }

    pub fn display_name(self) -> String {
        match self {
            Row::Aggregate { strategy, eta } => {
                format!("{} ({})", strategy.display_name(), eta.label().to_uppercase())
            }
            Row::BestExpert(Some(m)) => format!("Best expert ({})", Strategy::Single(m).display_name()),
            Row::BestExpert(None) => "Best expert (all)".into(),
        }
    }
}

/// RMSEs of one method and of the baseline for one patient at one `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub fold: usize,
    pub patient_id: String,
    pub n: usize,
    pub series_length: usize,
    pub method: String,
    pub rmse_method: f64,
    pub rmse_lr_baseline: f64,
}

impl EvaluationRecord {
    /// False when `n >= L`: no prediction was made and `a_i(n) = 0`.
    pub fn predicted(&self) -> bool {
        self.n < self.series_length
    }
}

/// `a_i(n)`: zero when `n >= L`, else `1 - RMSE_f / RMSE_LR`. `None` when the
/// baseline is exact but the method is not, where the ratio is undefined.
pub fn improvement(rmse_method: f64, rmse_baseline: f64, n: usize, series_length: usize) -> Option<f64> {
    if n >= series_length {
        Some(0.0)
    } else if rmse_baseline > 0.0 {
        Some(1.0 - rmse_method / rmse_baseline)
    } else if rmse_method == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

/// One point of an IR curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrEntry {
    pub n: usize,
    pub ir: f64,
    /// `N(n)`: patients counted.
    pub count: usize,
    /// Sample standard deviation of `a_i(n)`.
    pub stdev: f64,
    /// Patients dropped because their baseline RMSE was zero.
    pub excluded: usize,
}

/// Mean of `a_i(n)` over the records, which must all share `n`.
pub fn improvement_rate(records: &[EvaluationRecord], n: usize) -> Result<IrEntry> {
    let mut values = Vec::with_capacity(records.len());
    let mut excluded = 0;
    for r in records {
        if r.n != n {
            return Err(Error::param("records", format!("record for n = {} in an n = {n} curve", r.n)));
        }
        if !(r.rmse_method >= 0.0 && r.rmse_lr_baseline >= 0.0) {
            return Err(Error::param("records", format!("negative or NaN RMSE for patient {}", r.patient_id)));
        }
        match improvement(r.rmse_method, r.rmse_lr_baseline, r.n, r.series_length) {
            Some(a) => values.push(a),
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        warn!("n = {n}: {excluded} patient(s) with zero baseline RMSE excluded from IR");
    }
    Ok(ir_from_values(n, &values, excluded))
}

fn ir_from_values(n: usize, values: &[f64], excluded: usize) -> IrEntry {
    let count = values.len();
    let ir = if count > 0 { values.iter().sum::<f64>() / count as f64 } else { 0.0 };
    let stdev = if count > 1 {
        (values.iter().map(|a| (a - ir) * (a - ir)).sum::<f64>() / (count - 1) as f64).sqrt()
    } else {
        0.0
    };
    IrEntry {
        n,
        ir,
        count,
        stdev,
        excluded,
    }
}

/// One-sided exact binomial test: `P(X >= wins)` for
/// `X ~ Binomial(wins + losses, 1/2)`.
pub fn binomial_test(wins: u64, losses: u64) -> Result<f64> {
    let trials = wins
        .checked_add(losses)
        .ok_or_else(|| Error::param("trials", "overflow"))?;
    if trials == 0 {
        return Err(Error::param("trials", "wins + losses must be positive"));
    }
    Ok(binomial_upper_tail(trials, wins))
}

/// `P(X >= k)` and `P(X <= k - 1)` share one pass over the coefficients.
fn binomial_tail_parts(trials: u64, k: u64) -> (f64, f64) {
    // C(n, i) by the multiplicative recurrence; exact while it fits in 53
    // bits, and rescaled together with the partial sums when it grows large
    let mut coef = 1.0f64;
    let mut upper = 0.0f64;
    let mut lower = 0.0f64;
    for i in 0..=trials {
        if i >= k {
            upper += coef;
        } else {
            lower += coef;
        }
        if i < trials {
            coef = coef * (trials - i) as f64 / (i + 1) as f64;
            if coef > 1e280 {
                coef *= 1e-280;
                upper *= 1e-280;
                lower *= 1e-280;
            }
        }
    }
    (upper, lower)
}

fn binomial_upper_tail(trials: u64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > trials {
        return 0.0;
    }
    let (upper, lower) = binomial_tail_parts(trials, k);
    upper / (upper + lower)
}

/// `P(X <= k)` for `X ~ Binomial(trials, 1/2)`.
pub fn binomial_cdf(trials: u64, k: u64) -> f64 {
    if k >= trials {
        return 1.0;
    }
    let (upper, lower) = binomial_tail_parts(trials, k + 1);
    lower / (upper + lower)
}

/// RMSE at the target of the expert holding the largest batch weight after
/// the prefix (ties to the lowest index). Experts must be fit to the prefix.
pub fn best_expert_rmse(experts: &[Expert], prefix: &[Observation], target: &Observation, eta: f64) -> Result<f64> {
    if prefix.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    let refs: Vec<&Expert> = experts.iter().collect();
    let losses = expert_loss_matrix(&refs, prefix)?;
    let state = batch_weights(&losses, experts.len(), eta)?;
    let best = &experts[state.argmax()];
    rmse(&predict_linear(best, target.date)?, &target.field)
}

/// Expert pools built on one training split.
#[derive(Debug, Clone)]
pub struct Pools {
    pub pools: Vec<ExpertPool>,
    pub slopes: Vec<PoolSlopes>,
}

impl Pools {
    pub fn index_of(&self, method: Method) -> Option<usize> {
        self.pools.iter().position(|p| p.method() == method)
    }

    pub fn sizes(&self) -> BTreeMap<String, usize> {
        self.pools.iter().map(|p| (p.method().label().to_string(), p.len())).collect()
    }
}

/// Builds the pools for `methods` (in [`Method::ALL`] order). Returns `None`
/// when a clustering-based pool is requested but no cluster survives.
pub fn build_pools(training: &[PatientSeries], methods: &[Method], config: &RunConfig, seed: u64) -> Result<Option<Pools>> {
    let mut pools = Vec::new();
    let needs_clusters = methods.iter().any(|m| *m != Method::PatientWiseLr);
    let spatial = if needs_clusters {
        let spatial = cluster_spatial(training, config.k, config.min_cluster_size, &config.kmeans(), seed)?;
        if spatial.retained.is_empty() {
            return Ok(None);
        }
        Some(spatial)
    } else {
        None
    };
    for m in Method::ALL {
        if !methods.contains(&m) {
            continue;
        }
        let pool = match m {
            Method::PatientWiseLr => build_lr_experts(training),
            Method::SlopeClustering => build_sc_experts(
                training,
                spatial.as_ref().expect("clustering was built"),
                config.c,
                &config.kmeans(),
                seed,
            ),
            Method::Tslr => build_tslr_experts(training, spatial.as_ref().expect("clustering was built")),
        };
        match pool {
            Ok(p) => pools.push(p),
            Err(Error::InvalidParameter { name: "pool", .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    let slopes = pools.iter().map(PoolSlopes::from_pool).collect();
    Ok(Some(Pools { pools, slopes }))
}

fn methods_for(strategies: &[Strategy]) -> Vec<Method> {
    let mut methods: Vec<Method> = strategies.iter().flat_map(|s| s.methods()).collect();
    methods.sort();
    methods.dedup();
    methods
}

/// A prediction to compute on a case.
#[derive(Debug, Clone)]
enum Request {
    Single { pool: usize, rate: usize },
    Flat { rate: usize },
    Hier { level1: Vec<usize>, level2: f64 },
    Best { pools: Vec<usize> },
}

/// Scores `requests` for one target prefix against its final observation.
fn score_case(
    pools: &Pools,
    prefix: &[Observation],
    target: &Observation,
    etas: &[f64],
    requests: &[Request],
    update: UpdateRule,
) -> Result<Vec<f64>> {
    let wants_prefix = requests.iter().any(|r| matches!(r, Request::Hier { .. }));
    let case = CaseEvaluation::new(&pools.slopes, prefix, target.date, wants_prefix)?;
    let aggs: Vec<PoolAggregates> = (0..pools.slopes.len())
        .map(|p| case.pool_aggregates(p, etas, wants_prefix.then_some(update)))
        .collect();
    let refs: Vec<&PoolAggregates> = aggs.iter().collect();
    let truth = target.field.values();
    Ok(requests
        .iter()
        .map(|req| {
            let pred = match req {
                Request::Single { pool, rate } => case.single(&aggs[*pool], *rate),
                Request::Flat { rate } => case.flat(&refs, etas, *rate),
                Request::Hier { level1, level2 } => case.hierarchical(&refs, level1, *level2),
                Request::Best { pools } => {
                    let (p, i) = case.best_expert(pools);
                    case.expert_target(p, i)
                }
            };
            rmse_slices(&pred, truth)
        })
        .collect())
}

fn baseline_rmse(prefix: &[Observation], target: &Observation) -> Result<f64> {
    Ok(rmse_slices(&baseline_prediction(prefix, target.date)?, target.field.values()))
}

/// Requests scoring `strategy` at every rate in a shared list.
fn grid_requests(strategy: Strategy, pools: &Pools, rates: usize, etas: &[f64]) -> Result<Vec<Request>> {
    let index = |m: Method| {
        pools
            .index_of(m)
            .ok_or_else(|| Error::param("strategy", format!("pool {m} was not built")))
    };
    match strategy {
        Strategy::Single(m) => {
            let pool = index(m)?;
            Ok((0..rates).map(|rate| Request::Single { pool, rate }).collect())
        }
        Strategy::Flat => Ok((0..rates).map(|rate| Request::Flat { rate }).collect()),
        Strategy::Hierarchical => Ok((0..rates)
            .map(|rate| Request::Hier {
                level1: vec![rate; pools.pools.len()],
                level2: etas[rate],
            })
            .collect()),
    }
}

/// IR over the tuning grid for one strategy and one `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningCurve {
    pub strategy: String,
    pub n: usize,
    /// `eta * sqrt(n)` multipliers.
    pub multipliers: Vec<f64>,
    pub ir: Vec<f64>,
    /// Index of the IR-optimal multiplier (ties to the smaller one).
    pub chosen: usize,
}

impl TuningCurve {
    pub fn multiplier(&self) -> f64 {
        self.multipliers[self.chosen]
    }

    pub fn eta(&self) -> f64 {
        self.multiplier() / (self.n as f64).sqrt()
    }
}

/// Tuned curves for a set of strategies, keyed by `(strategy, n)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tuning {
    pub curves: BTreeMap<(Strategy, usize), TuningCurve>,
}

impl Tuning {
    pub fn eta(&self, strategy: Strategy, n: usize) -> Option<f64> {
        self.curves.get(&(strategy, n)).map(TuningCurve::eta)
    }
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Shuffled fold index of every item.
fn fold_assignment(count: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut fold = vec![0; count];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// Per-patient contribution to the tuning sums: `[strategy][n][rate]`.
type Contribution = Vec<Vec<Vec<Option<f64>>>>;

/// Tunes the IR-optimal learning rate of every strategy in `strategies` by
/// `config.inner_folds`-fold cross-validation over `learning`.
pub fn tune_all(learning: &[PatientSeries], strategies: &[Strategy], config: &RunConfig, seed: u64) -> Result<Tuning> {
    if strategies.is_empty() {
        return Ok(Tuning::default());
    }
    let grid = config.eta_grid();
    if grid.is_empty() {
        return Err(Error::param("eta_grid", "grid is empty"));
    }
    let folds = config.inner_folds;
    if learning.len() < folds {
        return Err(Error::CohortTooSmall {
            required: folds,
            found: learning.len(),
        });
    }
    let n_values: Vec<usize> = config.n_values().collect();
    let methods = methods_for(strategies);
    let assignment = fold_assignment(learning.len(), folds, seed::derive(seed, seed::stream::INNER_FOLDS));

    let mut sums = vec![vec![vec![0.0; grid.len()]; n_values.len()]; strategies.len()];
    let mut counts = vec![vec![vec![0usize; grid.len()]; n_values.len()]; strategies.len()];

    for fold in 0..folds {
        let train: Vec<PatientSeries> = (0..learning.len())
            .filter(|&i| assignment[i] != fold)
            .map(|i| learning[i].clone())
            .collect();
        let held: Vec<&PatientSeries> = (0..learning.len())
            .filter(|&i| assignment[i] == fold)
            .map(|i| &learning[i])
            .collect();
        let Some(pools) = build_pools(&train, &methods, config, seed::derive(seed, fold as u64))? else {
            warn!("inner fold {fold}: no retained spatial cluster; fold skipped");
            continue;
        };
        let contributions: Vec<Contribution> = held
            .par_iter()
            .map(|series| tuning_contribution(series, &pools, strategies, &n_values, &grid, config.update))
            .collect::<Result<_>>()?;
        for c in contributions {
            for (s, per_n) in c.iter().enumerate() {
                for (ni, per_rate) in per_n.iter().enumerate() {
                    for (r, a) in per_rate.iter().enumerate() {
                        if let Some(a) = a {
                            sums[s][ni][r] += a;
                            counts[s][ni][r] += 1;
                        }
                    }
                }
            }
        }
    }

    let mut curves = BTreeMap::new();
    for (s, &strategy) in strategies.iter().enumerate() {
        for (ni, &n) in n_values.iter().enumerate() {
            let ir: Vec<f64> = sums[s][ni]
                .iter()
                .zip(&counts[s][ni])
                .map(|(sum, &c)| if c > 0 { sum / c as f64 } else { 0.0 })
                .collect();
            let chosen = argmax_first(&ir);
            curves.insert(
                (strategy, n),
                TuningCurve {
                    strategy: strategy.label().to_string(),
                    n,
                    multipliers: grid.clone(),
                    ir,
                    chosen,
                },
            );
        }
    }
    Ok(Tuning { curves })
}

fn tuning_contribution(
    series: &PatientSeries,
    pools: &Pools,
    strategies: &[Strategy],
    n_values: &[usize],
    grid: &[f64],
    update: UpdateRule,
) -> Result<Contribution> {
    let mut out = vec![vec![Vec::new(); n_values.len()]; strategies.len()];
    let target = series.last();
    for (ni, &n) in n_values.iter().enumerate() {
        if n >= series.len() {
            for per_n in out.iter_mut() {
                per_n[ni] = vec![Some(0.0); grid.len()];
            }
            continue;
        }
        let prefix = series.prefix(n);
        let etas: Vec<f64> = grid.iter().map(|g| g / (n as f64).sqrt()).collect();
        let mut requests = Vec::new();
        for &s in strategies {
            requests.extend(grid_requests(s, pools, grid.len(), &etas)?);
        }
        let scores = score_case(pools, prefix, target, &etas, &requests, update)?;
        let base = baseline_rmse(prefix, target)?;
        for (s, chunk) in scores.chunks(grid.len()).enumerate() {
            out[s][ni] = chunk.iter().map(|&f| improvement(f, base, n, series.len())).collect();
        }
    }
    Ok(out)
}

/// Tunes one strategy. See [`tune_all`].
pub fn tune_eta_ir(learning: &[PatientSeries], strategy: Strategy, config: &RunConfig, seed: u64) -> Result<Tuning> {
    tune_all(learning, &[strategy], config, seed)
}

/// Learning rates of one fold, per strategy and `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedChoice {
    pub strategy: String,
    pub n: usize,
    pub multiplier: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub learning: usize,
    pub test: usize,
    pub skipped: bool,
    pub pool_sizes: BTreeMap<String, usize>,
    pub tuned: Vec<TunedChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub row: String,
    pub name: String,
    pub entries: Vec<IrEntry>,
    /// Mean RMSE over patients with `n < L`, per `n`.
    pub mean_rmse: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub row: String,
    pub against: String,
    pub n: usize,
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    pub p_value: Option<f64>,
}

/// IR against `eta * sqrt(n)`, averaged over the outer folds' tuning runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub strategy: String,
    pub n: usize,
    pub multiplier: f64,
    pub ir: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub patients: usize,
    pub folds: Vec<FoldSummary>,
    pub rows: Vec<RowSummary>,
    pub comparisons: Vec<Comparison>,
    #[serde(skip)]
    pub curves: Vec<CurvePoint>,
    #[serde(skip)]
    pub records: Vec<EvaluationRecord>,
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.row == label)
    }
}

pub const BASELINE_LABEL: &str = "lr_baseline";

/// Rows reported for a configuration, in table order.
pub fn report_rows(config: &RunConfig) -> Vec<Row> {
    let strategies = config.strategy.strategies();
    let mut kinds = Vec::new();
    if config.eta.wants_ir() {
        kinds.push(EtaKind::Ir);
    }
    if config.eta.wants_rg() {
        kinds.push(EtaKind::Rg);
    }
    if config.eta.fixed().is_some() {
        kinds.push(EtaKind::Fixed);
    }
    let mut rows = Vec::new();
    for &s in &strategies {
        for &eta in &kinds {
            rows.push(Row::Aggregate { strategy: s, eta });
        }
        if let Strategy::Single(m) = s {
            rows.push(Row::BestExpert(Some(m)));
        }
    }
    if strategies.iter().any(|s| matches!(s, Strategy::Flat | Strategy::Hierarchical)) {
        rows.push(Row::BestExpert(None));
    }
    rows
}

/// Learning rates of every strategy for one fold and `n`.
struct FoldEtas<'a> {
    tuning: &'a Tuning,
    fixed: Option<f64>,
}

impl FoldEtas<'_> {
    fn plan(&self, rows: &[Row], pools: &Pools, n: usize) -> Result<(Vec<f64>, Vec<Request>)> {
        let mut etas: Vec<f64> = Vec::new();
        let mut slot = |eta: f64| -> usize {
            if let Some(i) = etas.iter().position(|e| e.to_bits() == eta.to_bits()) {
                i
            } else {
                etas.push(eta);
                etas.len() - 1
            }
        };
        let all: Vec<usize> = (0..pools.pools.len()).collect();
        let sizes: Vec<usize> = pools.pools.iter().map(ExpertPool::len).collect();
        let mut requests = Vec::with_capacity(rows.len());
        for &row in rows {
            let req = match row {
                Row::BestExpert(scope) => Request::Best {
                    pools: match scope {
                        Some(m) => vec![pools.index_of(m).ok_or_else(|| Error::param("strategy", "pool missing"))?],
                        None => all.clone(),
                    },
                },
                Row::Aggregate { strategy, eta } => {
                    let tuned = |s: Strategy| {
                        self.tuning
                            .eta(s, n)
                            .ok_or_else(|| Error::param("eta", format!("no tuned rate for {s} at n = {n}")))
                    };
                    match strategy {
                        Strategy::Single(m) => {
                            let pool = pools.index_of(m).ok_or_else(|| Error::param("strategy", "pool missing"))?;
                            let value = match eta {
                                EtaKind::Ir => tuned(strategy)?,
                                EtaKind::Rg => rg_optimal_eta(sizes[pool], n)?,
                                EtaKind::Fixed => self.fixed.expect("fixed rate configured"),
                            };
                            Request::Single { pool, rate: slot(value) }
                        }
                        Strategy::Flat => {
                            let value = match eta {
                                EtaKind::Ir => tuned(strategy)?,
                                EtaKind::Rg => rg_optimal_eta(sizes.iter().sum(), n)?,
                                EtaKind::Fixed => self.fixed.expect("fixed rate configured"),
                            };
                            Request::Flat { rate: slot(value) }
                        }
                        Strategy::Hierarchical => match eta {
                            EtaKind::Ir | EtaKind::Fixed => {
                                let value = if eta == EtaKind::Ir {
                                    tuned(strategy)?
                                } else {
                                    self.fixed.expect("fixed rate configured")
                                };
                                let r = slot(value);
                                Request::Hier {
                                    level1: vec![r; all.len()],
                                    level2: value,
                                }
                            }
                            EtaKind::Rg => {
                                let level1 = sizes
                                    .iter()
                                    .map(|&s| rg_optimal_eta(s, n).map(&mut slot))
                                    .collect::<Result<Vec<_>>>()?;
                                Request::Hier {
                                    level1,
                                    level2: rg_optimal_eta(sizes.len(), n)?,
                                }
                            }
                        },
                    }
                }
            };
            requests.push(req);
        }
        Ok((etas, requests))
    }
}

/// Runs the full cross-validated experiment.
pub fn run_experiment(cohort: &[PatientSeries], config: &RunConfig) -> Result<ExperimentReport> {
    config.validate()?;
    if cohort.len() < config.folds {
        return Err(Error::CohortTooSmall {
            required: config.folds,
            found: cohort.len(),
        });
    }
    if let Some(s) = cohort.iter().find(|s| s.dim() != config.dim) {
        return Err(Error::DimensionMismatch {
            expected: config.dim,
            found: s.dim(),
        });
    }
    let strategies = config.strategy.strategies();
    let rows = report_rows(config);
    let methods = methods_for(&strategies);
    let n_values: Vec<usize> = config.n_values().collect();
    let assignment = fold_assignment(cohort.len(), config.folds, seed::derive(config.seed, seed::stream::OUTER_FOLDS));

    let mut folds = Vec::with_capacity(config.folds);
    let mut records = Vec::new();
    let mut tunings = Vec::new();
    for fold in 0..config.folds {
        let learning: Vec<PatientSeries> = (0..cohort.len())
            .filter(|&i| assignment[i] != fold)
            .map(|i| cohort[i].clone())
            .collect();
        let test: Vec<&PatientSeries> = (0..cohort.len()).filter(|&i| assignment[i] == fold).map(|i| &cohort[i]).collect();
        let fold_seed = seed::derive(config.seed, 1000 + fold as u64);
        let Some(pools) = build_pools(&learning, &methods, config, fold_seed)? else {
            warn!("outer fold {fold}: no retained spatial cluster; fold skipped");
            folds.push(FoldSummary {
                fold,
                learning: learning.len(),
                test: test.len(),
                skipped: true,
                pool_sizes: BTreeMap::new(),
                tuned: Vec::new(),
            });
            continue;
        };
        let tuning = if config.eta.wants_ir() {
            tune_all(&learning, &strategies, config, seed::derive(fold_seed, 7))?
        } else {
            Tuning::default()
        };
        let etas = FoldEtas {
            tuning: &tuning,
            fixed: config.eta.fixed(),
        };
        let per_patient: Vec<Vec<EvaluationRecord>> = test
            .par_iter()
            .map(|series| {
                let mut out = Vec::new();
                for &n in &n_values {
                    let (scores, base) = if n < series.len() {
                        let prefix = series.prefix(n);
                        let (eta_list, requests) = etas.plan(&rows, &pools, n)?;
                        let scores = score_case(&pools, prefix, series.last(), &eta_list, &requests, config.update)?;
                        (scores, baseline_rmse(prefix, series.last())?)
                    } else {
                        (vec![0.0; rows.len()], 0.0)
                    };
                    for (row, score) in rows.iter().zip(scores) {
                        out.push(EvaluationRecord {
                            fold,
                            patient_id: series.id().to_string(),
                            n,
                            series_length: series.len(),
                            method: row.label(),
                            rmse_method: score,
                            rmse_lr_baseline: base,
                        });
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        records.extend(per_patient.into_iter().flatten());
        folds.push(FoldSummary {
            fold,
            learning: learning.len(),
            test: test.len(),
            skipped: false,
            pool_sizes: pools.sizes(),
            tuned: tuning
                .curves
                .values()
                .map(|c| TunedChoice {
                    strategy: c.strategy.clone(),
                    n: c.n,
                    multiplier: c.multiplier(),
                    eta: c.eta(),
                })
                .collect(),
        });
        tunings.push(tuning);
    }

    let summaries = summarize_rows(&rows, &records, &n_values)?;
    let comparisons = compare_rows(&rows, &records, &n_values);
    let curves = average_curves(&tunings);
    Ok(ExperimentReport {
        config: config.clone(),
        patients: cohort.len(),
        folds,
        rows: summaries,
        comparisons,
        curves,
        records,
    })
}

/// Records of `row` at `n`, in record order.
fn records_for<'a>(records: &'a [EvaluationRecord], label: &str, n: usize) -> Vec<&'a EvaluationRecord> {
    records.iter().filter(|r| r.method == label && r.n == n).collect()
}

fn summarize_rows(rows: &[Row], records: &[EvaluationRecord], n_values: &[usize]) -> Result<Vec<RowSummary>> {
    rows.iter()
        .map(|&row| {
            let label = row.label();
            let mut entries = Vec::new();
            let mut mean_rmse = Vec::new();
            for &n in n_values {
                let subset: Vec<EvaluationRecord> = records_for(records, &label, n).into_iter().cloned().collect();
                entries.push(improvement_rate(&subset, n)?);
                let predicted: Vec<f64> = subset.iter().filter(|r| r.predicted()).map(|r| r.rmse_method).collect();
                mean_rmse.push((!predicted.is_empty()).then(|| predicted.iter().sum::<f64>() / predicted.len() as f64));
            }
            Ok(RowSummary {
                row: label,
                name: row.display_name(),
                entries,
                mean_rmse,
            })
        })
        .collect()
}

/// Pairs of rows compared by the sign test, as `(row, against)`.
fn comparison_pairs(rows: &[Row]) -> Vec<(String, String)> {
    let has = |r: &Row| rows.contains(r);
    let mut pairs = Vec::new();
    for &row in rows {
        pairs.push((row.label(), BASELINE_LABEL.to_string()));
    }
    for eta in [EtaKind::Ir, EtaKind::Rg, EtaKind::Fixed] {
        let hier = Row::Aggregate { strategy: Strategy::Hierarchical, eta };
        let flat = Row::Aggregate { strategy: Strategy::Flat, eta };
        let mut candidates = vec![(hier, flat)];
        for m in Method::ALL {
            let single = Row::Aggregate { strategy: Strategy::Single(m), eta };
            candidates.push((hier, single));
            candidates.push((single, Row::BestExpert(Some(m))));
        }
        candidates.push((flat, Row::BestExpert(None)));
        candidates.push((hier, Row::BestExpert(None)));
        for (a, b) in candidates {
            if has(&a) && has(&b) {
                pairs.push((a.label(), b.label()));
            }
        }
    }
    for s in Strategy::ALL {
        let ir = Row::Aggregate { strategy: s, eta: EtaKind::Ir };
        let rg = Row::Aggregate { strategy: s, eta: EtaKind::Rg };
        if has(&ir) && has(&rg) {
            pairs.push((ir.label(), rg.label()));
        }
    }
    pairs
}

fn compare_rows(rows: &[Row], records: &[EvaluationRecord], n_values: &[usize]) -> Vec<Comparison> {
    // (label, n, patient) -> rmse
    let mut lookup: BTreeMap<(&str, usize, &str), f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.predicted()) {
        lookup.insert((r.method.as_str(), r.n, r.patient_id.as_str()), r.rmse_method);
        lookup.insert((BASELINE_LABEL, r.n, r.patient_id.as_str()), r.rmse_lr_baseline);
    }
    let mut out = Vec::new();
    for (a, b) in comparison_pairs(rows) {
        for &n in n_values {
            let (mut wins, mut losses, mut ties) = (0u64, 0u64, 0u64);
            for r in records.iter().filter(|r| r.method == a && r.n == n && r.predicted()) {
                let Some(&other) = lookup.get(&(b.as_str(), n, r.patient_id.as_str())) else {
                    continue;
                };
                let diff = r.rmse_method - other;
                if diff < -TIE_TOLERANCE {
                    wins += 1;
                } else if diff > TIE_TOLERANCE {
                    losses += 1;
                } else {
                    ties += 1;
                }
            }
            out.push(Comparison {
                row: a.clone(),
                against: b.clone(),
                n,
                wins,
                losses,
                ties,
                p_value: binomial_test(wins, losses).ok(),
            });
        }
    }
    out
}

fn average_curves(tunings: &[Tuning]) -> Vec<CurvePoint> {
    let Some(first) = tunings.first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (key, curve) in &first.curves {
        for (r, &g) in curve.multipliers.iter().enumerate() {
            let values: Vec<f64> = tunings.iter().filter_map(|t| t.curves.get(key)).map(|c| c.ir[r]).collect();
            out.push(CurvePoint {
                strategy: curve.strategy.clone(),
                n: curve.n,
                multiplier: g,
                ir: values.iter().sum::<f64>() / values.len() as f64,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::VisualField;

    fn record(n: usize, len: usize, f: f64, lr: f64) -> EvaluationRecord {
        EvaluationRecord {
            fold: 0,
            patient_id: format!("p{f}{lr}{len}"),
            n,
            series_length: len,
            method: "m".into(),
            rmse_method: f,
            rmse_lr_baseline: lr,
        }
    }

    #[test]
    fn ir_examples() {
        let same = [record(3, 9, 2.0, 2.0), record(3, 9, 0.5, 0.5), record(3, 2, 7.0, 7.0)];
        assert_eq!(improvement_rate(&same, 3).unwrap().ir, 0.0);
        let perfect = [record(2, 9, 0.0, 2.0), record(2, 5, 0.0, 0.1)];
        assert_eq!(improvement_rate(&perfect, 2).unwrap().ir, 1.0);
        let mixed = [record(4, 9, 1.0, 2.0), record(4, 9, 0.9, 1.0)];
        let e = improvement_rate(&mixed, 4).unwrap();
        assert!((e.ir - 0.3).abs() < 1e-12);
        assert_eq!(e.count, 2);
        assert!((e.stdev - (0.08f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ir_short_series_count_as_zero() {
        let recs = [record(5, 5, 0.0, 3.0), record(5, 9, 0.0, 3.0)];
        let e = improvement_rate(&recs, 5).unwrap();
        assert_eq!(e.count, 2);
        assert!((e.ir - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ir_excludes_undefined_ratio() {
        let recs = [record(2, 9, 1.0, 0.0), record(2, 9, 0.0, 0.0), record(2, 9, 1.0, 2.0)];
        let e = improvement_rate(&recs, 2).unwrap();
        assert_eq!(e.excluded, 1);
        assert_eq!(e.count, 2);
        assert!((e.ir - 0.25).abs() < 1e-15);
        assert!(improvement_rate(&recs, 3).is_err());
    }

    #[test]
    fn binomial_examples() {
        assert!((binomial_test(5, 5).unwrap() - 638.0 / 1024.0).abs() < 1e-15);
        assert_eq!(binomial_test(10, 0).unwrap(), 1.0 / 1024.0);
        assert_eq!(binomial_test(0, 7).unwrap(), 1.0);
        assert!(binomial_test(0, 0).is_err());
        let p = binomial_test(600, 400).unwrap();
        assert!(p > 0.0 && p < 1e-9);
    }

    #[test]
    fn binomial_tails_complement() {
        for n in 1..60u64 {
            for w in 1..=n {
                let upper = binomial_test(w, n - w).unwrap();
                assert!((upper + binomial_cdf(n, w - 1) - 1.0).abs() < 1e-15, "n={n} w={w}");
            }
        }
    }

    #[test]
    fn best_expert_picks_zero_loss_expert() {
        let prefix = [
            Observation::new(0.0, VisualField::new(vec![-2.0]).unwrap()),
            Observation::new(1.0, VisualField::new(vec![-3.0]).unwrap()),
        ];
        let target = Observation::new(3.0, VisualField::new(vec![-5.5]).unwrap());
        let experts: Vec<Expert> = [0.0, -1.0, -3.0]
            .iter()
            .map(|&s| Expert::new(vec![s], Method::PatientWiseLr, "e").fitted_to(&prefix).unwrap())
            .collect();
        let r = best_expert_rmse(&experts, &prefix, &target, 2.0).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        let single = best_expert_rmse(&experts[..1], &prefix, &target, 2.0).unwrap();
        assert!((single - 3.0).abs() < 1e-12);
    }

    #[test]
    fn folds_partition_items() {
        let a = fold_assignment(103, 10, 5);
        let mut counts = [0usize; 10];
        for &f in &a {
            counts[f] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10 || c == 11));
        assert_eq!(a, fold_assignment(103, 10, 5));
    }

    #[test]
    fn rows_follow_selection() {
        use crate::config::{EtaName, EtaSelection, StrategySelection};
        let config = RunConfig {
            strategy: StrategySelection::Tslr,
            eta: EtaSelection::Named(EtaName::Both),
            ..RunConfig::default()
        };
        let labels: Vec<String> = report_rows(&config).into_iter().map(Row::label).collect();
        assert_eq!(labels, ["tslr_ir", "tslr_rg", "best_expert_tslr"]);
        let config = RunConfig {
            strategy: StrategySelection::Hier,
            eta: EtaSelection::Fixed(1.0),
            ..RunConfig::default()
        };
        let labels: Vec<String> = report_rows(&config).into_iter().map(Row::label).collect();
        assert_eq!(labels, ["hier_fixed", "best_expert_all"]);
    }
}
