//! Run configuration for the evaluation pipeline.

use serde::{Deserialize, Serialize};

use crate::aggregation::UpdateRule;
use crate::clustering::KMeansParams;
use crate::error::{Error, Result};
use crate::field::{Method, DEFAULT_DIM};

/// An aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Aggregate the experts of one method only.
    Single(Method),
    Flat,
    Hierarchical,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Single(Method::PatientWiseLr),
        Strategy::Single(Method::SlopeClustering),
        Strategy::Single(Method::Tslr),
        Strategy::Flat,
        Strategy::Hierarchical,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Single(m) => m.label(),
            Strategy::Flat => "flat",
            Strategy::Hierarchical => "hier",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::Single(Method::PatientWiseLr) => "LR",
            Strategy::Single(Method::SlopeClustering) => "SC",
            Strategy::Single(Method::Tslr) => "TSLR",
            Strategy::Flat => "Flat",
            Strategy::Hierarchical => "Hierarchical",
        }
    }

    /// Methods whose pools this strategy aggregates.
    pub fn methods(self) -> Vec<Method> {
        match self {
            Strategy::Single(m) => vec![m],
            Strategy::Flat | Strategy::Hierarchical => Method::ALL.to_vec(),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Which strategies a run evaluates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategySelection {
    Lr,
    Sc,
    Tslr,
    Flat,
    Hier,
    #[default]
    All,
}

impl StrategySelection {
    pub fn strategies(self) -> Vec<Strategy> {
        match self {
            StrategySelection::Lr => vec![Strategy::Single(Method::PatientWiseLr)],
            StrategySelection::Sc => vec![Strategy::Single(Method::SlopeClustering)],
            StrategySelection::Tslr => vec![Strategy::Single(Method::Tslr)],
            StrategySelection::Flat => vec![Strategy::Flat],
            StrategySelection::Hier => vec![Strategy::Hierarchical],
            StrategySelection::All => Strategy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaName {
    /// Tuned by inner cross-validation to maximize the improvement rate.
    Ir,
    /// `sqrt(8 ln N / n)`.
    Rg,
    Both,
}

/// Learning-rate choice: a named rule or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSelection {
    Named(EtaName),
    Fixed(f64),
}

impl Default for EtaSelection {
    fn default() -> Self {
        EtaSelection::Named(EtaName::Both)
    }
}

impl EtaSelection {
    pub fn wants_ir(self) -> bool {
        matches!(self, EtaSelection::Named(EtaName::Ir | EtaName::Both))
    }

    pub fn wants_rg(self) -> bool {
        matches!(self, EtaSelection::Named(EtaName::Rg | EtaName::Both))
    }

    pub fn fixed(self) -> Option<f64> {
        match self {
            EtaSelection::Fixed(v) => Some(v),
            EtaSelection::Named(_) => None,
        }
    }
}

impl std::str::FromStr for EtaSelection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ir" => Ok(EtaSelection::Named(EtaName::Ir)),
            "rg" => Ok(EtaSelection::Named(EtaName::Rg)),
            "both" => Ok(EtaSelection::Named(EtaName::Both)),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .map(EtaSelection::Fixed)
                .ok_or_else(|| format!("expected ir, rg, both or a nonnegative number, got `{other}`")),
        }
    }
}

/// Every knob of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dim: usize,
    /// Number of spatial clusters.
    pub k: usize,
    /// Number of slope clusters per spatial cluster.
    pub c: usize,
    pub min_cluster_size: usize,
    /// Smallest `eta * sqrt(n)` multiplier on the tuning grid.
    pub eta_grid_min: f64,
    pub eta_grid_max: f64,
    pub eta_grid_points: usize,
    /// Outer cross-validation folds.
    pub folds: usize,
    /// Inner folds used to tune the learning rate.
    pub inner_folds: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub seed: u64,
    pub strategy: StrategySelection,
    pub eta: EtaSelection,
    pub update: UpdateRule,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            k: 40,
            c: 5,
            min_cluster_size: 3,
            eta_grid_min: 1e-2,
            eta_grid_max: 1e2,
            eta_grid_points: 61,
            folds: 10,
            inner_folds: 10,
            n_min: 2,
            n_max: 10,
            seed: 0,
            strategy: StrategySelection::All,
            eta: EtaSelection::default(),
            update: UpdateRule::Batch,
            kmeans_restarts: 10,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.to_string(),
                message: message.to_string(),
            })
        };
        if self.dim == 0 {
            return bad("dim", "must be positive");
        }
        if self.k == 0 {
            return bad("k", "must be positive");
        }
        if self.c == 0 {
            return bad("c", "must be positive");
        }
        if !(self.eta_grid_min > 0.0 && self.eta_grid_min.is_finite()) {
            return bad("eta_grid_min", "must be positive and finite");
        }
        if !(self.eta_grid_max >= self.eta_grid_min && self.eta_grid_max.is_finite()) {
            return bad("eta_grid_max", "must be finite and >= eta_grid_min");
        }
        if self.eta_grid_points == 0 {
            return bad("eta_grid_points", "must be positive");
        }
        if self.folds < 2 {
            return bad("folds", "need at least 2 folds");
        }
        if self.inner_folds < 2 {
            return bad("inner_folds", "need at least 2 folds");
        }
        if self.n_min < 2 {
            return bad("n_min", "the baseline regression needs n >= 2");
        }
        if self.n_max < self.n_min {
            return bad("n_max", "must be >= n_min");
        }
        if let EtaSelection::Fixed(v) = self.eta {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("eta", "fixed value must be finite and nonnegative");
            }
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts", "must be positive");
        }
        if !(self.kmeans_tol >= 0.0 && self.kmeans_tol.is_finite()) {
            return bad("kmeans_tol", "must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn kmeans(&self) -> KMeansParams {
        KMeansParams {
            restarts: self.kmeans_restarts,
            max_iter: self.kmeans_max_iter,
            tol: self.kmeans_tol,
        }
    }

    /// Log-spaced `eta * sqrt(n)` multipliers, ascending.
    pub fn eta_grid(&self) -> Vec<f64> {
        let points = self.eta_grid_points;
        if points == 1 {
            return vec![self.eta_grid_min];
        }
        let lo = self.eta_grid_min.ln();
        let hi = self.eta_grid_max.ln();
        (0..points)
            .map(|i| {
                if i == 0 {
                    self.eta_grid_min
                } else if i == points - 1 {
                    self.eta_grid_max
                } else {
                    (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp()
                }
            })
            .collect()
    }

    pub fn n_values(&self) -> std::ops::RangeInclusive<usize> {
        self.n_min..=self.n_max
    }
}
