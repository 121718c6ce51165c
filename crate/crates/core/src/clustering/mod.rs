//! Spatial clustering of patients by progression pattern, and quantization
//! of per-point progression rates within a spatial cluster.
//!
//! The spatial step runs k-means over each patient's per-point OLS slope
//! vector scaled to unit length, so patients group by *where* the field
//! declines rather than how fast. The slope step runs a one-dimensional
//! k-means over the pooled per-point slopes of a cluster's members.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::field::{ols_fit, PatientSeries};
use crate::seed;

mod kmeans;

pub use kmeans::{kmeans, KMeansFit, KMeansParams};

/// Progression-pattern feature: per-point OLS slope of TD against date.
pub fn patient_feature(series: &PatientSeries) -> Result<Vec<f64>> {
    ols_fit(series.observations())
        .map(|(slope, _)| slope)
        .map_err(|e| match e {
            Error::InvalidSeries { reason, .. } => Error::InvalidSeries {
                id: series.id().to_string(),
                reason,
            },
            other => other,
        })
}

fn unit_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Partition of a training cohort into spatial clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialClustering {
    /// Cluster index of each cohort member, in cohort order.
    pub assignments: Vec<usize>,
    /// Normalized slope-pattern centers, one per cluster.
    pub centers: Vec<Vec<f64>>,
    /// Clusters with at least `min_size` members.
    pub retained: BTreeSet<usize>,
    pub min_size: usize,
    pub objective_history: Vec<f64>,
}

impl SpatialClustering {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Cohort indices belonging to cluster `c`, in cohort order.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_retained(&self, c: usize) -> bool {
        self.retained.contains(&c)
    }
}

/// Clusters `cohort` into `k` spatial progression patterns.
pub fn cluster_spatial(
    cohort: &[PatientSeries],
    k: usize,
    min_size: usize,
    params: &KMeansParams,
    seed: u64,
) -> Result<SpatialClustering> {
    if k == 0 {
        return Err(Error::param("k", "must be positive"));
    }
    if cohort.len() < k {
        return Err(Error::CohortTooSmall {
            required: k,
            found: cohort.len(),
        });
    }
    let dim = cohort[0].dim();
    let mut data = Vec::with_capacity(cohort.len() * dim);
    for series in cohort {
        if series.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: series.dim(),
            });
        }
        data.extend(unit_normalized(patient_feature(series)?));
    }
    let fit = kmeans(&data, dim, k, params, seed::derive(seed, seed::stream::SPATIAL))?;
    let sizes = fit.sizes();
    let retained = (0..k).filter(|&c| sizes[c] >= min_size).collect();
    let centers = (0..k).map(|c| fit.center(c).to_vec()).collect();
    Ok(SpatialClustering {
        assignments: fit.assignments,
        centers,
        retained,
        min_size,
        objective_history: fit.history,
    })
}

/// At most `C` representative progression rates for one spatial cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeSet {
    /// Representative rates in ascending order (dB/year).
    pub rates: Vec<f64>,
    /// `assignments[m][j]` indexes `rates` for member `m`, point `j`.
    pub assignments: Vec<Vec<usize>>,
    pub objective_history: Vec<f64>,
}

impl SlopeSet {
    /// Slope vector of member `m` with every point replaced by its rate.
    pub fn quantized(&self, m: usize) -> Vec<f64> {
        self.assignments[m].iter().map(|&r| self.rates[r]).collect()
    }
}

/// Quantizes the per-point slopes of the given members into at most `c` rates.
pub fn cluster_slopes(members: &[&PatientSeries], c: usize, params: &KMeansParams, seed: u64) -> Result<SlopeSet> {
    let slopes = members
        .iter()
        .map(|s| patient_feature(s))
        .collect::<Result<Vec<_>>>()?;
    cluster_slope_vectors(&slopes, c, params, seed)
}

/// Same as [`cluster_slopes`] but on precomputed per-member slope vectors.
pub fn cluster_slope_vectors(slopes: &[Vec<f64>], c: usize, params: &KMeansParams, seed: u64) -> Result<SlopeSet> {
    if c == 0 {
        return Err(Error::param("c", "must be positive"));
    }
    if slopes.is_empty() {
        return Err(Error::param("members", "slope clustering needs at least one member"));
    }
    let pooled: Vec<f64> = slopes.iter().flatten().copied().collect();
    if pooled.iter().any(|s| !s.is_finite()) {
        return Err(Error::param("members", "non-finite slope"));
    }
    let mut distinct = pooled.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();

    let (rates, labels, history) = if distinct.len() <= c {
        // exact quantization
        let labels: Vec<usize> = pooled
            .iter()
            .map(|s| distinct.binary_search_by(|d| d.total_cmp(s)).expect("value is present"))
            .collect();
        (distinct, labels, vec![0.0])
    } else {
        let fit = kmeans(&pooled, 1, c, params, seed::derive(seed, seed::stream::SLOPES))?;
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| fit.centers[a].total_cmp(&fit.centers[b]).then(a.cmp(&b)));
        let mut rank = vec![0; c];
        for (r, &orig) in order.iter().enumerate() {
            rank[orig] = r;
        }
        let rates = order.iter().map(|&o| fit.centers[o]).collect();
        let labels = fit.assignments.iter().map(|&a| rank[a]).collect();
        (rates, labels, fit.history)
    };

    let mut assignments = Vec::with_capacity(slopes.len());
    let mut offset = 0;
    for s in slopes {
        assignments.push(labels[offset..offset + s.len()].to_vec());
        offset += s.len();
    }
    Ok(SlopeSet {
        rates,
        assignments,
        objective_history: history,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let comb2 = |m: u64| (m * m.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&m| comb2(m)).sum();
    let rows: f64 = (0..ka).map(|i| comb2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| comb2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = comb2(n as u64);
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
