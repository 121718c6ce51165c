//! Expert construction for the three generating methods.
//!
//! * patient-wise LR: one expert per training patient, slope from OLS over
//!   the patient's full series;
//! * TSLR: one expert per retained spatial cluster, slope shared by all
//!   members with each member keeping its own intercept;
//! * SC: one expert per member of a retained cluster, every per-point slope
//!   replaced by its cluster's representative rate.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_slope_vectors, patient_feature, KMeansParams, SpatialClustering};
use crate::error::{Error, Result};
use crate::field::{Expert, Method, Observation, PatientSeries};
use crate::seed;

/// Experts produced by one method.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPool {
    method: Method,
    experts: Vec<Expert>,
}

impl ExpertPool {
    /// Builds a pool, checking that it is nonempty, dimensionally consistent
    /// and carries a single source tag.
    pub fn new(method: Method, experts: Vec<Expert>) -> Result<Self> {
        let Some(first) = experts.first() else {
            return Err(Error::param("pool", format!("{method} pool is empty")));
        };
        let dim = first.dim();
        for e in &experts {
            if e.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: e.dim(),
                });
            }
            if e.source != method {
                return Err(Error::param(
                    "pool",
                    format!("expert from {} in a {method} pool", e.source),
                ));
            }
        }
        Ok(Self { method, experts })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.experts[0].dim()
    }

    /// Slopes as one row-major `N x D` block.
    pub fn slope_matrix(&self) -> Vec<f64> {
        self.experts.iter().flat_map(|e| e.slope.iter().copied()).collect()
    }
}

pub fn build_lr_experts(training: &[PatientSeries]) -> Result<ExpertPool> {
    let experts = training
        .iter()
        .map(|s| Ok(Expert::new(patient_feature(s)?, Method::PatientWiseLr, s.id())))
        .collect::<Result<Vec<_>>>()?;
    ExpertPool::new(Method::PatientWiseLr, experts)
}

/// Shared slope of a group of series with per-series intercepts absorbed.
///
/// Returns `None` when the pooled within-series date variance is zero.
pub fn pooled_slope(members: &[&PatientSeries]) -> Option<Vec<f64>> {
    let dim = members.first()?.dim();
    let mut sxx = 0.0;
    let mut sxy = vec![0.0; dim];
    for series in members {
        let obs = series.observations();
        let count = obs.len() as f64;
        let mean_date = obs.iter().map(|o| o.date).sum::<f64>() / count;
        let mut mean_y = vec![0.0; dim];
        for o in obs {
            for (m, y) in mean_y.iter_mut().zip(o.field.values()) {
                *m += y;
            }
        }
        mean_y.iter_mut().for_each(|m| *m /= count);
        for o in obs {
            let dx = o.date - mean_date;
            sxx += dx * dx;
            for ((s, y), m) in sxy.iter_mut().zip(o.field.values()).zip(&mean_y) {
                *s += dx * (y - m);
            }
        }
    }
    (sxx > 0.0).then(|| sxy.iter().map(|s| s / sxx).collect())
}

fn check_alignment(training: &[PatientSeries], spatial: &SpatialClustering) -> Result<()> {
    if spatial.assignments.len() != training.len() {
        return Err(Error::param(
            "spatial",
            format!(
                "clustering covers {} patients but the training cohort has {}",
                spatial.assignments.len(),
                training.len()
            ),
        ));
    }
    Ok(())
}

pub fn build_tslr_experts(training: &[PatientSeries], spatial: &SpatialClustering) -> Result<ExpertPool> {
    check_alignment(training, spatial)?;
    let mut experts = Vec::new();
    for &c in &spatial.retained {
        let members: Vec<&PatientSeries> = spatial.members(c).into_iter().map(|i| &training[i]).collect();
        match pooled_slope(&members) {
            Some(slope) => experts.push(Expert::new(slope, Method::Tslr, format!("cluster-{c}"))),
            None => warn!("spatial cluster {c} has zero pooled date variance; skipped"),
        }
    }
    ExpertPool::new(Method::Tslr, experts)
}

pub fn build_sc_experts(
    training: &[PatientSeries],
    spatial: &SpatialClustering,
    c: usize,
    params: &KMeansParams,
    seed: u64,
) -> Result<ExpertPool> {
    check_alignment(training, spatial)?;
    let features = training.iter().map(patient_feature).collect::<Result<Vec<_>>>()?;
    let mut slopes: Vec<Option<Vec<f64>>> = vec![None; training.len()];
    for &cluster in &spatial.retained {
        let members = spatial.members(cluster);
        let member_slopes: Vec<Vec<f64>> = members.iter().map(|&i| features[i].clone()).collect();
        let set = cluster_slope_vectors(&member_slopes, c, params, seed::derive(seed, cluster as u64))?;
        for (m, &i) in members.iter().enumerate() {
            slopes[i] = Some(set.quantized(m));
        }
    }
    let experts = training
        .iter()
        .zip(slopes)
        .filter_map(|(s, slope)| slope.map(|w| Expert::new(w, Method::SlopeClustering, s.id())))
        .collect();
    ExpertPool::new(Method::SlopeClustering, experts)
}

/// Returns the pool with every intercept fit to `target_prefix`.
pub fn fit_pool_to_target(pool: &ExpertPool, target_prefix: &[Observation]) -> Result<ExpertPool> {
    if target_prefix.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    let experts = pool
        .experts
        .iter()
        .map(|e| e.fitted_to(target_prefix))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertPool {
        method: pool.method,
        experts,
    })
}

/// Serialized form of one expert: method tag, origin and slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertRecord {
    pub origin: String,
    pub slope: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolRecord {
    pub method: Method,
    pub experts: Vec<ExpertRecord>,
}

/// Document written by the `experts` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertsDocument {
    pub dim: usize,
    pub pools: Vec<PoolRecord>,
}

impl ExpertsDocument {
    pub fn from_pools(pools: &[ExpertPool]) -> Self {
        Self {
            dim: pools.first().map_or(0, ExpertPool::dim),
            pools: pools
                .iter()
                .map(|p| PoolRecord {
                    method: p.method,
                    experts: p
                        .experts
                        .iter()
                        .map(|e| ExpertRecord {
                            origin: e.origin_id.clone(),
                            slope: e.slope.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds the pools, validating dimensions and slope values.
    pub fn into_pools(self) -> Result<Vec<ExpertPool>> {
        if self.pools.is_empty() {
            return Err(Error::param("pools", "document holds no pools"));
        }
        self.pools
            .into_iter()
            .map(|p| {
                let experts = p
                    .experts
                    .into_iter()
                    .map(|e| {
                        if e.slope.len() != self.dim {
                            return Err(Error::DimensionMismatch {
                                expected: self.dim,
                                found: e.slope.len(),
                            });
                        }
                        if e.slope.iter().any(|s| !s.is_finite()) {
                            return Err(Error::param("slope", format!("non-finite slope in expert {}", e.origin)));
                        }
                        Ok(Expert::new(e.slope, p.method, e.origin))
                    })
                    .collect::<Result<Vec<_>>>()?;
                ExpertPool::new(p.method, experts)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::cluster_spatial;
    use crate::field::{fit_intercept, VisualField};

    fn series(id: &str, points: &[(f64, &[f64])]) -> PatientSeries {
        PatientSeries::new(
            id,
            points
                .iter()
                .map(|(d, v)| Observation::new(*d, VisualField::new(v.to_vec()).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn lr_examples() {
        let pool = build_lr_experts(&[series("p", &[(0.0, &[0.0]), (2.0, &[-4.0])])]).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.experts()[0].slope, vec![-2.0]);
        assert_eq!(pool.experts()[0].origin_id, "p");
        let flat = build_lr_experts(&[series("q", &[(0.0, &[-2.0]), (1.0, &[-2.0])])]).unwrap();
        assert_eq!(flat.experts()[0].slope, vec![0.0]);
    }

    #[test]
    fn pooled_slope_examples() {
        let a = series("a", &[(0.0, &[0.0]), (1.0, &[-2.0])]);
        let b = series("b", &[(0.0, &[-5.0]), (1.0, &[-7.0])]);
        assert_eq!(pooled_slope(&[&a, &b]).unwrap(), vec![-2.0]);

        let c = series("c", &[(0.0, &[-1.0, -3.0]), (0.7, &[-2.0, -3.5]), (1.9, &[-2.5, -5.0])]);
        let single = pooled_slope(&[&c]).unwrap();
        let lr = patient_feature(&c).unwrap();
        for (x, y) in single.iter().zip(&lr) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn fit_pool_sets_intercepts_only() {
        let pool = ExpertPool::new(Method::Tslr, vec![Expert::new(vec![-1.0], Method::Tslr, "c0")]).unwrap();
        let prefix = [
            Observation::new(0.0, VisualField::new(vec![-1.0]).unwrap()),
            Observation::new(1.0, VisualField::new(vec![-3.0]).unwrap()),
            Observation::new(2.0, VisualField::new(vec![-2.0]).unwrap()),
        ];
        let fitted = fit_pool_to_target(&pool, &prefix).unwrap();
        assert_eq!(fitted.experts()[0].slope, vec![-1.0]);
        assert!((fitted.experts()[0].intercept.as_ref().unwrap()[0] + 1.0).abs() < 1e-15);
        let again = fit_pool_to_target(&fitted, &prefix).unwrap();
        assert_eq!(again, fitted);
        assert!(matches!(fit_pool_to_target(&pool, &[]), Err(Error::EmptyPrefix)));
    }

    #[test]
    fn single_observation_prefix_passes_through_point() {
        let pool = ExpertPool::new(Method::PatientWiseLr, vec![Expert::new(vec![-0.7, 0.4], Method::PatientWiseLr, "x")]).unwrap();
        let prefix = [Observation::new(1.5, VisualField::new(vec![-4.0, -9.0]).unwrap())];
        let fitted = fit_pool_to_target(&pool, &prefix).unwrap();
        let e = &fitted.experts()[0];
        let b = e.intercept.as_ref().unwrap();
        assert!((e.slope[0] * 1.5 + b[0] + 4.0).abs() < 1e-14);
        assert!((e.slope[1] * 1.5 + b[1] + 9.0).abs() < 1e-14);
        assert_eq!(b, &fit_intercept(&e.slope, &prefix).unwrap());
    }

    #[test]
    fn pool_validation() {
        assert!(ExpertPool::new(Method::Tslr, vec![]).is_err());
        let mixed = vec![
            Expert::new(vec![0.0], Method::Tslr, "a"),
            Expert::new(vec![0.0], Method::SlopeClustering, "b"),
        ];
        assert!(ExpertPool::new(Method::Tslr, mixed).is_err());
    }

    fn cohort() -> Vec<PatientSeries> {
        let mut out = Vec::new();
        for i in 0..5 {
            let r = -0.5 - 0.5 * (i % 2) as f64;
            out.push(series(
                &format!("a{i}"),
                &[(0.0, &[-2.0, -10.0]), (1.0, &[-2.0, -10.0 + r]), (2.0, &[-2.0, -10.0 + 2.0 * r])],
            ));
        }
        for i in 0..2 {
            out.push(series(&format!("b{i}"), &[(0.0, &[-3.0, -1.0]), (1.0, &[-4.0, -1.0])]));
        }
        out
    }

    #[test]
    fn counts_follow_retained_clusters() {
        let training = cohort();
        let spatial = cluster_spatial(&training, 2, 3, &KMeansParams::default(), 2).unwrap();
        assert_eq!(spatial.retained.len(), 1);
        let lr = build_lr_experts(&training).unwrap();
        let tslr = build_tslr_experts(&training, &spatial).unwrap();
        let sc = build_sc_experts(&training, &spatial, 5, &KMeansParams::default(), 2).unwrap();
        assert_eq!(lr.len(), 7);
        assert_eq!(tslr.len(), 1);
        assert_eq!(sc.len(), 5);
        // every member's point-slopes are already among <= 5 values
        for (e, l) in sc.experts().iter().zip(lr.experts()) {
            assert_eq!(e.origin_id, l.origin_id);
            for (x, y) in e.slope.iter().zip(&l.slope) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let sc1 = build_sc_experts(&training, &spatial, 1, &KMeansParams::default(), 2).unwrap();
        let mean = (0.0 * 5.0 + (-0.5 * 3.0 - 1.0 * 2.0)) / 10.0;
        for e in sc1.experts() {
            for s in &e.slope {
                assert!((s - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn document_round_trip() {
        let pool = build_lr_experts(&cohort()).unwrap();
        let doc = ExpertsDocument::from_pools(std::slice::from_ref(&pool));
        let text = serde_json::to_string(&doc).unwrap();
        let back: ExpertsDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_pools().unwrap(), vec![pool]);
    }
}
