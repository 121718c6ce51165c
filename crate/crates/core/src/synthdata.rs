//! Seeded synthetic cohorts with planted spatial patterns and discrete
//! progression rates.
//!
//! Each planted pattern is a smooth bump over the point index (wrapping
//! around), scaled so its peak is one. A patient draws a pattern `k`, a rate
//! `r` from `C` evenly spaced values, a baseline field and irregular visit
//! dates; point `j` then declines linearly at `r * pattern_k[j]` dB/year,
//! with i.i.d. Gaussian noise added and the result clamped to `[-30, 0]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Observation, PatientSeries, VisualField, DEFAULT_DIM};
use crate::seed;

/// Generator settings. Ranges are inclusive `[min, max]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub patients: usize,
    pub dim: usize,
    pub k_true: usize,
    pub c_true: usize,
    /// Standard deviation of the per-point measurement noise (dB).
    pub noise_sd: f64,
    pub series_length_range: [usize; 2],
    /// Gap between consecutive visits (years).
    pub date_gap_range: [f64; 2],
    /// Per-point baseline TD at the first visit (dB).
    pub intercept_range: [f64; 2],
    /// Progression rate at a pattern's peak (dB/year, as a positive decline).
    pub rate_range: [f64; 2],
    /// Pattern width as a fraction of `dim / k_true`.
    pub pattern_width: f64,
    /// Tie each patient's rate to its spatial pattern so that every planted
    /// cluster shares one slope. Pair with a small clustering `k` to get a
    /// small, accurate TSLR pool next to large LR and SC pools.
    pub skew: bool,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            patients: 1000,
            dim: DEFAULT_DIM,
            k_true: 8,
            c_true: 3,
            noise_sd: 2.0,
            series_length_range: [5, 15],
            date_gap_range: [0.2, 0.8],
            intercept_range: [-12.0, -1.0],
            rate_range: [0.3, 1.5],
            pattern_width: 1.0 / 3.0,
            skew: false,
            seed: 0,
        }
    }
}

impl CohortConfig {
    /// Pool-size skew preset: every planted cluster progresses at one common
    /// rate over a localized pattern, with low noise. Clustering it with
    /// `k = k_true` yields a TSLR pool of at most `k_true` accurate experts
    /// beside LR and SC pools of roughly one expert per training patient.
    pub fn skewed() -> Self {
        Self {
            c_true: 1,
            noise_sd: 1.0,
            rate_range: [2.0, 2.0],
            pattern_width: 0.5,
            skew: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            field: field.to_string(),
            message,
        };
        if self.patients == 0 {
            return Err(bad("patients", "must be positive".into()));
        }
        if self.dim == 0 {
            return Err(bad("dim", "must be positive".into()));
        }
        if self.k_true == 0 {
            return Err(bad("k_true", "must be at least 1".into()));
        }
        if self.c_true == 0 {
            return Err(bad("c_true", "must be at least 1".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(bad("noise_sd", format!("must be finite and >= 0, got {}", self.noise_sd)));
        }
        let [lo, hi] = self.series_length_range;
        if lo < 2 || lo > hi {
            return Err(bad("series_length_range", format!("need 2 <= min <= max, got [{lo}, {hi}]")));
        }
        let [lo, hi] = self.date_gap_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(bad("date_gap_range", format!("need 0 < min <= max, got [{lo}, {hi}]")));
        }
        let [lo, hi] = self.intercept_range;
        if !(-30.0 <= lo && lo <= hi && hi <= 0.0) {
            return Err(bad("intercept_range", format!("need -30 <= min <= max <= 0, got [{lo}, {hi}]")));
        }
        let [lo, hi] = self.rate_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(bad("rate_range", format!("need finite min <= max, got [{lo}, {hi}]")));
        }
        if !(self.pattern_width > 0.0 && self.pattern_width.is_finite()) {
            return Err(bad("pattern_width", "must be positive".into()));
        }
        Ok(())
    }

    /// The planted rates, ascending.
    pub fn rates(&self) -> Vec<f64> {
        let [lo, hi] = self.rate_range;
        if self.c_true == 1 {
            return vec![lo];
        }
        (0..self.c_true)
            .map(|c| lo + (hi - lo) * c as f64 / (self.c_true - 1) as f64)
            .collect()
    }
}

/// Planted labels of one generated patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub id: String,
    pub cluster: usize,
    pub rate_index: usize,
    /// Planted per-point slope (dB/year).
    pub slope: Vec<f64>,
    /// Planted per-point baseline (dB).
    pub intercept: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub patterns: Vec<Vec<f64>>,
    pub rates: Vec<f64>,
    pub patients: Vec<PatientTruth>,
}

impl GroundTruth {
    pub fn cluster_labels(&self) -> Vec<usize> {
        self.patients.iter().map(|p| p.cluster).collect()
    }
}

fn planted_patterns(config: &CohortConfig, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let d = config.dim as f64;
    let spacing = d / config.k_true as f64;
    let width = (config.pattern_width * spacing).max(0.5);
    (0..config.k_true)
        .map(|k| {
            let center = k as f64 * spacing + rng.random::<f64>() * spacing;
            (0..config.dim)
                .map(|j| {
                    let raw = (j as f64 - center).abs();
                    let dist = raw.min(d - raw);
                    (-0.5 * (dist / width).powi(2)).exp()
                })
                .collect::<Vec<f64>>()
        })
        .map(|p: Vec<f64>| {
            let peak = p.iter().copied().fold(0.0, f64::max);
            p.into_iter().map(|v| v / peak).collect()
        })
        .collect()
}

/// Draws a cohort. Identical configs give identical cohorts.
pub fn generate_cohort(config: &CohortConfig) -> Result<(Vec<PatientSeries>, GroundTruth)> {
    config.validate()?;
    let mut rng = seed::rng(seed::derive(config.seed, seed::stream::COHORT));
    let patterns = planted_patterns(config, &mut rng);
    let rates = config.rates();
    let noise = Normal::new(0.0, config.noise_sd).map_err(|e| Error::Config {
        field: "noise_sd".into(),
        message: e.to_string(),
    })?;
    let width = (config.patients.max(2) - 1).to_string().len();
    let patient_stream = seed::derive(config.seed, seed::stream::PATIENT);

    let mut cohort = Vec::with_capacity(config.patients);
    let mut truth = Vec::with_capacity(config.patients);
    for i in 0..config.patients {
        let mut rng = seed::rng(seed::derive(patient_stream, i as u64));
        let id = format!("P{i:0width$}");
        let cluster = rng.random_range(0..config.k_true);
        let rate_index = if config.skew {
            cluster % config.c_true
        } else {
            rng.random_range(0..config.c_true)
        };
        let slope: Vec<f64> = patterns[cluster].iter().map(|p| -rates[rate_index] * p).collect();
        let [lo, hi] = config.intercept_range;
        let intercept: Vec<f64> = (0..config.dim).map(|_| rng.random_range(lo..=hi)).collect();
        let [lmin, lmax] = config.series_length_range;
        let len = rng.random_range(lmin..=lmax);
        let [gmin, gmax] = config.date_gap_range;
        let mut date = 0.0;
        let mut observations = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 {
                date += rng.random_range(gmin..=gmax);
            }
            let values = slope
                .iter()
                .zip(&intercept)
                .map(|(s, b)| s * date + b + if config.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 })
                .collect();
            observations.push(Observation::new(date, VisualField::from_clamped(values)));
        }
        cohort.push(PatientSeries::new(id.clone(), observations)?);
        truth.push(PatientTruth {
            id,
            cluster,
            rate_index,
            slope,
            intercept,
        });
    }
    Ok((
        cohort,
        GroundTruth {
            patterns,
            rates,
            patients: truth,
        },
    ))
}
