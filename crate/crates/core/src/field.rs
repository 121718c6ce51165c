//! Visual-field domain types and the shared linear-predictor mechanics.
//!
//! A visual field is a vector of `D` total-deviation values in decibels,
//! each bounded to `[-30, 0]`. Every operation here is generic over `D` so
//! the same code serves both the 74-point clinical layout and tiny test
//! fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of points in the standard visual-field layout.
pub const DEFAULT_DIM: usize = 74;
/// Lower bound of a total-deviation value (dB).
pub const TD_MIN: f64 = -30.0;
/// Upper bound of a total-deviation value (dB).
pub const TD_MAX: f64 = 0.0;
/// Width of the total-deviation range, used to normalize the loss.
pub const TD_SPAN: f64 = TD_MAX - TD_MIN;

#[inline]
pub fn clamp_td(value: f64) -> f64 {
    value.max(TD_MIN).min(TD_MAX)
}

/// One visual-field measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct VisualField(Vec<f64>);

impl VisualField {
    /// Validates that every component is finite and inside `[-30, 0]`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidField("field has no components".into()));
        }
        for (j, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidField(format!("component {j} is not finite")));
            }
            if !(TD_MIN..=TD_MAX).contains(&v) {
                return Err(Error::InvalidField(format!(
                    "component {j} = {v} outside [{TD_MIN}, {TD_MAX}]"
                )));
            }
        }
        Ok(Self(values))
    }

    /// Like [`VisualField::new`] but also checks the dimension.
    pub fn with_dim(values: Vec<f64>, dim: usize) -> Result<Self> {
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: values.len(),
            });
        }
        Self::new(values)
    }

    /// Clamps every component into range. Input must be finite.
    pub fn from_clamped(mut values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        for v in &mut values {
            *v = clamp_td(*v);
        }
        Self(values)
    }

    pub fn filled(dim: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A dated measurement. Dates are in years from the patient's first visit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub date: f64,
    #[serde(rename = "values")]
    pub field: VisualField,
}

impl Observation {
    pub fn new(date: f64, field: VisualField) -> Self {
        Self { date, field }
    }
}

/// All measurements of one patient in date order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientSeries {
    id: String,
    observations: Vec<Observation>,
}

impl PatientSeries {
    /// Requires at least two observations, strictly increasing finite dates
    /// and a common field dimension.
    pub fn new(id: impl Into<String>, observations: Vec<Observation>) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| Error::InvalidSeries {
            id: id.clone(),
            reason,
        };
        if observations.len() < 2 {
            return Err(invalid(format!(
                "needs at least 2 observations, got {}",
                observations.len()
            )));
        }
        let dim = observations[0].field.dim();
        for (t, obs) in observations.iter().enumerate() {
            if !obs.date.is_finite() {
                return Err(invalid(format!("date of observation {t} is not finite")));
            }
            if obs.field.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: obs.field.dim(),
                });
            }
            if t > 0 && obs.date <= observations[t - 1].date {
                return Err(invalid(format!(
                    "dates not strictly increasing at observation {t}"
                )));
            }
        }
        Ok(Self { id, observations })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// Series length `L`.
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.observations[0].field.dim()
    }

    /// The first `n` observations (clamped to the series length).
    pub fn prefix(&self, n: usize) -> &[Observation] {
        &self.observations[..n.min(self.observations.len())]
    }

    pub fn last(&self) -> &Observation {
        self.observations.last().expect("series has at least two observations")
    }
}

/// Which method generated an expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "lr")]
    PatientWiseLr,
    #[serde(rename = "tslr")]
    Tslr,
    #[serde(rename = "sc")]
    SlopeClustering,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::PatientWiseLr, Method::SlopeClustering, Method::Tslr];

    pub fn label(self) -> &'static str {
        match self {
            Method::PatientWiseLr => "lr",
            Method::Tslr => "tslr",
            Method::SlopeClustering => "sc",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A linear trajectory `y(t) = slope * t + intercept`.
///
/// Slopes are learned from training patients; the intercept is always fit to
/// the target patient's own observations before predicting.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub slope: Vec<f64>,
    pub intercept: Option<Vec<f64>>,
    pub source: Method,
    pub origin_id: String,
}

impl Expert {
    pub fn new(slope: Vec<f64>, source: Method, origin_id: impl Into<String>) -> Self {
        Self {
            slope,
            intercept: None,
            source,
            origin_id: origin_id.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.slope.len()
    }

    /// Returns a copy whose intercept is fit to `prefix`.
    pub fn fitted_to(&self, prefix: &[Observation]) -> Result<Self> {
        let intercept = fit_intercept(&self.slope, prefix)?;
        Ok(Self {
            intercept: Some(intercept),
            ..self.clone()
        })
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Euclidean distance normalized by `30 * sqrt(D)`, on raw slices.
#[inline]
pub fn loss_slices(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    sq.sqrt() / (TD_SPAN * (x.len() as f64).sqrt())
}

/// Normalized loss `||x - y|| / (30 sqrt(D))`; lies in `[0, 1]` for valid fields.
pub fn loss(x: &VisualField, y: &VisualField) -> Result<f64> {
    check_dims(x.dim(), y.dim())?;
    Ok(loss_slices(x.values(), y.values()))
}

/// Root mean squared error in dB.
pub fn rmse(pred: &VisualField, obs: &VisualField) -> Result<f64> {
    check_dims(pred.dim(), obs.dim())?;
    Ok(rmse_slices(pred.values(), obs.values()))
}

#[inline]
pub fn rmse_slices(pred: &[f64], obs: &[f64]) -> f64 {
    let sq: f64 = pred.iter().zip(obs).map(|(a, b)| (a - b) * (a - b)).sum();
    (sq / pred.len() as f64).sqrt()
}

/// Evaluates a fitted expert at `date` and clamps into the TD range.
pub fn predict_linear(expert: &Expert, date: f64) -> Result<VisualField> {
    let intercept = expert.intercept.as_ref().ok_or(Error::InterceptNotFit)?;
    check_dims(expert.slope.len(), intercept.len())?;
    let values = expert
        .slope
        .iter()
        .zip(intercept)
        .map(|(s, b)| s * date + b)
        .collect();
    Ok(VisualField::from_clamped(values))
}

/// Least-squares intercept for a fixed slope: the componentwise mean of
/// `y_t - slope * d_t` over the given observations.
pub fn fit_intercept(slope: &[f64], prefix: &[Observation]) -> Result<Vec<f64>> {
    if prefix.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    let mut acc = vec![0.0; slope.len()];
    for obs in prefix {
        check_dims(slope.len(), obs.field.dim())?;
        for ((a, s), y) in acc.iter_mut().zip(slope).zip(obs.field.values()) {
            *a += y - s * obs.date;
        }
    }
    let t = prefix.len() as f64;
    acc.iter_mut().for_each(|a| *a /= t);
    Ok(acc)
}

/// Per-point ordinary least-squares fit of TD against date.
///
/// Returns `(slope, intercept)`. Needs at least two distinct dates.
pub fn ols_fit(observations: &[Observation]) -> Result<(Vec<f64>, Vec<f64>)> {
    if observations.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    let dim = observations[0].field.dim();
    let count = observations.len() as f64;
    let mean_date = observations.iter().map(|o| o.date).sum::<f64>() / count;
    let mut mean_y = vec![0.0; dim];
    for obs in observations {
        check_dims(dim, obs.field.dim())?;
        for (m, y) in mean_y.iter_mut().zip(obs.field.values()) {
            *m += y;
        }
    }
    mean_y.iter_mut().for_each(|m| *m /= count);

    let mut sxx = 0.0;
    let mut sxy = vec![0.0; dim];
    for obs in observations {
        let dx = obs.date - mean_date;
        sxx += dx * dx;
        for ((s, y), m) in sxy.iter_mut().zip(obs.field.values()).zip(&mean_y) {
            *s += dx * (y - m);
        }
    }
    if sxx <= 0.0 {
        return Err(Error::InvalidSeries {
            id: String::new(),
            reason: "all dates are equal; slope undefined".into(),
        });
    }
    let slope: Vec<f64> = sxy.iter().map(|s| s / sxx).collect();
    let intercept = mean_y
        .iter()
        .zip(&slope)
        .map(|(m, s)| m - s * mean_date)
        .collect();
    Ok((slope, intercept))
}
