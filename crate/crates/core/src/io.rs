//! File formats.
//!
//! * Dataset: one JSON object per line per patient,
//!   `{"id": "...", "observations": [{"date": 0.0, "values": [...]}, ...]}`.
//! * Run and cohort configs: a single flat JSON object; omitted fields take
//!   their defaults, unknown fields are rejected.
//! * Experts: the document written by the `experts` command.
//!
//! All parsers take untrusted text and report problems as errors, never
//! panics.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experts::{ExpertPool, ExpertsDocument};
use crate::field::{Observation, PatientSeries, VisualField};
use crate::synthdata::CohortConfig;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationLine {
    date: f64,
    values: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientLine {
    id: String,
    observations: Vec<ObservationLine>,
}

/// Parses a dataset. With `dim`, every field must have that many points;
/// otherwise all fields must match the first one.
pub fn parse_dataset(text: &str, dim: Option<usize>) -> Result<Vec<PatientSeries>> {
    let mut cohort = Vec::new();
    let mut seen = HashSet::new();
    let mut expected = dim;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let at = |e: Error| Error::Parse {
            line,
            message: e.to_string(),
        };
        let parsed: PatientLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(parsed.id.clone()) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate patient id `{}`", parsed.id),
            });
        }
        let mut observations = Vec::with_capacity(parsed.observations.len());
        for (t, o) in parsed.observations.into_iter().enumerate() {
            let d = *expected.get_or_insert(o.values.len());
            let field = VisualField::with_dim(o.values, d).map_err(|e| Error::Parse {
                line,
                message: format!("observation {t}: {e}"),
            })?;
            observations.push(Observation::new(o.date, field));
        }
        cohort.push(PatientSeries::new(parsed.id, observations).map_err(at)?);
    }
    Ok(cohort)
}

pub fn read_dataset(path: &Path, dim: Option<usize>) -> Result<Vec<PatientSeries>> {
    parse_dataset(&std::fs::read_to_string(path)?, dim)
}

/// Writes one line per patient. Floats use the shortest representation that
/// parses back to the same value.
pub fn write_dataset(mut out: impl Write, cohort: &[PatientSeries]) -> Result<()> {
    for series in cohort {
        serde_json::to_writer(&mut out, series)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn parse_flat_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        Error::Config {
            field: if field == "." { "<document>".into() } else { field },
            message: e.into_inner().to_string(),
        }
    })?;
    de.end().map_err(|e| Error::Config {
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    Ok(value)
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = parse_flat_json(text)?;
    config.validate()?;
    Ok(config)
}

pub fn parse_cohort_config(text: &str) -> Result<CohortConfig> {
    let config: CohortConfig = parse_flat_json(text)?;
    config.validate()?;
    Ok(config)
}

pub fn parse_experts(text: &str) -> Result<Vec<ExpertPool>> {
    let doc: ExpertsDocument = serde_json::from_str(text)?;
    doc.into_pools()
}
