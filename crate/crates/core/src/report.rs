//! Serialized experiment outputs. Every writer is byte-deterministic for a
//! given report.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::evaluation::ExperimentReport;

/// `row,name,n=2,...` with the IR of each row; full precision.
pub fn write_ir_table(out: impl Write, report: &ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n_values: Vec<usize> = report.config.n_values().collect();
    let mut header = vec!["row".to_string(), "name".to_string()];
    header.extend(n_values.iter().map(|n| format!("n={n}")));
    w.write_record(&header)?;
    for row in &report.rows {
        let mut record = vec![row.row.clone(), row.name.clone()];
        record.extend(row.entries.iter().map(|e| e.ir.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// One line per (patient, n, row).
pub fn write_records(out: impl Write, report: &ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &report.records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// IR against the `eta * sqrt(n)` multiplier, averaged over outer folds.
pub fn write_curves(out: impl Write, report: &ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "n", "multiplier", "ir"])?;
    for p in &report.curves {
        w.serialize((&p.strategy, p.n, p.multiplier, p.ir))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(mut out: impl Write, report: &ExperimentReport) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, report)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Six significant digits, as used by the text tables.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&magnitude) {
        return format!("{v:.5e}");
    }
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Plain-text IR table plus sign tests against the baseline.
pub fn render_text(report: &ExperimentReport) -> String {
    let n_values: Vec<usize> = report.config.n_values().collect();
    let width = report.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = String::new();
    let _ = writeln!(s, "Improvement rate over patient-wise LR ({} patients, {} folds)", report.patients, report.folds.len());
    let _ = write!(s, "{:width$}", "row");
    for n in &n_values {
        let _ = write!(s, " {:>10}", format!("n={n}"));
    }
    s.push('\n');
    for row in &report.rows {
        let _ = write!(s, "{:width$}", row.name);
        for e in &row.entries {
            let _ = write!(s, " {:>10}", sig6(e.ir));
        }
        s.push('\n');
    }
    s.push('\n');
    let _ = writeln!(s, "One-sided sign tests (wins/losses, p)");
    for c in &report.comparisons {
        let p = c.p_value.map_or_else(|| "-".to_string(), sig6);
        let _ = writeln!(s, "{} vs {} n={}: {}/{} p={}", c.row, c.against, c.n, c.wins, c.losses, p);
    }
    s
}

/// Writes `ir.csv`, `records.csv`, `curves.csv`, `summary.json` and
/// `report.txt` into `dir`.
pub fn write_all(dir: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let create = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
        Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
    };
    write_ir_table(create("ir.csv")?, report)?;
    write_records(create("records.csv")?, report)?;
    write_curves(create("curves.csv")?, report)?;
    write_summary(create("summary.json")?, report)?;
    std::fs::write(dir.join("report.txt"), render_text(report))?;
    Ok(())
}
