use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sysrisk::sensitivity::FdCheck;
use sysrisk::{RiskReport, ScenarioSpace};

use crate::CliError;

/// Probabilities within this distance of summing to one are renormalized.
pub const PROB_RENORM_TOL: f64 = 1e-9;

/// Parsed scenario file: labels, probabilities and bank-major positions.
#[derive(Debug, Clone)]
pub struct Scenarios {
    pub labels: Vec<String>,
    pub space: ScenarioSpace,
    /// `X[n][s]`
    pub positions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Text,
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

/// Reads a table whose header is `leading..., {prefix}1, ..., {prefix}N`.
/// Returns the first column and the numeric columns after `leading`.
fn read_table(text: &str, leading: &[&str], prefix: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut records = reader(text).into_records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| CliError::Parse { line: 1, msg: e.to_string() })?,
        None => return Err(CliError::Parse { line: 1, msg: "empty file".into() }),
    };
    let width = header.len();
    let expected: Vec<String> = leading
        .iter()
        .map(|s| s.to_string())
        .chain((1..=width.saturating_sub(leading.len())).map(|n| format!("{prefix}{n}")))
        .collect();
    if width <= leading.len() || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(CliError::Parse {
            line: 1,
            msg: format!("expected header {}", expected.join(",")),
        });
    }

    let (mut labels, mut rows) = (Vec::new(), Vec::new());
    for (i, record) in records.enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| CliError::Parse { line, msg: e.to_string() })?;
        if record.len() != width {
            return Err(CliError::RaggedRows {
                line,
                expected: width,
                got: record.len(),
            });
        }
        labels.push(record[0].to_string());
        let values = record
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::Parse {
                        line,
                        msg: format!("not a finite number: {f:?}"),
                    })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(CliError::Parse { line: 2, msg: "no scenario rows".into() });
    }
    Ok((labels, rows))
}

/// Transposes scenario-major rows into bank-major columns.
fn columns(rows: &[Vec<f64>], skip: usize) -> Vec<Vec<f64>> {
    let width = rows[0].len();
    (skip..width).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
}

/// Parses a `scenario,probability,X1,...,XN` table.
pub fn parse_scenarios(text: &str) -> Result<Scenarios, CliError> {
    let (labels, rows) = read_table(text, &["scenario", "probability"], "X")?;
    let mut probs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_RENORM_TOL {
        return Err(CliError::BadProbability(total));
    }
    probs.iter_mut().for_each(|p| *p /= total);
    let space = ScenarioSpace::new(probs)?;
    Ok(Scenarios {
        labels,
        space,
        positions: columns(&rows, 1),
    })
}

pub fn load_scenarios(path: &Path) -> Result<Scenarios, CliError> {
    parse_scenarios(&std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
}

/// Parses a `scenario,V1,...,VN` table and checks it against `(banks, scenarios)`.
pub fn parse_direction(text: &str, banks: usize, scenarios: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let (_, rows) = read_table(text, &["scenario"], "V").map_err(|e| match e {
        CliError::RaggedRows { .. } => CliError::ShapeMismatch(e.to_string()),
        e => e,
    })?;
    let got = (rows[0].len(), rows.len());
    if got != (banks, scenarios) {
        return Err(CliError::ShapeMismatch(format!(
            "direction has {} banks x {} scenarios, positions have {banks} x {scenarios}",
            got.0, got.1
        )));
    }
    Ok(columns(&rows, 0))
}

pub fn load_direction(path: &Path, banks: usize, scenarios: usize) -> Result<Vec<Vec<f64>>, CliError> {
    parse_direction(
        &std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?,
        banks,
        scenarios,
    )
}

pub fn render_report(report: &RiskReport, format: Format) -> Result<String, CliError> {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(|e| CliError::Config(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        Format::Text => Ok(report_table(report)),
    }
}

fn report_table(r: &RiskReport) -> String {
    let mut out = String::new();
    let num = |v: f64| format!("{v:>20.12e}");
    let _ = writeln!(out, "method        {}", r.method);
    let _ = writeln!(out, "rho           {}", num(r.rho));
    let _ = writeln!(out, "lambda_star   {}", num(r.lambda_star));
    let _ = writeln!(out, "penalty       {}", num(r.penalty));
    let _ = writeln!(out, "\ngroup levels");
    for (m, d) in r.group_levels.iter().enumerate() {
        let _ = writeln!(out, "  group {:<5} {}", m + 1, num(*d));
    }
    let _ = writeln!(out, "\nrisk allocations");
    for (n, a) in r.risk_allocations.iter().enumerate() {
        let _ = writeln!(out, "  bank {:<6} {}", n + 1, num(*a));
    }
    matrix(&mut out, "allocation Y", "Y", &r.allocation);
    matrix(&mut out, "dual densities dQ/dP", "Q", &r.dual_densities);
    let res = &r.residuals;
    let _ = writeln!(out, "\nresiduals");
    let _ = writeln!(out, "  budget          {}", num(res.budget));
    let _ = writeln!(out, "  duality_gap     {}", num(res.duality_gap));
    let _ = writeln!(out, "  clearing        {}", num(res.clearing));
    let _ = writeln!(out, "  full_allocation {}", num(res.full_allocation));
    if let Some(c) = &res.cross_engine {
        let _ = writeln!(out, "  cross_engine    {}", num(c.max_pairwise));
        let _ = writeln!(out, "    closed-form   {}", num(c.closed_form));
        let _ = writeln!(out, "    dual          {}", num(c.dual));
        let _ = writeln!(out, "    primal        {}", num(c.primal));
    }
    out
}

/// Rows are scenarios, columns the entries of `cols` (bank-major or group-major).
fn matrix(out: &mut String, title: &str, prefix: &str, cols: &[Vec<f64>]) {
    let _ = writeln!(out, "\n{title}");
    let _ = write!(out, "  {:<10}", "scenario");
    for j in 1..=cols.len() {
        let _ = write!(out, " {:>20}", format!("{prefix}{j}"));
    }
    out.push('\n');
    let s_len = cols.first().map_or(0, Vec::len);
    for s in 0..s_len {
        let _ = write!(out, "  {:<10}", s + 1);
        for col in cols {
            let _ = write!(out, " {:>20.12e}", col[s]);
        }
        out.push('\n');
    }
}

/// Writes `contents` to `path`, or to stdout when `path` is `None`.
pub fn write_output(path: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, contents).map_err(|e| CliError::io(p, e)),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

pub fn emit_report(report: &RiskReport, path: Option<&Path>, format: Format) -> Result<(), CliError> {
    write_output(path, &render_report(report, format)?)
}

/// Tab-separated `name, analytic, fd, abs_mismatch` rows for plotting.
pub fn sensitivity_tsv(rows: &[FdCheck]) -> String {
    let mut out = String::from("name\tanalytic\tfd\tabs_mismatch\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.15e}\t{:.15e}\t{:.3e}", r.name, r.analytic, r.fd, r.abs_mismatch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fix_a() {
        let s = parse_scenarios("scenario,probability,X1\nup,0.5,1\ndown,0.5,-1\n").unwrap();
        assert_eq!(s.space.probs(), &[0.5, 0.5]);
        assert_eq!(s.positions, vec![vec![1.0, -1.0]]);
        assert_eq!(s.labels, vec!["up", "down"]);
    }

    #[test]
    fn renormalizes_small_drift_only() {
        let s = parse_scenarios("scenario,probability,X1\na,0.5,1\nb,0.5000000001,-1\n").unwrap();
        assert!((s.space.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(
            parse_scenarios("scenario,probability,X1\na,0.4,1\nb,0.5,-1\n"),
            Err(CliError::BadProbability(_))
        ));
    }

    #[test]
    fn rejects_malformed_tables() {
        assert!(matches!(
            parse_scenarios("scenario,probability,X1,X2,X3\na,0.5,1,2,3\nb,0.5,1,2\n"),
            Err(CliError::RaggedRows { line: 3, .. })
        ));
        assert!(matches!(
            parse_scenarios("scenario,probability,X1\na,0.5,one\nb,0.5,1\n"),
            Err(CliError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_scenarios("scenario,prob,X1\na,1,1\n"),
            Err(CliError::Parse { line: 1, .. })
        ));
        assert!(matches!(parse_scenarios(""), Err(CliError::Parse { .. })));
    }

    #[test]
    fn direction_shapes() {
        let v = parse_direction("scenario,V1,V2\na,1,2\nb,3,4\n", 2, 2).unwrap();
        assert_eq!(v, vec![vec![1.0, 3.0], vec![2.0, 4.0]]);
        assert!(matches!(
            parse_direction("scenario,V1\na,1\nb,3\n", 2, 2),
            Err(CliError::ShapeMismatch(_))
        ));
        assert!(matches!(
            parse_direction("scenario,V1,V2\na,1,2\n", 2, 2),
            Err(CliError::ShapeMismatch(_))
        ));
    }
}
