//! Plain-text reports: a commented header, comma-separated rows, and a
//! `[summary]` block holding the column means.
//!
//! ```text
//! # pads-report v1
//! # topology = h36m-17
//! # task = denoise
//! # solver = dps
//! # seed = 0
//! # config.solver.rho = 0.003
//! # wall_clock_s = 12.5
//! id,mpjpe_before,mpjpe_after
//! 0,51.2,20.3
//! [summary]
//! n = 1
//! mpjpe_before = 51.2
//! mpjpe_after = 20.3
//! ```
//!
//! Rows never contain timing, so fixed-seed runs produce identical rows.
//! Numbers use the shortest representation that parses back exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

pub const REPORT_HEADER: &str = "# pads-report v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// Ordered `key = value` metadata (task, solver, seed, topology, config echo).
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<(u64, Vec<f64>)>,
    pub wall_clock_s: Option<f64>,
}

impl Report {
    pub fn new(meta: Vec<(String, String)>, columns: Vec<String>) -> Self {
        Self {
            meta,
            columns,
            rows: Vec::new(),
            wall_clock_s: None,
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, id: u64, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((id, values));
    }

    /// Column means, in column order.
    pub fn summary(&self) -> Vec<(String, f64)> {
        let n = self.rows.len() as f64;
        self.columns
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let mean = self.rows.iter().map(|(_, v)| v[c]).sum::<f64>() / n;
                (name.clone(), mean)
            })
            .collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|(_, v)| v[c]).collect())
    }

    pub fn summary_value(&self, name: &str) -> Option<f64> {
        self.summary().into_iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// The row block only: column line plus one line per sample.
    pub fn rows_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "id,{}", self.columns.join(","));
        for (id, vals) in &self.rows {
            let vals: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{id},{}", vals.join(","));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_HEADER}");
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# {k} = {v}");
        }
        if let Some(w) = self.wall_clock_s {
            let _ = writeln!(s, "# wall_clock_s = {w:.3}");
        }
        s.push_str(&self.rows_text());
        let _ = writeln!(s, "[summary]");
        let _ = writeln!(s, "n = {}", self.rows.len());
        for (k, v) in self.summary() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read report {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// Parses a report and checks the stored summary against the rows.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == REPORT_HEADER => {}
            _ => return Err("missing report header".into()),
        }
        let mut meta = Vec::new();
        let mut wall = None;
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        let mut summary = Vec::new();
        let mut in_summary = false;
        for (i, line) in lines {
            let n = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest.split_once('=').ok_or(format!("line {n}: bad metadata"))?;
                let (k, v) = (k.trim().to_string(), v.trim().to_string());
                if k == "wall_clock_s" {
                    wall = Some(v.parse::<f64>().map_err(|e| format!("line {n}: {e}"))?);
                } else {
                    meta.push((k, v));
                }
                continue;
            }
            if line == "[summary]" {
                in_summary = true;
                continue;
            }
            if in_summary {
                let (k, v) = line.split_once('=').ok_or(format!("line {n}: bad summary entry"))?;
                let v: f64 = v.trim().parse().map_err(|e| format!("line {n}: {e}"))?;
                summary.push((k.trim().to_string(), v));
                continue;
            }
            match &columns {
                None => {
                    let mut cols = line.split(',').map(str::to_string);
                    if cols.next().as_deref() != Some("id") {
                        return Err(format!("line {n}: expected column header starting with id"));
                    }
                    columns = Some(cols.collect());
                }
                Some(cols) => {
                    let mut f = line.split(',');
                    let id: u64 = f
                        .next()
                        .unwrap_or("")
                        .parse()
                        .map_err(|e| format!("line {n}: bad id: {e}"))?;
                    let vals: Vec<f64> = f
                        .map(|v| v.parse::<f64>().map_err(|e| format!("line {n}: {e}")))
                        .collect::<Result<_, _>>()?;
                    if vals.len() != cols.len() {
                        return Err(format!("line {n}: {} values for {} columns", vals.len(), cols.len()));
                    }
                    rows.push((id, vals));
                }
            }
        }
        let report = Self {
            meta,
            columns: columns.ok_or("report has no column header")?,
            rows,
            wall_clock_s: wall,
        };
        report.audit(&summary)?;
        Ok(report)
    }

    /// Stored aggregates must equal recomputation from the rows.
    pub fn audit(&self, stored: &[(String, f64)]) -> Result<(), String> {
        let mut expected = vec![("n".to_string(), self.rows.len() as f64)];
        expected.extend(self.summary());
        if stored.len() != expected.len() {
            return Err(format!("summary has {} entries, expected {}", stored.len(), expected.len()));
        }
        for ((k, v), (ek, ev)) in stored.iter().zip(&expected) {
            let same = if v.is_nan() { ev.is_nan() } else { (v - ev).abs() <= 1e-12 * ev.abs().max(1.0) };
            if k != ek || !same {
                return Err(format!("summary {k} = {v} does not match recomputed {ek} = {ev}"));
            }
        }
        Ok(())
    }
}

/// Side-by-side comparison of report summaries with deltas against the first.
pub struct Comparison {
    pub labels: Vec<String>,
    pub metrics: Vec<String>,
    /// `values[m][r]`.
    pub values: Vec<Vec<f64>>,
}

impl Comparison {
    pub fn build(reports: &[(String, Report)], only: &[String]) -> Result<Self, CliError> {
        let (_, first) = reports
            .first()
            .ok_or_else(|| CliError::Config("eval needs at least one report".into()))?;
        for (label, r) in reports {
            if r.meta("topology") != first.meta("topology") {
                return Err(CliError::Runtime(format!("{label}: topology differs from the first report")));
            }
            if r.columns != first.columns {
                return Err(CliError::Runtime(format!(
                    "{label}: columns {:?} do not match {:?}",
                    r.columns, first.columns
                )));
            }
        }
        let mut metrics: Vec<String> = vec!["n".into()];
        metrics.extend(first.columns.iter().cloned());
        if !only.is_empty() {
            for m in only {
                if !metrics.contains(m) {
                    return Err(CliError::Config(format!("eval.metrics: unknown metric {m:?}")));
                }
            }
            metrics.retain(|m| only.contains(m));
        }
        let values = metrics
            .iter()
            .map(|m| {
                reports
                    .iter()
                    .map(|(_, r)| {
                        if m == "n" {
                            r.rows.len() as f64
                        } else {
                            r.summary_value(m).expect("shared columns")
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            labels: reports.iter().map(|(l, _)| l.clone()).collect(),
            metrics,
            values,
        })
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["metric".to_string()];
        h.extend(self.labels.iter().cloned());
        for l in &self.labels[1..] {
            h.push(format!("delta({l})"));
        }
        h
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.metrics
            .iter()
            .zip(&self.values)
            .map(|(m, vals)| {
                let mut row = vec![m.clone()];
                row.extend(vals.iter().map(|v| format!("{v:.4}")));
                row.extend(vals[1..].iter().map(|v| format!("{:+.4}", v - vals[0])));
                row
            })
            .collect()
    }

    pub fn to_aligned(&self) -> String {
        let header = self.header();
        let cells = self.cells();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let fmt_row = |r: &[String]| {
            r.iter()
                .enumerate()
                .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut s = fmt_row(&header);
        s.push('\n');
        for r in &cells {
            s.push_str(&fmt_row(r));
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",");
        s.push('\n');
        for r in self.cells() {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let mut r = Report::new(
            vec![("topology".into(), "h36m-17".into()), ("task".into(), "denoise".into())],
            vec!["a".into(), "b".into()],
        );
        r.push(0, vec![1.0, 0.1]);
        r.push(1, vec![2.5, 1.0 / 3.0]);
        r.wall_clock_s = Some(1.25);
        r
    }

    #[test]
    fn round_trip_and_audit() {
        let r = sample();
        let back = Report::parse(&r.to_text()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.summary_value("a"), Some(1.75));
    }

    #[test]
    fn tampered_summary_fails_audit() {
        let text = sample().to_text().replace("a = 1.75", "a = 1.8");
        assert!(Report::parse(&text).unwrap_err().contains("does not match"));
    }

    #[test]
    fn comparison_deltas_and_schema_check() {
        let a = sample();
        let mut b = sample();
        b.rows[0].1[0] = 3.0;
        let c = Comparison::build(&[("a".into(), a.clone()), ("b".into(), b)], &[]).unwrap();
        let csv = c.to_csv();
        assert!(csv.starts_with("metric,a,b,delta(b)\n"));
        assert!(csv.contains("a,1.7500,2.7500,+1.0000"));
        assert!(c.to_aligned().lines().count() == 4);

        let single = Comparison::build(&[("a".into(), a.clone())], &[]).unwrap();
        assert_eq!(single.values[1], vec![1.75]);

        let mut other = sample();
        other.columns[1] = "z".into();
        assert!(Comparison::build(&[("a".into(), a), ("o".into(), other)], &[]).is_err());
    }
}
