use std::fmt::Write as _;
use std::path::Path;

use super::run::{MethodConfig, RunRecord, RunStatus};
use crate::error::{Error, Result};

/// One row of a results table: final errors per task and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub method: String,
    pub stream: String,
    pub seed: u64,
    /// `(τ, λ, τ₂)` for AOS rows.
    pub hyper: Option<(f64, f64, f64)>,
    pub memory: Option<usize>,
    pub status: String,
    /// Errors in column order; `None` where a task was never evaluated.
    pub errors: Vec<Option<f64>>,
    pub awer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    /// Task names in column order.
    pub tasks: Vec<String>,
    pub rows: Vec<SummaryRow>,
    /// Index of the row with the lowest AWER, ties to the first.
    pub best: Option<usize>,
}

fn row_for(record: &RunRecord) -> SummaryRow {
    let method = &record.config.method;
    SummaryRow {
        label: method.label(),
        method: method.method().into(),
        stream: record.config.stream.as_str().into(),
        seed: record.config.seed,
        hyper: match method {
            MethodConfig::Aos(a) => Some((a.tau, a.lambda, a.tau2)),
            _ => None,
        },
        memory: method.memory(),
        status: match &record.status {
            RunStatus::Completed => "completed".into(),
            RunStatus::Failed { step, .. } => format!("failed@{step}"),
        },
        errors: record.final_row(),
        awer: record.final_awer(),
    }
}

fn initial_row(record: &RunRecord) -> SummaryRow {
    let errors = record
        .tasks
        .iter()
        .map(|t| record.initial.per_task_error.get(&t.task_id).copied())
        .collect::<Vec<_>>();
    SummaryRow {
        label: "initial".into(),
        method: "initial".into(),
        stream: record.config.stream.as_str().into(),
        seed: record.config.seed,
        hyper: None,
        memory: None,
        status: "completed".into(),
        awer: Some(crate::metrics::mean(errors.iter().flatten().copied())),
        errors,
    }
}

/// One row per record, preceded by one initial-model row per distinct seed.
/// Every record must come from the same stream.
pub fn report(records: &[RunRecord]) -> Result<Table> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidConfig("nothing to report".into()))?;
    for r in records {
        if r.config.stream != first.config.stream || r.tasks != first.tasks {
            return Err(Error::InvalidConfig(format!(
                "records mix streams ({} and {})",
                first.config.stream, r.config.stream
            )));
        }
    }
    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    for r in records {
        if !seeds.contains(&r.config.seed) {
            seeds.push(r.config.seed);
            rows.push(initial_row(r));
        }
    }
    let first_method = rows.len();
    rows.extend(records.iter().map(row_for));
    let best = (first_method..rows.len())
        .filter(|&i| rows[i].awer.is_some())
        .min_by(|&a, &b| rows[a].awer.partial_cmp(&rows[b].awer).expect("finite AWER"));
    Ok(Table {
        tasks: first.tasks.iter().map(|t| t.name.clone()).collect(),
        rows,
        best,
    })
}

fn header(tasks: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["label", "method", "stream", "seed", "tau", "lambda", "tau2", "memory", "status"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(tasks.iter().cloned());
    h.push("awer".into());
    h
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Table {
    /// Writes the table as CSV with error rates as exact decimal fractions.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header(&self.tasks))?;
        for r in &self.rows {
            let mut rec = vec![
                r.label.clone(),
                r.method.clone(),
                r.stream.clone(),
                r.seed.to_string(),
                opt(r.hyper.map(|h| h.0)),
                opt(r.hyper.map(|h| h.1)),
                opt(r.hyper.map(|h| h.2)),
                opt(r.memory),
                r.status.clone(),
            ];
            rec.extend(r.errors.iter().map(|e| opt(*e)));
            rec.push(opt(r.awer));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Table> {
        let mut rd = csv::Reader::from_path(path)?;
        let head: Vec<String> = rd.headers()?.iter().map(String::from).collect();
        if head.len() < 10 || head[..9] != header(&[])[..9] || head.last().map(String::as_str) != Some("awer") {
            return Err(Error::Format("not a summary table".into()));
        }
        let tasks = head[9..head.len() - 1].to_vec();
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Format(format!("bad number `{s}`")))
            }
        };
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let f: Vec<&str> = rec.iter().collect();
            let hyper = match (num(f[4])?, num(f[5])?, num(f[6])?) {
                (Some(a), Some(b), Some(c)) => Some((a, b, c)),
                _ => None,
            };
            rows.push(SummaryRow {
                label: f[0].into(),
                method: f[1].into(),
                stream: f[2].into(),
                seed: f[3].parse().map_err(|_| Error::Format(format!("bad seed `{}`", f[3])))?,
                hyper,
                memory: if f[7].is_empty() {
                    None
                } else {
                    Some(f[7].parse().map_err(|_| Error::Format(format!("bad memory `{}`", f[7])))?)
                },
                status: f[8].into(),
                errors: f[9..f.len() - 1].iter().map(|s| num(s)).collect::<Result<_>>()?,
                awer: num(f[f.len() - 1])?,
            });
        }
        let best = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.method != "initial" && r.awer.is_some())
            .min_by(|a, b| a.1.awer.partial_cmp(&b.1.awer).expect("finite AWER"))
            .map(|(i, _)| i);
        Ok(Table { tasks, rows, best })
    }

    /// Aligned plain text with errors in percent; the best AWER is marked `*`.
    pub fn render_text(&self) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into());
        let mut head = vec!["method".to_string(), "seed".into(), "(tau,lambda,tau2)".into(), "M".into()];
        head.extend(self.tasks.iter().cloned());
        head.push("AWER".into());
        let mut cells = vec![head];
        for (i, r) in self.rows.iter().enumerate() {
            let mut line = vec![
                r.label.clone(),
                r.seed.to_string(),
                r.hyper.map(|(a, b, c)| format!("({a},{b},{c})")).unwrap_or_else(|| "-".into()),
                opt(r.memory),
            ];
            line.extend(r.errors.iter().map(|e| pct(*e)));
            let mark = if self.best == Some(i) { "*" } else { "" };
            line.push(format!("{}{mark}", pct(r.awer)));
            if !r.status.starts_with("completed") {
                line[0] = format!("{} [{}]", r.label, r.status);
            }
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (n, line) in cells.iter().enumerate() {
            for (c, cell) in line.iter().enumerate() {
                if c == 0 {
                    let _ = write!(out, "{cell:<w$}", w = widths[c]);
                } else {
                    let _ = write!(out, "  {cell:>w$}", w = widths[c]);
                }
            }
            out.push('\n');
            if n == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}

/// The single-run summary written next to each run's metrics.
pub fn write_summary_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    report(records)?.write_csv(path)
}
