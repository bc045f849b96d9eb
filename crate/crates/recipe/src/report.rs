//! Report persistence and aligned-text tables.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::run::EvalReport;
use crate::RecipeError;

/// Appends one JSON line per report.
pub fn append_reports(path: &Path, reports: &[EvalReport]) -> Result<(), RecipeError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in reports {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>, RecipeError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| {
            RecipeError::Config(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(r);
    }
    Ok(out)
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub token_accuracy_mean: f64,
    pub final_loss_mean: f64,
}

pub fn aggregate(label: &str, reports: &[EvalReport]) -> GridRow {
    let acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let tok: Vec<f64> = reports.iter().map(|r| r.caption_token_accuracy).collect();
    let loss: Vec<f64> = reports.iter().map(|r| r.final_loss).collect();
    let (accuracy_mean, accuracy_sd) = mean_sd(&acc);
    GridRow {
        label: label.to_string(),
        seeds: reports.len(),
        accuracy_mean,
        accuracy_sd,
        token_accuracy_mean: mean_sd(&tok).0,
        final_loss_mean: mean_sd(&loss).0,
    }
}

/// Mean ± sd over seeds, one row per grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    /// Names the table of the original study this one follows.
    pub mirrors: String,
    pub axis: String,
    pub suite: String,
    pub rows: Vec<GridRow>,
}

impl GridTable {
    pub fn render(&self) -> String {
        let header = ["value", "seeds", "accuracy (%)", "token acc (%)", "final loss"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    r.seeds.to_string(),
                    format!("{:.1} ± {:.1}", 100.0 * r.accuracy_mean, 100.0 * r.accuracy_sd),
                    format!("{:.1}", 100.0 * r.token_accuracy_mean),
                    format!("{:.3}", r.final_loss_mean),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cols: &[String]| {
            cols.iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = String::new();
        let _ = writeln!(out, "# mirrors: {}", self.mirrors);
        let _ = writeln!(out, "# axis: {}  suite: {}", self.axis, self.suite);
        let head: Vec<String> = header.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "{}", line(&head));
        let _ = writeln!(out, "{}", widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
        for row in &cells {
            let _ = writeln!(out, "{}", line(row));
        }
        out
    }
}

/// Groups reports by run name, keeping first-seen order.
pub fn summarize(reports: &[EvalReport], mirrors: &str) -> GridTable {
    let mut names: Vec<&str> = Vec::new();
    for r in reports {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    let rows = names
        .iter()
        .map(|n| {
            let group: Vec<EvalReport> = reports.iter().filter(|r| r.name == *n).cloned().collect();
            aggregate(n, &group)
        })
        .collect();
    GridTable {
        mirrors: mirrors.to_string(),
        axis: "name".into(),
        suite: reports.first().map(|r| r.suite.clone()).unwrap_or_default(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_standard_deviation() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.290_994_448_735_805_6).abs() < 1e-12);
        assert_eq!(mean_sd(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn table_names_its_source() {
        let t = GridTable {
            mirrors: "Table 7, Table 8".into(),
            axis: "B".into(),
            suite: "long_clips".into(),
            rows: vec![GridRow {
                label: "0".into(),
                seeds: 2,
                accuracy_mean: 0.5,
                accuracy_sd: 0.01,
                token_accuracy_mean: 0.6,
                final_loss_mean: 0.2,
            }],
        };
        let s = t.render();
        assert!(s.starts_with("# mirrors: Table 7, Table 8\n"));
        assert!(s.contains("50.0 ± 1.0"));
    }
}
