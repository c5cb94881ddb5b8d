//! Comparison of classification reports as a model × metric table.

use std::path::PathBuf;

use dapt_core::metrics::{EvalReport, TaskKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const METRIC_HEADERS: [&str; 4] = ["Precision", "Recall", "F1-score", "Accuracy"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl ComparisonRow {
    pub fn metrics(&self) -> [f64; 4] {
        [self.precision, self.recall, self.f1, self.accuracy]
    }
}

/// Loads and validates each report; all must be classification reports.
pub fn rows_from_reports(reports: &[(String, PathBuf)]) -> CliResult<Vec<ComparisonRow>> {
    reports
        .iter()
        .map(|(name, path)| {
            let r = EvalReport::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            r.validate().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            if r.task != TaskKind::Classify {
                return Err(CliError::Usage(format!(
                    "{}: expected a classification report, found task {:?}",
                    path.display(),
                    r.task
                )));
            }
            let get = |v: Option<f64>| v.expect("validated classification report");
            Ok(ComparisonRow {
                model: name.clone(),
                precision: get(r.precision),
                recall: get(r.recall),
                f1: get(r.f1),
                accuracy: get(r.accuracy),
            })
        })
        .collect()
}

/// Markdown table with four decimals. Every cell equal to its column's
/// maximum is bolded, so ties bold every tied row.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let max: Vec<f64> = (0..4)
        .map(|c| rows.iter().map(|r| r.metrics()[c]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut cells: Vec<Vec<String>> = vec![std::iter::once("Model").chain(METRIC_HEADERS).map(str::to_string).collect()];
    for r in rows {
        let mut line = vec![r.model.clone()];
        for (c, v) in r.metrics().into_iter().enumerate() {
            line.push(if v == max[c] { format!("**{v:.4}**") } else { format!("{v:.4}") });
        }
        cells.push(line);
    }
    let widths: Vec<usize> =
        (0..5).map(|c| cells.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
    let fmt_line = |l: &[String]| {
        let padded: Vec<String> = l.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = fmt_line(&cells[0]);
    out.push_str(&format!("|{}|\n", widths.iter().map(|&w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")));
    for l in &cells[1..] {
        out.push_str(&fmt_line(l));
    }
    out
}

/// Values are written in shortest round-trip form, so parsing recovers them exactly.
pub fn to_csv(rows: &[ComparisonRow]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "precision", "recall", "f1", "accuracy"])?;
    for r in rows {
        let m = r.metrics().map(|v| v.to_string());
        w.write_record([r.model.as_str(), &m[0], &m[1], &m[2], &m[3]])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_csv(text: &str) -> CliResult<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<ComparisonRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn row(model: &str, m: [f64; 4]) -> ComparisonRow {
        ComparisonRow { model: model.into(), precision: m[0], recall: m[1], f1: m[2], accuracy: m[3] }
    }

    #[test]
    fn two_reports_make_two_rows_with_ties_bolded() {
        let t = render_table(&[row("a", [0.5, 0.9, 0.7, 0.8]), row("b", [0.6, 0.9, 0.6, 0.8])]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("Precision") && lines[0].contains("F1-score"));
        assert_eq!(lines[2].matches("**").count(), 2 * 3);
        assert_eq!(lines[3].matches("**").count(), 2 * 3);
        assert!(lines[3].contains("**0.6000**") && lines[2].contains("**0.7000**"));
    }

    proptest! {
        #[test]
        fn csv_round_trips(vals in proptest::collection::vec(proptest::array::uniform4(0.0f64..=1.0), 2..6)) {
            let rows: Vec<_> = vals.iter().enumerate().map(|(i, m)| row(&format!("m,{i}"), *m)).collect();
            prop_assert_eq!(parse_csv(&to_csv(&rows).unwrap()).unwrap(), rows);
        }
    }
}
