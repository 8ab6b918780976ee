//! Result tables in the column order Model, Param, Dice(DSC), HD95, IoU, Acc,
//! Pre, Sen, Spe, with the best value of each metric column marked.

use std::path::Path;

use anyhow::{bail, Context, Result};

use seglab_core::metrics::MeanMetrics;

pub const COLUMNS: [&str; 9] = ["Model", "Param", "Dice(DSC)", "HD95", "IoU", "Acc", "Pre", "Sen", "Spe"];
/// Index of the first metric column in [`COLUMNS`].
pub const FIRST_METRIC: usize = 2;
const BEST_COLUMN: &str = "best";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Better {
    Higher,
    Lower,
}

/// Direction of improvement for each metric column (HD95 is a distance).
pub fn direction(column: &str) -> Better {
    if column == "HD95" {
        Better::Lower
    } else {
        Better::Higher
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub model: String,
    /// Formatted parameter count, e.g. `31.10M`.
    pub param: String,
    /// Metric values as emitted (rounded), in column order.
    pub values: [f64; 7],
}

fn round(v: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (v * s).round() / s
}

fn digits(column: usize) -> i32 {
    if COLUMNS[column] == "HD95" {
        3
    } else {
        4
    }
}

pub fn format_params(count: usize) -> String {
    format!("{:.2}M", count as f64 / 1e6)
}

impl TableRow {
    pub fn new(model: impl Into<String>, params: usize, m: &MeanMetrics) -> Self {
        let raw = [m.dice, m.hd95, m.iou, m.accuracy, m.precision, m.sensitivity, m.specificity];
        Self {
            model: model.into(),
            param: format_params(params),
            values: std::array::from_fn(|i| round(raw[i], digits(FIRST_METRIC + i))),
        }
    }

    fn cell(&self, column: usize) -> String {
        match column {
            0 => self.model.clone(),
            1 => self.param.clone(),
            c => {
                let d = digits(c) as usize;
                format!("{:.*}", d, self.values[c - FIRST_METRIC])
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<TableRow>,
}

impl ResultTable {
    /// Rows holding the best value of metric `column` (ties all marked).
    pub fn best_rows(&self, column: usize) -> Vec<usize> {
        let k = column - FIRST_METRIC;
        let vals = self.rows.iter().map(|r| r.values[k]).filter(|v| !v.is_nan());
        let best = match direction(COLUMNS[column]) {
            Better::Higher => vals.fold(f64::NEG_INFINITY, f64::max),
            Better::Lower => vals.fold(f64::INFINITY, f64::min),
        };
        (0..self.rows.len()).filter(|&i| self.rows[i].values[k] == best).collect()
    }

    fn best_columns(&self, row: usize) -> Vec<&'static str> {
        (FIRST_METRIC..COLUMNS.len())
            .filter(|&c| self.best_rows(c).contains(&row))
            .map(|c| COLUMNS[c])
            .collect()
    }

    /// The nine table columns followed by `best`, a `;`-separated list of the
    /// columns in which the row is best.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = COLUMNS.to_vec();
        header.push(BEST_COLUMN);
        w.write_record(&header)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec: Vec<String> = (0..COLUMNS.len()).map(|c| r.cell(c)).collect();
            rec.push(self.best_columns(i).join(";"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`write_csv`](Self::write_csv); returns the
    /// rows and the recorded best-column markers.
    pub fn read_csv(path: &Path) -> Result<(Self, Vec<Vec<String>>)> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut expected: Vec<&str> = COLUMNS.to_vec();
        expected.push(BEST_COLUMN);
        if header != expected {
            bail!("unexpected table header {header:?}");
        }
        let mut rows = Vec::new();
        let mut marks = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let values = std::array::from_fn(|k| rec[FIRST_METRIC + k].parse::<f64>().unwrap_or(f64::NAN));
            rows.push(TableRow {
                model: rec[0].to_string(),
                param: rec[1].to_string(),
                values,
            });
            marks.push(
                rec[COLUMNS.len()]
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect(),
            );
        }
        Ok((Self { rows }, marks))
    }

    /// Fixed-width plaintext; best metric values carry a trailing `*`.
    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = vec![COLUMNS.iter().map(|s| s.to_string()).collect()];
        for (i, r) in self.rows.iter().enumerate() {
            let best = self.best_columns(i);
            cells.push(
                (0..COLUMNS.len())
                    .map(|c| {
                        let mut s = r.cell(c);
                        if c >= FIRST_METRIC && best.contains(&COLUMNS[c]) {
                            s.push('*');
                        }
                        s
                    })
                    .collect(),
            );
        }
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (n, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    if c == 0 {
                        format!("{s:<w$}", w = widths[c])
                    } else {
                        format!("{s:>w$}", w = widths[c])
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if n == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out.push_str("* best value in column (HD95: lowest; others: highest)\n");
        out
    }
}
