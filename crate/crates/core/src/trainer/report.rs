use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Mode, ResultRow};
use crate::error::{Error, Result};

/// Writes rows as CSV with a header line.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    if rows.is_empty() {
        w.write_record([
            "task_id",
            "mode",
            "sources",
            "targets",
            "target_domain",
            "accuracy",
            "epochs_run",
            "wall_seconds",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::MissingFile(path.to_path_buf())
        }
        _ => Error::Csv(e),
    }
}

/// Reads and merges result files. A `(task_id, target_domain)` key seen
/// twice must carry the same result (timing aside); otherwise the inputs
/// conflict.
pub fn read_results(paths: &[impl AsRef<Path>]) -> Result<Vec<ResultRow>> {
    if paths.is_empty() {
        return Err(Error::Config("no result files given".into()));
    }
    let mut out: Vec<ResultRow> = Vec::new();
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    for p in paths {
        let path = p.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        for row in r.deserialize::<ResultRow>() {
            let row = row?;
            let key = (row.task_id.clone(), row.target_domain.clone());
            match seen.get(&key) {
                Some(&i) if out[i].same_result(&row) => {}
                Some(_) => {
                    return Err(Error::Config(format!(
                        "conflicting results for task '{}' on '{}' in {}",
                        key.0,
                        key.1,
                        path.display()
                    )))
                }
                None => {
                    seen.insert(key, out.len());
                    out.push(row);
                }
            }
        }
    }
    Ok(out)
}

struct IdParts<'a> {
    label: &'a str,
    seed: &'a str,
}

fn id_parts(task_id: &str) -> IdParts<'_> {
    let mut it = task_id.split(':');
    let label = it.next().unwrap_or(task_id);
    let _mode = it.next();
    IdParts {
        label,
        seed: it.next().unwrap_or(""),
    }
}

/// Keeps the best single-source accuracy per (task, seed, target) for ssmt
/// rows; other rows pass through unchanged.
pub fn collapse_ssmt(rows: &[ResultRow]) -> Vec<ResultRow> {
    let ssmt = Mode::Ssmt.as_str();
    let mut out: Vec<ResultRow> = Vec::new();
    let mut best: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for r in rows {
        if r.mode != ssmt {
            out.push(r.clone());
            continue;
        }
        let p = id_parts(&r.task_id);
        let key = (p.label.to_string(), p.seed.to_string(), r.target_domain.clone());
        match best.get(&key) {
            Some(&i) => {
                if r.accuracy > out[i].accuracy {
                    out[i] = r.clone();
                }
            }
            None => {
                best.insert(key, out.len());
                out.push(r.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridColumn {
    pub label: String,
    pub sources: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub mode: String,
    /// Seed-mean accuracy per column; `None` where the mode has no result.
    pub cells: Vec<Option<f64>>,
    pub average: f64,
}

/// Accuracy grid: one row per mode, one column per (task, target), plus the
/// row average.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridTable {
    pub columns: Vec<GridColumn>,
    pub rows: Vec<GridRow>,
}

impl GridTable {
    pub fn from_rows(rows: &[ResultRow]) -> Self {
        let rows = collapse_ssmt(rows);
        let mut columns: Vec<GridColumn> = Vec::new();
        let mut modes: Vec<String> = Vec::new();
        let mut sums: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for r in &rows {
            let label = id_parts(&r.task_id).label;
            let col = match columns
                .iter()
                .position(|c| c.label == label && c.target == r.target_domain)
            {
                Some(i) => i,
                None => {
                    columns.push(GridColumn {
                        label: label.to_string(),
                        sources: r.sources.clone(),
                        target: r.target_domain.clone(),
                    });
                    columns.len() - 1
                }
            };
            let m = match modes.iter().position(|m| *m == r.mode) {
                Some(i) => i,
                None => {
                    modes.push(r.mode.clone());
                    modes.len() - 1
                }
            };
            let e = sums.entry((m, col)).or_insert((0.0, 0));
            e.0 += r.accuracy;
            e.1 += 1;
        }
        let rows = modes
            .into_iter()
            .enumerate()
            .map(|(m, mode)| {
                let cells: Vec<Option<f64>> = (0..columns.len())
                    .map(|c| sums.get(&(m, c)).map(|&(s, n)| s / n as f64))
                    .collect();
                let present: Vec<f64> = cells.iter().flatten().copied().collect();
                let average = present.iter().sum::<f64>() / present.len() as f64;
                GridRow {
                    mode,
                    cells,
                    average,
                }
            })
            .collect();
        GridTable { columns, rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn column_name(c: &GridColumn) -> String {
        format!("{}:{}", c.label, c.target)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode");
        for c in &self.columns {
            let _ = write!(s, ",{}", Self::column_name(c));
        }
        s.push_str(",Average\n");
        for r in &self.rows {
            s.push_str(&r.mode);
            for v in &r.cells {
                match v {
                    Some(v) => {
                        let _ = write!(s, ",{v:.4}");
                    }
                    None => s.push(','),
                }
            }
            let _ = writeln!(s, ",{:.4}", r.average);
        }
        s
    }

    /// Table with source and target header rows, methods below, and an
    /// Average column.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| |");
        for c in &self.columns {
            let _ = write!(s, " {} |", c.label);
        }
        s.push_str(" |\n|---|");
        for _ in &self.columns {
            s.push_str("---|");
        }
        s.push_str("---|\n| Source Domain |");
        for c in &self.columns {
            let _ = write!(s, " {} |", c.sources);
        }
        s.push_str(" |\n| Target Domain |");
        for c in &self.columns {
            let _ = write!(s, " {} |", c.target);
        }
        s.push_str(" Average |\n");
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.mode);
            for v in &r.cells {
                match v {
                    Some(v) => {
                        let _ = write!(s, " {v:.4} |");
                    }
                    None => s.push_str(" - |"),
                }
            }
            let _ = writeln!(s, " {:.4} |", r.average);
        }
        s
    }
}
