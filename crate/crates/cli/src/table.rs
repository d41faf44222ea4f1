//! CSV ingestion and tidy CSV emission.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use augcal::Dataset;

use crate::CliError;

/// Covariates plus an outcome column read from a CSV file.
#[derive(Debug, Clone)]
pub struct InputTable {
    pub names: Vec<String>,
    pub covariates: DMatrix<f64>,
    pub outcome: Vec<Option<f64>>,
}

impl InputTable {
    pub fn dataset(&self) -> Result<Dataset, CliError> {
        Dataset::from_outcomes(self.covariates.clone(), self.outcome.clone())
            .and_then(|d| d.with_names(self.names.clone()))
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

/// Reads `outcome` and the listed covariates (all other columns when `None`).
pub fn read_table(path: &Path, outcome: &str, covariates: Option<&[String]>) -> Result<InputTable, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("opening {}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Io(format!("reading header of {}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("column `{name}` not found in {}", path.display())))
    };
    let y_col = find(outcome)?;
    let names: Vec<String> = match covariates {
        Some(c) => c.to_vec(),
        None => headers.iter().filter(|h| h.as_str() != outcome).cloned().collect(),
    };
    if names.is_empty() {
        return Err(CliError::Config("no covariate columns".into()));
    }
    let x_cols: Vec<usize> = names.iter().map(|n| find(n)).collect::<Result<_, _>>()?;

    let mut values = Vec::new();
    let mut outcome_values = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| CliError::Io(format!("reading {} row {row}: {e}", path.display())))?;
        for (&j, name) in x_cols.iter().zip(&names) {
            let cell = record.get(j).unwrap_or("");
            if is_missing(cell) {
                return Err(CliError::Config(format!("missing covariate value at row {row}, column `{name}`")));
            }
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("non-numeric covariate `{cell}` at row {row}, column `{name}`")))?;
            values.push(v);
        }
        let cell = record.get(y_col).unwrap_or("");
        outcome_values.push(if is_missing(cell) {
            None
        } else {
            Some(
                cell.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("non-numeric outcome `{cell}` at row {row}, column `{outcome}`")))?,
            )
        });
    }
    if outcome_values.is_empty() {
        return Err(CliError::Config(format!("{} has no data rows", path.display())));
    }
    let covariates = DMatrix::from_row_slice(outcome_values.len(), names.len(), &values);
    Ok(InputTable {
        names,
        covariates,
        outcome: outcome_values,
    })
}

/// Shortest round-trip decimal, `NA` for missing or non-finite values.
pub fn fmt_num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => "NA".to_string(),
    }
}

/// Files written by a command, deleted again if the command fails.
#[derive(Debug, Default)]
pub struct OutputSet {
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputSet {
    pub fn write(&mut self, path: &Path, contents: &str) -> Result<(), CliError> {
        self.written.push(path.to_path_buf());
        let mut f = File::create(path).map_err(|e| CliError::Io(format!("creating {}: {e}", path.display())))?;
        f.write_all(contents.as_bytes())
            .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
    }

    pub fn write_csv(&mut self, path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let io = |e: csv::Error| CliError::Io(format!("formatting {}: {e}", path.display()));
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(format!("formatting {}: {e}", path.display())))?;
        self.write(path, &String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

/// `path` with `.meta` appended to its file name.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}
