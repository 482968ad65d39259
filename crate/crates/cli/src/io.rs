use std::path::Path;

use nalgebra::DMatrix;
use scaledfx::model::Dataset;

use crate::{CliError, CliResult};

fn parse_cell(cell: &str, row: usize, column: &str) -> CliResult<f64> {
    // str::parse is locale independent and accepts only `.` as decimal mark
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(CliError::Data(format!("row {row}, column `{column}`: cannot parse `{cell}` as a finite number"))),
    }
}

/// Reads a headered numeric CSV. Columns are addressed by name: the treatment
/// and outcome columns are taken out and every other column becomes a
/// covariate, in file order. Rows in messages count the header as row 1.
pub fn read_csv(path: &Path, treatment: &str, outcomes: &[String]) -> CliResult<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("column `{name}` not found in {}", path.display())))
    };
    let t_idx = find(treatment)?;
    let y_idx = outcomes.iter().map(|o| find(o)).collect::<CliResult<Vec<_>>>()?;
    if y_idx.contains(&t_idx) {
        return Err(CliError::Data(format!("`{treatment}` is both treatment and outcome")));
    }
    let x_idx: Vec<usize> = (0..header.len()).filter(|j| *j != t_idx && !y_idx.contains(j)).collect();

    let mut x = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| CliError::Data(format!("{}: row {row}: {e}", path.display())))?;
        if record.len() != header.len() {
            return Err(CliError::Data(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                header.len()
            )));
        }
        for &j in &x_idx {
            x.push(parse_cell(&record[j], row, &header[j])?);
        }
        a.push(parse_cell(&record[t_idx], row, &header[t_idx])?);
        for &j in &y_idx {
            y.push(parse_cell(&record[j], row, &header[j])?);
        }
    }
    let n = a.len();
    let covariates = DMatrix::from_row_slice(n, x_idx.len(), &x);
    let outcome_matrix = DMatrix::from_row_slice(n, y_idx.len(), &y);
    let names = x_idx.iter().map(|&j| header[j].clone()).collect();
    Ok(Dataset::new(covariates, names, a, outcome_matrix, outcomes.to_vec())?)
}

/// Writes covariates, then the treatment column, then outcomes. Values use
/// the shortest representation that parses back to the same bits.
pub fn write_csv(path: &Path, dataset: &Dataset, treatment: &str) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let io_err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut header: Vec<&str> = dataset.covariate_names().iter().map(String::as_str).collect();
    header.push(treatment);
    header.extend(dataset.outcome_names().iter().map(String::as_str));
    writer.write_record(&header).map_err(io_err)?;
    let (x, a, y) = (dataset.covariates(), dataset.treatment(), dataset.outcomes());
    let mut fields = Vec::with_capacity(header.len());
    for i in 0..dataset.n() {
        fields.clear();
        fields.extend((0..x.ncols()).map(|j| format!("{}", x[(i, j)])));
        fields.push(a[i].to_string());
        fields.extend((0..y.ncols()).map(|j| format!("{}", y[(i, j)])));
        writer.write_record(&fields).map_err(io_err)?;
    }
    writer.flush().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Weights table rows (outcome name, stratum value, weight). Accepts a CSV
/// file with columns `outcome,stratum,weight`, or inline
/// `outcome:stratum=weight` entries separated by `;` or `,`.
pub fn read_weights(spec: &str) -> CliResult<Vec<(String, f64, f64)>> {
    let path = Path::new(spec);
    if path.is_file() {
        let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{spec}: {e}")))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::Data(format!("{spec}: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Data(format!("weights file {spec} lacks a `{name}` column")))
        };
        let (o, s, w) = (col("outcome")?, col("stratum")?, col("weight")?);
        let mut rows = Vec::new();
        for (r, record) in reader.records().enumerate() {
            let row = r + 2;
            let record = record.map_err(|e| CliError::Data(format!("{spec}: row {row}: {e}")))?;
            rows.push((
                record[o].trim().to_string(),
                parse_cell(&record[s], row, "stratum")?,
                parse_cell(&record[w], row, "weight")?,
            ));
        }
        return Ok(rows);
    }
    spec.split([';', ','])
        .filter(|e| !e.trim().is_empty())
        .map(|entry| {
            let bad = || CliError::Data(format!("weight entry `{entry}` is not outcome:stratum=weight"));
            let (lhs, w) = entry.split_once('=').ok_or_else(bad)?;
            let (o, s) = lhs.rsplit_once(':').ok_or_else(bad)?;
            let s = s.trim().parse::<f64>().map_err(|_| bad())?;
            let w = w.trim().parse::<f64>().map_err(|_| bad())?;
            Ok((o.trim().to_string(), s, w))
        })
        .collect()
}
