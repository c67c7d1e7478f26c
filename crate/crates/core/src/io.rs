//! CSV persistence for labeled matrices, factor weights and dated series.

use std::path::Path;

use nalgebra::DMatrix;

use crate::data::{fmt_value, write_file};
use crate::error::{Error, Result};
use crate::linfactor::LinearFactorModel;

/// Matrix with a header row (`corner,<col labels>`) and a label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub corner: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn write_labeled_matrix(
    path: &Path,
    corner: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &DMatrix<f64>,
    precision: Option<usize>,
) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 12);
    out.push_str(corner);
    for c in col_labels {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (r, label) in row_labels.iter().enumerate() {
        out.push_str(label);
        for c in 0..values.ncols() {
            out.push(',');
            out.push_str(&fmt_value(values[(r, c)], precision));
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_labeled_matrix(path: &Path) -> Result<LabeledMatrix> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::parse(path.display().to_string(), "empty header"));
    }
    let corner = headers[0].to_owned();
    let col_labels: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let mut row_labels = Vec::new();
    let mut data = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != col_labels.len() + 1 {
            return Err(Error::parse(
                format!("{}:{}", path.display(), row + 2),
                "wrong number of fields",
            ));
        }
        row_labels.push(rec[0].to_owned());
        for f in rec.iter().skip(1) {
            data.push(f.parse::<f64>().map_err(|_| {
                Error::parse(
                    format!("{}:{}", path.display(), row + 2),
                    format!("`{f}` is not a number"),
                )
            })?);
        }
    }
    let values = DMatrix::from_row_slice(row_labels.len(), col_labels.len(), &data);
    Ok(LabeledMatrix {
        corner,
        row_labels,
        col_labels,
        values,
    })
}

/// Writes weights with one row per factor and a header of asset ids.
pub fn write_weights(
    path: &Path,
    model: &LinearFactorModel,
    asset_ids: &[String],
    precision: Option<usize>,
) -> Result<()> {
    let rows: Vec<String> = (0..model.n_factors()).map(|k| format!("f{}", k + 1)).collect();
    write_labeled_matrix(path, "factor", &rows, asset_ids, model.weights(), precision)
}

/// Reads weights written by [`write_weights`]; returns the model and asset ids.
pub fn read_weights(path: &Path) -> Result<(LinearFactorModel, Vec<String>)> {
    let m = read_labeled_matrix(path)?;
    Ok((LinearFactorModel::new(m.values)?, m.col_labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.csv");
        let model =
            LinearFactorModel::new(DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, -0.4, 0.5, 1.0 / 3.0]))
                .unwrap();
        let ids: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        write_weights(&p, &model, &ids, None).unwrap();
        let (back, back_ids) = read_weights(&p).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_ids, ids);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("factor,A,B,C\nf1,"));
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        assert!(matches!(
            read_labeled_matrix(Path::new("/nonexistent/x.csv")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
