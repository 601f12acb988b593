use std::path::Path;

use super::{read_file, write_file, IoError};

/// Parse a headerless rectangular grid of decimal numbers.
pub fn parse_csv_matrix(text: &[u8]) -> Result<Vec<Vec<f64>>, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text);
    let mut rows = Vec::new();
    let mut width = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let expected = *width.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(IoError::Ragged {
                row,
                got: rec.len(),
                expected,
            });
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(col, s)| {
                s.parse::<f64>().map_err(|_| IoError::Parse {
                    row,
                    col,
                    text: s.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(vals);
    }
    Ok(rows)
}

/// Shortest round-tripping decimal representation of every value.
pub fn format_csv_matrix(rows: &[Vec<f64>]) -> Result<Vec<u8>, IoError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.write_record(r.iter().map(|v| format!("{v:?}")))?;
    }
    w.into_inner().map_err(|e| IoError::Invalid(e.to_string()))
}

pub fn read_csv_matrix(path: &Path) -> Result<Vec<Vec<f64>>, IoError> {
    parse_csv_matrix(&read_file(path)?)
}

pub fn write_csv_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<(), IoError> {
    write_file(path, &format_csv_matrix(rows)?)
}
