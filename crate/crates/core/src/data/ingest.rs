//! Long-format CSV (`date,row,col,variable,value`) to dense base cubes and
//! back.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::features::FeatureCube;
use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 5] = ["date", "row", "col", "variable", "value"];

pub fn ingest_csv(manifest: &DatasetManifest, data_path: &Path) -> Result<FeatureCube> {
    let file = std::fs::File::open(data_path)?;
    ingest_reader(manifest, file, data_path)
}

/// Reads a long-format CSV into a cube whose channels are the manifest's
/// variables in manifest order. Every (date, cell, variable) the manifest
/// implies must appear exactly once.
pub fn ingest_reader(manifest: &DatasetManifest, reader: impl Read, origin: &Path) -> Result<FeatureCube> {
    manifest.validate()?;
    let dates = manifest.dates();
    let date_index: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let (h, w, f) = (manifest.grid_rows, manifest.grid_cols, manifest.variables.len());
    let n = dates.len() * h * w * f;
    let mut data = vec![0.0; n];
    let mut seen = vec![false; n];

    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().map(str::trim).ne(CSV_HEADER) {
        return Err(parse_err(1, format!("expected header `{}`", CSV_HEADER.join(","))));
    }
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != 5 {
            return Err(parse_err(line, format!("expected 5 fields, got {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("date `{}`: {e}", &rec[0])))?;
        let row: usize = rec[1].trim().parse().map_err(|e| parse_err(line, format!("row: {e}")))?;
        let col: usize = rec[2].trim().parse().map_err(|e| parse_err(line, format!("col: {e}")))?;
        let variable = rec[3].trim();
        let value: f64 = rec[4].trim().parse().map_err(|e| parse_err(line, format!("value: {e}")))?;
        let var = manifest
            .variable_index(variable)
            .ok_or_else(|| Error::UnknownVariable(variable.to_string()))?;
        let day = *date_index
            .get(&date)
            .ok_or_else(|| parse_err(line, format!("date {date} outside the manifest's coverage")))?;
        if row >= h || col >= w {
            return Err(parse_err(line, format!("cell ({row}, {col}) outside {h}×{w} grid")));
        }
        if !value.is_finite() {
            return Err(parse_err(line, format!("non-finite value `{}`", &rec[4])));
        }
        let idx = ((day * h + row) * w + col) * f + var;
        if seen[idx] {
            return Err(Error::DuplicateCell {
                date: date.to_string(),
                row,
                col,
                variable: variable.to_string(),
            });
        }
        seen[idx] = true;
        data[idx] = value;
    }
    if let Some(idx) = seen.iter().position(|s| !s) {
        let var = idx % f;
        let col = (idx / f) % w;
        let row = (idx / (f * w)) % h;
        let day = idx / (f * w * h);
        return Err(Error::MissingCell {
            date: dates[day].to_string(),
            row,
            col,
            variable: manifest.variables[var].clone(),
        });
    }
    FeatureCube::new(dates, h, w, manifest.variables.clone(), data)
}

/// Writes a cube in the long format accepted by [`ingest_csv`]. Values use
/// the shortest representation that parses back to the same `f64`.
pub fn export_csv(cube: &FeatureCube, writer: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    wtr.write_record(CSV_HEADER).map_err(io)?;
    for d in 0..cube.num_days() {
        let date = cube.dates[d].to_string();
        for r in 0..cube.height {
            for c in 0..cube.width {
                for (v, name) in cube.features.iter().enumerate() {
                    let value = cube.get(d, r, c, v);
                    wtr.write_record([
                        date.as_str(),
                        &r.to_string(),
                        &c.to_string(),
                        name,
                        &value.to_string(),
                    ])
                    .map_err(io)?;
                }
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Provenance;

    fn manifest(rows: usize, cols: usize, vars: &[&str], days: i64) -> DatasetManifest {
        let start = NaiveDate::from_ymd_opt(2010, 6, 1).unwrap();
        DatasetManifest {
            grid_rows: rows,
            grid_cols: cols,
            variables: vars.iter().map(|s| s.to_string()).collect(),
            date_start: start,
            date_end: start + chrono::Duration::days(days - 1),
            city: "test".into(),
            provenance: Provenance::Ingested,
            months: vec![],
            precip_variable: "tp".into(),
        }
    }

    #[test]
    fn two_day_single_cell() {
        let csv = "date,row,col,variable,value\n2010-06-01,0,0,tp,1.5\n2010-06-02,0,0,tp,0\n";
        let cube = ingest_reader(&manifest(1, 1, &["tp"], 2), csv.as_bytes(), Path::new("x.csv")).unwrap();
        assert_eq!((cube.num_days(), cube.height, cube.width, cube.num_features()), (2, 1, 1, 1));
        assert_eq!(cube.data, [1.5, 0.0]);
    }

    #[test]
    fn missing_cell_is_named() {
        let csv = "date,row,col,variable,value\n2010-06-01,0,0,tp,1\n2010-06-01,0,1,tp,1\n2010-06-02,0,0,tp,1\n";
        let err = ingest_reader(&manifest(1, 2, &["tp"], 2), csv.as_bytes(), Path::new("x.csv"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("2010-06-02") && err.contains("(0, 1)") && err.contains("tp"), "{err}");
    }

    #[test]
    fn duplicate_and_unknown_rejected() {
        let dup = "date,row,col,variable,value\n2010-06-01,0,0,tp,1\n2010-06-01,0,0,tp,2\n";
        let m = manifest(1, 1, &["tp"], 1);
        assert!(matches!(
            ingest_reader(&m, dup.as_bytes(), Path::new("x.csv")),
            Err(Error::DuplicateCell { .. })
        ));
        let unk = "date,row,col,variable,value\n2010-06-01,0,0,rh,1\n";
        assert!(matches!(
            ingest_reader(&m, unk.as_bytes(), Path::new("x.csv")),
            Err(Error::UnknownVariable(_))
        ));
    }
}
