use std::path::Path;

use super::{LesionRecord, Point, RecistAnnotation};
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 12] = [
    "lesion_id",
    "patient_id",
    "image_path",
    "cluster_id",
    "lx1",
    "ly1",
    "lx2",
    "ly2",
    "sx1",
    "sy1",
    "sx2",
    "sy2",
];

/// Reads lesion records from a CSV file with the exact [`CSV_HEADER`].
pub fn load_records(csv_path: &Path) -> Result<Vec<LesionRecord>> {
    let csv_err = |source| Error::Csv {
        path: csv_path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header = reader.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Row {
            path: csv_path.to_path_buf(),
            row: 1,
            field: "header".into(),
            msg: format!("expected `{}`", CSV_HEADER.join(",")),
        });
    }

    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(csv_err)?;
        // Line 1 is the header.
        let line = row.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let row_err = |field: &str, msg: String| Error::Row {
            path: csv_path.to_path_buf(),
            row: line,
            field: field.to_string(),
            msg,
        };
        if row.len() != CSV_HEADER.len() {
            let missing = CSV_HEADER.get(row.len()).copied().unwrap_or("<extra>");
            return Err(row_err(
                missing,
                format!("expected {} fields, found {}", CSV_HEADER.len(), row.len()),
            ));
        }
        let text = |idx: usize| -> Result<String> {
            let v = &row[idx];
            if v.is_empty() {
                return Err(row_err(CSV_HEADER[idx], "empty value".into()));
            }
            Ok(v.to_string())
        };
        let coord = |idx: usize| -> Result<f64> {
            let v = &row[idx];
            let x: f64 = v
                .parse()
                .map_err(|_| row_err(CSV_HEADER[idx], format!("`{v}` is not a number")))?;
            if !x.is_finite() {
                return Err(row_err(CSV_HEADER[idx], "non-finite coordinate".into()));
            }
            Ok(x)
        };
        let cluster_id: usize = row[3]
            .parse()
            .map_err(|_| row_err("cluster_id", format!("`{}` is not a non-negative integer", &row[3])))?;
        let recist = RecistAnnotation::new(
            [Point::new(coord(4)?, coord(5)?), Point::new(coord(6)?, coord(7)?)],
            [Point::new(coord(8)?, coord(9)?), Point::new(coord(10)?, coord(11)?)],
        );
        recist.validate().map_err(|m| row_err("lx1", m))?;
        out.push(LesionRecord {
            lesion_id: text(0)?,
            patient_id: text(1)?,
            image_path: text(2)?,
            recist,
            cluster_id,
            split: Default::default(),
        });
    }
    Ok(out)
}

pub fn write_records(csv_path: &Path, records: &[LesionRecord]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: csv_path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(csv_path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        let pts = r.recist.points();
        let mut fields = vec![
            r.lesion_id.clone(),
            r.patient_id.clone(),
            r.image_path.clone(),
            r.cluster_id.to_string(),
        ];
        for p in pts {
            // `{}` on f64 prints the shortest string that parses back exactly.
            fields.push(format!("{}", p.x));
            fields.push(format!("{}", p.y));
        }
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))
}
