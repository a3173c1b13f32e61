use std::io::{Read, Write};

use crate::error::{Result, SmateError};

/// One line of the embedding CSV. Centroid rows use
/// `sample_id = "centroid_<class>"` and `is_labeled = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: String,
    pub label: String,
    pub is_labeled: bool,
    pub values: Vec<f64>,
}

impl EmbeddingRow {
    pub fn is_centroid(&self) -> bool {
        self.sample_id.starts_with("centroid_")
    }
}

fn csv_err(e: csv::Error) -> SmateError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    SmateError::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn write_embedding_csv<W: Write>(out: W, rows: &[EmbeddingRow]) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample_id".to_string(), "label".into(), "is_labeled".into()];
    header.extend((0..width).map(|i| format!("dim_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        if row.values.len() != width {
            return Err(SmateError::dim("embedding csv", &[width], &[row.values.len()]));
        }
        let mut rec = vec![
            row.sample_id.clone(),
            row.label.clone(),
            row.is_labeled.to_string(),
        ];
        rec.extend(row.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| SmateError::Contract(format!("embedding csv: {e}")))?;
    Ok(())
}

pub fn parse_embedding_csv<R: Read>(input: R) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let fixed = ["sample_id", "label", "is_labeled"];
    if header.len() < 3 || header.iter().take(3).ne(fixed) {
        return Err(SmateError::Parse {
            line: 1,
            message: "expected header sample_id,label,is_labeled,dim_0,...".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| SmateError::Parse { line, message };
        let is_labeled = match &rec[2] {
            "true" => true,
            "false" => false,
            other => return Err(bad(format!("is_labeled must be true or false, got {other}"))),
        };
        let values = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad number \"{v}\""))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow {
            sample_id: rec[0].to_string(),
            label: rec[1].to_string(),
            is_labeled,
            values,
        });
    }
    Ok(rows)
}
