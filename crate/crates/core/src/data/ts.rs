//! Reader and writer for the UEA/sktime `.ts` text format (equal-length,
//! classification variant).

use std::fmt::Write as _;
use std::path::Path;

use super::MtsDataset;
use crate::error::{Result, SmateError};
use crate::tensor::Tensor;

#[derive(Default)]
struct Header {
    problem_name: Option<String>,
    univariate: Option<bool>,
    dimensions: Option<usize>,
    series_length: Option<usize>,
    class_labels: Option<Vec<String>>,
}

fn parse_err(line: usize, message: impl Into<String>) -> SmateError {
    SmateError::Parse {
        line,
        message: message.into(),
    }
}

fn unsupported(line: usize, message: impl Into<String>) -> SmateError {
    SmateError::Unsupported {
        line,
        message: message.into(),
    }
}

fn parse_bool(line: usize, directive: &str, value: Option<&str>) -> Result<bool> {
    match value {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        other => Err(parse_err(
            line,
            format!("{directive} expects true or false, got {other:?}"),
        )),
    }
}

fn parse_count(line: usize, directive: &str, value: Option<&str>) -> Result<usize> {
    value
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| parse_err(line, format!("{directive} expects a positive integer")))
}

pub fn parse_ts_file(path: impl AsRef<Path>) -> Result<MtsDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SmateError::io(path, e))?;
    let fallback = path
        .file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.trim_end_matches("_TRAIN").trim_end_matches("_TEST").to_string())
        .unwrap_or_default();
    parse_ts_named(&text, &fallback)
}

pub fn parse_ts(text: &str) -> Result<MtsDataset> {
    parse_ts_named(text, "unnamed")
}

fn parse_ts_named(text: &str, fallback_name: &str) -> Result<MtsDataset> {
    let mut header = Header::default();
    let mut in_data = false;
    let mut samples: Vec<Tensor> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            if !line.starts_with('@') {
                return Err(parse_err(line_no, "expected a @directive before @data"));
            }
            let mut parts = line.split_whitespace();
            let directive = parts.next().unwrap_or_default();
            let value = parts.next();
            match directive.to_ascii_lowercase().as_str() {
                "@problemname" => {
                    let name = value.ok_or_else(|| parse_err(line_no, "@problemName needs a value"))?;
                    header.problem_name = Some(name.to_string());
                }
                "@timestamps" => {
                    if parse_bool(line_no, directive, value)? {
                        return Err(unsupported(line_no, "timestamped series are not supported"));
                    }
                }
                "@missing" => {
                    if parse_bool(line_no, directive, value)? {
                        return Err(unsupported(line_no, "missing values are not supported"));
                    }
                }
                "@univariate" => header.univariate = Some(parse_bool(line_no, directive, value)?),
                "@dimensions" => header.dimensions = Some(parse_count(line_no, directive, value)?),
                "@equallength" => {
                    if !parse_bool(line_no, directive, value)? {
                        return Err(unsupported(line_no, "unequal-length series are not supported"));
                    }
                }
                "@serieslength" => {
                    header.series_length = Some(parse_count(line_no, directive, value)?)
                }
                "@classlabel" => {
                    if !parse_bool(line_no, directive, value)? {
                        return Err(unsupported(line_no, "unlabeled datasets are not supported"));
                    }
                    let labels: Vec<String> = parts.map(str::to_string).collect();
                    if labels.is_empty() {
                        return Err(parse_err(line_no, "@classLabel true declares no labels"));
                    }
                    header.class_labels = Some(labels);
                }
                "@targetlabel" => {
                    return Err(unsupported(line_no, "regression targets are not supported"));
                }
                "@data" => {
                    if header.class_labels.is_none() {
                        return Err(parse_err(line_no, "@data before @classLabel"));
                    }
                    if header.univariate == Some(true) && header.dimensions.is_some_and(|d| d != 1) {
                        return Err(parse_err(line_no, "@univariate true with @dimensions > 1"));
                    }
                    in_data = true;
                }
                other => return Err(parse_err(line_no, format!("unknown directive {other}"))),
            }
            continue;
        }

        let declared = header.class_labels.as_ref().expect("checked at @data");
        let fields: Vec<&str> = line.split(':').collect();
        if fields.len() < 2 {
            return Err(parse_err(line_no, "data line has no class label field"));
        }
        let (label, dims) = fields.split_last().expect("at least two fields");
        let label = label.trim();
        let class = declared
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| parse_err(line_no, format!("class label \"{label}\" not declared")))?;

        let expected_dims = header
            .dimensions
            .or(header.univariate.filter(|&u| u).map(|_| 1))
            .or(shape.map(|s| s.1));
        if let Some(m) = expected_dims {
            if dims.len() != m {
                return Err(parse_err(
                    line_no,
                    format!("expected {m} dimensions, found {}", dims.len()),
                ));
            }
        }

        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
        for (j, field) in dims.iter().enumerate() {
            let values = field
                .split(',')
                .map(|v| {
                    let v = v.trim();
                    if v == "?" {
                        return Err(unsupported(line_no, "missing values are not supported"));
                    }
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| {
                            parse_err(line_no, format!("dimension {j}: bad number \"{v}\""))
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            columns.push(values);
        }
        let t_len = columns[0].len();
        if columns.iter().any(|c| c.len() != t_len) {
            return Err(unsupported(line_no, "dimensions of unequal length"));
        }
        if let Some(expected) = header.series_length.or(shape.map(|s| s.0)) {
            if t_len != expected {
                return Err(unsupported(
                    line_no,
                    format!("series length {t_len}, expected {expected}"),
                ));
            }
        }
        shape = Some((t_len, columns.len()));

        let m = columns.len();
        let mut data = vec![0.0; t_len * m];
        for (j, col) in columns.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                data[t * m + j] = v;
            }
        }
        samples.push(Tensor::new(vec![t_len, m], data)?);
        labels.push(class);
    }

    if !in_data {
        return Err(parse_err(last_line.max(1), "missing @data section"));
    }
    if samples.is_empty() {
        return Err(parse_err(last_line.max(1), "no samples after @data"));
    }
    let name = header
        .problem_name
        .unwrap_or_else(|| fallback_name.to_string());
    let label_set = header.class_labels.expect("checked at @data");
    MtsDataset::new(name, samples, labels, label_set).map_err(|e| match e {
        SmateError::Config(msg) => parse_err(last_line, msg),
        other => other,
    })
}

/// Writes a dataset in the canonical header order. Values use the shortest
/// decimal form that parses back to the same `f64`.
pub fn serialize_ts(ds: &MtsDataset) -> String {
    let mut out = String::new();
    let m = ds.dims();
    let _ = writeln!(out, "@problemName {}", ds.name());
    let _ = writeln!(out, "@timeStamps false");
    let _ = writeln!(out, "@missing false");
    let _ = writeln!(out, "@univariate {}", m == 1);
    if m > 1 {
        let _ = writeln!(out, "@dimensions {m}");
    }
    let _ = writeln!(out, "@equalLength true");
    let _ = writeln!(out, "@seriesLength {}", ds.series_length());
    let _ = writeln!(out, "@classLabel true {}", ds.label_set().join(" "));
    let _ = writeln!(out, "@data");
    for (i, sample) in ds.samples().iter().enumerate() {
        for j in 0..m {
            for t in 0..sample.rows() {
                if t > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{:?}", sample.at(t, j));
            }
            out.push(':');
        }
        out.push_str(ds.label_name(ds.true_label(i)));
        out.push('\n');
    }
    out
}
