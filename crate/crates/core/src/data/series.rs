//! Multichannel signal CSV files.
//!
//! Format: UTF-8, comma separated, header `time,<ch1>,...,<chN>`; `time` in
//! seconds, strictly increasing. The sample rate is inferred from the median
//! time delta and must be within 1% of the configured rate.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 100.0;
pub const RATE_TOLERANCE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelSeries {
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    /// `T × N` samples.
    pub samples: Tensor,
    pub subject_id: String,
    pub session_id: String,
}

impl MultichannelSeries {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_channels(&self) -> usize {
        self.samples.cols()
    }

    /// `subject/session`, unique within a dataset.
    pub fn id(&self) -> String {
        format!("{}/{}", self.subject_id, self.session_id)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Reads a signal CSV. Subject and session ids are left empty for the caller.
pub fn load_series(path: &Path, expected_rate_hz: f64) -> Result<MultichannelSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.get(0) != Some("time") {
        return Err(Error::format(path, "first column must be `time`"));
    }
    let channel_names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    if channel_names.is_empty() {
        return Err(Error::format(path, "no signal channels"));
    }
    let n = channel_names.len();
    let mut times = Vec::new();
    let mut data = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        // Row numbers in messages count the header as row 1.
        let row = row_idx + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != n + 1 {
            return Err(Error::format(path, format!("row {row}: expected {} fields, found {}", n + 1, record.len())));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::format(path, format!("row {row}, column {}: cannot parse {field:?}", col + 1)))?;
            if !v.is_finite() {
                return Err(Error::format(path, format!("row {row}, column {}: non-finite value {field:?}", col + 1)));
            }
            if col == 0 {
                if let Some(&prev) = times.last() {
                    if v <= prev {
                        return Err(Error::format(path, format!("row {row}: time {v} is not after {prev}")));
                    }
                }
                times.push(v);
            } else {
                data.push(v);
            }
        }
    }
    if times.is_empty() {
        return Err(Error::format(path, "no samples"));
    }
    if times.len() >= 2 {
        let mut deltas: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let rate = 1.0 / median(&mut deltas);
        if ((rate - expected_rate_hz) / expected_rate_hz).abs() > RATE_TOLERANCE {
            return Err(Error::Rate {
                path: path.to_owned(),
                msg: format!("inferred {rate:.3} Hz, expected {expected_rate_hz} Hz"),
            });
        }
    }
    Ok(MultichannelSeries {
        sample_rate_hz: expected_rate_hz,
        channel_names,
        samples: Tensor::new(vec![times.len(), n], data)?,
        subject_id: String::new(),
        session_id: String::new(),
    })
}

pub fn write_series(path: &Path, series: &MultichannelSeries) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "time").map_err(io)?;
    for name in &series.channel_names {
        write!(w, ",{name}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for t in 0..series.len() {
        write!(w, "{:.6}", t as f64 / series.sample_rate_hz).map_err(io)?;
        for v in series.samples.row(t) {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::format(path, format!("{other:?}")),
    }
}
