//! Signal and label I/O, slicing, subject splits and synthetic data.
//!
//! A dataset directory looks like
//!
//! ```text
//! <root>/schema.json                    ["null", "block", ...]
//! <root>/<subject>/<session>.signal.csv
//! <root>/<subject>/<session>.labels.csv
//! ```

mod labels;
mod series;
mod slicing;
pub mod synth;

use std::path::Path;

pub use labels::{load_labels, write_event_labels, ClassSchema, LabelTrack, NULL_CLASS};
pub use series::{load_series, write_series, MultichannelSeries, DEFAULT_SAMPLE_RATE_HZ, RATE_TOLERANCE};
pub use slicing::{loso_split, make_batches, seconds_to_samples, slice_sequence, slice_sequence_seconds, subjects, Slice, SliceBatch};
pub use synth::{synthesize_dataset, synthesize_with_events, ClassTemplate, PulseKind, SynthSpec};

use crate::error::{contract, Error, Result};

pub const SCHEMA_FILE: &str = "schema.json";
const SIGNAL_SUFFIX: &str = ".signal.csv";
const LABELS_SUFFIX: &str = ".labels.csv";

/// A recording with its per-sample ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub series: MultichannelSeries,
    pub labels: LabelTrack,
}

impl LabeledSeries {
    pub fn new(series: MultichannelSeries, labels: LabelTrack) -> Result<Self> {
        if series.len() != labels.len() {
            return Err(contract(format!(
                "series has {} samples but labels have {}",
                series.len(),
                labels.len()
            )));
        }
        Ok(LabeledSeries { series, labels })
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads every `<subject>/<session>` pair under `root`, in sorted order.
pub fn load_dataset_dir(root: &Path, rate_hz: f64) -> Result<(ClassSchema, Vec<LabeledSeries>)> {
    let schema = ClassSchema::load(&root.join(SCHEMA_FILE))?;
    let mut out = Vec::new();
    for subject_dir in sorted_entries(root)? {
        if !subject_dir.is_dir() {
            continue;
        }
        let subject = file_name(&subject_dir);
        for path in sorted_entries(&subject_dir)? {
            let name = file_name(&path);
            let Some(session) = name.strip_suffix(SIGNAL_SUFFIX) else {
                continue;
            };
            let mut series = load_series(&path, rate_hz)?;
            series.subject_id = subject.clone();
            series.session_id = session.to_owned();
            let label_path = subject_dir.join(format!("{session}{LABELS_SUFFIX}"));
            let labels = load_labels(&label_path, series.len(), &schema)?;
            out.push(LabeledSeries::new(series, labels)?);
        }
    }
    Ok((schema, out))
}

pub fn write_dataset_dir(root: &Path, schema: &ClassSchema, dataset: &[LabeledSeries]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    schema.save(&root.join(SCHEMA_FILE))?;
    for rec in dataset {
        let dir = root.join(&rec.series.subject_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let session = &rec.series.session_id;
        write_series(&dir.join(format!("{session}{SIGNAL_SUFFIX}")), &rec.series)?;
        let events = crate::metrics::extract_segments(&rec.labels.classes, 0);
        write_event_labels(&dir.join(format!("{session}{LABELS_SUFFIX}")), &events, schema)?;
    }
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
