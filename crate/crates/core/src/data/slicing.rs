//! Training slices, shuffled batches and leave-one-subject-out splits.

use rand::seq::SliceRandom;
use rand::Rng;

use super::LabeledSeries;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// A fixed-length training window cut from a longer recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub series_id: String,
    pub start: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Slice {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct SliceBatch<'a> {
    pub slices: Vec<&'a Slice>,
}

impl SliceBatch<'_> {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn provenance(&self) -> Vec<(&str, usize)> {
        self.slices.iter().map(|s| (s.series_id.as_str(), s.start)).collect()
    }
}

pub fn seconds_to_samples(seconds: f64, rate_hz: f64) -> usize {
    (seconds * rate_hz).round() as usize
}

/// Cuts contiguous windows of `slice_len` samples every `stride` samples.
/// A trailing partial window is dropped; a recording shorter than one
/// window yields no slices.
pub fn slice_sequence(rec: &LabeledSeries, slice_len: usize, stride: usize) -> Result<Vec<Slice>> {
    if slice_len == 0 {
        return Err(invalid("slice length must be at least one sample"));
    }
    if stride == 0 {
        return Err(invalid("slice stride must be at least one sample"));
    }
    let t_len = rec.series.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start + slice_len <= t_len {
        out.push(Slice {
            series_id: rec.series.id(),
            start,
            inputs: rec.series.samples.slice_rows(start, slice_len)?,
            labels: rec.labels.classes[start..start + slice_len].to_vec(),
        });
        start += stride;
    }
    Ok(out)
}

/// [`slice_sequence`] with lengths given in seconds at the series rate.
pub fn slice_sequence_seconds(rec: &LabeledSeries, slice_seconds: f64, stride_seconds: f64) -> Result<Vec<Slice>> {
    let rate = rec.series.sample_rate_hz;
    slice_sequence(
        rec,
        seconds_to_samples(slice_seconds, rate),
        seconds_to_samples(stride_seconds, rate),
    )
}

/// Shuffles the slices with `rng` and groups them into batches; the last
/// batch may be smaller.
pub fn make_batches<'a, R: Rng + ?Sized>(slices: &'a [Slice], batch_size: usize, rng: &mut R) -> Result<Vec<SliceBatch<'a>>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut order: Vec<&Slice> = slices.iter().collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .map(|c| SliceBatch { slices: c.to_vec() })
        .collect())
}

/// Splits into (train, test) where test holds every recording of `held_out`.
pub fn loso_split<'a>(dataset: &'a [LabeledSeries], held_out: &str) -> Result<(Vec<&'a LabeledSeries>, Vec<&'a LabeledSeries>)> {
    let (test, train): (Vec<_>, Vec<_>) = dataset.iter().partition(|r| r.series.subject_id == held_out);
    if test.is_empty() {
        return Err(invalid(format!("subject {held_out:?} not in dataset")));
    }
    if train.is_empty() {
        return Err(invalid(format!("holding out {held_out:?} leaves no training subjects")));
    }
    Ok((train, test))
}

/// Distinct subject ids in first-seen order.
pub fn subjects(dataset: &[LabeledSeries]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in dataset {
        if !out.contains(&r.series.subject_id) {
            out.push(r.series.subject_id.clone());
        }
    }
    out
}
