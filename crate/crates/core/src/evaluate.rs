//! Held-out evaluation on whole, unsliced recordings.

use serde::{Deserialize, Serialize};

use crate::data::LabeledSeries;
use crate::error::{invalid, Result};
use crate::metrics::{counts_per_class, decode, extract_segments, UnitCounts};
use crate::model::MsTcnNet;
use crate::train::predict;

/// Counts and segment totals for one recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingEval {
    pub id: String,
    pub subject: String,
    pub true_counts: Vec<usize>,
    pub pred_counts: Vec<usize>,
    pub correct_samples: usize,
    pub samples: usize,
}

/// Predicts `rec` in one pass, decodes the last stage, and counts events.
/// True events are counted from the label track without a length filter.
pub fn evaluate_recording(net: &MsTcnNet, rec: &LabeledSeries, min_duration: usize) -> Result<RecordingEval> {
    let c = net.config.num_classes;
    if rec.labels.schema.len() != c {
        return Err(crate::Error::Schema(format!(
            "{}: label schema has {} classes, model predicts {c}",
            rec.series.id(),
            rec.labels.schema.len()
        )));
    }
    let outputs = predict(net, &rec.series)?;
    let probs = &outputs.last().expect("at least one stage").probs;
    let track = decode(probs);
    let correct = track.iter().zip(&rec.labels.classes).filter(|(a, b)| a == b).count();
    Ok(RecordingEval {
        id: rec.series.id(),
        subject: rec.series.subject_id.clone(),
        true_counts: counts_per_class(&extract_segments(&rec.labels.classes, 0), c),
        pred_counts: counts_per_class(&extract_segments(&track, min_duration), c),
        correct_samples: correct,
        samples: track.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutEval {
    pub recordings: Vec<RecordingEval>,
    /// Subjects when at least two are held out, otherwise the sessions of
    /// the single held-out subject.
    pub units: Vec<UnitCounts>,
    /// Predicted over true event totals across all recordings.
    pub oversegmentation_ratio: Option<f64>,
    pub sample_accuracy: f64,
}

pub fn evaluate_held_out(net: &MsTcnNet, recs: &[&LabeledSeries], min_duration: usize) -> Result<HeldOutEval> {
    if recs.is_empty() {
        return Err(invalid("no held-out recordings"));
    }
    let recordings = recs
        .iter()
        .map(|r| evaluate_recording(net, r, min_duration))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeldOutEval::from_recordings(recordings, net.config.num_classes))
}

impl HeldOutEval {
    /// Pools recordings, possibly gathered from several folds.
    pub fn from_recordings(recordings: Vec<RecordingEval>, num_classes: usize) -> Self {
        let units = group_units(&recordings, num_classes);
        let true_total: usize = recordings.iter().map(|r| r.true_counts.iter().sum::<usize>()).sum();
        let pred_total: usize = recordings.iter().map(|r| r.pred_counts.iter().sum::<usize>()).sum();
        let correct: usize = recordings.iter().map(|r| r.correct_samples).sum();
        let samples: usize = recordings.iter().map(|r| r.samples).sum();
        HeldOutEval {
            recordings,
            units,
            oversegmentation_ratio: (true_total > 0).then(|| pred_total as f64 / true_total as f64),
            sample_accuracy: correct as f64 / samples.max(1) as f64,
        }
    }
}

/// One unit per subject when at least two subjects are present, otherwise
/// one unit per recording.
pub fn group_units(recordings: &[RecordingEval], num_classes: usize) -> Vec<UnitCounts> {
    let c = num_classes;
    let mut subjects: Vec<&str> = recordings.iter().map(|r| r.subject.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < 2 {
        return recordings
            .iter()
            .map(|r| UnitCounts { unit: r.id.clone(), true_counts: r.true_counts.clone(), pred_counts: r.pred_counts.clone() })
            .collect();
    }
    subjects
        .iter()
        .map(|s| {
            let mut u = UnitCounts { unit: s.to_string(), true_counts: vec![0; c], pred_counts: vec![0; c] };
            for r in recordings.iter().filter(|r| r.subject == *s) {
                add(&mut u.true_counts, &r.true_counts);
                add(&mut u.pred_counts, &r.pred_counts);
            }
            u
        })
        .collect()
}

fn add(acc: &mut [usize], v: &[usize]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Absolute difference between true and predicted totals over `classes`.
pub fn absolute_count_error(units: &[UnitCounts], classes: &[usize]) -> usize {
    let sum = |v: &[usize]| classes.iter().map(|&k| v[k]).sum::<usize>();
    let t: usize = units.iter().map(|u| sum(&u.true_counts)).sum();
    let p: usize = units.iter().map(|u| sum(&u.pred_counts)).sum();
    t.abs_diff(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, SynthSpec};
    use crate::{build_model, ModelConfig};

    #[test]
    fn units_follow_held_out_subjects() {
        let mut spec = SynthSpec::volleyball(2, 12.0, 0.1, 1);
        spec.sessions_per_subject = 2;
        let data = synthesize_dataset(&spec).unwrap();
        let cfg = ModelConfig { num_stages: 1, layers_per_stage: 2, num_filters: 4, num_classes: 5, ..Default::default() };
        let net = build_model(&cfg, 0).unwrap();
        let all: Vec<&LabeledSeries> = data.iter().collect();
        let both = evaluate_held_out(&net, &all, 10).unwrap();
        assert_eq!(both.units.len(), 2);
        assert_eq!(both.recordings.len(), 4);
        let one = evaluate_held_out(&net, &all[..2], 10).unwrap();
        assert_eq!(one.units.iter().map(|u| u.unit.as_str()).collect::<Vec<_>>(), ["subject01/session01", "subject01/session02"]);
        let t: usize = both.units.iter().map(|u| u.true_counts.iter().sum::<usize>()).sum();
        assert!(t > 0);
        assert_eq!(absolute_count_error(&both.units, &[1, 2, 3, 4]), t.abs_diff(both.units.iter().map(|u| u.pred_counts.iter().sum::<usize>()).sum()));
    }
}
