//! Decoding predictions into events, counting them, and agreement statistics
//! between true and predicted counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MIN_DURATION: usize = 10;

/// A maximal run of one non-null class, inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentEvent {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

impl SegmentEvent {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Per-sample argmax; ties go to the lower class index.
pub fn decode(probs: &Tensor) -> Vec<usize> {
    let c = probs.cols();
    probs
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Maximal runs of non-null classes no shorter than `min_duration` samples,
/// sorted by start.
pub fn extract_segments(track: &[usize], min_duration: usize) -> Vec<SegmentEvent> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < track.len() {
        let class_id = track[t];
        let start = t;
        while t < track.len() && track[t] == class_id {
            t += 1;
        }
        if class_id != 0 && t - start >= min_duration {
            out.push(SegmentEvent { class_id, start, end: t - 1 });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClassFilter {
    Class(usize),
    /// Union of classes, e.g. every jump type.
    Set(Vec<usize>),
}

impl ClassFilter {
    fn matches(&self, class_id: usize) -> bool {
        match self {
            ClassFilter::Class(c) => *c == class_id,
            ClassFilter::Set(s) => s.contains(&class_id),
        }
    }
}

pub fn count_events(segments: &[SegmentEvent], filter: &ClassFilter, num_classes: usize) -> Result<usize> {
    let ids: &[usize] = match filter {
        ClassFilter::Class(c) => std::slice::from_ref(c),
        ClassFilter::Set(s) => s,
    };
    if let Some(bad) = ids.iter().find(|&&c| c == 0 || c >= num_classes) {
        return Err(invalid(format!("class {bad} is not an activity class in 1..{num_classes}")));
    }
    Ok(segments.iter().filter(|s| filter.matches(s.class_id)).count())
}

/// Number of events per class id (index 0 stays 0).
pub fn counts_per_class(segments: &[SegmentEvent], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for s in segments {
        counts[s.class_id] += 1;
    }
    counts
}

/// How the spread of paired differences is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdMode {
    /// Sample standard deviation of `d_u = nt_u − np_u`.
    #[default]
    PairedDifference,
    /// `sqrt(Σ (M_pd − np_u)² / (U − 1))`: spread of the predicted counts
    /// around the mean difference.
    PredictedSpread,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedStats {
    pub m_pd: f64,
    pub sd_pd: f64,
    pub loa_half_width: f64,
}

/// Mean and spread of `true − predicted` over units; LoA half width is `2·SD`.
pub fn paired_stats(true_counts: &[f64], pred_counts: &[f64]) -> Result<PairedStats> {
    paired_stats_with(true_counts, pred_counts, SdMode::PairedDifference)
}

pub fn paired_stats_with(true_counts: &[f64], pred_counts: &[f64], mode: SdMode) -> Result<PairedStats> {
    if true_counts.len() != pred_counts.len() {
        return Err(invalid("true and predicted count lists differ in length"));
    }
    let u = true_counts.len();
    if u < 2 {
        return Err(invalid("paired statistics need at least 2 units"));
    }
    let m_pd = true_counts.iter().zip(pred_counts).map(|(t, p)| t - p).sum::<f64>() / u as f64;
    let ss: f64 = match mode {
        SdMode::PairedDifference => true_counts
            .iter()
            .zip(pred_counts)
            .map(|(t, p)| (t - p - m_pd).powi(2))
            .sum(),
        SdMode::PredictedSpread => pred_counts.iter().map(|p| (m_pd - p).powi(2)).sum(),
    };
    let sd_pd = (ss / (u - 1) as f64).sqrt();
    Ok(PairedStats {
        m_pd,
        sd_pd,
        loa_half_width: 2.0 * sd_pd,
    })
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("pearson_r needs two equal-length lists of length >= 2"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(invalid("correlation undefined for zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Temporal resolution of window-wise classification, `t·(1 − r)` samples.
/// Sample-wise classification has resolution 1.
pub fn window_resolution(window_samples: usize, overlap_rate: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&overlap_rate) {
        return Err(invalid(format!("overlap rate {overlap_rate} outside [0, 1)")));
    }
    Ok(window_samples as f64 * (1.0 - overlap_rate))
}

pub const SAMPLE_WISE_RESOLUTION: f64 = 1.0;

/// `#pred / #true`; values well above 1 mean fragmented predictions.
pub fn oversegmentation_ratio(pred: &[SegmentEvent], truth: &[SegmentEvent]) -> Result<f64> {
    if truth.is_empty() {
        return Err(invalid("no true segments"));
    }
    Ok(pred.len() as f64 / truth.len() as f64)
}

/// True and predicted event counts for one evaluation unit (subject or session).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitCounts {
    pub unit: String,
    pub true_counts: Vec<usize>,
    pub pred_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementEntry {
    #[serde(rename = "true")]
    pub true_count: usize,
    #[serde(rename = "pred")]
    pub pred_count: usize,
    pub m_pd: f64,
    /// `None` when fewer than two units are available.
    pub sd_pd: Option<f64>,
    pub loa_half_width: Option<f64>,
    pub loa: String,
    pub pearson_r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub schema_version: u32,
    pub units: Vec<String>,
    pub per_class: BTreeMap<String, AgreementEntry>,
    pub overall: AgreementEntry,
    pub overall_classes: Vec<String>,
    pub pearson_r: Option<f64>,
    pub sd_mode: SdMode,
}

fn entry(t: &[f64], p: &[f64], mode: SdMode) -> AgreementEntry {
    let u = t.len().max(1) as f64;
    let m_pd = t.iter().zip(p).map(|(a, b)| a - b).sum::<f64>() / u;
    let stats = paired_stats_with(t, p, mode).ok();
    let sd_pd = stats.map(|s| s.sd_pd);
    let loa = match sd_pd {
        Some(sd) => format!("{m_pd:.2}±{:.2}", 2.0 * sd),
        None => format!("{m_pd:.2}±n/a"),
    };
    AgreementEntry {
        true_count: t.iter().sum::<f64>() as usize,
        pred_count: p.iter().sum::<f64>() as usize,
        m_pd,
        sd_pd,
        loa_half_width: sd_pd.map(|s| 2.0 * s),
        loa,
        pearson_r: pearson_r(t, p).ok(),
    }
}

/// Builds per-class and overall agreement over `units`; `overall` sums the
/// classes in `overall_set` per unit.
pub fn agreement_report(units: &[UnitCounts], class_names: &[String], overall_set: &[usize], mode: SdMode) -> Result<AgreementReport> {
    if units.is_empty() {
        return Err(invalid("no evaluation units"));
    }
    let c = class_names.len();
    if units.iter().any(|u| u.true_counts.len() != c || u.pred_counts.len() != c) {
        return Err(invalid("unit counts do not match the class schema"));
    }
    if overall_set.iter().any(|&k| k == 0 || k >= c) {
        return Err(invalid("overall class set must contain activity classes only"));
    }
    let mut per_class = BTreeMap::new();
    for k in 1..c {
        let t: Vec<f64> = units.iter().map(|u| u.true_counts[k] as f64).collect();
        let p: Vec<f64> = units.iter().map(|u| u.pred_counts[k] as f64).collect();
        per_class.insert(class_names[k].clone(), entry(&t, &p, mode));
    }
    let sum = |v: &[usize]| overall_set.iter().map(|&k| v[k]).sum::<usize>() as f64;
    let t: Vec<f64> = units.iter().map(|u| sum(&u.true_counts)).collect();
    let p: Vec<f64> = units.iter().map(|u| sum(&u.pred_counts)).collect();
    let overall = entry(&t, &p, mode);
    Ok(AgreementReport {
        schema_version: REPORT_SCHEMA_VERSION,
        units: units.iter().map(|u| u.unit.clone()).collect(),
        per_class,
        pearson_r: overall.pearson_r,
        overall,
        overall_classes: overall_set.iter().map(|&k| class_names[k].clone()).collect(),
        sd_mode: mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_ties_and_argmax() {
        let u = Tensor::full(&[3, 4], 0.25);
        assert_eq!(decode(&u), vec![0, 0, 0]);
        let p = Tensor::from_rows(&[vec![0.4, 0.6], vec![0.4, 0.6]]).unwrap();
        assert_eq!(decode(&p), vec![1, 1]);
        let onehot = Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(decode(&onehot), vec![2, 0, 1]);
    }

    #[test]
    fn segments_and_counts() {
        let track = [0, 0, 2, 2, 2, 0, 1, 1];
        let segs = extract_segments(&track, 0);
        assert_eq!(
            segs,
            vec![
                SegmentEvent { class_id: 2, start: 2, end: 4 },
                SegmentEvent { class_id: 1, start: 6, end: 7 }
            ]
        );
        assert!(extract_segments(&[0; 20], 0).is_empty());
        let mut nine = vec![0; 3];
        nine.extend([1; 9]);
        nine.extend([0; 3]);
        assert!(extract_segments(&nine, 10).is_empty());
        assert_eq!(extract_segments(&nine, 9).len(), 1);

        assert_eq!(count_events(&segs, &ClassFilter::Class(2), 3).unwrap(), 1);
        assert_eq!(count_events(&[], &ClassFilter::Class(2), 3).unwrap(), 0);
        assert_eq!(count_events(&segs, &ClassFilter::Set(vec![1, 2]), 3).unwrap(), 2);
        assert!(count_events(&segs, &ClassFilter::Class(5), 3).is_err());
    }

    #[test]
    fn paired_stats_examples() {
        let s = paired_stats(&[3.0, 5.0, 7.0], &[3.0, 5.0, 7.0]).unwrap();
        assert_eq!((s.m_pd, s.sd_pd, s.loa_half_width), (0.0, 0.0, 0.0));
        // diffs {1, -1, 0}
        let s = paired_stats(&[4.0, 2.0, 6.0], &[3.0, 3.0, 6.0]).unwrap();
        assert!(s.m_pd.abs() < 1e-15);
        assert!((s.sd_pd - 1.0).abs() < 1e-15);
        assert!((s.loa_half_width - 2.0).abs() < 1e-15);
        assert!(paired_stats(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn over_prediction_is_negative() {
        let s = paired_stats(&[3.0, 4.0], &[5.0, 6.0]).unwrap();
        assert!(s.m_pd < 0.0);
    }

    #[test]
    fn predicted_spread_sd_differs() {
        let s = paired_stats_with(&[4.0, 2.0, 6.0], &[3.0, 3.0, 6.0], SdMode::PredictedSpread).unwrap();
        // M_pd = 0; sqrt((9 + 9 + 36) / 2)
        assert!((s.sd_pd - 27f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson_r(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_r(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson_r(&x, &[2.0, 2.0, 2.0]).is_err());
    }

    #[test]
    fn resolution() {
        assert_eq!(window_resolution(50, 0.5).unwrap(), 25.0);
        assert_eq!(window_resolution(50, 0.0).unwrap(), 50.0);
        assert!(window_resolution(50, 1.0).is_err());
        assert!(window_resolution(50, -0.1).is_err());
        assert_eq!(SAMPLE_WISE_RESOLUTION, 1.0);
    }

    #[test]
    fn overseg() {
        let t = extract_segments(&[0, 1, 1, 1, 1, 0, 2, 2, 2, 2], 0);
        assert_eq!(oversegmentation_ratio(&t, &t).unwrap(), 1.0);
        let split = extract_segments(&[0, 1, 0, 1, 1, 0, 2, 0, 2, 2], 0);
        assert_eq!(oversegmentation_ratio(&split, &t).unwrap(), 2.0);
        assert_eq!(oversegmentation_ratio(&[], &t).unwrap(), 0.0);
        assert!(oversegmentation_ratio(&t, &[]).is_err());
    }

    #[test]
    fn report_shape() {
        let names: Vec<String> = ["null", "a", "b"].iter().map(|s| s.to_string()).collect();
        let units = vec![
            UnitCounts { unit: "s1".into(), true_counts: vec![0, 3, 1], pred_counts: vec![0, 2, 1] },
            UnitCounts { unit: "s2".into(), true_counts: vec![0, 5, 2], pred_counts: vec![0, 6, 2] },
        ];
        let r = agreement_report(&units, &names, &[1, 2], SdMode::default()).unwrap();
        assert_eq!(r.per_class["a"].true_count, 8);
        assert_eq!(r.overall.pred_count, 11);
        assert_eq!(r.overall.loa_half_width, r.overall.sd_pd.map(|s| 2.0 * s));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["per_class"]["a"]["true"].is_number());
        let single = agreement_report(&units[..1], &names, &[1], SdMode::default()).unwrap();
        assert!(single.overall.sd_pd.is_none());
    }
}
