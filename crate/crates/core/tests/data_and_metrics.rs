use mstcn::data::{
    load_dataset_dir, load_labels, loso_split, slice_sequence, synthesize_dataset, write_dataset_dir, write_event_labels, ClassSchema,
    LabelTrack, LabeledSeries, MultichannelSeries, SynthSpec,
};
use mstcn::metrics::{count_events, counts_per_class, decode, extract_segments, pearson_r, ClassFilter, SegmentEvent};
use mstcn::Tensor;
use proptest::prelude::*;

/// Smallest `lo` and largest `hi` with `P(X < lo) ≤ a` and `P(X > hi) ≤ a`
/// for `X ~ Poisson(mean)`, from the exact pmf recursion.
fn poisson_bounds(mean: f64, a: f64) -> (usize, usize) {
    let mut pmf = (-mean).exp();
    let mut cdf = 0.0;
    let mut lo = None;
    let mut k = 0usize;
    loop {
        // cdf = P(X < k) here.
        if lo.is_none() && cdf + pmf > a {
            lo = Some(k);
        }
        cdf += pmf;
        if 1.0 - cdf <= a {
            return (lo.unwrap(), k);
        }
        k += 1;
        pmf *= mean / k as f64;
    }
}

fn schema(n: usize) -> ClassSchema {
    let mut names = vec!["null".to_string()];
    names.extend((1..n).map(|i| format!("c{i}")));
    ClassSchema::try_from(names).unwrap()
}

#[test]
fn poisson_oracle_sanity() {
    // P(X = 0) = e^-1 ≈ 0.37 for mean 1, so lo is 0; the upper tail above 4
    // holds ≈ 0.0037 ≤ 0.005 while above 3 holds ≈ 0.019.
    assert_eq!(poisson_bounds(1.0, 0.005), (0, 4));
}

#[test]
fn synthetic_event_counts_within_poisson_bounds() {
    let spec = SynthSpec::volleyball(1, 600.0, 0.05, 2024);
    let data = synthesize_dataset(&spec).unwrap();
    let segs = extract_segments(&data[0].labels.classes, 0);
    let total = segs.len();
    let (lo, hi) = poisson_bounds(4.0 * 600.0 * 0.05, 0.005);
    assert!((lo..=hi).contains(&total), "{total} outside [{lo}, {hi}]");
    let (clo, chi) = poisson_bounds(600.0 * 0.05, 0.005);
    for (class, &n) in counts_per_class(&segs, 5).iter().enumerate().skip(1) {
        assert!((clo..=chi).contains(&n), "class {class}: {n} outside [{clo}, {chi}]");
    }
}

#[test]
fn synthetic_dataset_survives_disk_round_trip() {
    let spec = SynthSpec::volleyball(2, 20.0, 0.1, 3);
    let data = synthesize_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset_dir(dir.path(), &spec.schema().unwrap(), &data).unwrap();
    let (schema, back) = load_dataset_dir(dir.path(), 100.0).unwrap();
    assert_eq!(schema, spec.schema().unwrap());
    assert_eq!(back.len(), 2);
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.series.id(), b.series.id());
        assert!(a.series.samples.max_abs_diff(&b.series.samples) == 0.0);
    }
}

#[test]
fn slicing_120_seconds() {
    let spec = SynthSpec::volleyball(1, 120.0, 0.05, 9);
    let rec = synthesize_dataset(&spec).unwrap().remove(0);
    assert_eq!(slice_sequence(&rec, 4000, 4000).unwrap().len(), 3);
    let half = slice_sequence(&rec, 4000, 2000).unwrap();
    assert_eq!(half.len(), 5);
    assert_eq!(half[1].start, 2000);
}

/// Single pass over the track, counting run starts that meet the length.
fn brute_force_counts(track: &[usize], c: usize, min_duration: usize) -> Vec<usize> {
    let mut counts = vec![0; c];
    let mut run = 0;
    for t in 0..track.len() {
        run = if t > 0 && track[t] == track[t - 1] { run + 1 } else { 1 };
        let run_ends = t + 1 == track.len() || track[t + 1] != track[t];
        if run_ends && track[t] != 0 && run >= min_duration {
            counts[track[t]] += 1;
        }
    }
    counts
}

fn runs_track() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec((0usize..4, 1usize..30), 1..60)
        .prop_map(|runs| runs.into_iter().flat_map(|(c, n)| std::iter::repeat_n(c, n)).take(1000).collect())
}

proptest! {
    #[test]
    fn pipeline_matches_brute_force(track in runs_track(), min_duration in 0usize..15, noise in 0.0f64..0.2) {
        // One-hot-ish probability rows whose argmax is the track.
        let c = 4;
        let rows: Vec<Vec<f64>> = track
            .iter()
            .enumerate()
            .map(|(t, &y)| {
                let mut r = vec![noise * ((t % 3) as f64) / 3.0 / c as f64; c];
                r[y] = 1.0;
                r
            })
            .collect();
        let decoded = decode(&Tensor::from_rows(&rows).unwrap());
        prop_assert_eq!(&decoded, &track);
        let segs = extract_segments(&decoded, min_duration);
        let expect = brute_force_counts(&track, c, min_duration);
        prop_assert_eq!(counts_per_class(&segs, c), expect.clone());
        prop_assert_eq!(count_events(&segs, &ClassFilter::Set(vec![1, 2, 3]), c).unwrap(), expect.iter().sum::<usize>());
        prop_assert!(segs.windows(2).all(|w| w[0].start <= w[1].start));
    }

    #[test]
    fn events_round_trip_through_files(gaps in prop::collection::vec((1usize..10, 1usize..12, 1usize..4), 0..12)) {
        let mut events = Vec::new();
        let mut t = 0;
        for (gap, len, class_id) in gaps {
            t += gap;
            events.push(SegmentEvent { class_id, start: t, end: t + len - 1 });
            t += len;
        }
        let t_len = t + 3;
        let s = schema(4);
        let track = LabelTrack::from_events(t_len, &events, &s).unwrap();
        prop_assert_eq!(extract_segments(&track.classes, 0), events.clone());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        write_event_labels(&p, &events, &s).unwrap();
        prop_assert_eq!(load_labels(&p, t_len, &s).unwrap(), track);
    }

    #[test]
    fn pearson_affine_invariance(
        xs in prop::collection::vec(-50.0f64..50.0, 3..40),
        a in 0.1f64..10.0,
        b in -100.0f64..100.0,
        seed in 0u64..1000,
    ) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.5 + ((i as u64 * 7919 + seed) % 13) as f64).collect();
        let r = pearson_r(&xs, &ys);
        prop_assume!(r.is_ok());
        let r = r.unwrap();
        let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let yt: Vec<f64> = ys.iter().map(|y| y / a - b).collect();
        prop_assert!((pearson_r(&xt, &ys).unwrap() - r).abs() < 1e-12);
        prop_assert!((pearson_r(&xs, &yt).unwrap() - r).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn loso_partitions(num_subjects in 2usize..6, held in 0usize..6) {
        let held = held % num_subjects;
        let data: Vec<LabeledSeries> = (0..num_subjects)
            .flat_map(|s| (0..2).map(move |k| (s, k)))
            .map(|(s, k)| {
                let series = MultichannelSeries {
                    sample_rate_hz: 100.0,
                    channel_names: vec!["x".into()],
                    samples: Tensor::zeros(&[5, 1]),
                    subject_id: format!("subject{s:02}"),
                    session_id: format!("session{k:02}"),
                };
                LabeledSeries::new(series, LabelTrack::from_events(5, &[], &schema(2)).unwrap()).unwrap()
            })
            .collect();
        let name = format!("subject{held:02}");
        let (train, test) = loso_split(&data, &name).unwrap();
        prop_assert_eq!(train.len() + test.len(), data.len());
        prop_assert!(test.iter().all(|r| r.series.subject_id == name));
        prop_assert!(train.iter().all(|r| r.series.subject_id != name));
    }
}
