//! Synthetic waist-IMU recordings with exactly labelled activity events.
//!
//! Each recording has six channels (`ax, ay, az` in g, `gx, gy, gz` in
//! arbitrary rate units). The background is gravity on `az` plus Gaussian
//! noise. Events are drawn per class from a Poisson count, placed without
//! overlap and separated by at least `min_gap_s`, then rendered as a
//! class-specific pulse:
//!
//! * `jump`: take-off peak, free-fall plateau (`az` ≈ 0 g), landing spike;
//! * `slow`: a low half-sine excursion (squats, dives).
//!
//! Each class also adds a sinusoid mixed into the channels by `channel_mix`,
//! which is what separates classes of the same kind.

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{ClassSchema, LabelTrack, LabeledSeries, MultichannelSeries, NULL_CLASS};
use crate::error::{Error, Result};
use crate::metrics::SegmentEvent;
use crate::tensor::Tensor;

pub const CHANNELS: [&str; 6] = ["ax", "ay", "az", "gx", "gy", "gz"];
pub const MIN_EVENT_SECONDS: f64 = 0.2;
const VERTICAL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseKind {
    Jump,
    Slow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTemplate {
    pub name: String,
    pub kind: PulseKind,
    /// Peak amplitude range in g.
    pub amplitude_g: [f64; 2],
    pub duration_s: [f64; 2],
    /// Weight of the class sinusoid on each of the six channels.
    pub channel_mix: [f64; 6],
    /// Expected events per second.
    pub event_rate: f64,
}

fn default_sessions() -> usize {
    1
}
fn default_rate() -> f64 {
    super::DEFAULT_SAMPLE_RATE_HZ
}
fn default_noise() -> f64 {
    0.05
}
fn default_gap() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_subjects: usize,
    #[serde(default = "default_sessions")]
    pub sessions_per_subject: usize,
    pub session_seconds: f64,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_gap")]
    pub min_gap_s: f64,
    pub class_templates: Vec<ClassTemplate>,
    pub seed: u64,
}

impl SynthSpec {
    /// Four volleyball-like classes: block, smash (jumps), squat, dive.
    pub fn volleyball(num_subjects: usize, session_seconds: f64, event_rate: f64, seed: u64) -> Self {
        let t = |name: &str, kind, amp: [f64; 2], dur: [f64; 2], mix: [f64; 6]| ClassTemplate {
            name: name.into(),
            kind,
            amplitude_g: amp,
            duration_s: dur,
            channel_mix: mix,
            event_rate,
        };
        SynthSpec {
            num_subjects,
            sessions_per_subject: 1,
            session_seconds,
            sample_rate_hz: default_rate(),
            noise_sigma: default_noise(),
            min_gap_s: default_gap(),
            class_templates: vec![
                t("block", PulseKind::Jump, [1.2, 1.8], [0.6, 0.9], [0.0, 0.3, 0.0, 1.0, 0.0, 0.0]),
                t("smash", PulseKind::Jump, [2.0, 2.8], [0.7, 1.0], [0.8, 0.0, 0.0, 0.0, 1.5, 0.0]),
                t("squat", PulseKind::Slow, [0.4, 0.6], [1.0, 1.5], [0.0, 0.0, 0.0, 0.0, 0.0, 0.6]),
                t("dive", PulseKind::Slow, [0.6, 0.9], [0.8, 1.2], [1.0, 0.0, 0.0, 0.0, -0.8, 0.0]),
            ],
            seed,
        }
    }

    pub fn schema(&self) -> Result<ClassSchema> {
        let mut names = vec![NULL_CLASS.to_string()];
        names.extend(self.class_templates.iter().map(|c| c.name.clone()));
        ClassSchema::try_from(names)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.num_subjects == 0 || self.sessions_per_subject == 0 {
            return bad("need at least one subject and one session".into());
        }
        if !(self.sample_rate_hz > 0.0) || !(self.session_seconds > 0.0) {
            return bad("sample rate and session length must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.min_gap_s >= 0.0) {
            return bad("noise_sigma and min_gap_s must be non-negative".into());
        }
        for c in &self.class_templates {
            if c.duration_s[0] < MIN_EVENT_SECONDS || c.duration_s[1] < c.duration_s[0] {
                return bad(format!("class {}: duration range must satisfy {MIN_EVENT_SECONDS} <= lo <= hi", c.name));
            }
            if !(c.amplitude_g[0] >= 0.0) || c.amplitude_g[1] < c.amplitude_g[0] {
                return bad(format!("class {}: amplitude range must satisfy 0 <= lo <= hi", c.name));
            }
            if !(c.event_rate >= 0.0 && c.event_rate.is_finite()) {
                return bad(format!("class {}: event_rate must be >= 0", c.name));
            }
            if c.channel_mix.iter().any(|v| !v.is_finite()) {
                return bad(format!("class {}: channel_mix must be finite", c.name));
            }
        }
        self.schema().map(|_| ()).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn samples_per_session(&self) -> usize {
        (self.session_seconds * self.sample_rate_hz).round() as usize
    }
}

struct PendingEvent {
    class_id: usize,
    len: usize,
    amplitude: f64,
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        Uniform::new(range[0], range[1]).expect("ordered range").sample(rng)
    } else {
        range[0]
    }
}

/// Generates `num_subjects × sessions_per_subject` recordings. Recording
/// `i` uses ChaCha stream `i` of `seed`, so each one is reproducible on
/// its own.
pub fn synthesize_dataset(spec: &SynthSpec) -> Result<Vec<LabeledSeries>> {
    Ok(synthesize_with_events(spec)?.into_iter().map(|(rec, _)| rec).collect())
}

/// As [`synthesize_dataset`], also returning each recording's placed events
/// in time order.
pub fn synthesize_with_events(spec: &SynthSpec) -> Result<Vec<(LabeledSeries, Vec<SegmentEvent>)>> {
    spec.validate()?;
    let schema = spec.schema()?;
    let mut out = Vec::new();
    for subj in 0..spec.num_subjects {
        for sess in 0..spec.sessions_per_subject {
            let index = (subj * spec.sessions_per_subject + sess) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index);
            let (series, labels, events) = synthesize_one(spec, &schema, &mut rng)?;
            let rec = LabeledSeries::new(
                MultichannelSeries {
                    subject_id: format!("subject{:02}", subj + 1),
                    session_id: format!("session{:02}", sess + 1),
                    ..series
                },
                labels,
            )?;
            out.push((rec, events));
        }
    }
    Ok(out)
}

fn synthesize_one(spec: &SynthSpec, schema: &ClassSchema, rng: &mut ChaCha8Rng) -> Result<(MultichannelSeries, LabelTrack, Vec<SegmentEvent>)> {
    let t_len = spec.samples_per_session();
    let rate = spec.sample_rate_hz;
    let gap = (spec.min_gap_s * rate).ceil().max(1.0) as usize;

    let mut pending = Vec::new();
    for (i, c) in spec.class_templates.iter().enumerate() {
        let mean = c.event_rate * spec.session_seconds;
        let count = if mean > 0.0 {
            Poisson::new(mean).map_err(|e| Error::Spec(e.to_string()))?.sample(rng) as usize
        } else {
            0
        };
        for _ in 0..count {
            let len = (uniform(rng, c.duration_s) * rate).round().max(1.0) as usize;
            pending.push(PendingEvent {
                class_id: i + 1,
                len,
                amplitude: uniform(rng, c.amplitude_g),
            });
        }
    }
    pending.shuffle(rng);

    let busy: usize = pending.iter().map(|e| e.len).sum::<usize>() + (pending.len() + 1) * gap;
    if busy > t_len {
        return Err(Error::Spec(format!(
            "{} events need {busy} samples but a session has only {t_len}; lower event_rate",
            pending.len()
        )));
    }
    // Spread the free samples uniformly: sorted offsets in [0, free].
    let free = t_len - busy;
    let mut offsets: Vec<usize> = (0..pending.len()).map(|_| rng.random_range(0..=free)).collect();
    offsets.sort_unstable();

    let mut samples = Tensor::zeros(&[t_len, CHANNELS.len()]);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Spec(e.to_string()))?;
    for t in 0..t_len {
        let row = samples.row_mut(t);
        for v in row.iter_mut() {
            *v = noise.sample(rng);
        }
        row[VERTICAL] += 1.0;
    }

    let mut events = Vec::with_capacity(pending.len());
    let mut cursor = gap;
    for (ev, off) in pending.iter().zip(&offsets) {
        let start = cursor + off;
        let template = &spec.class_templates[ev.class_id - 1];
        render_pulse(&mut samples, start, ev.len, ev.amplitude, template);
        events.push(SegmentEvent {
            class_id: ev.class_id,
            start,
            end: start + ev.len - 1,
        });
        cursor += ev.len + gap;
    }

    let labels = LabelTrack::from_events(t_len, &events, schema)?;
    let series = MultichannelSeries {
        sample_rate_hz: rate,
        channel_names: CHANNELS.iter().map(|s| s.to_string()).collect(),
        samples,
        subject_id: String::new(),
        session_id: String::new(),
    };
    Ok((series, labels, events))
}

fn render_pulse(samples: &mut Tensor, start: usize, len: usize, amp: f64, template: &ClassTemplate) {
    use std::f64::consts::PI;
    for i in 0..len {
        let u = (i as f64 + 0.5) / len as f64;
        let vertical = match template.kind {
            PulseKind::Jump => {
                if u < 0.25 {
                    amp * (PI * u / 0.25).sin()
                } else if u < 0.75 {
                    -1.0
                } else {
                    1.5 * amp * (PI * (u - 0.75) / 0.25).sin()
                }
            }
            PulseKind::Slow => -amp * (PI * u).sin(),
        };
        let mixed = amp * (2.0 * PI * u).sin();
        let row = samples.row_mut(start + i);
        row[VERTICAL] += vertical;
        for (v, w) in row.iter_mut().zip(template.channel_mix) {
            *v += w * mixed;
        }
    }
}
