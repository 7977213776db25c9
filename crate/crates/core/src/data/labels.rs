//! Label tracks, class schemas and label CSV files.
//!
//! Two label CSV layouts are accepted:
//! * events: header `start_sample,end_sample,class`, inclusive bounds;
//! * per-sample: header `class`, exactly `T` rows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::series::csv_error;
use crate::error::{Error, Result};
use crate::metrics::SegmentEvent;

pub const NULL_CLASS: &str = "null";

/// Ordered class names; index 0 is always `"null"` (no activity).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassSchema(Vec<String>);

impl TryFrom<Vec<String>> for ClassSchema {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        if names.first().map(String::as_str) != Some(NULL_CLASS) {
            return Err(Error::Schema("class 0 must be \"null\"".into()));
        }
        if names.len() < 2 {
            return Err(Error::Schema("schema needs at least one activity class".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Schema(format!("duplicate class name {n:?}")));
            }
        }
        Ok(ClassSchema(names))
    }
}

impl From<ClassSchema> for Vec<String> {
    fn from(s: ClassSchema) -> Self {
        s.0
    }
}

impl ClassSchema {
    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.0
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Schema(format!("unknown class {name:?}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTrack {
    pub classes: Vec<usize>,
    pub schema: ClassSchema,
}

impl LabelTrack {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Expands events into a per-sample track; uncovered samples are null.
    pub fn from_events(t_len: usize, events: &[SegmentEvent], schema: &ClassSchema) -> Result<Self> {
        let mut classes = vec![0; t_len];
        let mut covered = vec![false; t_len];
        for ev in events {
            if ev.end < ev.start || ev.end >= t_len {
                return Err(Error::InvalidArgument(format!("event {ev:?} outside 0..{t_len}")));
            }
            if ev.class_id == 0 || ev.class_id >= schema.len() {
                return Err(Error::Schema(format!("event class {} not an activity class", ev.class_id)));
            }
            for t in ev.start..=ev.end {
                if covered[t] {
                    return Err(Error::InvalidArgument(format!("event {ev:?} overlaps another event")));
                }
                covered[t] = true;
                classes[t] = ev.class_id;
            }
        }
        Ok(LabelTrack {
            classes,
            schema: schema.clone(),
        })
    }
}

pub fn load_labels(path: &Path, t_len: usize, schema: &ClassSchema) -> Result<LabelTrack> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["start_sample", "end_sample", "class"] => load_events(path, reader, t_len, schema),
        ["class"] => load_per_sample(path, reader, t_len, schema),
        _ => Err(Error::format(
            path,
            format!("unrecognised label header {header:?}; expected `start_sample,end_sample,class` or `class`"),
        )),
    }
}

fn load_events(path: &Path, mut reader: csv::Reader<File>, t_len: usize, schema: &ClassSchema) -> Result<LabelTrack> {
    let mut events = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        let parse = |j: usize| -> Result<usize> {
            record[j]
                .parse()
                .map_err(|_| Error::format(path, format!("row {row}: bad sample index {:?}", &record[j])))
        };
        let (start, end) = (parse(0)?, parse(1)?);
        if end < start {
            return Err(Error::format(path, format!("row {row}: end {end} before start {start}")));
        }
        if end >= t_len {
            return Err(Error::format(path, format!("row {row}: end {end} beyond series length {t_len}")));
        }
        let class_id = schema.index_of(&record[2])?;
        if class_id == 0 {
            return Err(Error::Schema(format!("row {row}: events cannot use the null class")));
        }
        events.push(SegmentEvent { class_id, start, end });
    }
    events.sort_by_key(|e| e.start);
    for w in events.windows(2) {
        if w[1].start <= w[0].end {
            return Err(Error::Overlap {
                path: path.to_owned(),
                msg: format!("{:?} overlaps {:?}", w[0], w[1]),
            });
        }
    }
    LabelTrack::from_events(t_len, &events, schema)
}

fn load_per_sample(path: &Path, mut reader: csv::Reader<File>, t_len: usize, schema: &ClassSchema) -> Result<LabelTrack> {
    let mut classes = Vec::with_capacity(t_len);
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        classes.push(schema.index_of(&record[0])?);
    }
    if classes.len() != t_len {
        return Err(Error::format(path, format!("{} label rows for {t_len} samples", classes.len())));
    }
    Ok(LabelTrack {
        classes,
        schema: schema.clone(),
    })
}

pub fn write_event_labels(path: &Path, events: &[SegmentEvent], schema: &ClassSchema) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "start_sample,end_sample,class").map_err(io)?;
    for ev in events {
        writeln!(w, "{},{},{}", ev.start, ev.end, schema.names()[ev.class_id]).map_err(io)?;
    }
    w.flush().map_err(io)
}
