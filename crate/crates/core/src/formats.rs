//! On-disk formats: histogram CSV, frame log CSV and JSON documents.
//!
//! All text output is UTF-8 with LF line endings. Floats use Rust's shortest
//! round-trip representation, so output bytes are a pure function of values.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::risk_metrics::{StateHistogram, TtaValue};
use crate::sim::FrameRecord;

pub const HISTOGRAM_HEADER: [&str; 2] = ["state", "count"];

pub const FRAMES_HEADER: [&str; 11] = [
    "frame",
    "time_s",
    "leader_pos_m",
    "leader_v_mps",
    "follower_pos_m",
    "follower_v_mps",
    "tta_s",
    "state",
    "action",
    "delayed",
    "errored",
];

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_histogram_csv<W: Write>(hist: &StateHistogram, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(HISTOGRAM_HEADER).map_err(csv_err)?;
    for (i, n) in hist.counts().iter().enumerate() {
        w.write_record([i.to_string(), n.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn histogram_csv_string(hist: &StateHistogram) -> String {
    let mut buf = Vec::new();
    write_histogram_csv(hist, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

/// Parse a histogram CSV: header `state,count`, then one row per state
/// index in ascending order starting at 0.
pub fn read_histogram_csv(text: &str) -> Result<StateHistogram> {
    if text.contains('\r') {
        return Err(Error::Parse("histogram CSV must use LF line endings".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != HISTOGRAM_HEADER {
        return Err(Error::Parse(format!(
            "histogram CSV header must be `state,count`, got `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut counts = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.len() != 2 {
            return Err(Error::Parse(format!("row {}: expected 2 fields", row + 1)));
        }
        let state: usize = rec[0]
            .parse()
            .map_err(|_| Error::Parse(format!("row {}: bad state index `{}`", row + 1, &rec[0])))?;
        if state != row {
            return Err(Error::Parse(format!("row {}: expected state {row}, got {state}", row + 1)));
        }
        let count: u64 = rec[1]
            .parse()
            .map_err(|_| Error::Parse(format!("row {}: bad count `{}`", row + 1, &rec[1])))?;
        counts.push(count);
    }
    if counts.is_empty() {
        return Err(Error::Parse("histogram CSV has no rows".into()));
    }
    Ok(StateHistogram::new(counts))
}

fn tta_field(t: &TtaValue) -> String {
    match t {
        TtaValue::NoConflict => "-inf".to_string(),
        TtaValue::Finite(v) => format!("{v}"),
    }
}

pub fn write_frames_csv<W: Write>(frames: &[FrameRecord], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(FRAMES_HEADER).map_err(csv_err)?;
    for f in frames {
        w.write_record([
            f.frame_index.to_string(),
            format!("{}", f.time),
            format!("{}", f.leader.position),
            format!("{}", f.leader.speed),
            format!("{}", f.follower.position),
            format!("{}", f.follower.speed),
            tta_field(&f.tta),
            f.state.to_string(),
            f.action.as_str().to_string(),
            (f.delayed as u8).to_string(),
            (f.errored as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}
