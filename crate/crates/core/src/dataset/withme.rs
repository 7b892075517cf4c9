//! Adapter from an exported WithMe study tree into the canonical layout.
//!
//! Expected input:
//!
//! ```text
//! <root>/montage.json            {"fs": 1024, "channel_names": [...], "mastoids": ["M1", "M2"]}
//! <root>/participants.csv        participant_id,dominance,sex,music_education,active_musician
//! <root>/<participant_id>/eeg.npy      2-D array, channels × samples, <f4 or <f8, C order
//! <root>/<participant_id>/events.csv   sample,label,condition
//! ```
//!
//! Attribute columns accept `0/1`, `yes/no`, and for dominance `A/V` or
//! `auditory/visual`; sex accepts `M/F` (M → 1). Labels accept
//! `target/distractor` or `1/0`. Events whose epoch would overrun the
//! recording are dropped and counted.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;

use super::{Dataset, Event, Label, RawRecording, Stage, SubjectProfile};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Montage {
    fs: f64,
    channel_names: Vec<String>,
    mastoids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConversionSummary {
    pub subjects: usize,
    pub events: usize,
    pub dropped_events: usize,
}

pub fn convert_withme(root: impl AsRef<Path>) -> Result<(Dataset, ConversionSummary)> {
    let root = root.as_ref();
    let montage_path = root.join("montage.json");
    let text = fs::read_to_string(&montage_path).map_err(|e| Error::io(&montage_path, e))?;
    let montage: Montage = serde_json::from_str(&text).map_err(|e| Error::format(&montage_path, e))?;
    let mastoid_indices = montage
        .mastoids
        .iter()
        .map(|m| {
            montage
                .channel_names
                .iter()
                .position(|c| c.eq_ignore_ascii_case(m))
                .ok_or_else(|| Error::format(&montage_path, format!("mastoid {m} is not a channel")))
        })
        .collect::<Result<Vec<_>>>()?;

    let profiles = read_participants(&root.join("participants.csv"))?;
    let mut summary = ConversionSummary::default();
    let mut recordings = Vec::new();
    for id in profiles.keys() {
        let dir = root.join(id);
        let samples = read_npy_2d(&dir.join("eeg.npy"))?;
        if samples.nrows() != montage.channel_names.len() {
            return Err(Error::format(
                dir.join("eeg.npy"),
                format!(
                    "{} rows but montage lists {} channels",
                    samples.nrows(),
                    montage.channel_names.len()
                ),
            ));
        }
        let span = (super::EPOCH_SECONDS * montage.fs).ceil() as usize;
        let mut events = Vec::new();
        for ev in read_events(&dir.join("events.csv"))? {
            if ev.sample_index + span <= samples.ncols() {
                events.push(ev);
            } else {
                summary.dropped_events += 1;
            }
        }
        summary.events += events.len();
        recordings.push(RawRecording {
            subject_id: id.clone(),
            samples,
            fs: montage.fs,
            channel_names: montage.channel_names.clone(),
            mastoid_indices: mastoid_indices.clone(),
            events,
        });
    }
    summary.subjects = recordings.len();
    let dataset = Dataset {
        stage: Stage::Raw,
        fs: montage.fs,
        channel_names: montage.channel_names,
        mastoid_indices,
        subjects: profiles.keys().cloned().collect(),
        recordings,
        epochs: Vec::new(),
        profiles,
    };
    dataset.validate()?;
    Ok((dataset, summary))
}

fn parse_bit(raw: &str) -> Option<u8> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "yes" | "y" | "true" | "m" | "male" => Some(1),
        "0" | "no" | "n" | "false" | "f" | "female" => Some(0),
        _ => None,
    }
}

fn read_participants(path: &Path) -> Result<BTreeMap<String, SubjectProfile>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut out = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e))?;
        let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", row + 1));
        let get = |i: usize| record.get(i).unwrap_or("");
        let id = get(0).trim().to_string();
        if !super::valid_subject_id(&id) {
            return Err(bad("participant_id"));
        }
        let profile = SubjectProfile {
            subject_id: id.clone(),
            dominance: get(1).parse().map_err(|_| bad("dominance"))?,
            sex: parse_bit(get(2)).ok_or_else(|| bad("sex"))?,
            music_education: parse_bit(get(3)).ok_or_else(|| bad("music_education"))?,
            active_musician: parse_bit(get(4)).ok_or_else(|| bad("active_musician"))?,
        };
        out.insert(id, profile);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

fn read_events(path: &Path) -> Result<Vec<Event>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e))?;
        let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", row + 1));
        let get = |i: usize| record.get(i).unwrap_or("").trim();
        let label = match get(1) {
            "1" => Label::Target,
            "0" => Label::Distractor,
            other => other.parse().map_err(|_| bad("label"))?,
        };
        out.push(Event {
            sample_index: get(0).parse().map_err(|_| bad("sample"))?,
            label,
            condition: get(2).parse().map_err(|_| bad("condition"))?,
        });
    }
    Ok(out)
}

/// Minimal reader for 2-D little-endian float `.npy` files in C order.
pub fn read_npy_2d(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("not an npy file"));
    }
    let (header_len, offset) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        ),
        _ => return Err(bad("unsupported npy version")),
    };
    let header = std::str::from_utf8(
        bytes
            .get(offset..offset + header_len)
            .ok_or_else(|| bad("truncated header"))?,
    )
    .map_err(|_| bad("header is not utf-8"))?;
    let field = |key: &str| -> Option<&str> {
        let start = header.find(&format!("'{key}'"))? + key.len() + 2;
        let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
        Some(rest)
    };
    let descr = field("descr").ok_or_else(|| bad("missing descr"))?;
    let width = if descr.starts_with("'<f8'") {
        8
    } else if descr.starts_with("'<f4'") {
        4
    } else {
        return Err(bad("dtype must be <f4 or <f8"));
    };
    if field("fortran_order").is_some_and(|v| v.starts_with("True")) {
        return Err(bad("fortran order is not supported"));
    }
    let shape_src = field("shape").ok_or_else(|| bad("missing shape"))?;
    let inner = shape_src
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("bad shape"))?;
    let dims: Vec<usize> = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(bad("array must be 2-D"));
    };
    let data = &bytes[offset + header_len..];
    if data.len() != rows * cols * width {
        return Err(bad("payload size does not match shape"));
    }
    let values: Vec<f64> = if width == 8 {
        data.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    } else {
        data.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect()
    };
    Ok(Array2::from_shape_vec((rows, cols), values).expect("size checked"))
}
