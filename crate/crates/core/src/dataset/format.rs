//! Canonical on-disk layout.
//!
//! ```text
//! <dir>/manifest.json        subjects, fs, channel names, mastoid indices, stage
//! <dir>/profiles.csv         subject_id,dominance,sex,music_education,active_musician
//! <dir>/eeg_<id>.f64         raw stage: C×N row-major little-endian f64
//! <dir>/epochs_<id>.f64      preprocessed stage: E×C×T row-major little-endian f64
//! <dir>/events_<id>.csv      sample_index,label,condition[,degenerate]
//! ```
//!
//! A preprocessed subject with no epochs has an events table but no array file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Dataset, Dominance, Event, RawRecording, Stage, SubjectProfile, TrialEpoch};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const PROFILES_FILE: &str = "profiles.csv";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    stage: Stage,
    fs: f64,
    channel_names: Vec<String>,
    mastoid_indices: Vec<usize>,
    subjects: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epoch_samples: Option<usize>,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::format(&manifest_path, "manifest not found"));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    if manifest.subjects.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(bad) = manifest.subjects.iter().find(|s| !super::valid_subject_id(s)) {
        return Err(Error::format(
            &manifest_path,
            format!("subject id {bad:?} is not path safe"),
        ));
    }
    let profiles = read_profiles(&dir.join(PROFILES_FILE))?;
    let n_ch = manifest.channel_names.len();

    let mut recordings = Vec::new();
    let mut epochs = Vec::new();
    match manifest.stage {
        Stage::Raw => {
            for id in &manifest.subjects {
                let eeg_path = dir.join(format!("eeg_{id}.f64"));
                let values = read_f64_file(&eeg_path)?;
                if n_ch == 0 || values.len() % n_ch != 0 {
                    return Err(Error::format(
                        &eeg_path,
                        format!("{} values do not divide into {n_ch} channels", values.len()),
                    ));
                }
                let n = values.len() / n_ch;
                let samples = Array2::from_shape_vec((n_ch, n), values).expect("length checked");
                let events = read_events(&dir.join(format!("events_{id}.csv")), false)?
                    .into_iter()
                    .map(|(ev, _)| ev)
                    .collect();
                recordings.push(RawRecording {
                    subject_id: id.clone(),
                    samples,
                    fs: manifest.fs,
                    channel_names: manifest.channel_names.clone(),
                    mastoid_indices: manifest.mastoid_indices.clone(),
                    events,
                });
            }
        }
        Stage::Preprocessed => {
            let t = manifest
                .epoch_samples
                .ok_or_else(|| Error::format(&manifest_path, "preprocessed manifest lacks epoch_samples"))?;
            for id in &manifest.subjects {
                let rows = read_events(&dir.join(format!("events_{id}.csv")), true)?;
                if rows.is_empty() {
                    continue;
                }
                let path = dir.join(format!("epochs_{id}.f64"));
                let values = read_f64_file(&path)?;
                let per = n_ch * t;
                if values.len() != rows.len() * per {
                    return Err(Error::format(
                        &path,
                        format!(
                            "expected {} epochs of {n_ch}x{t}, found {} values",
                            rows.len(),
                            values.len()
                        ),
                    ));
                }
                for ((ev, degenerate), chunk) in rows.into_iter().zip(values.chunks_exact(per)) {
                    epochs.push(TrialEpoch {
                        subject_id: id.clone(),
                        data: Array2::from_shape_vec((n_ch, t), chunk.to_vec()).expect("length checked"),
                        label: ev.label,
                        condition: ev.condition,
                        onset: ev.sample_index,
                        degenerate,
                    });
                }
            }
        }
    }

    let dataset = Dataset {
        stage: manifest.stage,
        fs: manifest.fs,
        channel_names: manifest.channel_names,
        mastoid_indices: manifest.mastoid_indices,
        subjects: manifest.subjects,
        recordings,
        epochs,
        profiles,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let epoch_samples = match dataset.stage {
        Stage::Raw => None,
        Stage::Preprocessed => Some(dataset.epochs.first().map_or(0, |e| e.data.ncols())),
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: dataset.stage,
        fs: dataset.fs,
        channel_names: dataset.channel_names.clone(),
        mastoid_indices: dataset.mastoid_indices.clone(),
        subjects: dataset.subjects.clone(),
        epoch_samples,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    write_profiles(&dir.join(PROFILES_FILE), dataset)?;

    for id in &dataset.subjects {
        let events_path = dir.join(format!("events_{id}.csv"));
        match dataset.stage {
            Stage::Raw => {
                let rec = dataset.recording(id).expect("validated: one recording per subject");
                write_file(&dir.join(format!("eeg_{id}.f64")), &f64_bytes([rec.samples.view()]))?;
                let rows: Vec<_> = rec.events.iter().map(|ev| (*ev, None)).collect();
                write_events(&events_path, &rows, false)?;
            }
            Stage::Preprocessed => {
                let eps: Vec<&TrialEpoch> = dataset.epochs_of(id).collect();
                let array_path = dir.join(format!("epochs_{id}.f64"));
                if eps.is_empty() {
                    if array_path.exists() {
                        fs::remove_file(&array_path).map_err(|e| Error::io(&array_path, e))?;
                    }
                } else {
                    write_file(&array_path, &f64_bytes(eps.iter().map(|e| e.data.view())))?;
                }
                let rows: Vec<_> = eps
                    .iter()
                    .map(|e| {
                        (
                            Event {
                                sample_index: e.onset,
                                label: e.label,
                                condition: e.condition,
                            },
                            Some(e.degenerate),
                        )
                    })
                    .collect();
                write_events(&events_path, &rows, true)?;
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f64_bytes<'a>(arrays: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Vec<u8> {
    let mut out = Vec::new();
    for a in arrays {
        // Row-major regardless of the in-memory layout.
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_f64_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(path, "length is not a multiple of 8 bytes"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn read_profiles(path: &Path) -> Result<BTreeMap<String, SubjectProfile>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected = ["subject_id", "dominance", "sex", "music_education", "active_musician"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::format(path, format!("expected header {}", expected.join(","))));
    }
    let mut out = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let bit = |i: usize| -> Result<u8> {
            field(i)
                .parse::<u8>()
                .map_err(|_| Error::format(path, format!("row {}: {} is not 0/1", line + 1, expected[i])))
        };
        let dominance: Dominance = field(1)
            .parse()
            .map_err(|m: String| Error::format(path, format!("row {}: {m}", line + 1)))?;
        let profile = SubjectProfile {
            subject_id: field(0).to_string(),
            dominance,
            sex: bit(2)?,
            music_education: bit(3)?,
            active_musician: bit(4)?,
        };
        if out.insert(profile.subject_id.clone(), profile).is_some() {
            return Err(Error::format(path, format!("row {}: duplicate subject", line + 1)));
        }
    }
    Ok(out)
}

fn write_profiles(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let wr = |w: &mut csv::Writer<fs::File>, rec: &[&str]| w.write_record(rec).map_err(|e| csv_error(path, e));
    wr(
        &mut w,
        &["subject_id", "dominance", "sex", "music_education", "active_musician"],
    )?;
    for p in dataset.profiles.values() {
        wr(
            &mut w,
            &[
                &p.subject_id,
                p.dominance.as_str(),
                &p.sex.to_string(),
                &p.music_education.to_string(),
                &p.active_musician.to_string(),
            ],
        )?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_events(path: &Path, with_flag: bool) -> Result<Vec<(Event, bool)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let bad = |m: String| Error::format(path, format!("row {}: {m}", line + 1));
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let sample_index = field(0)
            .parse::<usize>()
            .map_err(|_| bad(format!("bad sample_index {:?}", field(0))))?;
        let label = field(1).parse().map_err(bad)?;
        let condition = field(2).parse().map_err(bad)?;
        let degenerate = if with_flag { field(3) == "1" } else { false };
        out.push((
            Event {
                sample_index,
                label,
                condition,
            },
            degenerate,
        ));
    }
    Ok(out)
}

fn write_events(path: &Path, rows: &[(Event, Option<bool>)], with_flag: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["sample_index", "label", "condition"];
    if with_flag {
        header.push("degenerate");
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (ev, flag) in rows {
        let idx = ev.sample_index.to_string();
        let mut rec = vec![idx.as_str(), ev.label.as_str(), ev.condition.as_str()];
        if let Some(f) = flag {
            rec.push(if *f { "1" } else { "0" });
        }
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(PathBuf::from(path), e)
}
