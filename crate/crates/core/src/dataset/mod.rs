//! Recordings, subject profiles and epochs, plus the canonical on-disk layout,
//! subject splitting and the synthetic generator.

mod format;
mod split;
mod synth;
pub mod withme;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{load_dataset, save_dataset, MANIFEST_FILE};
pub use split::{split_subjects, Partition, SplitSpec};
pub use synth::{bayes_oracle_accuracy, generate_synthetic, synthetic_template, EffectRule, SyntheticSpec};
pub use withme::{convert_withme, ConversionSummary};

/// Epoch length in seconds used to check that events fit their recording.
pub const EPOCH_SECONDS: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Distractor,
}

impl Label {
    /// Logit index: target is class 0, distractor class 1.
    pub fn index(self) -> usize {
        match self {
            Label::Target => 0,
            Label::Distractor => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Target
        } else {
            Label::Distractor
        }
    }

    /// +1 for target, -1 for distractor.
    pub fn sign(self) -> f64 {
        match self {
            Label::Target => 1.0,
            Label::Distractor => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Target => "target",
            Label::Distractor => "distractor",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "target" => Ok(Label::Target),
            "distractor" => Ok(Label::Distractor),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "visual")]
    Visual,
    #[serde(rename = "rhythmic")]
    Rhythmic,
    #[serde(rename = "beep")]
    Beep,
    #[serde(rename = "rhythmic+beep")]
    RhythmicBeep,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Visual,
        Condition::Rhythmic,
        Condition::Beep,
        Condition::RhythmicBeep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Visual => "visual",
            Condition::Rhythmic => "rhythmic",
            Condition::Beep => "beep",
            Condition::RhythmicBeep => "rhythmic+beep",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| format!("unknown condition {s:?}"))
    }
}

/// A trigger in a continuous recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub sample_index: usize,
    pub label: Label,
    pub condition: Condition,
}

/// Continuous multichannel EEG, `samples` is channels × time.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject_id: String,
    pub samples: Array2<f64>,
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub mastoid_indices: Vec<usize>,
    pub events: Vec<Event>,
}

impl RawRecording {
    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    /// Samples needed for one full epoch at this recording's rate.
    pub fn epoch_span(&self) -> usize {
        (EPOCH_SECONDS * self.fs).ceil() as usize
    }

    /// Every invariant violation, formatted with the subject and event index.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let id = &self.subject_id;
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            out.push(format!("subject {id}: sampling rate {} is not positive", self.fs));
            return out;
        }
        if self.channel_names.len() != self.n_channels() {
            out.push(format!(
                "subject {id}: {} channel names for {} channels",
                self.channel_names.len(),
                self.n_channels()
            ));
        }
        if self.mastoid_indices.is_empty() {
            out.push(format!("subject {id}: no mastoid channels"));
        }
        for (k, &m) in self.mastoid_indices.iter().enumerate() {
            if m >= self.n_channels() {
                out.push(format!(
                    "subject {id}: mastoid index {m} out of range for {} channels",
                    self.n_channels()
                ));
            }
            if self.mastoid_indices[..k].contains(&m) {
                out.push(format!("subject {id}: duplicate mastoid index {m}"));
            }
        }
        let n = self.n_samples();
        let span = self.epoch_span();
        for (k, ev) in self.events.iter().enumerate() {
            if ev.sample_index >= n || ev.sample_index + span > n {
                out.push(format!(
                    "subject {id}: event {k} at sample {} exceeds recording bounds (epoch needs {span} of {n} samples)",
                    ev.sample_index
                ));
            }
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            out.push(format!("subject {id}: non-finite samples"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dominance {
    Auditory,
    Visual,
}

impl Dominance {
    pub fn as_str(self) -> &'static str {
        match self {
            Dominance::Auditory => "auditory",
            Dominance::Visual => "visual",
        }
    }
}

impl fmt::Display for Dominance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dominance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auditory" | "a" => Ok(Dominance::Auditory),
            "visual" | "v" => Ok(Dominance::Visual),
            other => Err(format!("unknown dominance {other:?}")),
        }
    }
}

/// The four conditional identification attributes of one participant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub dominance: Dominance,
    pub sex: u8,
    pub music_education: u8,
    pub active_musician: u8,
}

impl SubjectProfile {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("sex", self.sex),
            ("music_education", self.music_education),
            ("active_musician", self.active_musician),
        ] {
            if v > 1 {
                out.push(format!("profile {}: {name} = {v} is not 0 or 1", self.subject_id));
            }
        }
        out
    }
}

/// One preprocessed C×T segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialEpoch {
    pub subject_id: String,
    pub data: Array2<f64>,
    pub label: Label,
    pub condition: Condition,
    /// Onset in samples at the preprocessed rate.
    pub onset: usize,
    /// Set when some channel had (near) zero variance and was zeroed.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Preprocessed,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Preprocessed => "preprocessed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub stage: Stage,
    /// Sampling rate of the recordings (raw) or epochs (preprocessed).
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub mastoid_indices: Vec<usize>,
    /// Subject listing order; every listed subject has a profile.
    pub subjects: Vec<String>,
    pub recordings: Vec<RawRecording>,
    pub epochs: Vec<TrialEpoch>,
    pub profiles: BTreeMap<String, SubjectProfile>,
}

impl Dataset {
    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn recording(&self, subject_id: &str) -> Option<&RawRecording> {
        self.recordings.iter().find(|r| r.subject_id == subject_id)
    }

    pub fn epochs_of<'a>(&'a self, subject_id: &'a str) -> impl Iterator<Item = &'a TrialEpoch> + 'a {
        self.epochs.iter().filter(move |e| e.subject_id == subject_id)
    }

    pub fn require_stage(&self, stage: Stage) -> Result<()> {
        if self.stage == stage {
            Ok(())
        } else {
            Err(Error::StageMismatch {
                expected: stage.as_str(),
                found: self.stage.as_str(),
            })
        }
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut issues = Vec::new();
        for (k, id) in self.subjects.iter().enumerate() {
            if !valid_subject_id(id) {
                issues.push(format!("subject id {id:?} contains characters outside [A-Za-z0-9_.-]"));
            }
            if self.subjects[..k].contains(id) {
                issues.push(format!("subject {id} listed twice"));
            }
            match self.profiles.get(id) {
                None => issues.push(format!("subject {id}: profile missing")),
                Some(p) => {
                    if &p.subject_id != id {
                        issues.push(format!("subject {id}: profile keyed under wrong id {}", p.subject_id));
                    }
                    issues.extend(p.violations());
                }
            }
        }
        match self.stage {
            Stage::Raw => {
                if !self.epochs.is_empty() {
                    issues.push("raw dataset carries epochs".into());
                }
                for rec in &self.recordings {
                    if !self.subjects.contains(&rec.subject_id) {
                        issues.push(format!("recording for unlisted subject {}", rec.subject_id));
                    }
                    if rec.fs != self.fs || rec.channel_names != self.channel_names {
                        issues.push(format!(
                            "subject {}: sampling rate or channel list differs from the dataset",
                            rec.subject_id
                        ));
                    }
                    if rec.mastoid_indices != self.mastoid_indices {
                        issues.push(format!(
                            "subject {}: mastoid indices differ from the dataset",
                            rec.subject_id
                        ));
                    }
                    issues.extend(rec.violations());
                }
                for id in &self.subjects {
                    let n = self.recordings.iter().filter(|r| &r.subject_id == id).count();
                    if n != 1 {
                        issues.push(format!("subject {id}: {n} recordings (expected 1)"));
                    }
                }
            }
            Stage::Preprocessed => {
                if !self.recordings.is_empty() {
                    issues.push("preprocessed dataset carries raw recordings".into());
                }
                let shape = self.epochs.first().map(|e| e.data.dim());
                let order = |id: &str| self.subjects.iter().position(|s| s == id);
                if self
                    .epochs
                    .windows(2)
                    .any(|w| order(&w[0].subject_id) > order(&w[1].subject_id))
                {
                    issues.push("epochs are not grouped by subject in listing order".into());
                }
                for (k, ep) in self.epochs.iter().enumerate() {
                    if !self.subjects.contains(&ep.subject_id) {
                        issues.push(format!("epoch {k}: unlisted subject {}", ep.subject_id));
                    }
                    if ep.data.nrows() != self.n_channels() || Some(ep.data.dim()) != shape {
                        issues.push(format!(
                            "subject {}: epoch {k} has shape {:?}",
                            ep.subject_id,
                            ep.data.dim()
                        ));
                    }
                    if ep.data.iter().any(|v| !v.is_finite()) {
                        issues.push(format!("subject {}: epoch {k} has non-finite values", ep.subject_id));
                    }
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidDataset(issues))
        }
    }

    /// Number of events (raw) or epochs (preprocessed).
    pub fn n_instances(&self) -> usize {
        match self.stage {
            Stage::Raw => self.recordings.iter().map(|r| r.events.len()).sum(),
            Stage::Preprocessed => self.epochs.len(),
        }
    }
}

pub(crate) fn valid_subject_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && id != "."
        && id != ".."
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_conditions_round_trip_through_strings() {
        for c in Condition::ALL {
            assert_eq!(c.as_str().parse::<Condition>().unwrap(), c);
        }
        assert_eq!("target".parse::<Label>().unwrap(), Label::Target);
        assert_eq!(Label::from_index(Label::Distractor.index()), Label::Distractor);
        assert!("nope".parse::<Label>().is_err());
    }

    #[test]
    fn recording_violations_name_the_event() {
        let rec = RawRecording {
            subject_id: "S1".into(),
            samples: Array2::zeros((2, 100)),
            fs: 64.0,
            channel_names: vec!["a".into(), "b".into()],
            mastoid_indices: vec![1, 1, 5],
            events: vec![Event {
                sample_index: 40,
                label: Label::Target,
                condition: Condition::Beep,
            }],
        };
        let v = rec.violations();
        assert!(v.iter().any(|m| m.contains("event 0")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("duplicate mastoid")));
        assert!(v.iter().any(|m| m.contains("out of range")));
    }

    #[test]
    fn subject_ids_must_be_path_safe() {
        assert!(valid_subject_id("sub-01"));
        assert!(!valid_subject_id("../x"));
        assert!(!valid_subject_id(""));
    }
}
