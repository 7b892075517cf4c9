//! Signal chain: mastoid re-reference, 1–30 Hz zero-phase band-pass,
//! downsampling to 64 Hz, 1.2 s epoching at the trigger and per-epoch
//! normalization.

pub mod filter;
pub mod resample;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, RawRecording, Stage, TrialEpoch};
use crate::error::{Error, Result};
use filter::Sos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeAxis {
    /// Each channel row of an epoch gets zero mean and unit variance.
    Channel,
    /// The whole C×T block shares one mean and variance.
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub band_low: f64,
    pub band_high: f64,
    pub target_fs: f64,
    pub epoch_seconds: f64,
    /// Butterworth order of each band edge, applied forward and backward.
    pub filter_order: usize,
    /// Variance floor below which a row is declared degenerate.
    pub eps: f64,
    pub normalize_axis: NormalizeAxis,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_low: 1.0,
            band_high: 30.0,
            target_fs: 64.0,
            epoch_seconds: 1.2,
            filter_order: 4,
            eps: 1e-12,
            normalize_axis: NormalizeAxis::Channel,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.band_low && self.band_low < self.band_high && self.band_high < self.target_fs / 2.0) {
            return Err(Error::Config(format!(
                "need 0 < band_low ({}) < band_high ({}) < target_fs/2 ({})",
                self.band_low,
                self.band_high,
                self.target_fs / 2.0
            )));
        }
        if !(self.epoch_seconds > 0.0) {
            return Err(Error::Config("epoch_seconds must be > 0".into()));
        }
        if self.filter_order == 0 {
            return Err(Error::Config("filter_order must be >= 1".into()));
        }
        if self.target_fs.fract() != 0.0 {
            return Err(Error::Config("target_fs must be an integer rate".into()));
        }
        Ok(())
    }

    /// Epoch length in samples at the target rate: round(1.2 · 64) = 77.
    pub fn epoch_samples(&self) -> usize {
        (self.epoch_seconds * self.target_fs).round() as usize
    }
}

/// Subtracts the mean of the mastoid channels from every channel.
pub fn rereference(rec: &RawRecording) -> Result<RawRecording> {
    if rec.mastoid_indices.is_empty() {
        return Err(Error::Config(format!("subject {}: empty mastoid set", rec.subject_id)));
    }
    if let Some(&m) = rec.mastoid_indices.iter().find(|&&m| m >= rec.n_channels()) {
        return Err(Error::InvalidDataset(vec![format!(
            "subject {}: mastoid index {m} out of range",
            rec.subject_id
        )]));
    }
    let k = rec.mastoid_indices.len() as f64;
    let mut reference = Array1::<f64>::zeros(rec.n_samples());
    for &m in &rec.mastoid_indices {
        reference += &rec.samples.row(m);
    }
    reference /= k;
    let mut out = rec.clone();
    for mut row in out.samples.rows_mut() {
        row -= &reference;
    }
    Ok(out)
}

/// Forward-backward Butterworth band-pass, channel by channel.
pub fn bandpass(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<RawRecording> {
    if !(rec.fs > 2.0 * cfg.band_high) {
        return Err(Error::Config(format!(
            "subject {}: fs = {} Hz is too low for a {} Hz band edge",
            rec.subject_id, rec.fs, cfg.band_high
        )));
    }
    let sos = Sos::butter_bandpass(cfg.filter_order, cfg.band_low, cfg.band_high, rec.fs)?;
    let padlen = 3 * (rec.fs / cfg.band_low).ceil() as usize;
    let mut out = rec.clone();
    for (src, mut dst) in rec.samples.rows().into_iter().zip(out.samples.rows_mut()) {
        let y = sos.filtfilt(&src.to_vec(), padlen);
        dst.iter_mut().zip(y).for_each(|(d, v)| *d = v);
    }
    Ok(out)
}

/// Rate conversion to `cfg.target_fs`; events move to floor(index · 64 / fs).
pub fn downsample(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<RawRecording> {
    cfg.validate()?;
    let target = cfg.target_fs;
    if rec.fs == target {
        return Ok(rec.clone());
    }
    let convert = |row: &[f64]| -> Result<Vec<f64>> {
        let ratio = rec.fs / target;
        if ratio.fract() == 0.0 {
            Ok(resample::decimate(row, ratio as usize))
        } else if rec.fs.fract() == 0.0 {
            let (up, down) = resample::rational_ratio(rec.fs as u64, target as u64);
            Ok(resample::resample_poly(row, up, down))
        } else {
            Err(Error::Config(format!(
                "subject {}: cannot resample non-integer rate {} Hz",
                rec.subject_id, rec.fs
            )))
        }
    };
    let rows = rec
        .samples
        .rows()
        .into_iter()
        .map(|r| convert(&r.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let n = rows.first().map_or(0, Vec::len);
    let samples = Array2::from_shape_vec((rows.len(), n), rows.concat()).expect("equal row lengths");
    let events = rec
        .events
        .iter()
        .map(|ev| {
            let mut ev = *ev;
            ev.sample_index = (ev.sample_index as f64 * target / rec.fs).floor() as usize;
            ev
        })
        .collect();
    Ok(RawRecording {
        samples,
        fs: target,
        events,
        ..rec.clone()
    })
}

/// One un-normalized epoch per event, `[onset, onset + T)`.
pub fn epoch(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<Vec<TrialEpoch>> {
    if rec.fs != cfg.target_fs {
        return Err(Error::Config(format!(
            "subject {}: epoching expects {} Hz, recording is {} Hz",
            rec.subject_id, cfg.target_fs, rec.fs
        )));
    }
    let t = cfg.epoch_samples();
    rec.events
        .iter()
        .enumerate()
        .map(|(k, ev)| {
            if ev.sample_index + t > rec.n_samples() {
                return Err(Error::InvalidDataset(vec![format!(
                    "subject {}: event {k} epoch [{}, {}) exceeds {} samples",
                    rec.subject_id,
                    ev.sample_index,
                    ev.sample_index + t,
                    rec.n_samples()
                )]));
            }
            Ok(TrialEpoch {
                subject_id: rec.subject_id.clone(),
                data: rec
                    .samples
                    .slice(ndarray::s![.., ev.sample_index..ev.sample_index + t])
                    .to_owned(),
                label: ev.label,
                condition: ev.condition,
                onset: ev.sample_index,
                degenerate: false,
            })
        })
        .collect()
}

/// Zero mean, unit (population) variance per row, or over the whole block.
/// Rows whose variance falls below `eps` become zero and flag the epoch.
pub fn normalize(ep: &TrialEpoch, cfg: &PreprocessConfig) -> TrialEpoch {
    let mut out = ep.clone();
    let standardize = |values: &mut [f64]| -> bool {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var < cfg.eps || !var.is_finite() {
            values.iter_mut().for_each(|v| *v = 0.0);
            true
        } else {
            let sd = var.sqrt();
            values.iter_mut().for_each(|v| *v = (*v - mean) / sd);
            false
        }
    };
    let mut degenerate = false;
    match cfg.normalize_axis {
        NormalizeAxis::Channel => {
            for mut row in out.data.axis_iter_mut(Axis(0)) {
                let mut values = row.to_vec();
                degenerate |= standardize(&mut values);
                row.iter_mut().zip(values).for_each(|(d, v)| *d = v);
            }
        }
        NormalizeAxis::Epoch => {
            let mut values: Vec<f64> = out.data.iter().copied().collect();
            degenerate = standardize(&mut values);
            out.data.iter_mut().zip(values).for_each(|(d, v)| *d = v);
        }
    }
    out.degenerate = ep.degenerate || degenerate;
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub events: usize,
    pub epochs: usize,
    /// Events whose window no longer fits after rate conversion.
    pub excluded: usize,
    pub degenerate: usize,
    pub epoch_samples: usize,
    pub channels: usize,
}

/// Runs one recording through the whole chain, dropping events whose window
/// would run past the end after rate conversion.
pub fn preprocess_recording(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<(Vec<TrialEpoch>, usize)> {
    let mut low = downsample(&bandpass(&rereference(rec)?, cfg)?, cfg)?;
    let t = cfg.epoch_samples();
    let before = low.events.len();
    let n = low.n_samples();
    low.events.retain(|ev| ev.sample_index + t <= n);
    let excluded = before - low.events.len();
    let epochs = epoch(&low, cfg)?.iter().map(|e| normalize(e, cfg)).collect();
    Ok((epochs, excluded))
}

pub fn preprocess_pipeline(dataset: &Dataset, cfg: &PreprocessConfig) -> Result<(Dataset, PreprocessSummary)> {
    cfg.validate()?;
    dataset.require_stage(Stage::Raw)?;
    let mut per_subject: BTreeMap<&str, Vec<TrialEpoch>> = BTreeMap::new();
    let mut summary = PreprocessSummary {
        epoch_samples: cfg.epoch_samples(),
        channels: dataset.n_channels(),
        ..Default::default()
    };
    for rec in &dataset.recordings {
        let (epochs, excluded) = preprocess_recording(rec, cfg)?;
        summary.events += rec.events.len();
        summary.excluded += excluded;
        per_subject.insert(rec.subject_id.as_str(), epochs);
    }
    let mut epochs = Vec::new();
    for id in &dataset.subjects {
        epochs.extend(per_subject.remove(id.as_str()).unwrap_or_default());
    }
    summary.epochs = epochs.len();
    summary.degenerate = epochs.iter().filter(|e| e.degenerate).count();
    let out = Dataset {
        stage: Stage::Preprocessed,
        fs: cfg.target_fs,
        channel_names: dataset.channel_names.clone(),
        mastoid_indices: dataset.mastoid_indices.clone(),
        subjects: dataset.subjects.clone(),
        recordings: Vec::new(),
        epochs,
        profiles: dataset.profiles.clone(),
    };
    out.validate()?;
    Ok((out, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Condition, Event, Label};

    fn recording(samples: Array2<f64>, fs: f64, events: Vec<usize>) -> RawRecording {
        let c = samples.nrows();
        RawRecording {
            subject_id: "S".into(),
            samples,
            fs,
            channel_names: (0..c).map(|i| format!("c{i}")).collect(),
            mastoid_indices: vec![c - 1],
            events: events
                .into_iter()
                .map(|i| Event {
                    sample_index: i,
                    label: Label::Target,
                    condition: Condition::Visual,
                })
                .collect(),
        }
    }

    #[test]
    fn constant_channels_rereference_to_zero() {
        let rec = recording(Array2::from_elem((4, 10), 1.0), 64.0, vec![]);
        let out = rereference(&rec).unwrap();
        assert!(out.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_mastoid_set_is_an_error() {
        let mut rec = recording(Array2::zeros((2, 10)), 64.0, vec![]);
        rec.mastoid_indices.clear();
        assert!(rereference(&rec).is_err());
    }

    #[test]
    fn decimating_128_hz_halves_the_length() {
        let samples = Array2::from_shape_fn((1, 256), |(_, t)| t as f64);
        let rec = recording(samples, 128.0, vec![100]);
        let out = downsample(&rec, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.n_samples(), 128);
        assert_eq!(out.samples[[0, 5]], 10.0);
        assert_eq!(out.events[0].sample_index, 50);
        assert_eq!(out.fs, 64.0);
    }

    #[test]
    fn event_index_rescales_exactly() {
        let rec = recording(Array2::zeros((1, 2048)), 1024.0, vec![1024]);
        let out = downsample(&rec, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.events[0].sample_index, 64);
    }

    #[test]
    fn epoch_length_is_77() {
        assert_eq!(PreprocessConfig::default().epoch_samples(), 77);
        let rec = recording(Array2::zeros((2, 77)), 64.0, vec![0]);
        let eps = epoch(&rec, &PreprocessConfig::default()).unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].data.dim(), (2, 77));
    }

    #[test]
    fn epochs_keep_event_order() {
        let samples = Array2::from_shape_fn((1, 300), |(_, t)| t as f64);
        let rec = recording(samples, 64.0, vec![50, 0, 200]);
        let eps = epoch(&rec, &PreprocessConfig::default()).unwrap();
        let onsets: Vec<f64> = eps.iter().map(|e| e.data[[0, 0]]).collect();
        assert_eq!(onsets, vec![50.0, 0.0, 200.0]);
    }

    #[test]
    fn epoch_past_the_end_is_rejected() {
        let rec = recording(Array2::zeros((1, 80)), 64.0, vec![10]);
        assert!(epoch(&rec, &PreprocessConfig::default()).is_err());
    }

    #[test]
    fn constant_row_is_zeroed_and_flagged() {
        let mut data = Array2::from_shape_fn((2, 77), |(c, t)| if c == 0 { 3.0 } else { t as f64 });
        data[[1, 5]] = -4.0;
        let ep = TrialEpoch {
            subject_id: "S".into(),
            data,
            label: Label::Target,
            condition: Condition::Beep,
            onset: 0,
            degenerate: false,
        };
        let out = normalize(&ep, &PreprocessConfig::default());
        assert!(out.degenerate);
        assert!(out.data.row(0).iter().all(|&v| v == 0.0));
        let row = out.data.row(1);
        let mean = row.sum() / 77.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 77.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn block_normalization_uses_one_scale() {
        let data = Array2::from_shape_fn((2, 77), |(c, t)| (c as f64 + 1.0) * (t as f64).sin());
        let ep = TrialEpoch {
            subject_id: "S".into(),
            data,
            label: Label::Target,
            condition: Condition::Beep,
            onset: 0,
            degenerate: false,
        };
        let cfg = PreprocessConfig {
            normalize_axis: NormalizeAxis::Epoch,
            ..Default::default()
        };
        let out = normalize(&ep, &cfg);
        // One shared offset and scale: sample differences keep the 2:1 ratio.
        let ratio = (out.data[[1, 3]] - out.data[[1, 7]]) / (out.data[[0, 3]] - out.data[[0, 7]]);
        assert!((ratio - 2.0).abs() < 1e-9);
        let mean = out.data.sum() / out.data.len() as f64;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn config_rejects_band_above_nyquist() {
        let cfg = PreprocessConfig {
            band_high: 40.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
