//! Synthetic recordings with a known profile-conditioned evoked response.
//!
//! Each epoch carries `y * a * gain * polarity * pattern ⊗ g(t - L)` on top of
//! pink background noise of unit power, where `y` is +1 for targets and -1 for
//! distractors, `g` a unit Gaussian bump and `L`, `polarity`, `gain` follow the
//! subject's profile through an [`EffectRule`].

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Condition, Dataset, Dominance, Event, Label, RawRecording, Stage, SubjectProfile, EPOCH_SECONDS};
use crate::error::{Error, Result};
use crate::rng;

const LEAD_SECONDS: f64 = 2.0;
const TAIL_SECONDS: f64 = 2.0;

/// How profile bits shape the evoked response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EffectRule {
    /// Latency added for auditory-dominant subjects, seconds.
    pub dominance_latency_shift: f64,
    /// Sex bit 1 flips the sign of the spatial pattern.
    pub sex_flips_polarity: bool,
    /// Each music bit scales amplitude by `1 ± music_gain`.
    pub music_gain: f64,
}

impl EffectRule {
    pub fn informative() -> Self {
        Self {
            dominance_latency_shift: 0.15,
            sex_flips_polarity: true,
            music_gain: 0.1,
        }
    }

    /// No profile dependence at all.
    pub fn null() -> Self {
        Self {
            dominance_latency_shift: 0.0,
            sex_flips_polarity: false,
            music_gain: 0.0,
        }
    }
}

impl Default for EffectRule {
    fn default() -> Self {
        Self::informative()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub epochs_per_subject: usize,
    pub channels: usize,
    pub fs: f64,
    /// Evoked amplitude relative to unit-power noise; `inf` means noiseless.
    pub snr: f64,
    pub effect: EffectRule,
    pub seed: u64,
    /// Evoked peak latency for visual-dominant subjects, seconds.
    pub base_latency: f64,
    /// Standard deviation of the Gaussian bump, seconds.
    pub bump_width: f64,
    /// Inter-stimulus interval, seconds.
    pub isi: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_subjects: 14,
            epochs_per_subject: 300,
            channels: 8,
            fs: 256.0,
            snr: 1.0,
            effect: EffectRule::default(),
            seed: 7,
            base_latency: 0.3,
            bump_width: 0.1,
            isi: 1.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.snr.is_nan() || self.snr < 0.0 {
            return err(format!("synthetic.snr = {} must be >= 0", self.snr));
        }
        if self.epochs_per_subject < 2 {
            return err(format!(
                "synthetic.epochs_per_subject = {} must be >= 2",
                self.epochs_per_subject
            ));
        }
        if self.n_subjects == 0 {
            return err("synthetic.n_subjects must be >= 1".into());
        }
        if self.channels < 2 {
            return err(format!("synthetic.channels = {} must be >= 2", self.channels));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return err(format!("synthetic.fs = {} must be positive", self.fs));
        }
        if !(self.isi >= EPOCH_SECONDS) {
            return err(format!("synthetic.isi = {} must be >= {EPOCH_SECONDS}", self.isi));
        }
        if !(self.bump_width > 0.0) || !(self.base_latency >= 0.0) {
            return err("synthetic.bump_width must be > 0 and base_latency >= 0".into());
        }
        Ok(())
    }

    pub fn mastoid_indices(&self) -> Vec<usize> {
        if self.channels >= 3 {
            vec![self.channels - 2, self.channels - 1]
        } else {
            vec![self.channels - 1]
        }
    }

    fn channel_names(&self) -> Vec<String> {
        let mastoids = self.mastoid_indices();
        (0..self.channels)
            .map(|c| match mastoids.iter().position(|&m| m == c) {
                Some(k) => format!("M{}", k + 1),
                None => format!("EEG{:02}", c + 1),
            })
            .collect()
    }

    fn epoch_span(&self) -> usize {
        (EPOCH_SECONDS * self.fs).ceil() as usize
    }

    fn event_positions(&self) -> Vec<usize> {
        (0..self.epochs_per_subject)
            .map(|k| ((LEAD_SECONDS + k as f64 * self.isi) * self.fs).round() as usize)
            .collect()
    }

    fn recording_len(&self) -> usize {
        let last = *self.event_positions().last().expect("at least two epochs");
        last + self.epoch_span() + (TAIL_SECONDS * self.fs).round() as usize
    }

    /// (amplitude, noise scale) pair implied by `snr`.
    fn levels(&self) -> (f64, f64) {
        if self.snr.is_infinite() {
            (1.0, 0.0)
        } else {
            (self.snr, 1.0)
        }
    }

    /// Fixed spatial pattern: zero on mastoids, unit mean square elsewhere.
    pub fn spatial_pattern(&self) -> Vec<f64> {
        let mut r = rng::named(self.seed, "synthetic.pattern");
        let mastoids = self.mastoid_indices();
        let mut p: Vec<f64> = (0..self.channels)
            .map(|c| {
                let v: f64 = r.sample(StandardNormal);
                if mastoids.contains(&c) {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        let active = (self.channels - mastoids.len()) as f64;
        let rms = (p.iter().map(|v| v * v).sum::<f64>() / active).sqrt();
        p.iter_mut().for_each(|v| *v /= rms);
        p
    }
}

/// The noiseless target response (y = +1, unit snr) of a subject over one
/// epoch window, channels × ceil(1.2 fs).
pub fn synthetic_template(spec: &SyntheticSpec, profile: &SubjectProfile) -> Array2<f64> {
    template_with_pattern(spec, profile, &spec.spatial_pattern())
}

fn template_with_pattern(spec: &SyntheticSpec, profile: &SubjectProfile, pattern: &[f64]) -> Array2<f64> {
    let effect = &spec.effect;
    let auditory = f64::from(u8::from(profile.dominance == Dominance::Auditory));
    let latency = spec.base_latency + effect.dominance_latency_shift * auditory;
    let polarity = if effect.sex_flips_polarity && profile.sex == 1 {
        -1.0
    } else {
        1.0
    };
    let music = f64::from(profile.music_education) + f64::from(profile.active_musician) - 1.0;
    let gain = 1.0 + effect.music_gain * music;
    let w = spec.epoch_span();
    Array2::from_shape_fn((spec.channels, w), |(c, t)| {
        let dt = t as f64 / spec.fs - latency;
        polarity * gain * pattern[c] * (-dt * dt / (2.0 * spec.bump_width * spec.bump_width)).exp()
    })
}

fn draw_profiles(spec: &SyntheticSpec) -> Vec<SubjectProfile> {
    let mut codes: Vec<u8> = (0..16).collect();
    codes.shuffle(&mut rng::named(spec.seed, "synthetic.profiles"));
    (0..spec.n_subjects)
        .map(|i| {
            let code = codes[i % 16];
            SubjectProfile {
                subject_id: format!("S{i:02}"),
                dominance: if code & 8 != 0 {
                    Dominance::Auditory
                } else {
                    Dominance::Visual
                },
                sex: (code >> 2) & 1,
                music_education: (code >> 1) & 1,
                active_musician: code & 1,
            }
        })
        .collect()
}

/// Unit-variance 1/f noise of length `n` by spectral shaping of white noise.
fn pink_noise(n: usize, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, v) in buf.iter_mut().enumerate().skip(1) {
        let f = k.min(n - k) as f64;
        *v /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = out.iter().sum::<f64>() / n as f64;
    let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let scale = 1.0 / var.sqrt();
    out.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    out
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let profiles = draw_profiles(spec);
    let pattern = spec.spatial_pattern();
    let (amplitude, noise_scale) = spec.levels();
    let positions = spec.event_positions();
    let n = spec.recording_len();
    let span = spec.epoch_span();
    let mut planner = FftPlanner::new();

    let mut recordings = Vec::with_capacity(spec.n_subjects);
    for (i, profile) in profiles.iter().enumerate() {
        let mut r = rng::stream(spec.seed, 1 + i as u64);
        let n_ev = spec.epochs_per_subject;
        let mut labels: Vec<Label> = (0..n_ev)
            .map(|k| {
                if k < n_ev.div_ceil(2) {
                    Label::Target
                } else {
                    Label::Distractor
                }
            })
            .collect();
        labels.shuffle(&mut r);

        let mut samples = Array2::<f64>::zeros((spec.channels, n));
        for c in 0..spec.channels {
            let noise = pink_noise(n, &mut r, &mut planner);
            samples
                .row_mut(c)
                .iter_mut()
                .zip(noise)
                .for_each(|(s, v)| *s = noise_scale * v);
        }
        let template = template_with_pattern(spec, profile, &pattern);
        let mut events = Vec::with_capacity(n_ev);
        for (k, (&pos, &label)) in positions.iter().zip(&labels).enumerate() {
            let y = label.sign() * amplitude;
            for c in 0..spec.channels {
                for t in 0..span {
                    samples[[c, pos + t]] += y * template[[c, t]];
                }
            }
            events.push(Event {
                sample_index: pos,
                label,
                condition: Condition::ALL[k % 4],
            });
        }
        recordings.push(RawRecording {
            subject_id: profile.subject_id.clone(),
            samples,
            fs: spec.fs,
            channel_names: spec.channel_names(),
            mastoid_indices: spec.mastoid_indices(),
            events,
        });
    }

    let dataset = Dataset {
        stage: Stage::Raw,
        fs: spec.fs,
        channel_names: spec.channel_names(),
        mastoid_indices: spec.mastoid_indices(),
        subjects: profiles.iter().map(|p| p.subject_id.clone()).collect(),
        recordings,
        epochs: Vec::new(),
        profiles: profiles
            .into_iter()
            .map(|p| (p.subject_id.clone(), p))
            .collect::<BTreeMap<_, _>>(),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Monte-Carlo accuracy of the profile-aware matched filter: classify each
/// draw by the sign of its correlation with the subject's true template.
///
/// Noise windows are cut at the generator's event positions from noise
/// produced exactly as in [`generate_synthetic`], cycling over `profiles`.
pub fn bayes_oracle_accuracy(
    spec: &SyntheticSpec,
    profiles: &[SubjectProfile],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    spec.validate()?;
    if profiles.is_empty() || draws == 0 {
        return Err(Error::Empty("oracle draws"));
    }
    let pattern = spec.spatial_pattern();
    let (amplitude, noise_scale) = spec.levels();
    let templates: Vec<Array2<f64>> = profiles
        .iter()
        .map(|p| template_with_pattern(spec, p, &pattern))
        .collect();
    let energies: Vec<f64> = templates.iter().map(|t| t.iter().map(|v| v * v).sum()).collect();
    let positions = spec.event_positions();
    let n = spec.recording_len();
    let span = spec.epoch_span();
    let mut planner = FftPlanner::new();
    let mut r = rng::named(seed, "oracle");

    let mut correct = 0usize;
    let mut done = 0usize;
    while done < draws {
        let noise: Vec<Vec<f64>> = (0..spec.channels)
            .map(|_| pink_noise(n, &mut r, &mut planner))
            .collect();
        for &pos in &positions {
            if done == draws {
                break;
            }
            let which = done % profiles.len();
            let template = &templates[which];
            let y = if r.random::<bool>() { 1.0 } else { -1.0 };
            let mut projection = 0.0;
            for (c, row) in noise.iter().enumerate() {
                for t in 0..span {
                    projection += row[pos + t] * template[[c, t]];
                }
            }
            let stat = y * amplitude * energies[which] + noise_scale * projection;
            if stat * y > 0.0 {
                correct += 1;
            }
            done += 1;
        }
    }
    Ok(correct as f64 / draws as f64)
}
