//! Profile encoding, the 16-dimensional subject embedding and its fusion with
//! EEG epochs.
//!
//! The EEG path is the identity ("pre-convolution" layer); the embedding is
//! tiled across time and appended as 16 constant channels, so every backbone
//! consumes the same `(C + 16) × T` input.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Condition, Dataset, Dominance, Label, Stage, SubjectProfile, TrialEpoch};
use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 16;
pub const PROFILE_BITS: usize = 4;

/// Profile as bits ordered (dominance, sex, music_education, active_musician);
/// auditory dominance is 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProfileCode(pub [u8; PROFILE_BITS]);

impl ProfileCode {
    pub fn bits(&self) -> [f64; PROFILE_BITS] {
        self.0.map(f64::from)
    }

    /// Code as an integer in 0..16, dominance being the most significant bit.
    pub fn index(&self) -> usize {
        self.0.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < 16, "profile code index {i} out of range");
        ProfileCode([(i >> 3) as u8 & 1, (i >> 2) as u8 & 1, (i >> 1) as u8 & 1, i as u8 & 1])
    }

    /// Compact "dsma" string such as `1011`.
    pub fn label(&self) -> String {
        self.0.iter().map(|b| char::from(b'0' + b)).collect()
    }
}

pub fn encode_profile(p: &SubjectProfile) -> ProfileCode {
    let dominance = u8::from(p.dominance == Dominance::Auditory);
    ProfileCode([dominance, p.sex, p.music_education, p.active_musician])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// `e = W · bits + b`, W is 16×4.
    #[default]
    Affine,
    /// One learned 16-vector per profile combination.
    Lookup,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbedderParams {
    Affine { weight: Array2<f64>, bias: Array1<f64> },
    Lookup { table: Array2<f64> },
}

impl EmbedderParams {
    pub fn zeros(kind: EmbedderKind) -> Self {
        match kind {
            EmbedderKind::Affine => EmbedderParams::Affine {
                weight: Array2::zeros((EMBED_DIM, PROFILE_BITS)),
                bias: Array1::zeros(EMBED_DIM),
            },
            EmbedderKind::Lookup => EmbedderParams::Lookup {
                table: Array2::zeros((16, EMBED_DIM)),
            },
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
    pub fn init(kind: EmbedderKind, rng: &mut impl Rng) -> Self {
        match kind {
            EmbedderKind::Affine => {
                let bound = 1.0 / (PROFILE_BITS as f64).sqrt();
                EmbedderParams::Affine {
                    weight: Array2::from_shape_simple_fn((EMBED_DIM, PROFILE_BITS), || rng.random_range(-bound..bound)),
                    bias: Array1::zeros(EMBED_DIM),
                }
            }
            EmbedderKind::Lookup => EmbedderParams::Lookup {
                table: Array2::from_shape_simple_fn((16, EMBED_DIM), || rng.random_range(-1.0..1.0)),
            },
        }
    }

    pub fn kind(&self) -> EmbedderKind {
        match self {
            EmbedderParams::Affine { .. } => EmbedderKind::Affine,
            EmbedderParams::Lookup { .. } => EmbedderKind::Lookup,
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            EmbedderParams::Affine { weight, bias } => weight.iter().chain(bias).all(|v| v.is_finite()),
            EmbedderParams::Lookup { table } => table.iter().all(|v| v.is_finite()),
        }
    }

    /// Numerical rank of W (affine) or of the table (lookup).
    pub fn rank(&self) -> usize {
        match self {
            EmbedderParams::Affine { weight, .. } => numerical_rank(weight.clone()),
            EmbedderParams::Lookup { table } => numerical_rank(table.clone()),
        }
    }
}

fn numerical_rank(mut m: Array2<f64>) -> usize {
    let (rows, cols) = m.dim();
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale * rows.max(cols) as f64;
    let mut rank = 0;
    for col in 0..cols {
        let Some(pivot) = (rank..rows).max_by(|&a, &b| m[[a, col]].abs().total_cmp(&m[[b, col]].abs())) else {
            break;
        };
        if m[[pivot, col]].abs() <= tol {
            continue;
        }
        for j in 0..cols {
            m.swap([rank, j], [pivot, j]);
        }
        for r in rank + 1..rows {
            let f = m[[r, col]] / m[[rank, col]];
            for j in col..cols {
                m[[r, j]] -= f * m[[rank, j]];
            }
        }
        rank += 1;
    }
    rank
}

pub fn embed(code: ProfileCode, params: &EmbedderParams) -> Result<Array1<f64>> {
    if !params.is_finite() {
        return Err(Error::NonFinite("embedder parameters".into()));
    }
    Ok(match params {
        EmbedderParams::Affine { weight, bias } => weight.dot(&Array1::from(code.bits().to_vec())) + bias,
        EmbedderParams::Lookup { table } => table.row(code.index()).to_owned(),
    })
}

/// Gradient of `upstream · embed(code)` with respect to the parameters,
/// accumulated into `grad` (same variant as the parameters).
pub fn embed_backward(code: ProfileCode, upstream: &[f64], grad: &mut EmbedderParams) {
    assert_eq!(upstream.len(), EMBED_DIM);
    match grad {
        EmbedderParams::Affine { weight, bias } => {
            let bits = code.bits();
            for j in 0..EMBED_DIM {
                for (i, b) in bits.iter().enumerate() {
                    weight[[j, i]] += upstream[j] * b;
                }
                bias[j] += upstream[j];
            }
        }
        EmbedderParams::Lookup { table } => {
            let mut row = table.row_mut(code.index());
            row.iter_mut().zip(upstream).for_each(|(t, u)| *t += u);
        }
    }
}

/// EEG rows followed by 16 time-constant embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEpoch {
    pub data: Array2<f64>,
    pub label: Label,
    pub condition: Condition,
    pub subject_id: String,
}

impl FusedEpoch {
    pub fn eeg_rows(&self) -> usize {
        self.data.nrows() - EMBED_DIM
    }
}

pub fn fuse(epoch: &TrialEpoch, embedding: &Array1<f64>) -> Result<FusedEpoch> {
    if embedding.len() != EMBED_DIM {
        return Err(Error::Shape(format!(
            "embedding has {} entries, expected {EMBED_DIM}",
            embedding.len()
        )));
    }
    let (c, t) = epoch.data.dim();
    let mut data = Array2::zeros((c + EMBED_DIM, t));
    data.slice_mut(s![..c, ..]).assign(&epoch.data);
    for (j, &v) in embedding.iter().enumerate() {
        data.row_mut(c + j).fill(v);
    }
    Ok(FusedEpoch {
        data,
        label: epoch.label,
        condition: epoch.condition,
        subject_id: epoch.subject_id.clone(),
    })
}

/// Profile codes for every subject that appears in `epochs`.
pub fn codes_for<'a>(
    epochs: impl IntoIterator<Item = &'a TrialEpoch>,
    profiles: &BTreeMap<String, SubjectProfile>,
) -> Result<BTreeMap<String, ProfileCode>> {
    let mut out = BTreeMap::new();
    for ep in epochs {
        if !out.contains_key(&ep.subject_id) {
            let p = profiles
                .get(&ep.subject_id)
                .ok_or_else(|| Error::MissingProfile(ep.subject_id.clone()))?;
            out.insert(ep.subject_id.clone(), encode_profile(p));
        }
    }
    Ok(out)
}

/// Lazily fuses every epoch of a preprocessed dataset with its subject's
/// embedding under the given parameters.
pub fn condition_dataset<'a>(
    ds: &'a Dataset,
    params: &'a EmbedderParams,
) -> Result<impl Iterator<Item = Result<FusedEpoch>> + 'a> {
    ds.require_stage(Stage::Preprocessed)?;
    let codes = codes_for(&ds.epochs, &ds.profiles)?;
    Ok(ds.epochs.iter().map(move |ep| {
        let e = embed(codes[&ep.subject_id], params)?;
        fuse(ep, &e)
    }))
}
