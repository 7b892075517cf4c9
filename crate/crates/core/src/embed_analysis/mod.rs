//! Per-subject embedding analysis: the embedder's output for every profile,
//! a 2-D t-SNE layout and counts of profile clusters.

mod svg;
mod tsne;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::conditioning::{embed, encode_profile, ProfileCode, EMBED_DIM, PROFILE_BITS};
use crate::dataset::SubjectProfile;
use crate::error::{Error, Result};
use crate::models::ModelParams;

pub use svg::{bar_chart, scatter_svg, Bar, BarGroup};
pub use tsne::{
    affinities, collapse_duplicates, kl_divergence, kl_gradient, tsne, Affinities, TsneConfig, TsneResult, ENTROPY_TOL,
};

pub const N_POSSIBLE: usize = 1 << PROFILE_BITS;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// `N × 16`, one row per subject.
    pub rows: Array2<f64>,
    pub row_ids: Vec<String>,
    pub profiles: Vec<ProfileCode>,
    pub unseen: Vec<bool>,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }
}

/// Embeds every profile with the model's trained embedder, in subject-id
/// order. Subjects in `unseen` are flagged.
pub fn collect_embeddings(
    model: &ModelParams,
    profiles: &BTreeMap<String, SubjectProfile>,
    unseen: &BTreeSet<String>,
) -> Result<EmbeddingMatrix> {
    let params = model
        .embedder()
        .ok_or_else(|| Error::Config("embedding analysis needs a model trained with IDs".into()))?;
    if let Some(id) = unseen.iter().find(|id| !profiles.contains_key(*id)) {
        return Err(Error::MissingProfile(id.clone()));
    }
    let mut rows = Array2::zeros((profiles.len(), EMBED_DIM));
    let mut codes = Vec::with_capacity(profiles.len());
    for (i, profile) in profiles.values().enumerate() {
        let code = encode_profile(profile);
        rows.row_mut(i).assign(&embed(code, &params)?);
        codes.push(code);
    }
    Ok(EmbeddingMatrix {
        rows,
        row_ids: profiles.keys().cloned().collect(),
        profiles: codes,
        unseen: profiles.keys().map(|id| unseen.contains(id)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub n_possible: usize,
    pub n_observed: usize,
    pub n_prominent: usize,
    pub min_size: usize,
    /// Profile code label → subjects carrying it.
    pub membership: BTreeMap<String, Vec<String>>,
    /// Unseen subject → code label of the nearest training-subject centroid.
    pub unseen_nearest: BTreeMap<String, String>,
}

pub fn cluster_report(e: &EmbeddingMatrix, min_size: usize) -> ClusterReport {
    let mut membership: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (id, code) in e.row_ids.iter().zip(&e.profiles) {
        membership.entry(code.label()).or_default().push(id.clone());
    }
    let n_prominent = membership.values().filter(|m| m.len() >= min_size).count();

    let mut sums: BTreeMap<String, (Array1<f64>, usize)> = BTreeMap::new();
    for i in (0..e.len()).filter(|&i| !e.unseen[i]) {
        let entry = sums
            .entry(e.profiles[i].label())
            .or_insert_with(|| (Array1::zeros(e.rows.ncols()), 0));
        entry.0 += &e.rows.row(i);
        entry.1 += 1;
    }
    let centroids: Vec<(String, Array1<f64>)> = sums
        .into_iter()
        .map(|(label, (sum, n))| (label, sum / n as f64))
        .collect();
    let mut unseen_nearest = BTreeMap::new();
    for i in (0..e.len()).filter(|&i| e.unseen[i]) {
        let nearest = centroids
            .iter()
            .map(|(label, c)| {
                let d: f64 = c.iter().zip(e.rows.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, label)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, label)) = nearest {
            unseen_nearest.insert(e.row_ids[i].clone(), label.clone());
        }
    }
    ClusterReport {
        n_possible: N_POSSIBLE,
        n_observed: membership.len(),
        n_prominent,
        min_size,
        membership,
        unseen_nearest,
    }
}

/// `subject_id,x,y,profile_code,unseen` rows for a layout.
pub fn layout_csv(e: &EmbeddingMatrix, y: &Array2<f64>) -> String {
    let mut out = String::from("subject_id,x,y,profile_code,unseen\n");
    for i in 0..e.len() {
        out.push_str(&format!(
            "{},{:?},{:?},{},{}\n",
            e.row_ids[i],
            y[[i, 0]],
            y[[i, 1]],
            e.profiles[i].label(),
            e.unseen[i]
        ));
    }
    out
}

/// One line per subject with its 16 embedding values.
pub fn embeddings_csv(e: &EmbeddingMatrix) -> String {
    let mut out = String::from("subject_id,profile_code,unseen");
    for k in 0..e.rows.ncols() {
        out.push_str(&format!(",e{k}"));
    }
    out.push('\n');
    for i in 0..e.len() {
        out.push_str(&format!("{},{},{}", e.row_ids[i], e.profiles[i].label(), e.unseen[i]));
        for v in e.rows.row(i) {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}
