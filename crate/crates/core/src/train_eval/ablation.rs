use serde::{Deserialize, Serialize};

use super::{evaluate, train, EvalReport, SplitKind, TrainConfig, TrainHistory};
use crate::dataset::{split_subjects, Dataset, Partition, SplitSpec, Stage, TrialEpoch};
use crate::error::{Error, Result};
use crate::models::{Backbone, ModelOptions, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub n_unseen: usize,
    pub split_seed: u64,
    /// Explicit unseen subjects; overrides the seeded draw.
    pub unseen_ids: Option<Vec<String>>,
    pub within_test_fraction: f64,
    pub train: TrainConfig,
    pub model: ModelOptions,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            n_unseen: 4,
            split_seed: 0,
            unseen_ids: None,
            within_test_fraction: 0.2,
            train: TrainConfig::default(),
            model: ModelOptions::default(),
        }
    }
}

impl AblationConfig {
    /// Subject split for `dataset` under this configuration.
    pub fn split(&self, dataset: &Dataset) -> Result<SplitSpec> {
        let mut split = match &self.unseen_ids {
            None => split_subjects(dataset, self.n_unseen, self.split_seed)?,
            Some(ids) => {
                if let Some(bad) = ids.iter().find(|id| !dataset.subjects.contains(id)) {
                    return Err(Error::Config(format!("unseen subject {bad} is not in the dataset")));
                }
                SplitSpec {
                    train_ids: dataset.subjects.iter().filter(|s| !ids.contains(s)).cloned().collect(),
                    unseen_ids: dataset.subjects.iter().filter(|s| ids.contains(s)).cloned().collect(),
                    within_test_fraction: self.within_test_fraction,
                    seed: self.split_seed,
                }
            }
        };
        split.within_test_fraction = self.within_test_fraction;
        Ok(split)
    }
}

#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub backbone: Backbone,
    pub use_ids: bool,
    pub model: ModelParams,
    pub history: TrainHistory,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub split: SplitSpec,
    pub partition: Partition,
    pub entries: Vec<AblationEntry>,
}

/// One backbone's line of the grid; accuracies are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub backbone: Backbone,
    pub baseline_within: f64,
    pub baseline_unseen: f64,
    pub ids_within: f64,
    pub ids_unseen: f64,
    pub delta_within: f64,
    pub delta_unseen: f64,
}

impl Ablation {
    pub fn entry(&self, backbone: Backbone, use_ids: bool) -> Option<&AblationEntry> {
        self.entries
            .iter()
            .find(|e| e.backbone == backbone && e.use_ids == use_ids)
    }

    pub fn rows(&self) -> Vec<AblationRow> {
        let mut backbones: Vec<Backbone> = self.entries.iter().map(|e| e.backbone).collect();
        backbones.dedup();
        backbones
            .into_iter()
            .filter_map(|b| {
                let base = self.entry(b, false)?;
                let ids = self.entry(b, true)?;
                let acc = |e: &AblationEntry, k| e.report.split(k).map_or(f64::NAN, |g| g.accuracy);
                let row = AblationRow {
                    backbone: b,
                    baseline_within: acc(base, SplitKind::Within),
                    baseline_unseen: acc(base, SplitKind::Unseen),
                    ids_within: acc(ids, SplitKind::Within),
                    ids_unseen: acc(ids, SplitKind::Unseen),
                    delta_within: 0.0,
                    delta_unseen: 0.0,
                };
                Some(AblationRow {
                    delta_within: row.ids_within - row.baseline_within,
                    delta_unseen: row.ids_unseen - row.baseline_unseen,
                    ..row
                })
            })
            .collect()
    }
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("backbone,baseline_within,baseline_unseen,ids_within,ids_unseen,delta_within,delta_unseen\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.backbone,
            r.baseline_within,
            r.baseline_unseen,
            r.ids_within,
            r.ids_unseen,
            r.delta_within,
            r.delta_unseen
        ));
    }
    out
}

/// Trains a baseline and an ID-conditioned model per backbone on one shared
/// split with one shared seed, and evaluates both test sets.
pub fn ablation_table(dataset: &Dataset, backbones: &[Backbone], cfg: &AblationConfig) -> Result<Ablation> {
    dataset.require_stage(Stage::Preprocessed)?;
    if backbones.is_empty() {
        return Err(Error::Config("ablation needs at least one backbone".into()));
    }
    let split = cfg.split(dataset)?;
    let partition = split.partition(&dataset.epochs)?;
    let pick = |idx: &[usize]| -> Vec<&TrialEpoch> { Partition::select(&dataset.epochs, idx) };
    let (fit, within, unseen) = (
        pick(&partition.train),
        pick(&partition.within_test),
        pick(&partition.unseen_test),
    );
    let excluded = split.unseen_set();
    let samples = fit
        .first()
        .map(|e| e.data.ncols())
        .ok_or(Error::Empty("training partition"))?;

    let mut entries = Vec::new();
    for &backbone in backbones {
        for use_ids in [false, true] {
            let spec = cfg.model.spec(backbone, use_ids, dataset.n_channels(), samples);
            let (model, history) = train(&spec, &fit, &dataset.profiles, &cfg.train, &excluded)?;
            let report = evaluate(&model, &within, &unseen, &dataset.profiles)?;
            entries.push(AblationEntry {
                backbone,
                use_ids,
                model,
                history,
                report,
            });
        }
    }
    Ok(Ablation {
        split,
        partition,
        entries,
    })
}
