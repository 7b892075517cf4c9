use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Condition, Dataset, TrialEpoch};
use crate::error::{Error, Result};

/// Subject-level split plus the within-subject instance split ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<String>,
    pub unseen_ids: Vec<String>,
    pub within_test_fraction: f64,
    pub seed: u64,
}

/// Epoch indices for the three sets of a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub within_test: Vec<usize>,
    pub unseen_test: Vec<usize>,
}

pub fn split_subjects(dataset: &Dataset, n_unseen: usize, seed: u64) -> Result<SplitSpec> {
    let n = dataset.subjects.len();
    if n_unseen >= n {
        return Err(Error::Config(format!(
            "n_unseen = {n_unseen} must be smaller than the subject count {n}"
        )));
    }
    let mut ids = dataset.subjects.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut unseen_ids = ids[..n_unseen].to_vec();
    let mut train_ids = ids[n_unseen..].to_vec();
    // Keep listing order inside each side so reports are stable.
    let order = |id: &String| dataset.subjects.iter().position(|s| s == id);
    unseen_ids.sort_by_key(order);
    train_ids.sort_by_key(order);
    Ok(SplitSpec {
        train_ids,
        unseen_ids,
        within_test_fraction: 0.2,
        seed,
    })
}

impl SplitSpec {
    pub fn is_unseen(&self, subject_id: &str) -> bool {
        self.unseen_ids.iter().any(|s| s == subject_id)
    }

    pub fn unseen_set(&self) -> BTreeSet<String> {
        self.unseen_ids.iter().cloned().collect()
    }

    /// Assigns epochs to train / within-test / unseen-test.
    ///
    /// Within-subject epochs are split per (subject, condition) cell: each cell
    /// is shuffled and `round(fraction * n)` of it goes to the test set.
    pub fn partition(&self, epochs: &[TrialEpoch]) -> Result<Partition> {
        if !(0.0..1.0).contains(&self.within_test_fraction) {
            return Err(Error::Config(format!(
                "within_test_fraction {} outside [0, 1)",
                self.within_test_fraction
            )));
        }
        if let Some(id) = self.train_ids.iter().find(|id| self.is_unseen(id)) {
            return Err(Error::Leakage(id.clone()));
        }
        let mut cells: BTreeMap<(&str, Condition), Vec<usize>> = BTreeMap::new();
        let mut unseen_test = Vec::new();
        for (i, ep) in epochs.iter().enumerate() {
            if self.is_unseen(&ep.subject_id) {
                unseen_test.push(i);
            } else if self.train_ids.contains(&ep.subject_id) {
                cells.entry((ep.subject_id.as_str(), ep.condition)).or_default().push(i);
            } else {
                return Err(Error::InvalidDataset(vec![format!(
                    "epoch {i}: subject {} is in neither side of the split",
                    ep.subject_id
                )]));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_5EED);
        let mut train = Vec::new();
        let mut within_test = Vec::new();
        for (_, mut idx) in cells {
            idx.shuffle(&mut rng);
            let n_test = (self.within_test_fraction * idx.len() as f64).round() as usize;
            within_test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        within_test.sort_unstable();
        let partition = Partition {
            train,
            within_test,
            unseen_test,
        };
        partition.audit(epochs, self)?;
        Ok(partition)
    }
}

impl Partition {
    /// Scans every training and within-test index for unseen subjects.
    pub fn audit(&self, epochs: &[TrialEpoch], split: &SplitSpec) -> Result<()> {
        for &i in self.train.iter().chain(&self.within_test) {
            let id = &epochs[i].subject_id;
            if split.is_unseen(id) {
                return Err(Error::Leakage(id.clone()));
            }
        }
        Ok(())
    }

    pub fn select<'a>(epochs: &'a [TrialEpoch], idx: &[usize]) -> Vec<&'a TrialEpoch> {
        idx.iter().map(|&i| &epochs[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dominance, Label, Stage, SubjectProfile};
    use ndarray::Array2;

    fn dataset(n_subjects: usize, per_subject: usize) -> Dataset {
        let subjects: Vec<String> = (0..n_subjects).map(|i| format!("P{i:02}")).collect();
        let profiles = subjects
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    SubjectProfile {
                        subject_id: id.clone(),
                        dominance: Dominance::Visual,
                        sex: 0,
                        music_education: 0,
                        active_musician: 0,
                    },
                )
            })
            .collect();
        let epochs = subjects
            .iter()
            .flat_map(|id| {
                (0..per_subject).map(move |k| TrialEpoch {
                    subject_id: id.clone(),
                    data: Array2::zeros((1, 4)),
                    label: if k % 2 == 0 { Label::Target } else { Label::Distractor },
                    condition: Condition::ALL[k % 4],
                    onset: k,
                    degenerate: false,
                })
            })
            .collect();
        Dataset {
            stage: Stage::Preprocessed,
            fs: 64.0,
            channel_names: vec!["c".into()],
            mastoid_indices: vec![0],
            subjects,
            recordings: vec![],
            epochs,
            profiles,
        }
    }

    #[test]
    fn forty_two_subjects_split_into_38_and_4() {
        let ds = dataset(42, 4);
        let split = split_subjects(&ds, 4, 1).unwrap();
        assert_eq!(split.train_ids.len(), 38);
        assert_eq!(split.unseen_ids.len(), 4);
        let all: BTreeSet<_> = split.train_ids.iter().chain(&split.unseen_ids).collect();
        assert_eq!(all.len(), 42);
    }

    #[test]
    fn zero_unseen_keeps_everyone_trainable() {
        let ds = dataset(5, 4);
        let split = split_subjects(&ds, 0, 3).unwrap();
        assert!(split.unseen_ids.is_empty());
        assert_eq!(split.train_ids, ds.subjects);
    }

    #[test]
    fn too_many_unseen_is_rejected() {
        let ds = dataset(5, 4);
        assert!(split_subjects(&ds, 5, 0).is_err());
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let ds = dataset(20, 4);
        assert_eq!(split_subjects(&ds, 4, 9).unwrap(), split_subjects(&ds, 4, 9).unwrap());
        assert_ne!(
            split_subjects(&ds, 4, 9).unwrap().unseen_ids,
            split_subjects(&ds, 4, 10).unwrap().unseen_ids
        );
    }

    #[test]
    fn partition_conserves_instances_and_isolates_unseen() {
        let ds = dataset(12, 40);
        let split = split_subjects(&ds, 3, 5).unwrap();
        let p = split.partition(&ds.epochs).unwrap();
        let train_subject_epochs = ds.epochs.iter().filter(|e| !split.is_unseen(&e.subject_id)).count();
        assert_eq!(p.train.len() + p.within_test.len(), train_subject_epochs);
        assert_eq!(p.unseen_test.len(), 3 * 40);
        // 40 epochs per subject over 4 conditions: 10 per cell, 2 to test.
        assert_eq!(p.within_test.len(), 9 * 8);
        for &i in &p.train {
            assert!(!split.is_unseen(&ds.epochs[i].subject_id));
        }
    }

    #[test]
    fn audit_catches_injected_leak() {
        let ds = dataset(6, 8);
        let split = split_subjects(&ds, 2, 5).unwrap();
        let mut p = split.partition(&ds.epochs).unwrap();
        p.train.push(p.unseen_test[0]);
        assert!(matches!(p.audit(&ds.epochs, &split), Err(Error::Leakage(_))));
    }
}
