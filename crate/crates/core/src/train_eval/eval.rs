use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{argmax2, batch_input, codes_if_needed};
use crate::conditioning::ProfileCode;
use crate::dataset::{SubjectProfile, TrialEpoch};
use crate::error::{Error, Result};
use crate::models::{forward_batch, Mode, ModelParams};
use crate::rng;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Within,
    Unseen,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Within => "within",
            SplitKind::Unseen => "unseen",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl GroupStats {
    fn record(&mut self, ok: bool) {
        self.total += 1;
        self.correct += usize::from(ok);
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

/// Dominance group (auditory / visual) × split; empty groups are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub cells: BTreeMap<String, BTreeMap<String, GroupStats>>,
}

impl DominanceReport {
    pub fn get(&self, split: SplitKind, dominance: &str) -> Option<&GroupStats> {
        self.cells.get(split.as_str())?.get(dominance)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: GroupStats,
    pub splits: BTreeMap<String, GroupStats>,
    pub per_condition: BTreeMap<String, GroupStats>,
    pub per_subject: BTreeMap<String, GroupStats>,
    /// Recall per true class.
    pub per_class: BTreeMap<String, GroupStats>,
    pub per_dominance: BTreeMap<String, GroupStats>,
    pub dominance: DominanceReport,
}

impl EvalReport {
    pub fn split(&self, kind: SplitKind) -> Option<&GroupStats> {
        self.splits.get(kind.as_str())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group_kind,group,correct,total,accuracy\n");
        let mut row = |kind: &str, name: &str, g: &GroupStats| {
            out.push_str(&format!("{kind},{name},{},{},{:?}\n", g.correct, g.total, g.accuracy));
        };
        row("overall", "all", &self.overall);
        for (kind, map) in [
            ("split", &self.splits),
            ("condition", &self.per_condition),
            ("subject", &self.per_subject),
            ("class", &self.per_class),
            ("dominance", &self.per_dominance),
        ] {
            for (name, g) in map {
                row(kind, name, g);
            }
        }
        for (split, groups) in &self.dominance.cells {
            for (dom, g) in groups {
                row("dominance_split", &format!("{dom}/{split}"), g);
            }
        }
        out
    }
}

/// Eval-mode class predictions.
pub fn predict(
    model: &ModelParams,
    epochs: &[&TrialEpoch],
    codes: &BTreeMap<String, ProfileCode>,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(epochs.len());
    let mut unused = rng::stream(0, 0);
    for chunk in epochs.chunks(EVAL_CHUNK) {
        let x = batch_input(model, chunk, codes)?;
        let pass = forward_batch(model, x.view(), Mode::Eval, &mut unused)?;
        out.extend(pass.logits.rows().into_iter().map(|r| argmax2(r[0], r[1])));
    }
    Ok(out)
}

/// Scores the within-subject and unseen-subject test sets with breakdowns by
/// condition, subject, class and dominance group.
pub fn evaluate(
    model: &ModelParams,
    within: &[&TrialEpoch],
    unseen: &[&TrialEpoch],
    profiles: &BTreeMap<String, SubjectProfile>,
) -> Result<EvalReport> {
    if within.is_empty() && unseen.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut report = EvalReport::default();
    for (kind, set) in [(SplitKind::Within, within), (SplitKind::Unseen, unseen)] {
        if set.is_empty() {
            continue;
        }
        let codes = codes_if_needed(&model.spec, set.iter().copied(), profiles)?;
        let preds = predict(model, set, &codes)?;
        for (ep, pred) in set.iter().zip(preds) {
            let ok = pred == ep.label.index();
            report.overall.record(ok);
            report.splits.entry(kind.as_str().to_string()).or_default().record(ok);
            report
                .per_condition
                .entry(ep.condition.as_str().to_string())
                .or_default()
                .record(ok);
            report.per_subject.entry(ep.subject_id.clone()).or_default().record(ok);
            report
                .per_class
                .entry(ep.label.as_str().to_string())
                .or_default()
                .record(ok);
            let dom = profiles
                .get(&ep.subject_id)
                .map_or("unknown", |p| p.dominance.as_str())
                .to_string();
            report.per_dominance.entry(dom.clone()).or_default().record(ok);
            report
                .dominance
                .cells
                .entry(kind.as_str().to_string())
                .or_default()
                .entry(dom)
                .or_default()
                .record(ok);
        }
    }
    Ok(report)
}

/// Accuracy per dominance group and split. Every evaluated subject needs a
/// profile.
pub fn dominance_eval(
    model: &ModelParams,
    within: &[&TrialEpoch],
    unseen: &[&TrialEpoch],
    profiles: &BTreeMap<String, SubjectProfile>,
) -> Result<DominanceReport> {
    if let Some(ep) = within
        .iter()
        .chain(unseen)
        .find(|e| !profiles.contains_key(&e.subject_id))
    {
        return Err(Error::MissingProfile(ep.subject_id.clone()));
    }
    Ok(evaluate(model, within, unseen, profiles)?.dominance)
}
