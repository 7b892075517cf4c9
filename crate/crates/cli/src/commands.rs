use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use eegcond::dataset::{
    convert_withme, generate_synthetic, load_dataset, save_dataset, Dataset, Partition, SplitSpec, Stage, TrialEpoch,
};
use eegcond::embed_analysis::{
    bar_chart, cluster_report, collect_embeddings, embeddings_csv, layout_csv, scatter_svg, tsne, Bar, BarGroup,
    ClusterReport,
};
use eegcond::models::{load_checkpoint, save_checkpoint, Backbone, Checkpoint, ModelParams};
use eegcond::preprocess::{preprocess_pipeline, PreprocessSummary};
use eegcond::train_eval::{ablation_table, evaluate, rows_to_csv, AblationRow, EvalReport, SplitKind, TrainHistory};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const HASH_FILE: &str = "config.sha256";

pub fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| runtime(parent, e))?;
    }
    fs::write(path, text).map_err(|e| runtime(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| runtime(path, e))?;
    serde_json::from_str(&text).map_err(|e| runtime(path, e))
}

/// CSV with a leading `# config_sha256=` comment line.
pub fn write_csv(path: &Path, hash: &str, csv: &str) -> Result<(), CliError> {
    write_text(path, &format!("# config_sha256={hash}\n{csv}"))
}

/// Writes the resolved configuration and its hash into the output directory.
pub fn echo_config(cfg: &RunConfig) -> Result<(), CliError> {
    write_text(&cfg.out.join(CONFIG_FILE), &cfg.to_toml())?;
    write_text(&cfg.out.join(HASH_FILE), &format!("{}\n", cfg.hash()))?;
    println!("config sha256 {}", cfg.hash());
    Ok(())
}

pub fn model_tag(backbone: Backbone, use_ids: bool) -> String {
    format!("{backbone}_{}", if use_ids { "ids" } else { "base" })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessArtifact {
    pub config_sha256: String,
    pub source: String,
    pub summary: PreprocessSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArtifact {
    pub config_sha256: String,
    pub backbone: Backbone,
    pub use_ids: bool,
    pub parameters: usize,
    pub split: SplitSpec,
    pub history: TrainHistory,
    /// Scores of the in-memory model right after training.
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub config_sha256: String,
    pub backbone: Backbone,
    pub use_ids: bool,
    pub checkpoint: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArtifact {
    pub config_sha256: String,
    pub split: SplitSpec,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedArtifact {
    pub config_sha256: String,
    pub checkpoint: String,
    pub subjects: usize,
    pub distinct_points: usize,
    pub initial_kl: f64,
    pub final_kl: f64,
    pub clusters: ClusterReport,
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = generate_synthetic(&cfg.dataset.synthetic)?;
    let dir = cfg.out.join("raw");
    save_dataset(&ds, &dir)?;
    let events: usize = ds.recordings.iter().map(|r| r.events.len()).sum();
    println!(
        "synth: {} subjects, {} events, {} channels at {} Hz -> {}",
        ds.subjects.len(),
        events,
        ds.n_channels(),
        ds.fs,
        dir.display()
    );
    Ok(())
}

pub fn convert(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg
        .dataset
        .withme
        .as_ref()
        .ok_or_else(|| CliError::Config("dataset.withme is not set".into()))?;
    let (ds, summary) = convert_withme(root)?;
    let dir = cfg.out.join("raw");
    save_dataset(&ds, &dir)?;
    println!(
        "convert: {} subjects, {} events kept, {} dropped at the recording edge -> {}",
        summary.subjects,
        summary.events,
        summary.dropped_events,
        dir.display()
    );
    Ok(())
}

pub fn preprocess(cfg: &RunConfig) -> Result<(), CliError> {
    let src = cfg.dataset.path.clone().unwrap_or_else(|| cfg.out.join("raw"));
    let raw = load_dataset(&src)?;
    let (ds, summary) = preprocess_pipeline(&raw, &cfg.preprocess)?;
    let dir = cfg.out.join("preprocessed");
    save_dataset(&ds, &dir)?;
    write_json(
        &cfg.out.join("preprocess_summary.json"),
        &PreprocessArtifact {
            config_sha256: cfg.hash(),
            source: src.display().to_string(),
            summary: summary.clone(),
        },
    )?;
    println!(
        "preprocess: {} events -> {} epochs of {}x{} ({} excluded at the boundary, {} degenerate) -> {}",
        summary.events,
        summary.epochs,
        summary.channels,
        summary.epoch_samples,
        summary.excluded,
        summary.degenerate,
        dir.display()
    );
    Ok(())
}

/// The preprocessed dataset with its subject split and partition.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitSpec,
    pub partition: Partition,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let dataset = load_dataset(cfg.out.join("preprocessed"))?;
        dataset.require_stage(Stage::Preprocessed)?;
        let split = cfg.ablation_config().split(&dataset)?;
        let partition = split.partition(&dataset.epochs)?;
        Ok(Prepared {
            dataset,
            split,
            partition,
        })
    }

    pub fn sets(&self) -> [Vec<&TrialEpoch>; 3] {
        let pick = |idx: &[usize]| Partition::select(&self.dataset.epochs, idx);
        [
            pick(&self.partition.train),
            pick(&self.partition.within_test),
            pick(&self.partition.unseen_test),
        ]
    }
}

fn save_model(path: &Path, cfg: &RunConfig, model: &ModelParams, history: &TrainHistory) -> Result<(), CliError> {
    let mut ck = Checkpoint::new(model.clone(), cfg.seed, history.steps);
    ck.metadata.insert("config_sha256".into(), cfg.hash());
    ck.metadata.insert("stop_reason".into(), history.stop_reason.clone());
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| runtime(parent, e))?;
    }
    save_checkpoint(path, &ck)?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let prepared = Prepared::load(cfg)?;
    let [fit, within, unseen] = prepared.sets();
    let samples = fit
        .first()
        .map(|e| e.data.ncols())
        .ok_or_else(|| CliError::Config("training partition is empty".into()))?;
    let (backbone, use_ids) = (cfg.model.backbone, cfg.model.use_ids);
    let spec = cfg
        .model
        .options()
        .spec(backbone, use_ids, prepared.dataset.n_channels(), samples);
    let (model, history) = eegcond::train_eval::train(
        &spec,
        &fit,
        &prepared.dataset.profiles,
        &cfg.train,
        &prepared.split.unseen_set(),
    )?;
    let report = evaluate(&model, &within, &unseen, &prepared.dataset.profiles)?;

    let dir = cfg.out.join("models").join(model_tag(backbone, use_ids));
    save_model(&dir.join("checkpoint.json"), cfg, &model, &history)?;
    write_csv(&dir.join("history.csv"), &cfg.hash(), &history.to_csv())?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    write_json(
        &dir.join("train.json"),
        &TrainArtifact {
            config_sha256: cfg.hash(),
            backbone,
            use_ids,
            parameters: model.param_count(),
            split: prepared.split.clone(),
            history: history.clone(),
            report: report.clone(),
        },
    )?;
    println!(
        "train: {} {} params, {} epochs ({}) in {:.1}s, within {:.4} unseen {:.4} -> {}",
        model_tag(backbone, use_ids),
        model.param_count(),
        history.epochs(),
        history.stop_reason,
        history.wall_time_secs,
        accuracy(&report, SplitKind::Within),
        accuracy(&report, SplitKind::Unseen),
        dir.display()
    );
    Ok(())
}

pub fn accuracy(report: &EvalReport, kind: SplitKind) -> f64 {
    report.split(kind).map_or(f64::NAN, |g| g.accuracy)
}

fn dominance_groups(reports: &[(String, &EvalReport)]) -> Vec<BarGroup> {
    let mut groups = Vec::new();
    for (name, report) in reports {
        for kind in [SplitKind::Within, SplitKind::Unseen] {
            let bars: Vec<Bar> = ["auditory", "visual"]
                .iter()
                .filter_map(|dom| {
                    report.dominance.get(kind, dom).map(|g| Bar {
                        label: dom.to_string(),
                        value: g.accuracy,
                    })
                })
                .collect();
            if !bars.is_empty() {
                groups.push(BarGroup {
                    label: format!("{name} {}", kind.as_str()),
                    bars,
                });
            }
        }
    }
    groups
}

fn write_eval(dir: &Path, cfg: &RunConfig, artifact: &EvalArtifact) -> Result<(), CliError> {
    write_json(&dir.join("eval.json"), artifact)?;
    write_csv(&dir.join("eval.csv"), &cfg.hash(), &artifact.report.to_csv())?;
    let name = model_tag(artifact.backbone, artifact.use_ids);
    write_text(
        &dir.join("dominance.svg"),
        &bar_chart(
            &format!("{name}: accuracy by dominance group"),
            &dominance_groups(&[(name.clone(), &artifact.report)]),
            1.0,
        ),
    )
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let prepared = Prepared::load(cfg)?;
    let [_, within, unseen] = prepared.sets();
    let (backbone, use_ids) = (cfg.model.backbone, cfg.model.use_ids);
    let dir = cfg.out.join("models").join(model_tag(backbone, use_ids));
    let ck_path = dir.join("checkpoint.json");
    let ck = load_checkpoint(&ck_path)?;
    if ck.model.spec.backbone != backbone || ck.model.spec.use_ids != use_ids {
        return Err(CliError::Config(format!(
            "{} holds a {} model, expected {}",
            ck_path.display(),
            model_tag(ck.model.spec.backbone, ck.model.spec.use_ids),
            model_tag(backbone, use_ids)
        )));
    }
    let report = evaluate(&ck.model, &within, &unseen, &prepared.dataset.profiles)?;
    let artifact = EvalArtifact {
        config_sha256: cfg.hash(),
        backbone,
        use_ids,
        checkpoint: format!("models/{}/checkpoint.json", model_tag(backbone, use_ids)),
        report,
    };
    write_eval(&dir, cfg, &artifact)?;
    println!(
        "eval: {} within {:.4} unseen {:.4} overall {:.4} ({} epochs) -> {}",
        model_tag(backbone, use_ids),
        accuracy(&artifact.report, SplitKind::Within),
        accuracy(&artifact.report, SplitKind::Unseen),
        artifact.report.overall.accuracy,
        artifact.report.overall.total,
        dir.display()
    );
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let dataset = load_dataset(cfg.out.join("preprocessed"))?;
    let ab = ablation_table(&dataset, &cfg.ablation.backbones, &cfg.ablation_config())?;
    let root = cfg.out.join("ablation");
    for e in &ab.entries {
        let tag = model_tag(e.backbone, e.use_ids);
        let dir = root.join(&tag);
        save_model(&dir.join("checkpoint.json"), cfg, &e.model, &e.history)?;
        write_csv(&dir.join("history.csv"), &cfg.hash(), &e.history.to_csv())?;
        write_eval(
            &dir,
            cfg,
            &EvalArtifact {
                config_sha256: cfg.hash(),
                backbone: e.backbone,
                use_ids: e.use_ids,
                checkpoint: format!("ablation/{tag}/checkpoint.json"),
                report: e.report.clone(),
            },
        )?;
    }
    let rows = ab.rows();
    write_csv(&root.join("table.csv"), &cfg.hash(), &rows_to_csv(&rows))?;
    write_json(
        &root.join("table.json"),
        &AblationArtifact {
            config_sha256: cfg.hash(),
            split: ab.split.clone(),
            rows: rows.clone(),
        },
    )?;
    let groups: Vec<BarGroup> = rows
        .iter()
        .flat_map(|r| {
            [
                (SplitKind::Within, r.baseline_within, r.ids_within),
                (SplitKind::Unseen, r.baseline_unseen, r.ids_unseen),
            ]
            .map(|(kind, base, ids)| BarGroup {
                label: format!("{} {}", r.backbone, kind.as_str()),
                bars: vec![
                    Bar {
                        label: "baseline".into(),
                        value: base,
                    },
                    Bar {
                        label: "+IDs".into(),
                        value: ids,
                    },
                ],
            })
        })
        .collect();
    write_text(
        &root.join("ablation.svg"),
        &bar_chart("Accuracy with and without IDs", &groups, 1.0),
    )?;
    let ids_reports: Vec<(String, &EvalReport)> = ab
        .entries
        .iter()
        .filter(|e| e.use_ids)
        .map(|e| (e.backbone.to_string(), &e.report))
        .collect();
    write_text(
        &root.join("dominance.svg"),
        &bar_chart("+IDs accuracy by dominance group", &dominance_groups(&ids_reports), 1.0),
    )?;

    println!("ablate: {} models -> {}", ab.entries.len(), root.display());
    println!(
        "{:<8} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8}",
        "backbone", "base/in", "base/un", "ids/in", "ids/un", "d/in", "d/un"
    );
    for r in &rows {
        println!(
            "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>+8.4} {:>+8.4}",
            r.backbone.to_string(),
            r.baseline_within,
            r.baseline_unseen,
            r.ids_within,
            r.ids_unseen,
            r.delta_within,
            r.delta_unseen
        );
    }
    Ok(())
}

/// The `+IDs` checkpoint for the configured backbone: from `train` if
/// present, else from `ablate`.
fn ids_checkpoint(cfg: &RunConfig) -> Result<(String, Checkpoint), CliError> {
    let tag = model_tag(cfg.model.backbone, true);
    let candidates: [PathBuf; 2] = [
        PathBuf::from("models").join(&tag).join("checkpoint.json"),
        PathBuf::from("ablation").join(&tag).join("checkpoint.json"),
    ];
    for rel in candidates {
        let path = cfg.out.join(&rel);
        if path.exists() {
            return Ok((rel.display().to_string().replace('\\', "/"), load_checkpoint(&path)?));
        }
    }
    Err(CliError::Runtime(format!(
        "no {tag} checkpoint under {}; run `train --use-ids true` or `ablate` first",
        cfg.out.display()
    )))
}

pub fn embed(cfg: &RunConfig) -> Result<(), CliError> {
    let dataset = load_dataset(cfg.out.join("preprocessed"))?;
    let split = cfg.ablation_config().split(&dataset)?;
    let (source, ck) = ids_checkpoint(cfg)?;
    let e = collect_embeddings(&ck.model, &dataset.profiles, &split.unseen_set())?;
    let layout = tsne(e.rows.view(), &cfg.analysis.tsne)?;
    let clusters = cluster_report(&e, cfg.analysis.min_size);

    let dir = cfg.out.join("embed");
    write_csv(&dir.join("embeddings.csv"), &cfg.hash(), &embeddings_csv(&e))?;
    write_csv(&dir.join("layout.csv"), &cfg.hash(), &layout_csv(&e, &layout.y))?;
    write_text(
        &dir.join("tsne.svg"),
        &scatter_svg(&e, &layout.y, &format!("t-SNE of subject embeddings ({source})")),
    )?;
    let distinct = layout.affinities.p.nrows();
    write_json(
        &dir.join("clusters.json"),
        &EmbedArtifact {
            config_sha256: cfg.hash(),
            checkpoint: source,
            subjects: e.len(),
            distinct_points: distinct,
            initial_kl: layout.initial_kl,
            final_kl: layout.final_kl,
            clusters: clusters.clone(),
        },
    )?;
    println!(
        "embed: {} subjects, {} distinct points, KL {:.4} -> {:.4}; {} of {} codes observed, {} prominent (>= {}) -> {}",
        e.len(),
        distinct,
        layout.initial_kl,
        layout.final_kl,
        clusters.n_observed,
        clusters.n_possible,
        clusters.n_prominent,
        clusters.min_size,
        dir.display()
    );
    Ok(())
}

/// Every `eval.json` under `<out>/<group>/*/`, keyed by directory name.
pub fn eval_artifacts(out: &Path, group: &str) -> Result<BTreeMap<String, EvalArtifact>, CliError> {
    let root = out.join(group);
    let mut found = BTreeMap::new();
    let Ok(entries) = fs::read_dir(&root) else {
        return Ok(found);
    };
    for entry in entries {
        let entry = entry.map_err(|e| runtime(&root, e))?;
        let path = entry.path().join("eval.json");
        if path.is_file() {
            found.insert(entry.file_name().to_string_lossy().into_owned(), read_json(&path)?);
        }
    }
    Ok(found)
}
