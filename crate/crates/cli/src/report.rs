//! `report.md`: a summary of whichever artifacts exist. The text depends
//! only on artifact contents, so regenerating it is byte-stable.

use std::fmt::Write;
use std::path::Path;

use eegcond::train_eval::SplitKind;

use crate::commands::{
    accuracy, eval_artifacts, read_json, write_text, AblationArtifact, EmbedArtifact, EvalArtifact, PreprocessArtifact,
    CONFIG_FILE, HASH_FILE,
};
use crate::config::RunConfig;
use crate::CliError;

fn pct(v: f64) -> String {
    if v.is_finite() {
        format!("{:.2}", 100.0 * v)
    } else {
        "n/a".into()
    }
}

fn link(out: &Path, rel: &str, text: &str) -> Option<String> {
    out.join(rel).is_file().then(|| format!("[{text}]({rel})"))
}

fn image(out: &Path, rel: &str, alt: &str) -> Option<String> {
    out.join(rel).is_file().then(|| format!("![{alt}]({rel})\n"))
}

fn dominance_table(md: &mut String, models: &[(&String, &EvalArtifact)]) {
    let _ = writeln!(md, "| model | group | within (%) | unseen (%) |");
    let _ = writeln!(md, "|---|---|---|---|");
    for (name, a) in models {
        for dom in ["auditory", "visual"] {
            let cell = |kind| {
                a.report.dominance.get(kind, dom).map_or("absent".to_string(), |g| {
                    format!("{} ({}/{})", pct(g.accuracy), g.correct, g.total)
                })
            };
            let _ = writeln!(
                md,
                "| {name} | {dom} | {} | {} |",
                cell(SplitKind::Within),
                cell(SplitKind::Unseen)
            );
        }
    }
}

pub fn render(out: &Path) -> Result<String, CliError> {
    let mut md = String::from("# eegcond run report\n\n");
    if let Ok(hash) = std::fs::read_to_string(out.join(HASH_FILE)) {
        let _ = writeln!(md, "Config sha256 `{}`.", hash.trim());
        if let Some(l) = link(out, CONFIG_FILE, "resolved configuration") {
            let _ = writeln!(md, "See the {l}.");
        }
        md.push('\n');
    }

    let pre = out.join("preprocess_summary.json");
    if pre.is_file() {
        let p: PreprocessArtifact = read_json(&pre)?;
        let s = &p.summary;
        let _ = writeln!(md, "## Data\n");
        let _ = writeln!(
            md,
            "{} events became {} epochs of {} channels × {} samples; {} excluded at the recording edge, {} degenerate.\n",
            s.events, s.epochs, s.channels, s.epoch_samples, s.excluded, s.degenerate
        );
    }

    let table = out.join("ablation/table.json");
    if table.is_file() {
        let t: AblationArtifact = read_json(&table)?;
        let _ = writeln!(md, "## Ablation\n");
        let _ = writeln!(
            md,
            "Train subjects: {}. Unseen subjects: {}.\n",
            t.split.train_ids.len(),
            t.split.unseen_ids.join(", ")
        );
        let _ = writeln!(
            md,
            "| backbone | baseline within (%) | baseline unseen (%) | +IDs within (%) | +IDs unseen (%) | Δ within | Δ unseen |"
        );
        let _ = writeln!(md, "|---|---|---|---|---|---|---|");
        for r in &t.rows {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {:+.2} | {:+.2} |",
                r.backbone,
                pct(r.baseline_within),
                pct(r.baseline_unseen),
                pct(r.ids_within),
                pct(r.ids_unseen),
                100.0 * r.delta_within,
                100.0 * r.delta_unseen
            );
        }
        md.push('\n');
        if let Some(img) = image(out, "ablation/ablation.svg", "ablation") {
            md.push_str(&img);
            md.push('\n');
        }
        let evals = eval_artifacts(out, "ablation")?;
        let ids: Vec<_> = evals.iter().filter(|(_, a)| a.use_ids).collect();
        if !ids.is_empty() {
            let _ = writeln!(md, "### Dominance groups (+IDs)\n");
            dominance_table(&mut md, &ids);
            md.push('\n');
            if let Some(img) = image(out, "ablation/dominance.svg", "dominance") {
                md.push_str(&img);
                md.push('\n');
            }
        }
    }

    let models = eval_artifacts(out, "models")?;
    if !models.is_empty() {
        let _ = writeln!(md, "## Trained models\n");
        let _ = writeln!(md, "| model | within (%) | unseen (%) | overall (%) | checkpoint |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for (name, a) in &models {
            let ck = link(out, &a.checkpoint, "checkpoint").unwrap_or_else(|| "missing".into());
            let _ = writeln!(
                md,
                "| {name} | {} | {} | {} | {ck} |",
                pct(accuracy(&a.report, SplitKind::Within)),
                pct(accuracy(&a.report, SplitKind::Unseen)),
                pct(a.report.overall.accuracy)
            );
        }
        md.push('\n');
        let all: Vec<_> = models.iter().collect();
        let _ = writeln!(md, "### Dominance groups\n");
        dominance_table(&mut md, &all);
        md.push('\n');
    }

    let clusters = out.join("embed/clusters.json");
    if clusters.is_file() {
        let e: EmbedArtifact = read_json(&clusters)?;
        let c = &e.clusters;
        let _ = writeln!(md, "## Embedding analysis\n");
        let _ = writeln!(
            md,
            "Embeddings of {} subjects from `{}` ({} distinct points). t-SNE KL {:.4} at initialization, {:.4} at the end.\n",
            e.subjects, e.checkpoint, e.distinct_points, e.initial_kl, e.final_kl
        );
        let _ = writeln!(
            md,
            "{} of {} profile codes observed; {} prominent (at least {} subjects).\n",
            c.n_observed, c.n_possible, c.n_prominent, c.min_size
        );
        let _ = writeln!(md, "| code (d s m a) | subjects |");
        let _ = writeln!(md, "|---|---|");
        for (code, members) in &c.membership {
            let _ = writeln!(md, "| {code} | {} |", members.join(", "));
        }
        md.push('\n');
        if !c.unseen_nearest.is_empty() {
            let pairs: Vec<String> = c
                .unseen_nearest
                .iter()
                .map(|(s, code)| format!("{s} → {code}"))
                .collect();
            let _ = writeln!(
                md,
                "Nearest training centroid of each unseen subject: {}.\n",
                pairs.join(", ")
            );
        }
        for (rel, alt) in [("embed/tsne.svg", "t-SNE")] {
            if let Some(img) = image(out, rel, alt) {
                md.push_str(&img);
                md.push('\n');
            }
        }
        if let Some(l) = link(out, "embed/layout.csv", "layout CSV") {
            let _ = writeln!(md, "Coordinates: {l}.\n");
        }
    }
    Ok(md)
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let md = render(&cfg.out)?;
    let path = cfg.out.join("report.md");
    write_text(&path, &md)?;
    println!("report: {}", path.display());
    Ok(())
}
