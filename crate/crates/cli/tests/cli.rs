use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_eegcond");

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

/// Small synthetic run: 6 subjects, two unseen, two training epochs.
fn setup(extra: &str) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("run.toml");
    let text = format!(
        r#"seed = 11
out = "{}"
[dataset.synthetic]
n_subjects = 6
epochs_per_subject = 16
[split]
n_unseen = 2
[train]
max_epochs = 2
batch_size = 32
[ablation]
backbones = ["eegnet"]
[analysis.tsne]
perplexity = 2.0
iterations = 300
{extra}"#,
        out.display()
    );
    fs::write(&config, text).unwrap();
    Run { _dir: dir, config, out }
}

fn eegcond(run: &Run, args: &[&str]) -> Output {
    eegcond_env(run, args, &[])
}

fn eegcond_env(run: &Run, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).arg("--config").arg(&run.config);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("EEGCOND_")) {
        cmd.env_remove(k);
    }
    cmd.envs(env.iter().copied());
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn prepared(extra: &str) -> Run {
    let run = setup(extra);
    ok(eegcond(&run, &["synth"]));
    ok(eegcond(&run, &["preprocess"]));
    run
}

/// Every file under `dir` with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn synth_writes_a_manifest_and_replays_byte_for_byte() {
    let run = setup("");
    let stdout = ok(eegcond(&run, &["synth"]));
    assert!(stdout.contains("6 subjects"), "{stdout}");
    assert!(run.out.join("raw/manifest.json").is_file());
    let first = snapshot(&run.out.join("raw"));
    ok(eegcond(&run, &["synth"]));
    assert_eq!(first, snapshot(&run.out.join("raw")));
}

#[test]
fn invalid_values_exit_with_two() {
    let run = setup("");
    let out = eegcond_env(
        &run,
        &["synth"],
        &[("EEGCOND_DATASET", "{ synthetic = { snr = -1.0 } }")],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("snr"), "{}", stderr(&out));

    let out = eegcond_env(&run, &["synth"], &[("EEGCOND_TRAIN", "{ precision = \"32-bit\" }")]);
    assert_eq!(code(&out), 2);

    let bad = setup("[model]\nwidth = 3\n");
    assert_eq!(code(&eegcond(&bad, &["synth"])), 2);
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = Command::new(BIN)
        .args(["synth", "--config", "/nonexistent/run.toml"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let run = setup("");
    let blocker = run.out.parent().unwrap().join("file");
    fs::write(&blocker, "x").unwrap();
    let target = blocker.join("sub");
    let out = eegcond(&run, &["synth", "--out", target.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn preprocess_counts_epochs_and_rejects_preprocessed_input() {
    let run = setup("");
    ok(eegcond(&run, &["synth"]));
    let stdout = ok(eegcond(&run, &["preprocess"]));
    assert!(stdout.contains("x77"), "{stdout}");
    let summary = json(&run.out.join("preprocess_summary.json"))["summary"].clone();
    let events = summary["events"].as_u64().unwrap();
    assert_eq!(events, 6 * 16);
    assert_eq!(
        summary["epochs"].as_u64().unwrap(),
        events - summary["excluded"].as_u64().unwrap()
    );

    let pre = run.out.join("preprocessed");
    let again = eegcond_env(
        &run,
        &["preprocess"],
        &[("EEGCOND_DATASET", &format!("{{ path = \"{}\" }}", pre.display()))],
    );
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("stage mismatch"), "{}", stderr(&again));
}

#[test]
fn train_then_eval_reproduces_the_accuracy() {
    let run = prepared("");
    ok(eegcond(&run, &["train", "--backbone", "eegnet", "--use-ids", "true"]));
    let dir = run.out.join("models/eegnet_ids");
    let trained = json(&dir.join("train.json"));
    let epochs = trained["history"]["train_loss"].as_array().unwrap().len();
    let history = fs::read_to_string(dir.join("history.csv")).unwrap();
    let rows = history.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, epochs);

    ok(eegcond(&run, &["eval", "--backbone", "eegnet", "--use-ids", "true"]));
    let evaluated = json(&dir.join("eval.json"));
    assert_eq!(trained["report"], evaluated["report"]);
    let hash = fs::read_to_string(run.out.join("config.sha256")).unwrap();
    assert_eq!(evaluated["config_sha256"].as_str().unwrap(), hash.trim());
    assert!(fs::read_to_string(dir.join("eval.csv"))
        .unwrap()
        .starts_with(&format!("# config_sha256={}", hash.trim())));
}

#[test]
fn missing_profiles_with_ids_exit_with_two() {
    let run = prepared("");
    let profiles = run.out.join("preprocessed/profiles.csv");
    let text = fs::read_to_string(&profiles).unwrap();
    let kept: Vec<&str> = text.lines().take(text.lines().count() - 1).collect();
    fs::write(&profiles, kept.join("\n") + "\n").unwrap();
    let out = eegcond(&run, &["train", "--use-ids", "true"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn eval_on_an_empty_split_exits_with_two() {
    let run = prepared("");
    ok(eegcond(&run, &["train", "--use-ids", "false"]));
    let out = eegcond_env(
        &run,
        &["eval", "--use-ids", "false"],
        &[("EEGCOND_SPLIT", "{ n_unseen = 0, within_test_fraction = 0.0 }")],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn ablation_grid_matches_the_per_model_reports() {
    let run = prepared("");
    let out = eegcond_env(
        &run,
        &["ablate"],
        &[("EEGCOND_ABLATION", "{ backbones = [\"eegnet\", \"lstm\", \"dmu\"] }")],
    );
    ok(out);
    let table = json(&run.out.join("ablation/table.json"));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let b = row["backbone"].as_str().unwrap();
        let acc = |tag: &str, split: &str| {
            json(&run.out.join(format!("ablation/{b}_{tag}/eval.json")))["report"]["splits"][split]["accuracy"]
                .as_f64()
                .unwrap()
        };
        for split in ["within", "unseen"] {
            let (base, ids) = (acc("base", split), acc("ids", split));
            assert_eq!(row[format!("baseline_{split}")].as_f64().unwrap(), base);
            assert_eq!(row[format!("ids_{split}")].as_f64().unwrap(), ids);
            assert_eq!(row[format!("delta_{split}")].as_f64().unwrap(), ids - base);
        }
    }
    let csv = fs::read_to_string(run.out.join("ablation/table.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert!(run.out.join("ablation/ablation.svg").is_file());
}

#[test]
fn embed_and_report_reference_only_existing_files() {
    let run = prepared("");
    ok(eegcond(&run, &["ablate"]));
    let stdout = ok(eegcond(&run, &["embed"]));
    assert!(stdout.contains("6 subjects"), "{stdout}");
    let clusters = json(&run.out.join("embed/clusters.json"));
    let c = &clusters["clusters"];
    assert_eq!(c["n_possible"], 16);
    assert!(c["n_prominent"].as_u64() <= c["n_observed"].as_u64());
    assert!(clusters["final_kl"].as_f64() < clusters["initial_kl"].as_f64());
    let layout = fs::read_to_string(run.out.join("embed/layout.csv")).unwrap();
    assert_eq!(layout.lines().filter(|l| !l.starts_with('#')).count(), 7);

    ok(eegcond(&run, &["report"]));
    let md = fs::read_to_string(run.out.join("report.md")).unwrap();
    assert!(md.contains("| backbone | baseline within"));
    assert!(md.contains("| model | group | within (%) | unseen (%) |"));
    let mut links = 0;
    for part in md.split("](").skip(1) {
        let target = &part[..part.find(')').unwrap()];
        assert!(run.out.join(target).is_file(), "report links missing {target}");
        links += 1;
    }
    assert!(links >= 4);

    ok(eegcond(&run, &["report"]));
    assert_eq!(md, fs::read_to_string(run.out.join("report.md")).unwrap());
}

#[test]
fn report_on_an_empty_run_has_no_links() {
    let run = setup("");
    ok(eegcond(&run, &["report"]));
    let md = fs::read_to_string(run.out.join("report.md")).unwrap();
    for part in md.split("](").skip(1) {
        let target = &part[..part.find(')').unwrap()];
        assert!(run.out.join(target).is_file(), "report links missing {target}");
    }
    assert!(!md.contains("## Ablation"));
}

#[test]
fn pipeline_replays_bit_identically() {
    let run = setup("");
    let steps: [&[&str]; 4] = [&["synth"], &["preprocess"], &["train"], &["report"]];
    for s in steps {
        ok(eegcond(&run, s));
    }
    let first = snapshot(&run.out);
    fs::remove_dir_all(&run.out).unwrap();
    for s in steps {
        ok(eegcond(&run, s));
    }
    let second = snapshot(&run.out);
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (path, bytes) in &first {
        assert!(second[path] == *bytes, "{} differs between replays", path.display());
    }
}

#[test]
fn flags_override_environment_and_file() {
    let run = setup("");
    ok(eegcond_env(&run, &["synth", "--seed", "5"], &[("EEGCOND_SEED", "4")]));
    let cfg = fs::read_to_string(run.out.join("config.toml")).unwrap();
    assert!(cfg.starts_with("seed = 5\n"), "{cfg}");
    ok(eegcond_env(&run, &["synth"], &[("EEGCOND_SEED", "4")]));
    let cfg = fs::read_to_string(run.out.join("config.toml")).unwrap();
    assert!(cfg.starts_with("seed = 4\n"), "{cfg}");
}
