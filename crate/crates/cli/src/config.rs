//! Run configuration: one TOML file, overridden per top-level key by
//! `EEGCOND_<KEY>` environment variables, then by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use eegcond::conditioning::EmbedderKind;
use eegcond::dataset::SyntheticSpec;
use eegcond::embed_analysis::TsneConfig;
use eegcond::models::{Backbone, EegNetSpec, ModelOptions};
use eegcond::preprocess::PreprocessConfig;
use eegcond::train_eval::{AblationConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::CliError;

pub const ENV_PREFIX: &str = "EEGCOND_";
const TOP_LEVEL_KEYS: [&str; 9] = [
    "seed",
    "out",
    "dataset",
    "preprocess",
    "model",
    "split",
    "train",
    "ablation",
    "analysis",
];
/// Sections whose own `seed` field is derived from the top-level seed.
const SEEDED_SECTIONS: [&[&str]; 3] = [&["dataset", "synthetic"], &["train"], &["analysis", "tsne"]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub preprocess: PreprocessConfig,
    pub model: ModelSection,
    pub split: SplitSection,
    pub train: TrainConfig,
    pub ablation: AblationSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelSection::default(),
            split: SplitSection::default(),
            train: TrainConfig::default(),
            ablation: AblationSection::default(),
            analysis: AnalysisSection::default(),
        };
        cfg.derive_seeds();
        cfg
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Raw dataset to preprocess instead of `<out>/raw`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Exported WithMe tree read by `convert`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub withme: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: Backbone,
    pub use_ids: bool,
    pub hidden: usize,
    pub eegnet: EegNetSpec,
    pub dmu_delays: usize,
    pub embedder: EmbedderKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        let o = ModelOptions::default();
        ModelSection {
            backbone: Backbone::EegNet,
            use_ids: true,
            hidden: o.hidden,
            eegnet: o.eegnet,
            dmu_delays: o.dmu_delays,
            embedder: o.embedder,
        }
    }
}

impl ModelSection {
    pub fn options(&self) -> ModelOptions {
        ModelOptions {
            hidden: self.hidden,
            eegnet: self.eegnet.clone(),
            dmu_delays: self.dmu_delays,
            embedder: self.embedder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub n_unseen: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen_ids: Option<Vec<String>>,
    pub within_test_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let a = AblationConfig::default();
        SplitSection {
            n_unseen: a.n_unseen,
            unseen_ids: a.unseen_ids,
            within_test_fraction: a.within_test_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub backbones: Vec<Backbone>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            backbones: Backbone::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub tsne: TsneConfig,
    /// Members needed for a profile cluster to count as prominent.
    pub min_size: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            tsne: TsneConfig::default(),
            min_size: 2,
        }
    }
}

/// Command-line values that take precedence over file and environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub backbone: Option<Backbone>,
    pub use_ids: Option<bool>,
}

impl RunConfig {
    fn derive_seeds(&mut self) {
        self.dataset.synthetic.seed = self.seed;
        self.train.seed = self.seed;
        self.analysis.tsne.seed = self.seed;
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            n_unseen: self.split.n_unseen,
            split_seed: self.seed,
            unseen_ids: self.split.unseen_ids.clone(),
            within_test_fraction: self.split.within_test_fraction,
            train: self.train.clone(),
            model: self.model.options(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |r: eegcond::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        check(self.dataset.synthetic.validate())?;
        check(self.preprocess.validate())?;
        check(self.train.validate())?;
        check(self.analysis.tsne.validate())?;
        if self.ablation.backbones.is_empty() {
            return Err(CliError::Config("ablation.backbones must not be empty".into()));
        }
        if self.analysis.min_size == 0 {
            return Err(CliError::Config("analysis.min_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.split.within_test_fraction) {
            return Err(CliError::Config(format!(
                "split.within_test_fraction = {} must lie in [0, 1)",
                self.split.within_test_fraction
            )));
        }
        Ok(())
    }

    /// Canonical TOML text; its SHA-256 identifies the run.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an environment value as a TOML value; anything that is not valid
/// TOML is taken as a plain string.
fn env_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn section<'a>(root: &'a Table, path: &[&str]) -> Option<&'a Table> {
    let mut t = root;
    for key in path {
        t = t.get(*key)?.as_table()?;
    }
    Some(t)
}

/// Reads `path`, applies environment overrides from `env`, then `flags`, and
/// validates the result.
pub fn resolve(
    path: &Path,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &Overrides,
) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let table: Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut root = Value::Table(table);

    let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (key, raw) in env {
        let name = key[ENV_PREFIX.len()..].to_ascii_lowercase();
        if !TOP_LEVEL_KEYS.contains(&name.as_str()) {
            return Err(CliError::Config(format!(
                "{key} does not name a top-level config key (expected one of {})",
                TOP_LEVEL_KEYS.join(", ")
            )));
        }
        let mut over = Table::new();
        over.insert(name, env_value(&raw));
        merge(&mut root, Value::Table(over));
    }

    let Value::Table(table) = root else {
        unreachable!("root stays a table")
    };
    // A resolved config echoes the derived seeds, so equal values are fine.
    let top = table.get("seed").cloned().unwrap_or(Value::Integer(0));
    for path in SEEDED_SECTIONS {
        if section(&table, path)
            .and_then(|t| t.get("seed"))
            .is_some_and(|s| *s != top)
        {
            return Err(CliError::Config(format!(
                "{}.seed is derived from the top-level seed; set `seed` instead",
                path.join(".")
            )));
        }
    }
    let mut cfg: RunConfig =
        RunConfig::deserialize(table).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;

    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &flags.out {
        cfg.out = out.clone();
    }
    if let Some(b) = flags.backbone {
        cfg.model.backbone = b;
    }
    if let Some(u) = flags.use_ids {
        cfg.model.use_ids = u;
    }
    cfg.derive_seeds();
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), text).unwrap();
        f
    }

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let f = write("");
        let cfg = resolve(f.path(), env(&[]), &Overrides::default()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.preprocess.target_fs, 64.0);
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let f = write("seed = 1\n[train]\nmax_epochs = 3\nlr = 0.01\n");
        let e = env(&[
            ("EEGCOND_SEED", "2"),
            ("EEGCOND_TRAIN", "{ max_epochs = 4 }"),
            ("OTHER", "x"),
        ]);
        let cfg = resolve(f.path(), e.clone(), &Overrides::default()).unwrap();
        assert_eq!((cfg.seed, cfg.train.max_epochs, cfg.train.lr), (2, 4, 0.01));
        assert_eq!(cfg.train.seed, 2);
        let flags = Overrides {
            seed: Some(5),
            ..Default::default()
        };
        assert_eq!(resolve(f.path(), e, &flags).unwrap().seed, 5);
    }

    #[test]
    fn bare_env_strings_are_accepted() {
        let f = write("");
        let cfg = resolve(
            f.path(),
            env(&[("EEGCOND_OUT", "/tmp/some run")]),
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!(cfg.out, PathBuf::from("/tmp/some run"));
    }

    #[test]
    fn unknown_keys_and_section_seeds_are_rejected() {
        for text in [
            "colour = 1",
            "[train]\nlearning_rate = 1",
            "[train]\nseed = 3",
            "seed = 1\n[dataset.synthetic]\nseed = 3",
        ] {
            let f = write(text);
            assert!(
                matches!(
                    resolve(f.path(), env(&[]), &Overrides::default()),
                    Err(CliError::Config(_))
                ),
                "{text}"
            );
        }
        let f = write("");
        assert!(resolve(f.path(), env(&[("EEGCOND_BOGUS", "1")]), &Overrides::default()).is_err());
    }

    #[test]
    fn field_errors_name_the_field() {
        let f = write("[dataset.synthetic]\nsnr = -1.0\n");
        let Err(CliError::Config(msg)) = resolve(f.path(), env(&[]), &Overrides::default()) else {
            panic!("expected a config error");
        };
        assert!(msg.contains("snr"), "{msg}");
    }

    #[test]
    fn resolved_text_round_trips_with_a_stable_hash() {
        let f = write("seed = 9\n[model]\nbackbone = \"dmu\"\n");
        let cfg = resolve(f.path(), env(&[]), &Overrides::default()).unwrap();
        let again = write(&cfg.to_toml());
        let back = resolve(again.path(), env(&[]), &Overrides::default()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }
}
