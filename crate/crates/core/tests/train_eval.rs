use std::collections::{BTreeMap, BTreeSet};

use eegcond::conditioning::EmbedderKind;
use eegcond::dataset::{generate_synthetic, Dataset, Dominance, EffectRule, SyntheticSpec, TrialEpoch};
use eegcond::models::{init_params, Backbone, Mode, ModelOptions, ModelParams, ModelSpec};
use eegcond::preprocess::{preprocess_pipeline, PreprocessConfig};
use eegcond::rng;
use eegcond::train_eval::*;
use eegcond::Error;
use proptest::prelude::*;

fn dataset(n_subjects: usize, epochs: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        n_subjects,
        epochs_per_subject: epochs,
        seed,
        ..Default::default()
    };
    preprocess_pipeline(&generate_synthetic(&spec).unwrap(), &PreprocessConfig::default())
        .unwrap()
        .0
}

fn small_spec(backbone: Backbone, use_ids: bool, embedder: EmbedderKind) -> ModelSpec {
    ModelOptions {
        hidden: 6,
        dmu_delays: 3,
        embedder,
        ..Default::default()
    }
    .spec(backbone, use_ids, 8, 77)
}

fn quick(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        batch_size: 16,
        val_fraction: 0.25,
        lr: 1e-3,
        ..Default::default()
    }
}

fn same_history(a: &TrainHistory, b: &TrainHistory) -> bool {
    TrainHistory {
        wall_time_secs: 0.0,
        ..a.clone()
    } == TrainHistory {
        wall_time_secs: 0.0,
        ..b.clone()
    }
}

#[test]
fn embedder_gradients_match_finite_differences() {
    let ds = dataset(3, 4, 1);
    let epochs: Vec<&TrialEpoch> = ds.epochs.iter().collect();
    for (backbone, kind, mode) in [
        (Backbone::Lstm, EmbedderKind::Affine, Mode::Eval),
        (Backbone::Lstm, EmbedderKind::Lookup, Mode::Eval),
        (Backbone::EegNet, EmbedderKind::Affine, Mode::BatchStats),
        (Backbone::Dmu, EmbedderKind::Affine, Mode::Eval),
    ] {
        let model = init_params(&small_spec(backbone, true, kind), 5).unwrap();
        let codes = codes_if_needed(&model.spec, epochs.iter().copied(), &ds.profiles).unwrap();
        let loss = |m: &ModelParams| {
            loss_and_gradients(m, &epochs, &codes, mode, &mut rng::stream(0, 0))
                .unwrap()
                .loss
        };
        let grads = loss_and_gradients(&model, &epochs, &codes, mode, &mut rng::stream(0, 0))
            .unwrap()
            .grads;
        let names: Vec<&str> = match kind {
            EmbedderKind::Affine => vec!["embed.weight", "embed.bias"],
            EmbedderKind::Lookup => vec!["embed.table"],
        };
        let h = 1e-5;
        for name in names {
            let n = model.params[name].data.len();
            let mut checked = 0;
            for i in (0..n).step_by((n / 12).max(1)) {
                let mut plus = model.clone();
                plus.params.get_mut(name).unwrap().data[i] += h;
                let mut minus = model.clone();
                minus.params.get_mut(name).unwrap().data[i] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = grads[name].data[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{backbone} {name}[{i}]: analytic {analytic} numeric {numeric}"
                );
                checked += 1;
            }
            assert!(checked > 0);
        }
    }
}

#[test]
fn zero_learning_rate_keeps_parameters_and_loss() {
    let ds = dataset(2, 16, 2);
    let data: Vec<&TrialEpoch> = ds.epochs.iter().collect();
    let spec = small_spec(Backbone::Lstm, true, EmbedderKind::Affine);
    let cfg = TrainConfig {
        lr: 0.0,
        val_fraction: 0.0,
        ..quick(4)
    };
    let (model, history) = train(&spec, &data, &ds.profiles, &cfg, &BTreeSet::new()).unwrap();
    assert_eq!(model.params, init_params(&spec, cfg.seed).unwrap().params);
    assert_eq!(history.epochs(), 4);
    for l in &history.train_loss {
        assert!((l - history.train_loss[0]).abs() < 1e-12, "{:?}", history.train_loss);
    }
}

#[test]
fn training_replays_bit_identically() {
    let ds = dataset(3, 12, 3);
    let data: Vec<&TrialEpoch> = ds.epochs.iter().collect();
    for backbone in Backbone::ALL {
        let spec = small_spec(backbone, true, EmbedderKind::Affine);
        let a = train(&spec, &data, &ds.profiles, &quick(2), &BTreeSet::new()).unwrap();
        let b = train(&spec, &data, &ds.profiles, &quick(2), &BTreeSet::new()).unwrap();
        assert_eq!(a.0, b.0, "{backbone}");
        assert!(same_history(&a.1, &b.1), "{backbone}");
        let other = TrainConfig { seed: 1, ..quick(2) };
        let c = train(&spec, &data, &ds.profiles, &other, &BTreeSet::new()).unwrap();
        assert_ne!(a.0.params, c.0.params, "{backbone}");
    }
}

#[test]
fn history_lengths_match_completed_epochs() {
    let ds = dataset(2, 16, 4);
    let data: Vec<&TrialEpoch> = ds.epochs.iter().collect();
    let spec = small_spec(Backbone::EegNet, false, EmbedderKind::Affine);
    let (_, h) = train(&spec, &data, &ds.profiles, &quick(3), &BTreeSet::new()).unwrap();
    assert_eq!(h.epochs(), h.stopped_epoch);
    assert_eq!(h.train_accuracy.len(), h.epochs());
    assert_eq!(h.val_accuracy.len(), h.epochs());
    assert!(h.val_accuracy.iter().all(Option::is_some));
    assert_eq!(h.to_csv().lines().count(), h.epochs() + 1);
    assert!(h.best_epoch >= 1 && h.best_epoch <= h.epochs());
}

#[test]
fn max_steps_caps_training() {
    let ds = dataset(2, 16, 4);
    let data: Vec<&TrialEpoch> = ds.epochs.iter().collect();
    let spec = small_spec(Backbone::Lstm, false, EmbedderKind::Affine);
    let cfg = TrainConfig {
        max_steps: Some(3),
        val_fraction: 0.0,
        ..quick(50)
    };
    let (_, h) = train(&spec, &data, &ds.profiles, &cfg, &BTreeSet::new()).unwrap();
    assert_eq!(h.steps, 3);
    assert_eq!(h.stop_reason, "max_steps");
}

#[test]
fn unseen_subjects_never_reach_training() {
    let ds = dataset(3, 4, 5);
    let data: Vec<&TrialEpoch> = ds.epochs.iter().collect();
    let excluded: BTreeSet<String> = [ds.subjects[1].clone()].into();
    let spec = small_spec(Backbone::Lstm, false, EmbedderKind::Affine);
    let err = train(&spec, &data, &ds.profiles, &quick(1), &excluded).unwrap_err();
    assert!(matches!(err, Error::Leakage(ref s) if *s == ds.subjects[1]), "{err}");
}

#[test]
fn bad_inputs_are_rejected() {
    let ds = dataset(2, 4, 6);
    let data: Vec<&TrialEpoch> = ds.epochs.iter().collect();
    let spec = small_spec(Backbone::Lstm, true, EmbedderKind::Affine);
    let none = BTreeSet::new();
    assert!(matches!(
        train(&spec, &[], &ds.profiles, &quick(1), &none),
        Err(Error::Empty(_))
    ));
    assert!(matches!(
        train(&spec, &data, &BTreeMap::new(), &quick(1), &none),
        Err(Error::MissingProfile(_))
    ));
    let f32 = TrainConfig {
        precision: Precision::F32,
        ..quick(1)
    };
    assert!(matches!(
        train(&spec, &data, &ds.profiles, &f32, &none),
        Err(Error::Config(_))
    ));
    let wide = ModelSpec {
        eeg_channels: 9,
        ..spec.clone()
    };
    assert!(train(&wide, &data, &ds.profiles, &quick(1), &none).is_err());
}

/// LSTM whose logits are the dense bias alone.
fn constant_model(class: usize) -> ModelParams {
    let mut m = init_params(&small_spec(Backbone::Lstm, false, EmbedderKind::Affine), 0).unwrap();
    m.params.get_mut("dense.weight").unwrap().data.fill(0.0);
    let bias = &mut m.params.get_mut("dense.bias").unwrap().data;
    bias[class] = 1.0;
    bias[1 - class] = -1.0;
    m
}

#[test]
fn constant_predictor_scores_half_on_balanced_sets() {
    let ds = dataset(4, 20, 7);
    let targets = ds.epochs.iter().filter(|e| e.label.index() == 0).count();
    assert_eq!(2 * targets, ds.epochs.len(), "synthetic labels are balanced");
    let within: Vec<&TrialEpoch> = ds.epochs.iter().collect();
    for class in [0, 1] {
        let r = evaluate(&constant_model(class), &within, &[], &ds.profiles).unwrap();
        assert_eq!(r.overall.accuracy, 0.5);
        let recall: Vec<f64> = r.per_class.values().map(|g| g.accuracy).collect();
        assert!(recall.contains(&1.0) && recall.contains(&0.0));
    }
}

#[test]
fn group_counts_partition_each_split() {
    let ds = dataset(5, 10, 8);
    let (within, unseen): (Vec<&TrialEpoch>, Vec<&TrialEpoch>) =
        ds.epochs.iter().partition(|e| e.subject_id != ds.subjects[4]);
    let r = evaluate(&constant_model(0), &within, &unseen, &ds.profiles).unwrap();
    assert_eq!(r.overall.total, ds.epochs.len());
    assert_eq!(r.split(SplitKind::Within).unwrap().total, within.len());
    assert_eq!(r.split(SplitKind::Unseen).unwrap().total, unseen.len());
    let sum = |m: &BTreeMap<String, GroupStats>| m.values().map(|g| g.total).sum::<usize>();
    for map in [&r.per_condition, &r.per_subject, &r.per_class, &r.per_dominance] {
        assert_eq!(sum(map), ds.epochs.len());
    }
    for (kind, set) in [(SplitKind::Within, &within), (SplitKind::Unseen, &unseen)] {
        let cells = &r.dominance.cells[kind.as_str()];
        assert_eq!(cells.values().map(|g| g.total).sum::<usize>(), set.len());
    }
    assert!(matches!(
        evaluate(&constant_model(0), &[], &[], &ds.profiles),
        Err(Error::Empty(_))
    ));
}

#[test]
fn single_dominance_group_leaves_the_other_absent() {
    let mut ds = dataset(3, 6, 9);
    for p in ds.profiles.values_mut() {
        p.dominance = Dominance::Auditory;
    }
    let all: Vec<&TrialEpoch> = ds.epochs.iter().collect();
    let d = dominance_eval(&constant_model(1), &all, &[], &ds.profiles).unwrap();
    assert!(d.get(SplitKind::Within, "auditory").is_some());
    assert!(d.get(SplitKind::Within, "visual").is_none());
    assert!(d.get(SplitKind::Unseen, "auditory").is_none());

    let mut partial = ds.profiles.clone();
    partial.remove(&ds.subjects[0]);
    assert!(matches!(
        dominance_eval(&constant_model(1), &all, &[], &partial),
        Err(Error::MissingProfile(_))
    ));
}

#[test]
fn ablation_pairs_share_split_and_seed() {
    let spec = SyntheticSpec {
        n_subjects: 4,
        epochs_per_subject: 12,
        effect: EffectRule::null(),
        ..Default::default()
    };
    let ds = preprocess_pipeline(&generate_synthetic(&spec).unwrap(), &PreprocessConfig::default())
        .unwrap()
        .0;
    let cfg = AblationConfig {
        n_unseen: 1,
        train: quick(1),
        model: ModelOptions {
            hidden: 4,
            dmu_delays: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let ab = ablation_table(&ds, &[Backbone::Lstm, Backbone::EegNet], &cfg).unwrap();
    assert_eq!(ab.entries.len(), 4);
    assert_eq!(ab.split.unseen_ids.len(), 1);
    let rows = ab.rows();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.delta_within, r.ids_within - r.baseline_within);
        assert_eq!(r.delta_unseen, r.ids_unseen - r.baseline_unseen);
    }
    for e in &ab.entries {
        let t = e.report.split(SplitKind::Unseen).unwrap().total;
        assert_eq!(t, ab.partition.unseen_test.len());
    }
    assert_eq!(rows_to_csv(&rows).lines().count(), 3);
    assert!(ablation_table(&ds, &[], &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn accuracy_ignores_evaluation_order(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let ds = dataset(3, 8, 10);
        let model = init_params(&small_spec(Backbone::Lstm, true, EmbedderKind::Affine), 3).unwrap();
        let all: Vec<&TrialEpoch> = ds.epochs.iter().collect();
        let mut shuffled = all.clone();
        shuffled.shuffle(&mut rng::stream(seed, 1));
        let (a_w, a_u) = all.split_at(10);
        let (b_w, b_u): (Vec<&TrialEpoch>, Vec<&TrialEpoch>) =
            shuffled.iter().partition(|e| a_w.iter().any(|w| std::ptr::eq(*w, **e)));
        let a = evaluate(&model, a_w, a_u, &ds.profiles).unwrap();
        let b = evaluate(&model, &b_w, &b_u, &ds.profiles).unwrap();
        prop_assert_eq!(a, b);
    }
}
