use std::collections::{BTreeMap, BTreeSet};

use eegcond::conditioning::{encode_profile, ProfileCode, EMBED_DIM};
use eegcond::dataset::{Dominance, SubjectProfile};
use eegcond::embed_analysis::*;
use eegcond::models::{init_params, Backbone, ModelParams, ModelSpec};
use ndarray::{array, Array2};
use proptest::prelude::*;

fn profile(id: &str, code: usize) -> SubjectProfile {
    let c = ProfileCode::from_index(code);
    SubjectProfile {
        subject_id: id.into(),
        dominance: if c.0[0] == 1 {
            Dominance::Auditory
        } else {
            Dominance::Visual
        },
        sex: c.0[1],
        music_education: c.0[2],
        active_musician: c.0[3],
    }
}

fn profiles(codes: &[usize]) -> BTreeMap<String, SubjectProfile> {
    codes
        .iter()
        .enumerate()
        .map(|(i, &c)| (format!("S{i:02}"), profile(&format!("S{i:02}"), c)))
        .collect()
}

fn ids_model(seed: u64) -> ModelParams {
    init_params(&ModelSpec::new(Backbone::EegNet, 8, true), seed).unwrap()
}

/// Deterministic well-spread test points.
fn points(n: usize, d: usize, seed: u64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(i, k)| {
        let v = ((i * 31 + k * 17) as u64 ^ seed).wrapping_mul(2654435761) % 1000;
        v as f64 / 100.0
    })
}

#[test]
fn embeddings_match_the_affine_map() {
    let model = ids_model(3);
    let profs = profiles(&[0, 5, 5, 15, 9]);
    let e = collect_embeddings(&model, &profs, &BTreeSet::new()).unwrap();
    assert_eq!(e.rows.dim(), (5, EMBED_DIM));
    let w = model.params["embed.weight"].view2().to_owned();
    let b = &model.params["embed.bias"].data;
    for (i, p) in profs.values().enumerate() {
        let bits = encode_profile(p).bits();
        for j in 0..EMBED_DIM {
            let direct: f64 = (0..4).map(|k| w[[j, k]] * bits[k]).sum::<f64>() + b[j];
            assert!((e.rows[[i, j]] - direct).abs() < 1e-15);
        }
    }
    assert_eq!(e.rows.row(1), e.rows.row(2));
}

#[test]
fn forty_two_subjects_give_forty_two_rows() {
    let codes: Vec<usize> = (0..42).map(|i| i % 14).collect();
    let profs = profiles(&codes);
    let unseen: BTreeSet<String> = ["S38", "S39", "S40", "S41"].map(String::from).into();
    let e = collect_embeddings(&ids_model(0), &profs, &unseen).unwrap();
    assert_eq!(e.rows.dim(), (42, 16));
    assert_eq!(e.unseen.iter().filter(|&&u| u).count(), 4);
}

#[test]
fn embeddings_need_an_ids_model() {
    let model = init_params(&ModelSpec::new(Backbone::Lstm, 8, false), 0).unwrap();
    assert!(collect_embeddings(&model, &profiles(&[1, 2]), &BTreeSet::new()).is_err());
}

#[test]
fn one_shared_profile_is_one_cluster() {
    let profs = profiles(&vec![6; 42]);
    let e = collect_embeddings(&ids_model(1), &profs, &BTreeSet::new()).unwrap();
    let r = cluster_report(&e, 2);
    assert_eq!((r.n_possible, r.n_observed, r.n_prominent), (16, 1, 1));
    assert_eq!(r.membership["0110"].len(), 42);
}

#[test]
fn unseen_subjects_land_on_their_own_centroid() {
    let profs = profiles(&[1, 1, 2, 2, 3, 4, 2, 1]);
    let unseen: BTreeSet<String> = ["S06", "S07"].map(String::from).into();
    let e = collect_embeddings(&ids_model(2), &profs, &unseen).unwrap();
    let r = cluster_report(&e, 2);
    assert_eq!(r.unseen_nearest["S06"], ProfileCode::from_index(2).label());
    assert_eq!(r.unseen_nearest["S07"], ProfileCode::from_index(1).label());
    assert_eq!((r.n_observed, r.n_prominent), (4, 2));
}

#[test]
fn tsne_gradient_matches_finite_differences() {
    for n in [4, 7, 10] {
        let x = points(n, 16, n as u64);
        let aff = affinities(x.view(), 2.5).unwrap();
        let y = points(n, 2, 99 + n as u64) / 3.0;
        let g = kl_gradient(&aff.p, y.view());
        let h = 1e-6;
        for i in 0..n {
            for k in 0..2 {
                let (mut yp, mut ym) = (y.clone(), y.clone());
                yp[[i, k]] += h;
                ym[[i, k]] -= h;
                let num = (kl_divergence(&aff.p, yp.view()) - kl_divergence(&aff.p, ym.view())) / (2.0 * h);
                let rel = (g[[i, k]] - num).abs() / g[[i, k]].abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-5, "n={n} i={i} k={k}: analytic {} numeric {num}", g[[i, k]]);
            }
        }
    }
}

#[test]
fn duplicates_coincide_exactly() {
    let mut x = points(8, 16, 5);
    let row = x.row(2).to_owned();
    x.row_mut(6).assign(&row);
    x.row_mut(7).assign(&row);
    let out = tsne(
        x.view(),
        &TsneConfig {
            perplexity: 2.0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.y.row(2), out.y.row(6));
    assert_eq!(out.y.row(2), out.y.row(7));
    assert_ne!(out.y.row(2), out.y.row(3));
    assert_eq!(out.affinities.p.nrows(), 6);
}

#[test]
fn translation_leaves_the_layout_unchanged() {
    // Integer-valued inputs keep the shifted differences exact.
    let x = points(9, 16, 11).mapv(f64::round);
    let shifted = &x + 1024.0;
    let cfg = TsneConfig {
        perplexity: 3.0,
        seed: 4,
        ..Default::default()
    };
    let a = tsne(x.view(), &cfg).unwrap();
    let b = tsne(shifted.view(), &cfg).unwrap();
    assert_eq!(a.affinities.p, b.affinities.p);
    assert_eq!(a.y, b.y);
}

#[test]
fn tsne_decreases_kl_and_replays() {
    let x = points(12, 16, 8);
    let cfg = TsneConfig {
        perplexity: 4.0,
        seed: 9,
        ..Default::default()
    };
    let a = tsne(x.view(), &cfg).unwrap();
    assert!(a.final_kl >= 0.0 && a.initial_kl >= 0.0);
    assert!(a.final_kl < a.initial_kl, "{} !< {}", a.final_kl, a.initial_kl);
    let b = tsne(x.view(), &cfg).unwrap();
    assert_eq!(a.y, b.y);
    let c = tsne(x.view(), &TsneConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.y, c.y);
}

#[test]
fn tsne_rejects_degenerate_inputs() {
    let same = Array2::<f64>::ones((6, 16));
    assert!(tsne(same.view(), &TsneConfig::default()).is_err());
    let x = points(5, 16, 1);
    assert!(tsne(
        x.view(),
        &TsneConfig {
            perplexity: 5.0,
            ..Default::default()
        }
    )
    .is_err());
    let three = array![[0.0, 1.0], [2.0, 3.0], [4.0, 8.0], [0.0, 1.0]];
    assert!(tsne(
        three.view(),
        &TsneConfig {
            perplexity: 1.5,
            ..Default::default()
        }
    )
    .is_err());
}

#[test]
fn layout_csv_has_one_line_per_subject() {
    let profs = profiles(&[0, 1, 2, 3, 4, 5]);
    let unseen: BTreeSet<String> = ["S05".to_string()].into();
    let e = collect_embeddings(&ids_model(0), &profs, &unseen).unwrap();
    let out = tsne(
        e.rows.view(),
        &TsneConfig {
            perplexity: 2.0,
            iterations: 50,
            ..Default::default()
        },
    )
    .unwrap();
    let csv = layout_csv(&e, &out.y);
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().last().unwrap().ends_with(",0101,true"));
    let svg = scatter_svg(&e, &out.y, "layout");
    assert_eq!(svg.matches("<circle").count() - 6, 5);
    assert!(svg.contains("S05 (unseen)"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn affinities_are_calibrated_and_normalized(
        raw in proptest::collection::vec(-5.0f64..5.0, 6 * 16..=10 * 16),
        perplexity in 1.5f64..4.5,
    ) {
        let n = raw.len() / 16;
        let x = Array2::from_shape_vec((n, 16), raw[..n * 16].to_vec()).unwrap();
        let aff = affinities(x.view(), perplexity).unwrap();
        let p = &aff.p;
        prop_assert!((p.sum() - 1.0).abs() < 1e-9);
        for i in 0..n {
            prop_assert_eq!(p[[i, i]], 0.0);
            for j in 0..n {
                prop_assert!(p[[i, j]] >= 0.0);
                prop_assert!((p[[i, j]] - p[[j, i]]).abs() < 1e-18);
            }
            let bits = aff.entropy[i] / std::f64::consts::LN_2;
            prop_assert!((2f64.powf(bits) - perplexity).abs() / perplexity < 1e-3);
        }
    }

    #[test]
    fn cluster_counts_are_bounded(codes in proptest::collection::vec(0usize..16, 1..50), min_size in 1usize..4) {
        let e = collect_embeddings(&ids_model(0), &profiles(&codes), &BTreeSet::new()).unwrap();
        let r = cluster_report(&e, min_size);
        prop_assert_eq!(r.n_possible, 16);
        prop_assert!(r.n_prominent <= r.n_observed);
        prop_assert!(r.n_observed <= codes.len().min(16));
        prop_assert_eq!(r.membership.values().map(Vec::len).sum::<usize>(), codes.len());
    }

    #[test]
    fn kl_is_nonnegative(raw in proptest::collection::vec(-3.0f64..3.0, 2 * 8)) {
        let x = points(8, 16, 3);
        let aff = affinities(x.view(), 3.0).unwrap();
        let y = Array2::from_shape_vec((8, 2), raw).unwrap();
        prop_assert!(kl_divergence(&aff.p, y.view()) >= -1e-15);
    }
}
