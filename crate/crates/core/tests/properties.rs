use std::collections::BTreeSet;

use lto_core::data::{gen_synthetic, make_splits, Episode, RestrictedSet, SplitMode, SynthSpec};
use lto_core::eval::{attribute_confusion, auroc, drop_ratio_at_beta, MetricSeries};
use lto_core::learners::{predict, FscAlgorithm, LearnerKind};
use lto_core::models::{init_backbone, BackboneSpec, ModelParams, ParamSet};
use lto_core::tensor::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c, -50.0, 50.0))
}

proptest! {
    #[test]
    fn log_softmax_rows_lie_on_the_simplex(x in sized_matrix(6, 7)) {
        let lp = x.log_softmax().unwrap();
        let (n, c) = lp.dims2().unwrap();
        for i in 0..n {
            let row = lp.row(i);
            prop_assert!(row.iter().all(|&v| v <= 0.0));
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12, "row {i} of {c} sums to {s}");
        }
    }

    #[test]
    fn pairwise_distances_have_zero_diagonal_and_symmetry(x in sized_matrix(6, 5)) {
        let d = x.pairwise_sq_dist(&x).unwrap();
        let (n, _) = d.dims2().unwrap();
        for i in 0..n {
            prop_assert_eq!(d.at(i, i), 0.0);
            for j in 0..n {
                prop_assert!(d.at(i, j) >= 0.0);
                prop_assert_eq!(d.at(i, j), d.at(j, i));
            }
        }
    }

    #[test]
    fn auroc_equals_pairwise_brute_force(
        pairs in prop::collection::vec((0i32..6, any::<bool>()), 2..=50)
            .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 * 0.5).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let (mut twice_wins, mut npos, mut nneg) = (0u64, 0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li { npos += 1 } else { nneg += 1 }
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    twice_wins += if scores[i] > scores[j] { 2 } else if scores[i] == scores[j] { 1 } else { 0 };
                }
            }
        }
        let brute = twice_wins as f64 / (2 * npos * nneg) as f64;
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), brute);
    }

    #[test]
    fn auroc_is_invariant_under_monotone_maps(
        pairs in prop::collection::vec((-20.0f64..20.0, any::<bool>()), 2..=40)
            .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (s / 4.0).tanh() * 3.0 + s.powi(3) + 7.0).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&mapped, &labels).unwrap());
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((auroc(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-15);
    }

    #[test]
    fn drop_ratio_is_invariant_under_exact_rescaling(
        accs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 2..12),
        k in -3i32..4,
        beta in 0.5f64..5.0,
    ) {
        let pts: Vec<(usize, f64, f64)> = accs.iter().enumerate().map(|(i, &(r, o))| (i * 5, r, o)).collect();
        let base = MetricSeries::from_accuracies(&pts).unwrap();
        let c = 2f64.powi(k);
        let scaled_pts: Vec<(usize, f64, f64)> = pts.iter().map(|&(s, r, o)| (s, r * c, o * c)).collect();
        let scaled = MetricSeries::from_accuracies(&scaled_pts).unwrap();
        match (drop_ratio_at_beta(&base, beta), drop_ratio_at_beta(&scaled, beta * c)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.selected_step, b.selected_step);
                prop_assert_eq!(a.drop_ratio, b.drop_ratio);
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }

    #[test]
    fn drop_ratio_ignores_a_common_accuracy_offset(
        accs in prop::collection::vec((10.0f64..90.0, 10.0f64..90.0), 2..12),
        shift in -10.0f64..10.0,
    ) {
        let pts: Vec<(usize, f64, f64)> = accs.iter().enumerate().map(|(i, &(r, o))| (i, r, o)).collect();
        let moved: Vec<(usize, f64, f64)> = pts.iter().map(|&(s, r, o)| (s, r + shift, o + shift)).collect();
        let a = MetricSeries::from_accuracies(&pts).unwrap();
        let b = MetricSeries::from_accuracies(&moved).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            prop_assert!((x.delta_r - y.delta_r).abs() < 1e-10 && (x.delta_rp - y.delta_rp).abs() < 1e-10);
        }
    }

    #[test]
    fn confusion_diagonal_is_exactly_one(drops in prop::collection::vec(prop::collection::vec(-5.0f64..30.0, 4), 4)) {
        let m = attribute_confusion(&drops).unwrap();
        for (a, row) in m.rows.iter().enumerate() {
            match row {
                Some(r) => prop_assert_eq!(r[a], 1.0),
                None => prop_assert!(drops[a][a] == 0.0),
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(
        seed in any::<u64>(),
        widths in prop::collection::vec(1usize..6, 2..4),
        scale in 0.1f64..3.0,
    ) {
        let theta = init_backbone(&BackboneSpec { widths, init_seed: seed, init_scale: scale }).unwrap();
        let mut phi = ParamSet::new();
        phi.push("head.weight", Tensor::full(&[2, 3], -0.125));
        let params = ModelParams::new(theta, phi).unwrap();
        let back = ModelParams::from_bytes(&params.to_bytes()).unwrap();
        prop_assert!(back.bits_eq(&params));
        prop_assert_eq!(back.theta.names(), params.theta.names());
    }

    #[test]
    fn predictions_lie_on_the_simplex(
        seed in any::<u64>(),
        kind in prop::sample::select(LearnerKind::ALL.to_vec()),
        support in matrix(3, 4, -3.0, 3.0),
        query in matrix(5, 4, -3.0, 3.0),
    ) {
        let theta = init_backbone(&BackboneSpec { widths: vec![4, 5, 3], init_seed: seed, init_scale: 1.0 }).unwrap();
        let alg = FscAlgorithm::new(kind, 0, 0.0);
        let ep = Episode::new(vec![4, 8, 9], support, &[4, 8, 9], query, &[4, 4, 8, 9, 9]).unwrap();
        let head = alg.init_head(3, 3);
        let p = predict(theta.tensors(), head.tensors(), &ep, &alg).unwrap();
        for i in 0..5 {
            let row = p.probabilities.row(i);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn splits_are_disjoint_and_exhaustive_over_100_seeds() {
    let ds = gen_synthetic(&SynthSpec {
        n_super: 6,
        classes_per_super: 3,
        dim: 4,
        samples_per_class: 20,
        super_sep: 5.0,
        class_sep: 2.0,
        noise_sigma: 0.5,
        seed: 9,
    })
    .unwrap();
    let clip = SplitMode::ClipStyle {
        a_shots: 3,
        f_shots: 2,
        max_multiplier: 3,
    };
    for seed in 0..100u64 {
        let r = RestrictedSet::from_superclass(&ds, (seed % 6) as usize).unwrap();
        for mode in [SplitMode::classical(), clip.clone()] {
            let b = make_splits(&ds, &r, &mode, seed).unwrap();
            let (a, f, e): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) =
                (b.a.iter().copied().collect(), b.f.iter().copied().collect(), b.eval.iter().copied().collect());
            assert_eq!(a.len() + f.len() + e.len(), b.a.len() + b.f.len() + b.eval.len());
            assert!(a.is_disjoint(&f) && a.is_disjoint(&e) && f.is_disjoint(&e), "seed {seed}");
            assert_eq!(a.len() + f.len() + e.len(), ds.len());
            if mode.is_classical() {
                assert!(f.iter().all(|&i| !r.is_restricted(ds.labels()[i])));
                let f_classes: BTreeSet<usize> = f.iter().map(|&i| ds.labels()[i]).collect();
                let e_others: BTreeSet<usize> = e.iter().map(|&i| ds.labels()[i]).filter(|c| !r.is_restricted(*c)).collect();
                assert!(f_classes.is_disjoint(&e_others));
            }
        }
    }
}
